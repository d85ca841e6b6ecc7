"""Two-party additive secret sharing with trusted-dealer Beaver multiplication.

A value x in the 2^64 ring is split as x = s0 + s1 (mod 2^64) with s0
uniform, so either share alone is uniformly distributed and reveals
nothing.  Addition of shared values is local.  Multiplication consumes a
dealer-issued triple (a, b, c = a*b): the parties open eps = x - a and
delta = y - b (those openings look uniform because a, b are fresh and
uniform) and locally combine

    [x*y] = [c] + eps*[b] + [a]*delta + eps*delta .

Every message moves through an in-process Channel whose byte accounting
(8 bytes per ring element, no framing) feeds a per-category CommLedger --
the measurement backbone of the whole simulator.  Online traffic and
dealer (offline) traffic are ledgered separately.

Both parties execute in lockstep in a single thread for reproducibility;
the ledger takes a lock so independent sessions may run on separate
threads.
"""

from __future__ import annotations

import threading
import time
from collections import deque
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .errors import ProtocolError, ShapeMismatchError
from .ring import (
    FixedConfig,
    FixedTensor,
    fixed_matmul,
    mul_trunc,
    ring_add,
    ring_matmul,
    ring_sub,
    trunc_signed,
)

CATEGORIES = ("Embed", "Linear", "Softmax", "Sampling", "Other")

CLIENT = 0
SERVER = 1
_BYTES_PER_ELEMENT = 8


@dataclass
class CategoryCounters:
    bytes_sent: int = 0
    rounds: int = 0
    op_count: int = 0
    wall_ns: int = 0


class CommLedger:
    """Monotone per-category byte/round/operation counters."""

    def __init__(self):
        self._lock = threading.Lock()
        self.categories: dict[str, CategoryCounters] = {
            name: CategoryCounters() for name in CATEGORIES
        }

    def add(self, category: str, *, bytes_sent: int = 0, rounds: int = 0,
            op_count: int = 0, wall_ns: int = 0):
        if bytes_sent < 0 or rounds < 0 or op_count < 0 or wall_ns < 0:
            raise ValueError("ledger counters are monotone non-decreasing")
        with self._lock:
            c = self.categories[category]
            c.bytes_sent += bytes_sent
            c.rounds += rounds
            c.op_count += op_count
            c.wall_ns += wall_ns

    def total_bytes(self) -> int:
        return sum(c.bytes_sent for c in self.categories.values())

    def total_rounds(self) -> int:
        return sum(c.rounds for c in self.categories.values())

    def snapshot(self) -> dict[str, dict[str, int]]:
        with self._lock:
            return {
                name: {
                    "bytes": c.bytes_sent,
                    "rounds": c.rounds,
                    "op_count": c.op_count,
                    "wall_ns": c.wall_ns,
                }
                for name, c in self.categories.items()
            }

    def csv_rows(self) -> list[tuple[str, int, int, int, int]]:
        """Rows of (category, bytes, rounds, op_count, wall_ns)."""
        snap = self.snapshot()
        return [
            (name, v["bytes"], v["rounds"], v["op_count"], v["wall_ns"])
            for name, v in snap.items()
        ]


class Channel:
    """In-process duplex channel between the two parties.

    All byte accounting funnels through `send`, so the sum of per-category
    bytes always equals the total traffic the channel has observed.  The
    active accounting category is the top of a caller-pushed tag stack
    ("Other" when empty).
    """

    def __init__(self, ledger: CommLedger | None = None,
                 offline_ledger: CommLedger | None = None):
        self.ledger = ledger if ledger is not None else CommLedger()
        self.offline_ledger = (
            offline_ledger if offline_ledger is not None else CommLedger()
        )
        self._mailboxes = {CLIENT: deque(), SERVER: deque()}
        self._tags: list[str] = []
        self.total_bytes_observed = 0
        self.kernel_calls: dict[str, int] = {}

    # -- category tagging ---------------------------------------------------

    @property
    def category(self) -> str:
        return self._tags[-1] if self._tags else "Other"

    @contextmanager
    def tagged(self, category: str):
        if category not in CATEGORIES:
            raise ValueError(f"unknown ledger category {category!r}")
        self._tags.append(category)
        try:
            yield self
        finally:
            self._tags.pop()

    def count_kernel(self, name: str):
        self.kernel_calls[name] = self.kernel_calls.get(name, 0) + 1

    # -- message passing ----------------------------------------------------

    def send(self, sender: int, receiver: int, payload: np.ndarray):
        if {sender, receiver} != {CLIENT, SERVER}:
            raise ProtocolError("messages must travel between the two parties")
        nbytes = int(payload.size) * _BYTES_PER_ELEMENT
        self.total_bytes_observed += nbytes
        self.ledger.add(self.category, bytes_sent=nbytes)
        self._mailboxes[receiver].append(payload)

    def recv(self, receiver: int) -> np.ndarray:
        box = self._mailboxes[receiver]
        if not box:
            raise ProtocolError(f"party {receiver} has no pending message")
        return box.popleft()

    def exchange(self, payload0: np.ndarray, payload1: np.ndarray):
        """Both parties send simultaneously; counts as one round."""
        self.send(CLIENT, SERVER, payload0)
        self.send(SERVER, CLIENT, payload1)
        self.round()
        return self.recv(CLIENT), self.recv(SERVER)

    def round(self, n: int = 1):
        self.ledger.add(self.category, rounds=n)

    def op(self, n: int = 1):
        self.ledger.add(self.category, op_count=n)

    def add_time(self, wall_ns: int):
        self.ledger.add(self.category, wall_ns=wall_ns)


@contextmanager
def _timed(ch: Channel):
    t0 = time.perf_counter_ns()
    try:
        yield
    finally:
        ch.add_time(time.perf_counter_ns() - t0)


# ---------------------------------------------------------------------------
# Shares
# ---------------------------------------------------------------------------

@dataclass
class Share:
    """One party's additive share of a tensor."""

    party: int
    tensor: FixedTensor


@dataclass
class SharedTensor:
    """Both parties' shares of one value; the unit of private computation."""

    shares: tuple[Share, Share]

    def __post_init__(self):
        s0, s1 = self.shares
        if (s0.party, s1.party) != (CLIENT, SERVER):
            raise ShapeMismatchError("shares must be tagged (0, 1)")
        if s0.tensor.shape != s1.tensor.shape or s0.tensor.config != s1.tensor.config:
            raise ShapeMismatchError("share tensors must match in shape and config")

    @classmethod
    def from_arrays(cls, d0: np.ndarray, d1: np.ndarray, cfg: FixedConfig) -> "SharedTensor":
        return cls((Share(CLIENT, FixedTensor(d0, cfg)),
                    Share(SERVER, FixedTensor(d1, cfg))))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.shares[0].tensor.shape

    @property
    def size(self) -> int:
        return self.shares[0].tensor.size

    @property
    def config(self) -> FixedConfig:
        return self.shares[0].tensor.config

    def data(self, party: int) -> np.ndarray:
        return self.shares[party].tensor.data

    def map_local(self, fn) -> "SharedTensor":
        """Apply the same local (linear-safe) array function to both shares."""
        return SharedTensor.from_arrays(fn(self.data(0)), fn(self.data(1)), self.config)

    def reshape(self, shape) -> "SharedTensor":
        return self.map_local(lambda d: d.reshape(shape))

    def transpose(self) -> "SharedTensor":
        return self.map_local(lambda d: d.T.copy())

    def slice_rows(self, start: int, stop: int) -> "SharedTensor":
        return self.map_local(lambda d: d[start:stop])


def uniform_u64(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.integers(0, 2**64 - 1, size=shape, dtype=np.uint64, endpoint=True)


def share(x: FixedTensor, rng: np.random.Generator) -> SharedTensor:
    """Split x into (uniform s0, x - s0); reconstruction is exact."""
    s0 = uniform_u64(rng, x.shape)
    s1 = ring_sub(x.data, s0)
    return SharedTensor.from_arrays(s0, s1, x.config)


def reconstruct(s: SharedTensor) -> FixedTensor:
    return FixedTensor(ring_add(s.data(0), s.data(1)), s.config)


# ---------------------------------------------------------------------------
# Local (communication-free) operations
# ---------------------------------------------------------------------------

def _check_same_config(x: SharedTensor, y) -> None:
    if x.config != y.config:
        raise ShapeMismatchError("fixed-point configs differ")


def _check_broadcast(a_shape, b_shape):
    try:
        return np.broadcast_shapes(a_shape, b_shape)
    except ValueError as exc:
        raise ShapeMismatchError(str(exc)) from exc


def add_shared(x: SharedTensor, y: SharedTensor) -> SharedTensor:
    """Private addition: purely local, zero bytes."""
    _check_same_config(x, y)
    _check_broadcast(x.shape, y.shape)
    return SharedTensor.from_arrays(
        ring_add(x.data(0), y.data(0)), ring_add(x.data(1), y.data(1)), x.config
    )


def sub_shared(x: SharedTensor, y: SharedTensor) -> SharedTensor:
    _check_same_config(x, y)
    _check_broadcast(x.shape, y.shape)
    return SharedTensor.from_arrays(
        ring_sub(x.data(0), y.data(0)), ring_sub(x.data(1), y.data(1)), x.config
    )


def add_public(x: SharedTensor, k: FixedTensor) -> SharedTensor:
    """Add a public constant; applied by the server's share only."""
    _check_same_config(x, k)
    _check_broadcast(x.shape, k.shape)
    d1 = ring_add(x.data(1), k.data)
    d0 = np.broadcast_to(x.data(0), d1.shape).copy() if d1.shape != x.shape else x.data(0)
    return SharedTensor.from_arrays(d0, d1, x.config)


def _round_half(t: np.ndarray, party: int, bits: int,
                triple_rescale: bool = False) -> np.ndarray:
    """Center the truncation losses before the coming shift (server side).

    The two per-party floors lose fractional mass of mean one ulp, and a
    triple's own floored rescale loses another expected half ulp; adding
    the matching constants makes the reconstructed truncation unbiased.
    """
    if party != SERVER or bits < 1:
        return t
    correction = np.uint64(1) << np.uint64(bits)
    if triple_rescale:
        correction += np.uint64(1) << np.uint64(bits - 1)
    with np.errstate(over="ignore"):
        return t + correction


def mul_public(x: SharedTensor, k: FixedTensor) -> SharedTensor:
    """Multiply by a public constant; both parties rescale locally."""
    _check_same_config(x, k)
    _check_broadcast(x.shape, k.shape)
    f = x.config.frac_bits

    def local(d, party):
        with np.errstate(over="ignore"):
            return trunc_signed(_round_half(d * k.data, party, f), f)

    return SharedTensor.from_arrays(local(x.data(0), 0), local(x.data(1), 1),
                                    x.config)


def shift_public(x: SharedTensor, bits: int) -> SharedTensor:
    """Divide by 2^bits via local arithmetic share shift (probabilistic ulp)."""
    return SharedTensor.from_arrays(
        trunc_signed(_round_half(x.data(0), 0, bits), bits),
        trunc_signed(_round_half(x.data(1), 1, bits), bits),
        x.config,
    )


# ---------------------------------------------------------------------------
# Beaver triples and interactive operations
# ---------------------------------------------------------------------------

@dataclass
class BeaverTriple:
    """Elementwise triple with c = a (*) b in fixed point; strictly single-use."""

    a: SharedTensor
    b: SharedTensor
    c: SharedTensor
    _used: bool = field(default=False, repr=False)

    def consume(self):
        if self._used:
            raise ProtocolError("Beaver triple reuse: each triple is single-use")
        self._used = True


@dataclass
class MatrixTriple:
    """Matrix triple with C = A @ B in fixed point; strictly single-use."""

    a: SharedTensor
    b: SharedTensor
    c: SharedTensor
    _used: bool = field(default=False, repr=False)

    def consume(self):
        if self._used:
            raise ProtocolError("matrix triple reuse: each triple is single-use")
        self._used = True


def beaver_mul(x: SharedTensor, y: SharedTensor, triple: BeaverTriple,
               ch: Channel) -> SharedTensor:
    """Private elementwise product (numpy broadcasting allowed).

    One round: each party sends its shares of eps = x - a and delta = y - b
    (2 openings x 8 bytes x element count, both directions).
    """
    _check_same_config(x, y)
    out_shape = _check_broadcast(x.shape, y.shape)
    if triple.a.shape != x.shape or triple.b.shape != y.shape:
        raise ShapeMismatchError("triple shapes do not match operands")
    with _timed(ch):
        triple.consume()
        f = x.config.frac_bits
        eps = [ring_sub(x.data(p), triple.a.data(p)) for p in (0, 1)]
        delta = [ring_sub(y.data(p), triple.b.data(p)) for p in (0, 1)]
        # One exchange carrying both openings in each direction.
        sent0 = np.concatenate([eps[0].ravel(), delta[0].ravel()])
        sent1 = np.concatenate([eps[1].ravel(), delta[1].ravel()])
        got_by_0, got_by_1 = ch.exchange(sent0, sent1)
        del got_by_1
        n_eps = eps[0].size
        eps_pub = ring_add(eps[0], got_by_0[:n_eps].reshape(x.shape))
        delta_pub = ring_add(delta[0], got_by_0[n_eps:].reshape(y.shape))
        ch.op()

        # Combine at scale 2f (the triple's c is rescaled back up by a share
        # shift, exact mod 2^64) and truncate the small-valued sum once.
        out = []
        with np.errstate(over="ignore"):
            cross_pub = eps_pub * delta_pub
            for p in (0, 1):
                t = eps_pub * triple.b.data(p) + triple.a.data(p) * delta_pub
                if p == SERVER:
                    t = t + cross_pub
                t = t + (np.broadcast_to(triple.c.data(p), out_shape) << np.uint64(f))
                out.append(trunc_signed(_round_half(t, p, f, triple_rescale=True), f))
        return SharedTensor.from_arrays(out[0], out[1], x.config)


def matmul_shared(x: SharedTensor, y: SharedTensor, triple: MatrixTriple,
                  ch: Channel) -> SharedTensor:
    """Private matrix product via a matrix triple.

    One round; openings of size m*k + k*n elements per direction (never
    m*k*n), so bytes charged are 16*(m*k + k*n) per call.
    """
    _check_same_config(x, y)
    if len(x.shape) != 2 or len(y.shape) != 2 or x.shape[1] != y.shape[0]:
        raise ShapeMismatchError(f"cannot matmul {x.shape} by {y.shape}")
    if triple.a.shape != x.shape or triple.b.shape != y.shape:
        raise ShapeMismatchError("matrix triple dimensions do not match")
    with _timed(ch):
        triple.consume()
        f = x.config.frac_bits
        eps = [ring_sub(x.data(p), triple.a.data(p)) for p in (0, 1)]
        delta = [ring_sub(y.data(p), triple.b.data(p)) for p in (0, 1)]
        sent0 = np.concatenate([eps[0].ravel(), delta[0].ravel()])
        sent1 = np.concatenate([eps[1].ravel(), delta[1].ravel()])
        got_by_0, got_by_1 = ch.exchange(sent0, sent1)
        del got_by_1
        n_eps = eps[0].size
        eps_pub = ring_add(eps[0], got_by_0[:n_eps].reshape(x.shape))
        delta_pub = ring_add(delta[0], got_by_0[n_eps:].reshape(y.shape))
        ch.op()

        cross_pub = ring_matmul(eps_pub, delta_pub)
        out = []
        with np.errstate(over="ignore"):
            for p in (0, 1):
                t = ring_add(
                    ring_matmul(eps_pub, triple.b.data(p)),
                    ring_matmul(triple.a.data(p), delta_pub),
                )
                if p == SERVER:
                    t = ring_add(t, cross_pub)
                t = ring_add(t, triple.c.data(p) << np.uint64(f))
                out.append(trunc_signed(_round_half(t, p, f, triple_rescale=True), f))
        return SharedTensor.from_arrays(out[0], out[1], x.config)


def open_to(x: SharedTensor, ch: Channel, to: int) -> FixedTensor:
    """Reveal x to one party: the counter-party sends its share (1 round)."""
    with _timed(ch):
        other = 1 - to
        ch.send(other, to, x.data(other))
        ch.round()
        ch.op()
        got = ch.recv(to)
        return FixedTensor(ring_add(x.data(to), got), x.config)


# ---------------------------------------------------------------------------
# Trusted dealer (offline phase)
# ---------------------------------------------------------------------------

class TrustedDealer:
    """Issues correlated randomness; its traffic goes to the offline ledger.

    The online Tables-analog accounting deliberately excludes this: triple
    distribution is modeled as the dealer sending each party its three
    share tensors (one offline round per issuance).
    """

    def __init__(self, rng: np.random.Generator, cfg: FixedConfig,
                 ch: Channel | None = None):
        self.rng = rng
        self.cfg = cfg
        self.ch = ch

    def charge_offline(self, elements: int):
        if self.ch is not None:
            self.ch.offline_ledger.add(
                self.ch.category,
                bytes_sent=2 * elements * _BYTES_PER_ELEMENT,
                rounds=1,
                op_count=1,
            )

    def share_plain(self, data: np.ndarray) -> SharedTensor:
        return share(FixedTensor(data, self.cfg), self.rng)

    def beaver_triple(self, shape_a, shape_b) -> BeaverTriple:
        """Elementwise triple; operand shapes may differ if broadcastable."""
        _check_broadcast(shape_a, shape_b)
        a = uniform_u64(self.rng, shape_a)
        b = uniform_u64(self.rng, shape_b)
        c = mul_trunc(a, b, self.cfg)
        self.charge_offline(int(np.prod(shape_a)) + int(np.prod(shape_b)) + c.size)
        return BeaverTriple(self.share_plain(a), self.share_plain(b),
                            self.share_plain(c))

    def matrix_triple(self, m: int, k: int, n: int) -> MatrixTriple:
        a = uniform_u64(self.rng, (m, k))
        b = uniform_u64(self.rng, (k, n))
        c = fixed_matmul(a, b, self.cfg)
        self.charge_offline(m * k + k * n + m * n)
        return MatrixTriple(self.share_plain(a), self.share_plain(b),
                            self.share_plain(c))

    def gen_triples(self, count: int, shape=()) -> list[BeaverTriple]:
        return [self.beaver_triple(shape, shape) for _ in range(count)]

    def new_row_cache(self, width: int) -> "MaskedRowCache":
        return MaskedRowCache(self, width)


class MaskedRowCache:
    """Grow-only cache of shared rows with reusable Beaver maskings.

    Supports repeated products  c_row @ X  where X is the accumulated row
    matrix.  Each appended row is masked and opened once; re-multiplying
    against the same rows later reuses that opening (same value under the
    same mask reveals nothing new), which is what makes per-step work of
    the incremental generation path independent of how often the cache is
    read.  Only the left operand's masking is fresh per product.
    """

    def __init__(self, dealer: TrustedDealer, width: int):
        self._dealer = dealer
        self._width = width
        self._rows: list[SharedTensor] = []
        self._mask_plain: list[np.ndarray] = []   # dealer-side B masks
        self._mask_share0: list[np.ndarray] = []
        self._opened: list[np.ndarray] = []       # public delta = row - mask

    def __len__(self) -> int:
        return len(self._rows)

    @property
    def config(self) -> FixedConfig:
        return self._dealer.cfg

    def append(self, row: SharedTensor, ch: Channel):
        """Mask and open one new row (one round, 16*width bytes)."""
        if row.shape != (1, self._width):
            raise ShapeMismatchError(f"cache rows must be 1x{self._width}")
        with _timed(ch):
            mask = uniform_u64(self._dealer.rng, (1, self._width))
            mask_shared = self._dealer.share_plain(mask)
            self._dealer.charge_offline(mask.size)
            delta = [ring_sub(row.data(p), mask_shared.data(p)) for p in (0, 1)]
            got0, got1 = ch.exchange(delta[0], delta[1])
            del got1
            ch.op()
            self._rows.append(row)
            self._mask_plain.append(mask)
            self._mask_share0.append(mask_shared.data(0))
            self._opened.append(ring_add(delta[0], got0))

    def mix(self, c_row: SharedTensor, ch: Channel) -> SharedTensor:
        """Compute c_row @ cached_rows privately (one round, fresh left mask)."""
        length = len(self._rows)
        if c_row.shape != (1, length):
            raise ShapeMismatchError(
                f"mixing row must be 1x{length} for a cache of {length} rows"
            )
        with _timed(ch):
            cfg = self.config
            f = cfg.frac_bits
            b_stack = np.vstack(self._mask_plain)            # length x width
            b_share0 = np.vstack(self._mask_share0)
            delta_pub = np.vstack(self._opened)
            a_fresh = uniform_u64(self._dealer.rng, (1, length))
            a_shared = self._dealer.share_plain(a_fresh)
            c_plain = fixed_matmul(a_fresh, b_stack, cfg)
            c_shared = self._dealer.share_plain(c_plain)
            self._dealer.charge_offline(a_fresh.size + c_plain.size)

            eps = [ring_sub(c_row.data(p), a_shared.data(p)) for p in (0, 1)]
            got0, got1 = ch.exchange(eps[0], eps[1])
            del got1
            ch.op()
            eps_pub = ring_add(eps[0], got0)

            cross_pub = ring_matmul(eps_pub, delta_pub)
            out = []
            with np.errstate(over="ignore"):
                for p in (0, 1):
                    b_p = b_share0 if p == CLIENT else ring_sub(b_stack, b_share0)
                    t = ring_add(ring_matmul(eps_pub, b_p),
                                 ring_matmul(a_shared.data(p), delta_pub))
                    if p == SERVER:
                        t = ring_add(t, cross_pub)
                    t = ring_add(t, c_shared.data(p) << np.uint64(f))
                    out.append(trunc_signed(_round_half(t, p, f, triple_rescale=True), f))
            return SharedTensor.from_arrays(out[0], out[1], cfg)
