"""Full encrypted generation under the two-party protocol.

An EncryptedSession secret-shares all model tensors once (setup cost is
ledgered as Other), then runs one of four generation variants:

  Vanilla  per step: embed the full current sequence privately, run the
           true transformer forward (softmax and all), open the last
           logits row to the client, who samples locally.
  OnlyER   prefix embedded once; per step a full-length forward; hidden
           states collected and sampled in one deferred batch.
  OnlyMM   per step: full embed + merged constant-attention forward (no
           softmax anywhere); per-step sampling.
  ER_MM    prefix embedded once; per-position incremental merged forward
           against per-layer row caches (constant work per step);
           deferred batch sampling.

Category attribution follows the table decomposition: embedding matmuls
to Embed, every other matmul / layer norm / activation to Linear, softmax
internals to Softmax, logit openings to Sampling, input and weight share
distribution to Other.  Token one-hots hide which id was queried: traffic
is shaped by sequence length only.

Sampling opens logits to the client only (the server learns nothing);
the client sees full logit rows, a documented relaxation -- a private
argmax protocol is out of scope.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ProtocolError, ShapeMismatchError
from .merge import MergedModel
from .model import ModelConfig
from .nonlinear import (
    NonlinearConfig,
    mpc_activation,
    mpc_inv_sqrt_plus_eps,
    mpc_softmax,
    row_sum,
)
from .ring import FixedConfig, FixedTensor, ring_sub
from .sharing import (
    CLIENT,
    SERVER,
    Channel,
    CommLedger,
    MaskedRowCache,
    SharedTensor,
    TrustedDealer,
    add_shared,
    beaver_mul,
    matmul_shared,
    mul_public,
    open_to,
    share,
)


class Variant(Enum):
    VANILLA = "Vanilla"
    ONLY_ER = "OnlyER"
    ONLY_MM = "OnlyMM"
    ER_MM = "ER_MM"

    @classmethod
    def from_label(cls, label: str) -> "Variant":
        for v in cls:
            if v.value.lower() == label.lower():
                return v
        raise ValueError(f"unknown variant {label!r}")


MERGED_VARIANTS = (Variant.ONLY_MM, Variant.ER_MM)
ER_VARIANTS = (Variant.ONLY_ER, Variant.ER_MM)


@dataclass
class SessionResult:
    tokens: np.ndarray
    ledger: dict
    offline: dict
    kernel_calls: dict


def concat_rows(parts: list[SharedTensor]) -> SharedTensor:
    cfg = parts[0].config
    return SharedTensor.from_arrays(
        np.vstack([p.data(0) for p in parts]),
        np.vstack([p.data(1) for p in parts]),
        cfg,
    )


def mpc_embed(one_hot: SharedTensor, table: SharedTensor,
              dealer: TrustedDealer, ch: Channel) -> SharedTensor:
    """Private embedding-table query: one-hot x table matmul, Embed bytes.

    Traffic is 16*(N*V + V*d) bytes per call regardless of which tokens
    the one-hots select (access-pattern hiding by construction).
    """
    n, v = one_hot.shape
    v2, d = table.shape
    if v != v2:
        raise ShapeMismatchError("one-hot width must equal vocabulary size")
    with ch.tagged("Embed"):
        triple = dealer.matrix_triple(n, v, d)
        return matmul_shared(one_hot, table, triple, ch)


class EncryptedSession:
    """One two-party generation session: shared weights, channel, ledger."""

    def __init__(self, model, variant: Variant, seed: int = 0,
                 fixed_config: FixedConfig | None = None,
                 nonlinear_config: NonlinearConfig | None = None,
                 use_cache: bool = True):
        self.variant = variant
        self.model = model
        merged = isinstance(model, MergedModel)
        if variant in MERGED_VARIANTS and not merged:
            raise ProtocolError(f"{variant.value} requires a merged model")
        if variant not in MERGED_VARIANTS and merged:
            raise ProtocolError(f"{variant.value} requires an unmerged model")
        if merged and model.ffn_residual:
            raise ProtocolError(
                "the residual-ablation merged variant is plaintext-only"
            )
        self.config: ModelConfig = model.config
        self.fx = fixed_config if fixed_config is not None else FixedConfig()
        self.nl = nonlinear_config if nonlinear_config is not None else NonlinearConfig()
        if self.nl.activation_kind == "quad" and self.config.activation != "quad":
            raise ProtocolError("activation kinds of model and protocol disagree")
        self.use_cache = use_cache

        self.ledger = CommLedger()
        self.offline = CommLedger()
        self.ch = Channel(self.ledger, self.offline)
        self.rng = np.random.default_rng([seed, 0])
        self.dealer = TrustedDealer(np.random.default_rng([seed, 1]), self.fx, self.ch)
        self._caches: list[MaskedRowCache] = []
        self._share_model()

    # -- setup ---------------------------------------------------------------

    def _distribute(self, arr: np.ndarray) -> SharedTensor:
        """Server-held tensor: encode, share, send the client its half."""
        sh = share(FixedTensor.encode(arr, self.fx), self.rng)
        self.ch.send(SERVER, CLIENT, sh.data(CLIENT))
        self.ch.recv(CLIENT)
        self.ch.op()
        return sh

    def _share_model(self):
        m = self.model
        with self.ch.tagged("Other"):
            self.emb = self._distribute(m.embedding)
            self.pos = self._distribute(m.positional)
            self.w_cls = self._distribute(m.w_cls)
            self.layers = []
            for layer in m.layers:
                if isinstance(m, MergedModel):
                    self.layers.append({
                        "m_u": [self._distribute(layer.m_u[h])
                                for h in range(self.config.n_heads)],
                        "r": self._distribute(layer.r),
                        "b_mu": self._distribute(layer.b_mu),
                        "w_o": self._distribute(layer.w_o),
                        "b_o": self._distribute(layer.b_o),
                        "ln2_gamma": self._distribute(layer.ln2_gamma),
                        "ln2_beta": self._distribute(layer.ln2_beta),
                        "c": [self._distribute(layer.c[h])
                              for h in range(self.config.n_heads)],
                    })
                else:
                    self.layers.append({
                        "w_q": [self._distribute(layer.w_q[h])
                                for h in range(self.config.n_heads)],
                        "w_k": [self._distribute(layer.w_k[h])
                                for h in range(self.config.n_heads)],
                        "w_v": [self._distribute(layer.w_v[h])
                                for h in range(self.config.n_heads)],
                        "w_d": self._distribute(layer.w_d),
                        "b_d": self._distribute(layer.b_d),
                        "ln1_gamma": self._distribute(layer.ln1_gamma),
                        "ln1_beta": self._distribute(layer.ln1_beta),
                        "w_i": self._distribute(layer.w_i),
                        "b_i": self._distribute(layer.b_i),
                        "w_o": self._distribute(layer.w_o),
                        "b_o": self._distribute(layer.b_o),
                        "ln2_gamma": self._distribute(layer.ln2_gamma),
                        "ln2_beta": self._distribute(layer.ln2_beta),
                    })
            self.ch.round()

    # -- building blocks -----------------------------------------------------

    def _share_one_hot(self, tokens) -> SharedTensor:
        """Client-held input: one-hot rows, shared and half sent over."""
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.config.vocab_size):
            raise ShapeMismatchError("token id out of vocabulary range")
        one_hot = np.zeros((tokens.size, self.config.vocab_size))
        one_hot[np.arange(tokens.size), tokens] = 1.0
        with self.ch.tagged("Other"):
            sh = share(FixedTensor.encode(one_hot, self.fx), self.rng)
            self.ch.send(CLIENT, SERVER, sh.data(SERVER))
            self.ch.recv(SERVER)
            self.ch.round()
            self.ch.op()
        return sh

    def _matmul(self, x: SharedTensor, y: SharedTensor) -> SharedTensor:
        m, k = x.shape
        n = y.shape[1]
        return matmul_shared(x, y, self.dealer.matrix_triple(m, k, n), self.ch)

    def _mul(self, x: SharedTensor, y: SharedTensor) -> SharedTensor:
        return beaver_mul(x, y, self.dealer.beaver_triple(x.shape, y.shape), self.ch)

    def _linear(self, x: SharedTensor, w: SharedTensor,
                b: SharedTensor | None = None) -> SharedTensor:
        with self.ch.tagged("Linear"):
            out = self._matmul(x, w)
            if b is not None:
                out = add_shared(out, b)
            return out

    def _layernorm(self, x: SharedTensor, gamma: SharedTensor,
                   beta: SharedTensor) -> SharedTensor:
        """True layer norm under MPC; charged to Linear per the bucketing
        where only softmax is broken out."""
        d = x.shape[-1]
        with self.ch.tagged("Linear"):
            inv_d = FixedTensor.encode(np.full((1, 1), 1.0 / d), self.fx)
            mu = mul_public(row_sum(x), inv_d)
            centered = SharedTensor.from_arrays(
                ring_sub(x.data(0), np.broadcast_to(mu.data(0), x.shape)),
                ring_sub(x.data(1), np.broadcast_to(mu.data(1), x.shape)),
                self.fx,
            )
            sq = self._mul(centered, centered)
            var = mul_public(row_sum(sq), inv_d)
            denom = mpc_inv_sqrt_plus_eps(var, self.config.ln_eps, self.nl,
                                          self.ch, self.dealer)
            normed = self._mul(centered, denom)
            scaled = self._mul(normed, gamma)
            return add_shared(scaled, beta)

    def _activation(self, x: SharedTensor) -> SharedTensor:
        with self.ch.tagged("Linear"):
            return mpc_activation(x, self.nl, self.ch, self.dealer)

    # -- forwards ------------------------------------------------------------

    def _vanilla_layer(self, h: SharedTensor, lw: dict) -> SharedTensor:
        length = h.shape[0]
        dk = self.config.head_dim
        inv_sqrt_dk = FixedTensor.encode(np.full((1, 1), 1.0 / np.sqrt(dk)), self.fx)
        visible = np.arange(1, length + 1)
        ctx_heads = []
        for head in range(self.config.n_heads):
            with self.ch.tagged("Linear"):
                q = self._matmul(h, lw["w_q"][head])
                k = self._matmul(h, lw["w_k"][head])
                v = self._matmul(h, lw["w_v"][head])
                scores = mul_public(self._matmul(q, k.transpose()), inv_sqrt_dk)
            a = mpc_softmax(scores, self.nl, self.ch, self.dealer, visible=visible)
            with self.ch.tagged("Linear"):
                ctx_heads.append(self._matmul(a, v))
        concat = SharedTensor.from_arrays(
            np.hstack([c.data(0) for c in ctx_heads]),
            np.hstack([c.data(1) for c in ctx_heads]),
            self.fx,
        )
        att = self._linear(concat, lw["w_d"], lw["b_d"])
        x_att = self._layernorm(add_shared(att, h), lw["ln1_gamma"], lw["ln1_beta"])
        inner = self._activation(self._linear(x_att, lw["w_i"], lw["b_i"]))
        out = self._linear(inner, lw["w_o"], lw["b_o"])
        return self._layernorm(add_shared(out, x_att), lw["ln2_gamma"], lw["ln2_beta"])

    def _merged_layer_full(self, h: SharedTensor, lw: dict) -> SharedTensor:
        length = h.shape[0]
        with self.ch.tagged("Linear"):
            u = add_shared(self._matmul(h, lw["r"]), lw["b_mu"])
            for head in range(self.config.n_heads):
                c_slice = lw["c"][head].map_local(lambda d: d[:length, :length])
                mixed = self._matmul(c_slice, h)
                u = add_shared(u, self._matmul(mixed, lw["m_u"][head]))
        z = self._activation(u)
        out = self._linear(z, lw["w_o"], lw["b_o"])
        return self._layernorm(out, lw["ln2_gamma"], lw["ln2_beta"])

    def run_forward(self, e_prime: SharedTensor) -> SharedTensor:
        """Full shared forward over all layers (softmax path for unmerged
        models, constant-attention path for merged ones)."""
        h = e_prime
        for lw in self.layers:
            if isinstance(self.model, MergedModel):
                h = self._merged_layer_full(h, lw)
            else:
                h = self._vanilla_layer(h, lw)
        return h

    def _merged_incremental_position(self, row: SharedTensor, pos: int) -> SharedTensor:
        """Push one position through all merged layers against row caches.

        Per layer: append the (masked, opened-once) input row, mix the
        shared constant-attention row with the cache, fold, activate,
        project, normalize.  Work per call is independent of pos except
        for the opened mixing row, whose length grows with the prefix.
        """
        if not self._caches:
            self._caches = [self.dealer.new_row_cache(self.config.model_dim)
                            for _ in self.layers]
        x = row
        for lw, cache in zip(self.layers, self._caches):
            with self.ch.tagged("Linear"):
                cache.append(x, self.ch)
                length = len(cache)
                u = add_shared(self._matmul(x, lw["r"]), lw["b_mu"])
                for head in range(self.config.n_heads):
                    c_row = lw["c"][head].map_local(
                        lambda d: d[pos : pos + 1, :length]
                    )
                    mixed = cache.mix(c_row, self.ch)
                    u = add_shared(u, self._matmul(mixed, lw["m_u"][head]))
            z = self._activation(u)
            out = self._linear(z, lw["w_o"], lw["b_o"])
            x = self._layernorm(out, lw["ln2_gamma"], lw["ln2_beta"])
        return x

    # -- sampling ------------------------------------------------------------

    def _open_logits(self, h_rows: SharedTensor) -> np.ndarray:
        """Classifier head plus opening, charged to Sampling: this is the
        generation-time cost of producing tokens, kept out of the forward
        path's Linear bucket."""
        with self.ch.tagged("Sampling"):
            logits = self._matmul(h_rows, self.w_cls)
            opened = open_to(logits, self.ch, CLIENT)
        return opened.decode()

    def _pos_rows(self, start: int, stop: int) -> SharedTensor:
        return self.pos.slice_rows(start, stop)

    # -- generation ----------------------------------------------------------

    def generate(self, prefix, steps: int) -> SessionResult:
        prefix = np.asarray(prefix, dtype=np.int64)
        if prefix.size + steps > self.config.max_len:
            raise ShapeMismatchError("prefix length + steps exceeds max_len")
        if prefix.size < 1:
            raise ShapeMismatchError("prefix must be nonempty")
        if self.variant is Variant.VANILLA:
            tokens = self._generate_per_step(prefix, steps, merged=False)
        elif self.variant is Variant.ONLY_MM:
            tokens = self._generate_per_step(prefix, steps, merged=True)
        elif self.variant is Variant.ONLY_ER:
            tokens = self._generate_er(prefix, steps, incremental=False)
        else:
            tokens = self._generate_er(prefix, steps, incremental=self.use_cache)
        return SessionResult(
            tokens=tokens,
            ledger=self.ledger.snapshot(),
            offline=self.offline.snapshot(),
            kernel_calls=dict(self.ch.kernel_calls),
        )

    def _generate_per_step(self, prefix: np.ndarray, steps: int,
                           merged: bool) -> np.ndarray:
        seq = list(prefix)
        out = []
        for _ in range(steps):
            one_hot = self._share_one_hot(seq)
            e = mpc_embed(one_hot, self.emb, self.dealer, self.ch)
            e_prime = add_shared(e, self._pos_rows(0, len(seq)))
            h = self.run_forward(e_prime)
            last = h.slice_rows(len(seq) - 1, len(seq))
            tok = int(np.argmax(self._open_logits(last)[0]))
            seq.append(tok)
            out.append(tok)
        return np.array(out, dtype=np.int64)

    def _generate_er(self, prefix: np.ndarray, steps: int,
                     incremental: bool) -> np.ndarray:
        p = prefix.size
        one_hot = self._share_one_hot(prefix)
        e0 = mpc_embed(one_hot, self.emb, self.dealer, self.ch)
        rows = add_shared(e0, self._pos_rows(0, p))
        hiddens: list[SharedTensor] = []
        if steps == 0:
            return np.zeros(0, dtype=np.int64)
        if incremental:
            h_last = None
            for i in range(p):
                h_last = self._merged_incremental_position(rows.slice_rows(i, i + 1), i)
            hiddens.append(h_last)
            for step in range(1, steps):
                pos_index = p + step - 1
                new_row = add_shared(h_last, self._pos_rows(pos_index, pos_index + 1))
                h_last = self._merged_incremental_position(new_row, pos_index)
                hiddens.append(h_last)
        else:
            current = rows
            for step in range(steps):
                h = self.run_forward(current)
                h_last = h.slice_rows(current.shape[0] - 1, current.shape[0])
                hiddens.append(h_last)
                pos_index = p + step
                if pos_index < self.config.max_len:
                    new_row = add_shared(h_last, self._pos_rows(pos_index, pos_index + 1))
                    current = concat_rows([current, new_row])
        stacked = concat_rows(hiddens)
        logits = self._open_logits(stacked)
        return np.argmax(logits, axis=1).astype(np.int64)


def ledger_report(result: SessionResult, baseline: SessionResult | None = None) -> list[dict]:
    """Per-category report rows, plus a Total row with the Fraction column
    (this run's total bytes over the baseline's) when a baseline is given."""
    rows = []
    total = {"bytes": 0, "rounds": 0, "op_count": 0, "wall_ns": 0}
    for category, vals in result.ledger.items():
        rows.append({"category": category, **vals})
        for key in total:
            total[key] += vals[key]
    row = {"category": "Total", **total}
    if baseline is not None:
        base_total = sum(v["bytes"] for v in baseline.ledger.values())
        row["fraction"] = total["bytes"] / base_total if base_total else float("nan")
    rows.append(row)
    return rows
