"""Private approximations of the nonlinear kernels (exp, reciprocal,
softmax, square root, activation).

All kernels are compositions of shared additions and Beaver
multiplications, so every intermediate stays secret-shared.  The
strategies:

  exp(x)        limit approximation (1 + x/2^k)^(2^k): a local shift and
                add, then k private squarings (k = exp_iterations rounds).
  1/x           Newton iterations y <- y * (2 - x*y), seeded either with
                the exponential guess 3*exp(0.5 - x) + 0.003 or with a
                caller-supplied initial share (the layer-norm path seeds
                from an inverse square root to stay exp-free).
  1/sqrt(v)     Newton iterations z <- z * (3 - v*z^2) / 2 from a public
                constant start; sqrt(v) = v * z.
  softmax       max-free: exp of (x - public shift), masked row sums,
                private reciprocal, one final product round.  All bytes
                inside are charged to the Softmax category.
  activation    relu via an idealized dealer-assisted sign gadget (one
                masked opening round, exact result -- an optimistic cost
                bound), or a public quadratic polynomial.

Accuracy contracts hold on bounded input ranges (exp on [-16, 4],
reciprocal on [0.05, 2^8]); outside them results degrade but never trap.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ring import FixedConfig, FixedTensor, encode_array
from .ring import ring_sub
from .sharing import (
    Channel,
    SharedTensor,
    TrustedDealer,
    _timed,
    add_public,
    add_shared,
    beaver_mul,
    mul_public,
    reconstruct,
    share,
    shift_public,
    sub_shared,
    uniform_u64,
)


@dataclass(frozen=True)
class NonlinearConfig:
    exp_iterations: int = 8
    recip_newton_iterations: int = 10
    recip_init_mul: float = 3.0
    recip_init_shift: float = 0.5
    recip_init_bias: float = 0.003
    rsqrt_newton_iterations: int = 26
    rsqrt_init: float = 0.12  # converges for inputs up to 3 / init^2 ~ 208
    softmax_shift: float = 4.0
    activation_kind: str = "relu_sign_assisted"
    quad_coeffs: tuple[float, float, float] = (0.25, 0.5, 0.125)

    def __post_init__(self):
        if self.exp_iterations < 1 or self.recip_newton_iterations < 1:
            raise ValueError("iteration counts must be >= 1")
        if self.rsqrt_newton_iterations < 1:
            raise ValueError("iteration counts must be >= 1")
        if self.activation_kind not in ("relu_sign_assisted", "quad"):
            raise ValueError(f"unknown activation kind {self.activation_kind!r}")


def _const(value, shape, cfg: FixedConfig) -> FixedTensor:
    return FixedTensor(encode_array(np.broadcast_to(np.float64(value), shape).copy(), cfg), cfg)


def share_constant(value, shape, cfg: FixedConfig) -> SharedTensor:
    """Trivial sharing of a public constant (client holds zero)."""
    k = _const(value, shape, cfg)
    return SharedTensor.from_arrays(np.zeros(shape, dtype=np.uint64), k.data, cfg)


def neg_shared(x: SharedTensor) -> SharedTensor:
    from .ring import ring_neg

    return x.map_local(ring_neg)


def row_sum(x: SharedTensor) -> SharedTensor:
    """Sum over the last axis (local ring addition), keeping the axis."""
    with np.errstate(over="ignore"):
        return x.map_local(lambda d: d.sum(axis=-1, keepdims=True, dtype=np.uint64))


def mpc_exp(x: SharedTensor, cfg: NonlinearConfig, ch: Channel,
            dealer: TrustedDealer) -> SharedTensor:
    """exp via the limit approximation; exactly exp_iterations mul rounds."""
    ch.count_kernel("mpc_exp")
    fx = x.config
    k = cfg.exp_iterations
    r = shift_public(x, k)
    r = add_public(r, _const(1.0, r.shape, fx))
    for _ in range(k):
        t = dealer.beaver_triple(r.shape, r.shape)
        r = beaver_mul(r, r, t, ch)
    return r


def mpc_reciprocal(x: SharedTensor, cfg: NonlinearConfig, ch: Channel,
                   dealer: TrustedDealer,
                   initial: SharedTensor | None = None) -> SharedTensor:
    """Newton reciprocal; caller guarantees positive input.

    Without an explicit initial share the guess is the standard
    exponential seed; each Newton step costs two multiplication rounds.
    """
    ch.count_kernel("mpc_reciprocal")
    fx = x.config
    if initial is None:
        arg = add_public(neg_shared(x), _const(cfg.recip_init_shift, x.shape, fx))
        y = mpc_exp(arg, cfg, ch, dealer)
        y = mul_public(y, _const(cfg.recip_init_mul, y.shape, fx))
        y = add_public(y, _const(cfg.recip_init_bias, y.shape, fx))
    else:
        y = initial
    two = _const(2.0, x.shape, fx)
    for _ in range(cfg.recip_newton_iterations):
        xy = beaver_mul(x, y, dealer.beaver_triple(x.shape, y.shape), ch)
        corr = add_public(neg_shared(xy), two)
        y = beaver_mul(y, corr, dealer.beaver_triple(y.shape, corr.shape), ch)
    return y


def mpc_rsqrt(v: SharedTensor, cfg: NonlinearConfig, ch: Channel,
              dealer: TrustedDealer) -> tuple[SharedTensor, SharedTensor]:
    """Newton inverse square root from a public constant start.

    Returns (sqrt(v), 1/sqrt(v)); exp-free, so merged-model sessions can
    normalize without ever touching the exponential kernel.
    """
    ch.count_kernel("mpc_rsqrt")
    fx = v.config
    z = share_constant(cfg.rsqrt_init, v.shape, fx)
    three = _const(3.0, v.shape, fx)
    half = _const(0.5, v.shape, fx)
    for _ in range(cfg.rsqrt_newton_iterations):
        zz = beaver_mul(z, z, dealer.beaver_triple(z.shape, z.shape), ch)
        vzz = beaver_mul(v, zz, dealer.beaver_triple(v.shape, zz.shape), ch)
        corr = add_public(neg_shared(vzz), three)
        z = beaver_mul(z, corr, dealer.beaver_triple(z.shape, corr.shape), ch)
        z = mul_public(z, half)
    s = beaver_mul(v, z, dealer.beaver_triple(v.shape, z.shape), ch)
    return s, z


def mpc_inv_sqrt_plus_eps(v: SharedTensor, eps: float, cfg: NonlinearConfig,
                          ch: Channel, dealer: TrustedDealer) -> SharedTensor:
    """1 / (sqrt(v) + eps), the literal layer-norm denominator.

    sqrt comes from the exp-free Newton iteration; the reciprocal polish
    is seeded with z*(1 - eps*z) ~ 1/(sqrt(v)+eps), keeping the whole
    path free of exponentials.
    """
    fx = v.config
    s, z = mpc_rsqrt(v, cfg, ch, dealer)
    s_eps = add_public(s, _const(eps, s.shape, fx))
    zz = beaver_mul(z, z, dealer.beaver_triple(z.shape, z.shape), ch)
    y0 = sub_shared(z, mul_public(zz, _const(eps, zz.shape, fx)))
    return mpc_reciprocal(s_eps, cfg, ch, dealer, initial=y0)


def mpc_softmax(x: SharedTensor, cfg: NonlinearConfig, ch: Channel,
                dealer: TrustedDealer,
                visible: np.ndarray | None = None) -> SharedTensor:
    """Row softmax over the last axis, charged to the Softmax category.

    Max-free formulation with a public shift (the configured logit bound):
    e = exp(x - shift); masked positions are zeroed (the causal mask is
    public structure); rows are summed locally and divided privately.
    `visible[i]` gives the number of visible leading columns in row i.
    """
    ch.count_kernel("mpc_softmax")
    fx = x.config
    n = x.shape[-1]
    if n > 512:
        raise ValueError("softmax rows wider than 512 are out of contract")
    keep = None
    if visible is not None:
        keep = np.zeros(x.shape, dtype=np.uint64)
        rows = keep.reshape(-1, n)
        for i, width in enumerate(np.broadcast_to(visible, (rows.shape[0],))):
            rows[i, : int(width)] = 1
    with ch.tagged("Softmax"):
        shifted = add_public(x, _const(-cfg.softmax_shift, x.shape, fx))
        e = mpc_exp(shifted, cfg, ch, dealer)
        if keep is not None:
            with np.errstate(over="ignore"):
                e = e.map_local(lambda d: d * keep)
        s = row_sum(e)
        r = mpc_reciprocal(s, cfg, ch, dealer)
        out = beaver_mul(e, r, dealer.beaver_triple(e.shape, r.shape), ch)
        if keep is not None:
            # the final product reintroduces truncation ulps on masked
            # entries; the mask is public, so force exact zeros
            with np.errstate(over="ignore"):
                out = out.map_local(lambda d: d * keep)
    return out


def softmax_round_count(cfg: NonlinearConfig) -> int:
    """Exact protocol rounds one softmax call costs (assertable vs ledger)."""
    exp_rounds = cfg.exp_iterations
    recip_rounds = cfg.exp_iterations + 2 * cfg.recip_newton_iterations
    return exp_rounds + recip_rounds + 1


def mpc_relu(x: SharedTensor, ch: Channel, dealer: TrustedDealer) -> SharedTensor:
    """Sign-assisted ReLU: exact up to encoding.

    The comparison itself is idealized as a dealer-held sign extraction:
    the parties pay one masked opening round (the mask keeps the exchange
    uniform) and receive fresh shares of relu(x).  This models the gadget
    cost as an optimistic lower bound; a real comparison protocol would
    only be more expensive.
    """
    ch.count_kernel("mpc_relu")
    fx = x.config
    with _timed(ch):
        mask = uniform_u64(dealer.rng, x.shape)
        mask_sh = dealer.share_plain(mask)
        dealer.charge_offline(mask.size)
        blind = [ring_sub(x.data(p), mask_sh.data(p)) for p in (0, 1)]
        ch.exchange(blind[0], blind[1])
        ch.op()
        plain = reconstruct(x).decode()
        out = share(FixedTensor.encode(np.maximum(plain, 0.0), fx), dealer.rng)
    return out


def mpc_quad_activation(x: SharedTensor, cfg: NonlinearConfig, ch: Channel,
                        dealer: TrustedDealer) -> SharedTensor:
    """Quadratic activation a0 + a1*x + a2*x^2 with public coefficients."""
    ch.count_kernel("mpc_quad")
    fx = x.config
    a0, a1, a2 = cfg.quad_coeffs
    xx = beaver_mul(x, x, dealer.beaver_triple(x.shape, x.shape), ch)
    out = add_shared(
        mul_public(xx, _const(a2, x.shape, fx)),
        mul_public(x, _const(a1, x.shape, fx)),
    )
    return add_public(out, _const(a0, x.shape, fx))


def mpc_activation(x: SharedTensor, cfg: NonlinearConfig, ch: Channel,
                   dealer: TrustedDealer) -> SharedTensor:
    if cfg.activation_kind == "relu_sign_assisted":
        return mpc_relu(x, ch, dealer)
    return mpc_quad_activation(x, cfg, ch, dealer)
