"""Offline compiler from a transformer to its constant-attention merged form.

The transformation has three ingredients:

 1. Constant attention: the dynamic post-softmax attention matrix is
    replaced by the elementwise average of attention matrices observed
    over a calibration corpus (causal, rows renormalized to sum 1).

 2. Layer-norm approximation inside attention: f'(x) = x * gamma + beta,
    a plain affine map with no mean/variance computation.

 3. Weight folding: with attention constant and the inner norm affine,
    the value projection, the attention output map, the affine norm and
    the first MLP matrix collapse into one precomputed matrix per head
    plus a shared residual path:

        m_u[h] = W_v[h] @ W_d[h] @ diag(gamma1) @ W_i          (d x d_I)
        r      = diag(gamma1) @ W_i                            (d x d_I)
        b_mu   = (b_d * gamma1) @ W_i + beta1 @ W_i + b_i      (d_I,)

    so a merged layer is three tensor products:
        u   = sum_h (C_h @ h) @ m_u[h] + h @ r + b_mu
        out = layernorm(Act(u) @ W_o + b_o)                    (true norm)

    For a single head, m_u[0] + r equals the folded
    (W_v @ W_d + I) @ diag(gamma1) @ W_i form exactly.  Keeping the
    residual path separate (instead of pushing the identity through the
    constant mixing) is what makes the fold an exact rewrite of the
    constant-attention layer.

The merged layer deliberately omits the MLP residual; a flag-gated
ablation variant retains it (and the extra tensors that requires) but is
excluded from the exact-rewrite contract.

Swapping the sequence-mixing C with the feature-mixing weight matrices is
licensed by the commutativity of row-side and column-side matrix action;
`check_commutativity` evaluates both orders literally as a property check.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeMismatchError
from .model import (
    ACTIVATIONS,
    LayerWeights,
    ModelConfig,
    ModelWeights,
    add_positional,
    embed_lookup,
    layernorm,
    transformer_forward,
)


# ---------------------------------------------------------------------------
# Constant attention calibration
# ---------------------------------------------------------------------------

@dataclass
class ConstantAttention:
    """Per-layer averaged attention: list of (n_heads, N_max, N_max)."""

    per_layer: list[np.ndarray]
    max_len: int


def markov_corpus(vocab_size: int, n_sequences: int, length: int,
                  seed: int) -> list[np.ndarray]:
    """Seeded synthetic token sequences from an order-1 Markov chain."""
    rng = np.random.default_rng(seed)
    transitions = rng.random((vocab_size, vocab_size))
    transitions /= transitions.sum(axis=1, keepdims=True)
    corpus = []
    for _ in range(n_sequences):
        tok = int(rng.integers(vocab_size))
        seq = [tok]
        for _ in range(length - 1):
            tok = int(rng.choice(vocab_size, p=transitions[tok]))
            seq.append(tok)
        corpus.append(np.array(seq, dtype=np.int64))
    return corpus


def _pad_to(seq: np.ndarray, n: int, pad_token: int = 0) -> np.ndarray:
    seq = np.asarray(seq, dtype=np.int64)[:n]
    if seq.size < n:
        seq = np.concatenate([seq, np.full(n - seq.size, pad_token, dtype=np.int64)])
    return seq


def renormalize_rows(c: np.ndarray) -> np.ndarray:
    """Scale each (causal) row to sum exactly 1 over its visible prefix."""
    sums = c.sum(axis=-1, keepdims=True)
    return c / sums


def calibrate_constant_attention(weights: ModelWeights, calib_set,
                                 max_len: int | None = None) -> ConstantAttention:
    """Average per-layer per-head post-softmax attention over a corpus.

    Every sequence is padded/truncated to max_len (pad token 0) so all
    attention matrices share the full causal shape.
    """
    if len(calib_set) == 0:
        raise ValueError("calibration set must be nonempty")
    cfg = weights.config
    n = max_len if max_len is not None else cfg.max_len
    sums = [np.zeros((cfg.n_heads, n, n)) for _ in range(cfg.n_layers)]
    for seq in calib_set:
        tokens = _pad_to(seq, n)
        e = add_positional(embed_lookup(tokens, weights.embedding), weights.positional)
        _, attns = transformer_forward(e, weights, collect_attention=True)
        for ell, a in enumerate(attns):
            sums[ell] += a
    averaged = [renormalize_rows(s / len(calib_set)) for s in sums]
    return ConstantAttention(per_layer=averaged, max_len=n)


def slice_constant_attention(c: np.ndarray, length: int) -> np.ndarray:
    """Leading length x length block with rows renormalized to sum 1."""
    if length > c.shape[-1]:
        raise ShapeMismatchError("slice length exceeds calibrated max_len")
    return renormalize_rows(c[..., :length, :length])


# ---------------------------------------------------------------------------
# Layer folding
# ---------------------------------------------------------------------------

def approx_layernorm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """The affine stand-in for layer norm: x * gamma + beta."""
    return x * gamma + beta


@dataclass
class MergedLayer:
    m_u: np.ndarray        # (n_heads, d, d_I)
    r: np.ndarray          # (d, d_I)
    b_mu: np.ndarray       # (d_I,)
    w_o: np.ndarray        # (d_I, d)
    b_o: np.ndarray        # (d,)
    ln2_gamma: np.ndarray
    ln2_beta: np.ndarray
    c: np.ndarray          # (n_heads, N_max, N_max)
    # ffn-residual ablation extras (None unless the flag is set)
    res_p: np.ndarray | None = None      # (n_heads, d, d)
    res_gamma: np.ndarray | None = None  # (d,)
    res_bias: np.ndarray | None = None   # (d,)


@dataclass
class MergedModel:
    config: ModelConfig
    embedding: np.ndarray
    positional: np.ndarray
    w_cls: np.ndarray
    layers: list[MergedLayer] = field(default_factory=list)
    ffn_residual: bool = False


def merge_layer(layer: LayerWeights, c: np.ndarray,
                ffn_residual: bool = False) -> MergedLayer:
    """Fold one layer's linear chain around a fixed attention matrix."""
    n_heads, d, dk = layer.w_q.shape
    gamma1 = layer.ln1_gamma
    folded = np.empty((n_heads, d, layer.w_i.shape[1]))
    res_p = np.empty((n_heads, d, d)) if ffn_residual else None
    for h in range(n_heads):
        w_d_rows = layer.w_d[h * dk : (h + 1) * dk, :]
        scaled = (layer.w_v[h] @ w_d_rows) * gamma1[None, :]
        folded[h] = scaled @ layer.w_i
        if ffn_residual:
            res_p[h] = scaled
    r = gamma1[:, None] * layer.w_i
    b_mu = (layer.b_d * gamma1) @ layer.w_i + layer.ln1_beta @ layer.w_i + layer.b_i
    return MergedLayer(
        m_u=folded,
        r=r,
        b_mu=b_mu,
        w_o=layer.w_o.copy(),
        b_o=layer.b_o.copy(),
        ln2_gamma=layer.ln2_gamma.copy(),
        ln2_beta=layer.ln2_beta.copy(),
        c=c.copy(),
        res_p=res_p,
        res_gamma=gamma1.copy() if ffn_residual else None,
        res_bias=(layer.b_d * gamma1 + layer.ln1_beta) if ffn_residual else None,
    )


def merge_model(weights: ModelWeights, calib: ConstantAttention,
                ffn_residual: bool = False) -> MergedModel:
    if len(calib.per_layer) != weights.config.n_layers:
        raise ShapeMismatchError("calibration layer count does not match model")
    layers = [
        merge_layer(layer, c, ffn_residual)
        for layer, c in zip(weights.layers, calib.per_layer)
    ]
    return MergedModel(
        config=weights.config,
        embedding=weights.embedding.copy(),
        positional=weights.positional.copy(),
        w_cls=weights.w_cls.copy(),
        layers=layers,
        ffn_residual=ffn_residual,
    )


# ---------------------------------------------------------------------------
# Merged forward
# ---------------------------------------------------------------------------

def merged_forward(h: np.ndarray, ml: MergedLayer, config: ModelConfig,
                   ffn_residual: bool = False) -> np.ndarray:
    """One merged layer: mix, fold, activate, project, normalize."""
    length = h.shape[0]
    c = slice_constant_attention(ml.c, length)
    mixed = np.einsum("hij,jd->hid", c, h)
    u = ml.b_mu + h @ ml.r
    for head in range(ml.m_u.shape[0]):
        u = u + mixed[head] @ ml.m_u[head]
    z = ACTIVATIONS[config.activation](u)
    pre = z @ ml.w_o + ml.b_o
    if ffn_residual:
        if ml.res_p is None:
            raise ShapeMismatchError("layer was not merged with residual tensors")
        x_att = h * ml.res_gamma + ml.res_bias
        for head in range(ml.res_p.shape[0]):
            x_att = x_att + mixed[head] @ ml.res_p[head]
        pre = pre + x_att
    return layernorm(pre, ml.ln2_gamma, ml.ln2_beta, config.ln_eps)


def merged_model_forward(e_prime: np.ndarray, mm: MergedModel) -> np.ndarray:
    if e_prime.shape[0] > mm.config.max_len:
        raise ShapeMismatchError("sequence exceeds max_len")
    h = e_prime
    for ml in mm.layers:
        h = merged_forward(h, ml, mm.config, mm.ffn_residual)
    return h


def constant_attention_reference(h: np.ndarray, layer: LayerWeights,
                                 c: np.ndarray, config: ModelConfig,
                                 ffn_residual: bool = False) -> np.ndarray:
    """Unfolded constant-attention layer: fixed mixing, affine inner norm,
    then the MLP (with true layer norm at the end).  The exact-rewrite
    oracle for `merged_forward`."""
    n, d = h.shape
    n_heads, _, dk = layer.w_v.shape
    c = slice_constant_attention(c, n)
    v = np.einsum("nd,hdk->hnk", h, layer.w_v)
    ctx = np.einsum("hij,hjk->hik", c, v)
    concat = ctx.transpose(1, 0, 2).reshape(n, d)
    x_att = approx_layernorm(concat @ layer.w_d + layer.b_d + h,
                             layer.ln1_gamma, layer.ln1_beta)
    z = ACTIVATIONS[config.activation](x_att @ layer.w_i + layer.b_i)
    pre = z @ layer.w_o + layer.b_o
    if ffn_residual:
        pre = pre + x_att
    return layernorm(pre, layer.ln2_gamma, layer.ln2_beta, config.ln_eps)


def single_head_fold_reference(layer: LayerWeights) -> tuple[np.ndarray, np.ndarray]:
    """Independent transcription of the single-head folded form,
    (W_v @ W_d + I) @ diag(gamma1) @ W_i and its bias, written without the
    per-head/residual split as a cross-check for merge_layer."""
    d = layer.w_d.shape[0]
    m_u = ((layer.w_v[0] @ layer.w_d + np.eye(d)) * layer.ln1_gamma[None, :]) @ layer.w_i
    b_mu = (layer.b_d * layer.ln1_gamma) @ layer.w_i + layer.ln1_beta @ layer.w_i + layer.b_i
    return m_u, b_mu


# ---------------------------------------------------------------------------
# Commutativity of row-side vs column-side matrix action
# ---------------------------------------------------------------------------

def _mul_dim(x: np.ndarray, w: np.ndarray, dim: int) -> np.ndarray:
    """Matrix multiplication of x by w under dimension `dim` (1 = rows,
    2 = columns): f(X, A, 1) = (X^T A)^T, f(X, B, 2) = X B."""
    if dim == 1:
        if w.shape[0] != x.shape[0] or w.shape[0] != w.shape[1]:
            raise ShapeMismatchError("row-side matrix must be square m x m")
        return (x.T @ w).T
    if dim == 2:
        if w.shape[0] != x.shape[1] or w.shape[0] != w.shape[1]:
            raise ShapeMismatchError("column-side matrix must be square n x n")
        return x @ w
    raise ValueError("dim must be 1 or 2")


def check_commutativity(x: np.ndarray, a1: np.ndarray, a2: np.ndarray,
                        b: np.ndarray) -> float:
    """Evaluate both orderings of interleaved row/column action literally
    and return their maximum absolute discrepancy."""
    first = _mul_dim(_mul_dim(_mul_dim(x, a1, 1), a2, 1), b, 2)
    second = _mul_dim(_mul_dim(_mul_dim(x, a1, 1), b, 2), a2, 1)
    return float(np.max(np.abs(first - second))) if x.size else 0.0


def merge_equivalence_check(weights: ModelWeights, merged: MergedModel,
                            n_probe: int = 8, seed: int = 0) -> float:
    """Max abs deviation of merged layers vs the composed reference on
    random probe inputs; the self-check `merge` runs before writing."""
    rng = np.random.default_rng(seed)
    cfg = weights.config
    worst = 0.0
    for _ in range(n_probe):
        length = int(rng.integers(1, cfg.max_len + 1))
        h = rng.normal(0.0, 1.0, size=(length, cfg.model_dim))
        for layer, ml in zip(weights.layers, merged.layers):
            ref = constant_attention_reference(h, layer, ml.c, cfg,
                                               merged.ffn_residual)
            got = merged_forward(h, ml, cfg, merged.ffn_residual)
            worst = max(worst, float(np.max(np.abs(ref - got))))
            h = got
    return worst
