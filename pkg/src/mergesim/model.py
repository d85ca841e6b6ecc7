"""From-scratch toy decoder-only transformer in plaintext float64.

This is the reference semantics that every encrypted and merged variant
is tested against.  The layer follows the classic
project -> causal self-attention -> residual + layer norm -> MLP ->
residual + layer norm structure, with layer norm written literally as
(x - mean) / (sqrt(var) + eps) * gamma + beta (note the epsilon sits
outside the square root).  Q/K/V projections carry no bias; the output
projection and the MLP do.  Dropout is the identity (inference only).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeMismatchError


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def quad_activation(x: np.ndarray, coeffs=(0.25, 0.5, 0.125)) -> np.ndarray:
    a0, a1, a2 = coeffs
    return a0 + a1 * x + a2 * x * x


ACTIVATIONS = {"relu": relu, "quad": quad_activation}


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 256
    model_dim: int = 32
    intermediate_dim: int = 64
    n_layers: int = 2
    n_heads: int = 2
    max_len: int = 64
    activation: str = "relu"
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.model_dim % self.n_heads != 0:
            raise ValueError("model_dim must be divisible by n_heads")
        if self.intermediate_dim < self.model_dim:
            raise ValueError("intermediate_dim must be >= model_dim")
        if self.max_len < 2:
            raise ValueError("max_len must be >= 2")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.n_heads


@dataclass
class LayerWeights:
    w_q: np.ndarray  # (n_heads, d, head_dim)
    w_k: np.ndarray
    w_v: np.ndarray
    w_d: np.ndarray  # (d, d)
    b_d: np.ndarray  # (d,)
    ln1_gamma: np.ndarray
    ln1_beta: np.ndarray
    w_i: np.ndarray  # (d, d_I)
    b_i: np.ndarray
    w_o: np.ndarray  # (d_I, d)
    b_o: np.ndarray
    ln2_gamma: np.ndarray
    ln2_beta: np.ndarray


@dataclass
class ModelWeights:
    config: ModelConfig
    embedding: np.ndarray   # (V, d)
    positional: np.ndarray  # (max_len, d)
    layers: list[LayerWeights] = field(default_factory=list)
    w_cls: np.ndarray = None  # (d, V)


def init_model_weights(config: ModelConfig, seed: int, std: float = 0.08) -> ModelWeights:
    """Seeded random toy weights (scaled Gaussians; unit/zero layer norms)."""
    rng = np.random.default_rng(seed)
    d, dk, di, v = (config.model_dim, config.head_dim,
                    config.intermediate_dim, config.vocab_size)

    def g(*shape):
        return rng.normal(0.0, std, size=shape)

    layers = [
        LayerWeights(
            w_q=g(config.n_heads, d, dk), w_k=g(config.n_heads, d, dk),
            w_v=g(config.n_heads, d, dk),
            w_d=g(d, d), b_d=g(d),
            ln1_gamma=np.ones(d), ln1_beta=np.zeros(d),
            w_i=g(d, di), b_i=g(di),
            w_o=g(di, d), b_o=g(d),
            ln2_gamma=np.ones(d), ln2_beta=np.zeros(d),
        )
        for _ in range(config.n_layers)
    ]
    return ModelWeights(
        config=config,
        embedding=g(v, d),
        positional=g(config.max_len, d),
        layers=layers,
        w_cls=g(d, v),
    )


# ---------------------------------------------------------------------------
# Forward operations
# ---------------------------------------------------------------------------

def embed_lookup(tokens, table: np.ndarray) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= table.shape[0]):
        raise ShapeMismatchError("token id out of vocabulary range")
    return table[tokens]


def add_positional(e: np.ndarray, positional: np.ndarray,
                   start: int = 0) -> np.ndarray:
    """Absolute positions: row i always uses positional[start + i]."""
    n = e.shape[0]
    if start + n > positional.shape[0]:
        raise ShapeMismatchError("sequence exceeds max_len")
    return e + positional[start : start + n]


def layernorm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
              eps: float) -> np.ndarray:
    """(x - E[x]) / (sqrt(Var[x]) + eps) * gamma + beta, rowwise."""
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mean) / (np.sqrt(var) + eps) * gamma + beta


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def attention_projection(h: np.ndarray, layer: LayerWeights):
    """Per-head (Q, K, V), each of shape (n_heads, N, head_dim)."""
    q = np.einsum("nd,hdk->hnk", h, layer.w_q)
    k = np.einsum("nd,hdk->hnk", h, layer.w_k)
    v = np.einsum("nd,hdk->hnk", h, layer.w_v)
    return q, k, v


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


def self_attention(h: np.ndarray, layer: LayerWeights, eps: float,
                   causal: bool = True):
    """Returns (A, x_att): the per-head attention matrix and the
    normalized attention output with residual."""
    n, d = h.shape
    q, k, v = attention_projection(h, layer)
    dk = q.shape[-1]
    scores = np.einsum("hik,hjk->hij", q, k) / np.sqrt(dk)
    if causal:
        scores = np.where(causal_mask(n)[None, :, :], scores, -np.inf)
    a = softmax(scores, axis=-1)
    ctx = np.einsum("hij,hjk->hik", a, v)           # (heads, N, dk)
    concat = ctx.transpose(1, 0, 2).reshape(n, d)   # head-major concat
    x_att = layernorm(concat @ layer.w_d + layer.b_d + h,
                      layer.ln1_gamma, layer.ln1_beta, eps)
    return a, x_att


def feed_forward(x_att: np.ndarray, layer: LayerWeights, activation: str,
                 eps: float) -> np.ndarray:
    act = ACTIVATIONS[activation]
    inner = act(x_att @ layer.w_i + layer.b_i)
    return layernorm(inner @ layer.w_o + layer.b_o + x_att,
                     layer.ln2_gamma, layer.ln2_beta, eps)


def transformer_forward(e_prime: np.ndarray, weights: ModelWeights,
                        collect_attention: bool = False):
    """Stack of layers; returns final hidden states (and optionally the
    per-layer attention matrices, for calibration)."""
    cfg = weights.config
    h = e_prime
    attns = []
    for layer in weights.layers:
        a, x_att = self_attention(h, layer, cfg.ln_eps)
        h = feed_forward(x_att, layer, cfg.activation, cfg.ln_eps)
        if collect_attention:
            attns.append(a)
    if collect_attention:
        return h, attns
    return h


def lm_head(h_last: np.ndarray, w_cls: np.ndarray) -> np.ndarray:
    lm_head.calls += 1
    return h_last @ w_cls


lm_head.calls = 0  # invocation counter for structural tests


def greedy_sample(logits: np.ndarray) -> int:
    """Argmax with lowest-index tie break."""
    return int(np.argmax(logits))


def generate_vanilla(prefix, steps: int, weights: ModelWeights) -> np.ndarray:
    """Baseline auto-regressive loop: re-embed and re-run the full current
    sequence every step, sample greedily, append."""
    cfg = weights.config
    seq = list(np.asarray(prefix, dtype=np.int64))
    if len(seq) + steps > cfg.max_len:
        raise ShapeMismatchError("prefix length + steps exceeds max_len")
    out = []
    for _ in range(steps):
        e = embed_lookup(seq, weights.embedding)
        e = add_positional(e, weights.positional)
        h = transformer_forward(e, weights)
        logits = lm_head(h[-1], weights.w_cls)
        tok = greedy_sample(logits)
        seq.append(tok)
        out.append(tok)
    return np.array(out, dtype=np.int64)
