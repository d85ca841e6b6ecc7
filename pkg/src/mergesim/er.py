"""Embedding-resending generation, embedding augmentation, and the
alignment/robustness loss evaluators.

Resending treats the last output hidden state as the next position's
token embedding: the prefix is embedded once, and from then on the loop
never touches the embedding table and never computes logits -- all
last-position hidden states are collected and sampled in one deferred
batch after the loop.  Positions are added to resent rows exactly as
they would be to table rows.

The loop runs a fixed number of steps (it cannot observe an end token,
since sampling is deferred); outputs are truncated at the first end
token afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, ShapeMismatchError
from .merge import MergedModel, merged_model_forward
from .model import (
    ModelWeights,
    add_positional,
    embed_lookup,
    greedy_sample,
    lm_head,
    transformer_forward,
)


def hidden_forward(model):
    """Uniform hidden-state forward for plain and merged models."""
    if isinstance(model, MergedModel):
        return lambda e_prime: merged_model_forward(e_prime, model)
    if isinstance(model, ModelWeights):
        return lambda e_prime: transformer_forward(e_prime, model)
    raise TypeError(f"unsupported model type {type(model).__name__}")


@dataclass
class ERState:
    """Grow-only token-embedding matrix: prefix rows, then resent rows."""

    token_embeddings: np.ndarray  # (L, d)
    prefix_len: int
    max_len: int
    step: int = 0
    deferred: bool = True

    @property
    def length(self) -> int:
        return self.token_embeddings.shape[0]


def resend_embedding(state: ERState, h_new: np.ndarray) -> ERState:
    """Append a hidden state as the next position's token embedding."""
    if state.length + 1 > state.max_len:
        raise ShapeMismatchError("resending past max_len")
    state.token_embeddings = np.vstack([state.token_embeddings, h_new[None, :]])
    state.step += 1
    return state


@dataclass
class ERGeneration:
    """Hidden states from an ER loop plus the deferred sampling handle."""

    hiddens: np.ndarray  # (N, d)
    model: object

    def sample(self, eos_id: int | None = None) -> np.ndarray:
        w_cls = self.model.w_cls
        return batch_sample(self.hiddens, w_cls, eos_id)


def generate_er(prefix, steps: int, model) -> ERGeneration:
    """Embedding-resending loop: one prefix embedding, no logits inside."""
    cfg = model.config
    prefix = np.asarray(prefix, dtype=np.int64)
    if prefix.size + steps > cfg.max_len:
        raise ShapeMismatchError("prefix length + steps exceeds max_len")
    forward = hidden_forward(model)
    state = ERState(
        token_embeddings=embed_lookup(prefix, model.embedding),
        prefix_len=prefix.size,
        max_len=cfg.max_len,
    )
    hiddens = []
    for _ in range(steps):
        e_prime = add_positional(state.token_embeddings, model.positional)
        h = forward(e_prime)
        h_last = h[-1]
        hiddens.append(h_last)
        resend_embedding(state, h_last)
    stacked = np.array(hiddens) if hiddens else np.zeros((0, cfg.model_dim))
    return ERGeneration(hiddens=stacked, model=model)


def batch_sample(hiddens: np.ndarray, w_cls: np.ndarray,
                 eos_id: int | None = None) -> np.ndarray:
    """One batched logits computation, then greedy per row; output is cut
    at the first end token if one is configured."""
    if hiddens.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    logits = lm_head(hiddens, w_cls)
    tokens = np.array([greedy_sample(row) for row in logits], dtype=np.int64)
    if eos_id is not None:
        hits = np.flatnonzero(tokens == eos_id)
        if hits.size:
            tokens = tokens[: hits[0]]
    return tokens


# ---------------------------------------------------------------------------
# Augmentation and loss evaluators (plaintext forward evaluators)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentConfig:
    mask_prob: float = 0.6
    noise_halfwidth: float = 0.75
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.mask_prob <= 1.0:
            raise ValueError("mask probability must be in [0, 1]")
        if self.noise_halfwidth < 0.0:
            raise ValueError("noise half-width must be >= 0")


@dataclass(frozen=True)
class LossWeights:
    lam: float = 0.75

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("weighting factor must be in [0, 1]")


def augment_embedding(e: np.ndarray, cfg: AugmentConfig,
                      rng: np.random.Generator | None = None) -> np.ndarray:
    """Per-element mask-then-noise: m * (e + n), m ~ Bernoulli(1 - p),
    n ~ Uniform(-halfwidth, halfwidth).  Bit-reproducible under the seed."""
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    keep = (rng.random(e.shape) >= cfg.mask_prob).astype(e.dtype)
    noise = rng.uniform(-cfg.noise_halfwidth, cfg.noise_halfwidth, size=e.shape)
    return keep * (e + noise)


def cosine_alignment_loss(h_rows: np.ndarray, e_rows: np.ndarray) -> float:
    """Mean over row pairs of 1 - cos(h, e); in [0, 2]."""
    if h_rows.shape != e_rows.shape:
        raise ShapeMismatchError("alignment loss needs matching row counts")
    hn = np.linalg.norm(h_rows, axis=-1)
    en = np.linalg.norm(e_rows, axis=-1)
    if np.any(hn == 0.0) or np.any(en == 0.0):
        raise DegenerateInputError("zero-norm row in cosine alignment loss")
    cos = (h_rows * e_rows).sum(axis=-1) / (hn * en)
    return float(np.mean(1.0 - cos))


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def ce_loss_noised(weights: ModelWeights, sequences, cfg: AugmentConfig,
                   rng: np.random.Generator | None = None) -> float:
    """Next-token cross entropy through a forward on augmented embeddings,
    pooled over all (sequence, position) prediction points."""
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    total = 0.0
    count = 0
    for seq in sequences:
        seq = np.asarray(seq, dtype=np.int64)
        e = embed_lookup(seq, weights.embedding)
        e = augment_embedding(e, cfg, rng)
        e = add_positional(e, weights.positional)
        h = transformer_forward(e, weights)
        logp = _log_softmax(h[:-1] @ weights.w_cls)
        targets = seq[1:]
        total -= float(logp[np.arange(targets.size), targets].sum())
        count += targets.size
    return total / count


def combined_loss(l_c: float, l_ce: float, lam: float = 0.75) -> float:
    """Convex combination lam * l_c + (1 - lam) * l_ce."""
    LossWeights(lam)  # range check
    return lam * l_c + (1.0 - lam) * l_ce


# ---------------------------------------------------------------------------
# Noise robustness sweep
# ---------------------------------------------------------------------------

def _generate_tokens(mode: str, prefix, steps: int, weights: ModelWeights) -> np.ndarray:
    from .model import generate_vanilla

    if mode == "vanilla":
        return generate_vanilla(prefix, steps, weights)
    gen = generate_er(prefix, steps, weights)
    return gen.sample()


def noise_robustness_sweep(weights: ModelWeights, mse_levels, prefixes,
                           steps: int, seed: int = 0) -> list[dict]:
    """Token-agreement vs embedding-table noise, per mode and MSE level.

    Gaussian noise rescaled to hit each target MSE exactly is added to
    the embedding table; agreement is measured against the same mode's
    noiseless generation.  Report-only: no pass/fail threshold.
    """
    rng = np.random.default_rng(seed)
    rows = []
    for mode in ("vanilla", "er"):
        baselines = [_generate_tokens(mode, p, steps, weights) for p in prefixes]
        for level in mse_levels:
            if level == 0.0:
                measured = 0.0
                perturbed = weights
            else:
                raw = rng.normal(size=weights.embedding.shape)
                raw *= np.sqrt(level / np.mean(raw**2))
                measured = float(np.mean(raw**2))
                perturbed = ModelWeights(
                    config=weights.config,
                    embedding=weights.embedding + raw,
                    positional=weights.positional,
                    layers=weights.layers,
                    w_cls=weights.w_cls,
                )
            agree = []
            for prefix, base in zip(prefixes, baselines):
                tokens = _generate_tokens(mode, prefix, steps, perturbed)
                agree.append(float(np.mean(tokens == base)))
            rows.append({
                "mode": mode,
                "target_mse": float(level),
                "measured_mse": measured,
                "agreement_rate": float(np.mean(agree)),
                "seq_len": steps,
                "seed": seed,
            })
    return rows
