"""Fixed-point arithmetic over the ring of integers modulo 2**64.

Real numbers are embedded as x -> round(x * 2**f) with f fractional bits,
negatives in two's complement.  All arithmetic wraps modulo 2**64 (never
traps, never saturates), which is exactly the additive group the secret
sharing layer needs: encoding is additively homomorphic, and a product of
two encoded values carries scale 2**(2f) and must be rescaled by an
arithmetic right shift of f bits ("truncation").

Products are computed at full 128-bit width (via 32-bit limb splitting)
before truncation, so plaintext results are exact up to the final shift.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EncodingRangeError, ShapeMismatchError

_U64_MASK32 = np.uint64(0xFFFFFFFF)
_U64_32 = np.uint64(32)
WORD_BITS = 64
MODULUS = 2**64


@dataclass(frozen=True)
class FixedConfig:
    """Fixed-point encoding parameters: number of fractional bits."""

    frac_bits: int = 16

    def __post_init__(self):
        if not 1 <= self.frac_bits <= 32:
            raise ValueError(f"frac_bits must be in [1, 32], got {self.frac_bits}")

    @property
    def scale(self) -> int:
        return 1 << self.frac_bits

    @property
    def max_value(self) -> float:
        """Largest representable magnitude, exclusive bound."""
        return float(2 ** (63 - self.frac_bits))


DEFAULT_CONFIG = FixedConfig()


def _as_u64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.uint64)


def encode_array(x, cfg: FixedConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Encode a float array into ring elements (round half away from zero)."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise EncodingRangeError("cannot encode non-finite values")
    if not np.all(np.abs(x) < cfg.max_value):
        raise EncodingRangeError(
            f"|x| must be < 2^{63 - cfg.frac_bits} for frac_bits={cfg.frac_bits}"
        )
    mag = np.floor(np.abs(x) * cfg.scale + 0.5)
    signed = np.where(x < 0.0, -mag, mag)
    return signed.astype(np.int64).view(np.uint64)


def decode_array(r, cfg: FixedConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Interpret ring elements as signed two's complement and rescale."""
    r = _as_u64(r)
    return r.view(np.int64).astype(np.float64) / cfg.scale


def encode(x: float, cfg: FixedConfig = DEFAULT_CONFIG) -> int:
    """Scalar encode; returns the ring element as a Python int in [0, 2^64)."""
    return int(encode_array(np.float64(x), cfg))


def decode(r: int, cfg: FixedConfig = DEFAULT_CONFIG) -> float:
    """Scalar decode of a ring element."""
    return float(decode_array(np.uint64(r % MODULUS), cfg))


def ring_add(a, b) -> np.ndarray:
    a, b = _as_u64(a), _as_u64(b)
    with np.errstate(over="ignore"):
        return a + b


def ring_sub(a, b) -> np.ndarray:
    a, b = _as_u64(a), _as_u64(b)
    with np.errstate(over="ignore"):
        return a - b


def ring_neg(a) -> np.ndarray:
    a = _as_u64(a)
    with np.errstate(over="ignore"):
        return np.uint64(0) - a


def _mulh_unsigned(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """High 64 bits of the unsigned 64x64 -> 128 bit product."""
    a_lo = a & _U64_MASK32
    a_hi = a >> _U64_32
    b_lo = b & _U64_MASK32
    b_hi = b >> _U64_32
    with np.errstate(over="ignore"):
        ll = a_lo * b_lo
        lh = a_lo * b_hi
        hl = a_hi * b_lo
        hh = a_hi * b_hi
        carry = ((ll >> _U64_32) + (lh & _U64_MASK32) + (hl & _U64_MASK32)) >> _U64_32
        return hh + (lh >> _U64_32) + (hl >> _U64_32) + carry


def _mulh_signed(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """High word of the signed product: mulhs(a,b) = mulhu(a,b) - [a<0]b - [b<0]a."""
    h = _mulh_unsigned(a, b)
    sign_bit = np.uint64(63)
    with np.errstate(over="ignore"):
        h = h - np.where(a >> sign_bit == 1, b, np.uint64(0))
        h = h - np.where(b >> sign_bit == 1, a, np.uint64(0))
    return h


def _shift_128(lo: np.ndarray, hi: np.ndarray, frac_bits: int) -> np.ndarray:
    """Low 64 bits of the 128-bit value (hi:lo) arithmetically shifted by f."""
    f = np.uint64(frac_bits)
    up = np.uint64(64 - frac_bits)
    with np.errstate(over="ignore"):
        return (lo >> f) | (hi << up)


def mul_trunc(a, b, cfg: FixedConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Fixed-point product: full-width multiply, arithmetic shift right by f.

    Wrapping semantics; staying inside the encoding range is the caller's
    contract.  Result is exact up to the floor of the final shift.
    """
    a, b = _as_u64(a), _as_u64(b)
    with np.errstate(over="ignore"):
        lo = a * b
    hi = _mulh_signed(a, b)
    return _shift_128(lo, hi, cfg.frac_bits)


def fixed_matmul(a: np.ndarray, b: np.ndarray, cfg: FixedConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Fixed-point matrix product with full-width accumulation.

    The 2f-scaled partial products are accumulated in 128 bits and the sum
    truncated once, mirroring the one-truncation-per-matmul protocol cost.
    """
    a, b = _as_u64(a), _as_u64(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"cannot matmul {a.shape} by {b.shape}")
    m, k = a.shape
    n = b.shape[1]
    lo = np.zeros((m, n), dtype=np.uint64)
    hi = np.zeros((m, n), dtype=np.uint64)
    with np.errstate(over="ignore"):
        for t in range(k):
            col = a[:, t : t + 1]
            row = b[t : t + 1, :]
            p_lo = col * row
            p_hi = _mulh_signed(col, row)
            new_lo = lo + p_lo
            hi = hi + p_hi + (new_lo < lo).astype(np.uint64)
            lo = new_lo
    return _shift_128(lo, hi, cfg.frac_bits)


def trunc_signed(a, frac_bits: int) -> np.ndarray:
    """Arithmetic right shift interpreting elements as signed two's complement.

    This is the local per-party rescale: each party shifts its own share,
    accepting the standard probabilistic off-by-one of share truncation.
    """
    a = _as_u64(a)
    return (a.view(np.int64) >> np.int64(frac_bits)).view(np.uint64)


def ring_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Plain wrapping matrix product mod 2^64 (no rescale)."""
    with np.errstate(over="ignore"):
        return _as_u64(a) @ _as_u64(b)


@dataclass(frozen=True)
class FixedTensor:
    """Dense tensor of ring elements in fixed-point encoding.

    `data` is a uint64 ndarray of any shape (row-major); value semantics by
    convention -- operations return new tensors and never mutate.
    """

    data: np.ndarray
    config: FixedConfig = field(default_factory=FixedConfig)

    def __post_init__(self):
        if self.data.dtype != np.uint64:
            object.__setattr__(self, "data", _as_u64(self.data))

    @classmethod
    def encode(cls, values, cfg: FixedConfig = DEFAULT_CONFIG) -> "FixedTensor":
        return cls(encode_array(values, cfg), cfg)

    @classmethod
    def zeros(cls, shape, cfg: FixedConfig = DEFAULT_CONFIG) -> "FixedTensor":
        return cls(np.zeros(shape, dtype=np.uint64), cfg)

    def decode(self) -> np.ndarray:
        return decode_array(self.data, self.config)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def _check_compatible(self, other: "FixedTensor"):
        if self.config != other.config:
            raise ShapeMismatchError("fixed-point configs differ")

    def __add__(self, other: "FixedTensor") -> "FixedTensor":
        self._check_compatible(other)
        return FixedTensor(ring_add(self.data, other.data), self.config)

    def __sub__(self, other: "FixedTensor") -> "FixedTensor":
        self._check_compatible(other)
        return FixedTensor(ring_sub(self.data, other.data), self.config)

    def __neg__(self) -> "FixedTensor":
        return FixedTensor(ring_neg(self.data), self.config)

    def mul(self, other: "FixedTensor") -> "FixedTensor":
        """Elementwise fixed-point product (full width, one truncation)."""
        self._check_compatible(other)
        return FixedTensor(mul_trunc(self.data, other.data, self.config), self.config)

    def matmul(self, other: "FixedTensor") -> "FixedTensor":
        self._check_compatible(other)
        return FixedTensor(fixed_matmul(self.data, other.data, self.config), self.config)

    def reshape(self, shape) -> "FixedTensor":
        return FixedTensor(self.data.reshape(shape), self.config)
