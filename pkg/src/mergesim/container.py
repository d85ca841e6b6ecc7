"""Versioned binary container for model, merged-model, and calibration files.

Byte layout (all integers little-endian u32, all tensor data little-endian
f64, row-major):

    offset  size  field
    0       4     magic "MRGW"
    4       4     version (currently 1)
    8       4     flags: bit0 = merged model, bit1 = ffn-residual ablation,
                  bit2 = calibration-only file
    12      4*7   config: vocab_size, model_dim, intermediate_dim,
                  n_layers, n_heads, max_len, activation code
                  (0 = relu, 1 = quad)
    40      4     tensor count T
    then T records:
        u32 name length L, L bytes UTF-8 name,
        u32 ndim, ndim x u32 dims, prod(dims) x f64 data

The layer-norm epsilon travels as a scalar tensor named "ln_eps".
Writers emit tensors in sorted name order, so identical inputs produce
byte-identical files.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import DataFormatError
from .model import ModelConfig

MAGIC = b"MRGW"
VERSION = 1

FLAG_MERGED = 1
FLAG_FFN_RESIDUAL = 2
FLAG_CALIBRATION = 4

_ACT_CODES = {"relu": 0, "quad": 1}
_ACT_NAMES = {v: k for k, v in _ACT_CODES.items()}


def write_container(path, config: ModelConfig, tensors: dict[str, np.ndarray],
                    flags: int = 0):
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack(
        "<9I",
        VERSION,
        flags,
        config.vocab_size,
        config.model_dim,
        config.intermediate_dim,
        config.n_layers,
        config.n_heads,
        config.max_len,
        _ACT_CODES[config.activation],
    )
    named = dict(tensors)
    named["ln_eps"] = np.float64(config.ln_eps)
    blob += struct.pack("<I", len(named))
    for name in sorted(named):
        arr = np.ascontiguousarray(named[name], dtype="<f8")
        encoded = name.encode("utf-8")
        blob += struct.pack("<I", len(encoded))
        blob += encoded
        blob += struct.pack("<I", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += arr.tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def read_container(path):
    """Returns (config, tensors, flags)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise DataFormatError(f"{path}: bad magic, not a model container")
    fields = struct.unpack_from("<9I", blob, 4)
    version, flags = fields[0], fields[1]
    if version != VERSION:
        raise DataFormatError(f"{path}: unsupported container version {version}")
    act = _ACT_NAMES.get(fields[8])
    if act is None:
        raise DataFormatError(f"{path}: unknown activation code {fields[8]}")
    offset = 40
    (count,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        dims = struct.unpack_from(f"<{ndim}I", blob, offset)
        offset += 4 * ndim
        n = int(np.prod(dims)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=offset).copy()
        offset += 8 * n
        tensors[name] = arr.reshape(dims) if ndim else arr.reshape(())
    if offset != len(blob):
        raise DataFormatError(f"{path}: trailing bytes after tensor records")
    if "ln_eps" not in tensors:
        raise DataFormatError(f"{path}: container is missing ln_eps")
    config = ModelConfig(
        vocab_size=fields[2],
        model_dim=fields[3],
        intermediate_dim=fields[4],
        n_layers=fields[5],
        n_heads=fields[6],
        max_len=fields[7],
        activation=act,
        ln_eps=float(np.asarray(tensors.pop("ln_eps")).reshape(-1)[0]),
    )
    return config, tensors, flags
