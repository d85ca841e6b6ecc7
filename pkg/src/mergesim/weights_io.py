"""Pack/unpack model, merged-model, and calibration objects to containers."""

from __future__ import annotations

from .container import (
    FLAG_CALIBRATION,
    FLAG_FFN_RESIDUAL,
    FLAG_MERGED,
    read_container,
    write_container,
)
from .errors import DataFormatError
from .merge import ConstantAttention, MergedLayer, MergedModel
from .model import LayerWeights, ModelConfig, ModelWeights

_LAYER_FIELDS = ("w_q", "w_k", "w_v", "w_d", "b_d", "ln1_gamma", "ln1_beta",
                 "w_i", "b_i", "w_o", "b_o", "ln2_gamma", "ln2_beta")
_MERGED_FIELDS = ("m_u", "r", "b_mu", "w_o", "b_o", "ln2_gamma", "ln2_beta", "c")
_RESIDUAL_FIELDS = ("res_p", "res_gamma", "res_bias")


def save_model(path, weights: ModelWeights):
    tensors = {
        "embedding": weights.embedding,
        "positional": weights.positional,
        "w_cls": weights.w_cls,
    }
    for i, layer in enumerate(weights.layers):
        for name in _LAYER_FIELDS:
            tensors[f"layer{i}.{name}"] = getattr(layer, name)
    write_container(path, weights.config, tensors, flags=0)


def load_model(path) -> ModelWeights:
    config, tensors, flags = read_container(path)
    if flags & FLAG_MERGED:
        raise DataFormatError(f"{path}: file holds a merged model, not raw weights")
    if flags & FLAG_CALIBRATION:
        raise DataFormatError(f"{path}: file holds calibration data, not weights")
    layers = [
        LayerWeights(**{name: tensors[f"layer{i}.{name}"] for name in _LAYER_FIELDS})
        for i in range(config.n_layers)
    ]
    return ModelWeights(
        config=config,
        embedding=tensors["embedding"],
        positional=tensors["positional"],
        layers=layers,
        w_cls=tensors["w_cls"],
    )


def save_merged(path, mm: MergedModel):
    tensors = {
        "embedding": mm.embedding,
        "positional": mm.positional,
        "w_cls": mm.w_cls,
    }
    flags = FLAG_MERGED | (FLAG_FFN_RESIDUAL if mm.ffn_residual else 0)
    for i, layer in enumerate(mm.layers):
        for name in _MERGED_FIELDS:
            tensors[f"layer{i}.{name}"] = getattr(layer, name)
        if mm.ffn_residual:
            for name in _RESIDUAL_FIELDS:
                tensors[f"layer{i}.{name}"] = getattr(layer, name)
    write_container(path, mm.config, tensors, flags=flags)


def load_merged(path) -> MergedModel:
    config, tensors, flags = read_container(path)
    if not flags & FLAG_MERGED:
        raise DataFormatError(f"{path}: file does not hold a merged model")
    residual = bool(flags & FLAG_FFN_RESIDUAL)
    layers = []
    for i in range(config.n_layers):
        kwargs = {name: tensors[f"layer{i}.{name}"] for name in _MERGED_FIELDS}
        if residual:
            kwargs.update(
                {name: tensors[f"layer{i}.{name}"] for name in _RESIDUAL_FIELDS}
            )
        layers.append(MergedLayer(**kwargs))
    return MergedModel(
        config=config,
        embedding=tensors["embedding"],
        positional=tensors["positional"],
        w_cls=tensors["w_cls"],
        layers=layers,
        ffn_residual=residual,
    )


def save_calibration(path, calib: ConstantAttention, config: ModelConfig):
    tensors = {f"layer{i}.c": c for i, c in enumerate(calib.per_layer)}
    write_container(path, config, tensors, flags=FLAG_CALIBRATION)


def load_calibration(path) -> tuple[ConstantAttention, ModelConfig]:
    config, tensors, flags = read_container(path)
    if not flags & FLAG_CALIBRATION:
        raise DataFormatError(f"{path}: file does not hold calibration data")
    per_layer = [tensors[f"layer{i}.c"] for i in range(config.n_layers)]
    return ConstantAttention(per_layer=per_layer, max_len=config.max_len), config


def load_any(path):
    """Return ("model", ModelWeights) or ("merged", MergedModel)."""
    _, _, flags = read_container(path)
    if flags & FLAG_CALIBRATION:
        raise DataFormatError(f"{path}: calibration files cannot run inference")
    if flags & FLAG_MERGED:
        return "merged", load_merged(path)
    return "model", load_model(path)
