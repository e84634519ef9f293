"""Flat, ordered weight registry for the whole network."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from .config import ConfigError, ModelConfig
from .frontend import build_filterbank

# Normalization running statistics are stored alongside the weights but are
# not trainable and therefore not counted as parameters.
BUFFER_SUFFIXES = (".running_mean", ".running_var")


def registry_shapes(cfg: ModelConfig) -> "OrderedDict[str, tuple[int, ...]]":
    fb = cfg.frontend
    shapes: OrderedDict[str, tuple[int, ...]] = OrderedDict()
    if cfg.frontend_mode == "full":
        shapes["frontend.weights"] = (fb.n, fb.n_bins)
    c0 = cfg.stem_channels
    shapes["stem.weight"] = (c0, fb.n)
    shapes["stem.bias"] = (c0,)
    _norm(shapes, "stem.norm", c0)
    c_in = c0
    for j, c_out in enumerate(cfg.block_channels):
        pre = f"blocks.{j}"
        shapes[f"{pre}.dw.weight"] = (cfg.kernel_size, c_in)
        shapes[f"{pre}.dw.bias"] = (c_in,)
        shapes[f"{pre}.pw.weight"] = (c_out, c_in)
        shapes[f"{pre}.pw.bias"] = (c_out,)
        cr = cfg.se_hidden(c_out)
        shapes[f"{pre}.se.reduce.weight"] = (cr, c_out)
        shapes[f"{pre}.se.reduce.bias"] = (cr,)
        shapes[f"{pre}.se.expand.weight"] = (c_out, cr)
        shapes[f"{pre}.se.expand.bias"] = (c_out,)
        _norm(shapes, f"{pre}.norm", c_out)
        if c_in != c_out:
            shapes[f"{pre}.skip.weight"] = (c_out, c_in)
            shapes[f"{pre}.skip.bias"] = (c_out,)
        c_in = c_out
    h = cfg.hidden
    shapes["gru.weight_ih"] = (3 * h, c_in)
    shapes["gru.weight_hh"] = (3 * h, h)
    shapes["gru.bias_ih"] = (3 * h,)
    shapes["gru.bias_hh"] = (3 * h,)
    shapes["attn.score.weight"] = (h,)
    shapes["attn.score.bias"] = (1,)
    shapes["classifier.weight"] = (cfg.n_classes, h)
    shapes["classifier.bias"] = (cfg.n_classes,)
    return shapes


def _norm(shapes, pre, c):
    shapes[f"{pre}.weight"] = (c,)
    shapes[f"{pre}.bias"] = (c,)
    shapes[f"{pre}.running_mean"] = (c,)
    shapes[f"{pre}.running_var"] = (c,)


def is_buffer(name: str) -> bool:
    return name.endswith(BUFFER_SUFFIXES)


class ModelParams:
    """Config plus an ordered ``name -> ndarray`` mapping.

    Iteration order is the registry order, which is also the order used by
    the weight archive and the gradient tape.
    """

    def __init__(self, cfg: ModelConfig, tensors: dict[str, np.ndarray]):
        expected = registry_shapes(cfg)
        if list(tensors) != list(expected):
            missing = [k for k in expected if k not in tensors]
            extra = [k for k in tensors if k not in expected]
            if missing or extra:
                raise ConfigError(f"registry mismatch: missing={missing} extra={extra}")
            tensors = OrderedDict((k, tensors[k]) for k in expected)
        for k, shape in expected.items():
            if tuple(tensors[k].shape) != shape:
                raise ConfigError(
                    f"shape mismatch for {k}: expected {shape}, got {tuple(tensors[k].shape)}"
                )
        self.cfg = cfg
        self.tensors: OrderedDict[str, np.ndarray] = OrderedDict(tensors)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.cfg, OrderedDict(
            (k, np.ascontiguousarray(v, dtype=dtype)) for k, v in self.tensors.items()))

    def copy(self) -> "ModelParams":
        return ModelParams(self.cfg, OrderedDict((k, v.copy()) for k, v in self.tensors.items()))

    def param_names(self) -> list[str]:
        return [k for k in self.tensors if not is_buffer(k)]

    def param_count(self) -> int:
        return int(sum(self.tensors[k].size for k in self.param_names()))

    def breakdown(self) -> "OrderedDict[str, int]":
        """Parameter count grouped by top-level module (``blocks.N`` kept apart)."""
        out: OrderedDict[str, int] = OrderedDict()
        for k in self.param_names():
            parts = k.split(".")
            key = ".".join(parts[:2]) if parts[0] == "blocks" else parts[0]
            out[key] = out.get(key, 0) + int(self.tensors[k].size)
        return out

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> ModelParams:
    rng = np.random.default_rng(seed)
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    for name, shape in registry_shapes(cfg).items():
        if name == "frontend.weights":
            v = build_filterbank(cfg.frontend, "linear").weights.copy()
        elif name.endswith("running_var") or (".norm." in name and name.endswith(".weight")):
            v = np.ones(shape)
        elif name.endswith(("running_mean", ".bias")):
            v = np.zeros(shape)
        elif name.startswith("gru."):
            bound = 1.0 / np.sqrt(cfg.hidden)
            v = rng.uniform(-bound, bound, size=shape)
        elif name == "attn.score.weight":
            v = rng.normal(0.0, 1.0 / np.sqrt(cfg.hidden), size=shape)
        else:
            fan_in = shape[-1] if len(shape) > 1 else 1
            if name.endswith("dw.weight"):
                fan_in = shape[0]
            v = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        out[name] = np.asarray(v, dtype=dtype)
    return ModelParams(cfg, out)


def random_params(cfg: ModelConfig, seed: int = 0, dtype=np.float64, scale: float = 0.5) -> ModelParams:
    """Random values for every tensor, biases and norm statistics included.

    Used by equivalence tests, where zero biases would hide indexing bugs.
    """
    rng = np.random.default_rng(seed)
    p = init_params(cfg, seed, dtype)
    for name, v in p.items():
        if name.endswith("running_var"):
            v[...] = rng.uniform(0.5, 2.0, size=v.shape)
        elif name == "frontend.weights":
            v[...] = np.abs(v + rng.normal(0.0, 0.05, size=v.shape))
        elif name.endswith(".bias") or name.endswith("running_mean"):
            v[...] = rng.normal(0.0, scale, size=v.shape)
        elif ".norm." in name:
            v[...] = rng.uniform(0.5, 1.5, size=v.shape)
    return p
