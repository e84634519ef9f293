"""Causal depthwise-separable encoder with running-mean squeeze-excitation.

Each block computes ``relu(norm(se(pointwise(depthwise(x))))) + skip(x)``
with stride 1.  The depthwise stage only sees past frames through an
explicit left-context carry, and squeeze-excitation pools with a causal
running mean, so feeding a sequence in pieces reproduces the one-shot
output.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .kernels import get_backend
from .params import ModelParams


def relu(x):
    return np.maximum(x, 0)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class ConvBlock:
    taps: np.ndarray  # (k, C_in), last tap hits the current frame
    dw_bias: np.ndarray
    dilation: int
    pw: np.ndarray  # (C_in, C_out)
    pw_bias: np.ndarray
    se_reduce: np.ndarray  # (C_out, C_r)
    se_reduce_bias: np.ndarray
    se_expand: np.ndarray  # (C_r, C_out)
    se_expand_bias: np.ndarray
    norm_scale: np.ndarray
    norm_shift: np.ndarray
    skip: np.ndarray | None = None  # (C_in, C_out) when widths differ
    skip_bias: np.ndarray | None = None

    @property
    def context(self) -> int:
        return (self.taps.shape[0] - 1) * self.dilation

    @property
    def c_in(self) -> int:
        return self.taps.shape[1]

    @property
    def c_out(self) -> int:
        return self.pw.shape[1]


@dataclass
class Stem:
    weight: np.ndarray  # (n_filters, C0)
    bias: np.ndarray
    norm_scale: np.ndarray
    norm_shift: np.ndarray


@dataclass
class PoolState:
    count: int
    sums: np.ndarray  # float64 running channel sums


@dataclass
class BlockState:
    left_ctx: np.ndarray
    pool: PoolState


@dataclass
class EncoderState:
    blocks: list[BlockState] = field(default_factory=list)


def fold_norm(p: ModelParams, prefix: str, dtype):
    eps = p.cfg.norm_eps
    var = p[f"{prefix}.running_var"].astype(np.float64)
    scale = p[f"{prefix}.weight"] / np.sqrt(var + eps)
    shift = p[f"{prefix}.bias"] - p[f"{prefix}.running_mean"] * scale
    return scale.astype(dtype), shift.astype(dtype)


def prepare_encoder(p: ModelParams, dtype=np.float32) -> tuple[Stem, list[ConvBlock]]:
    def a(x):
        return np.ascontiguousarray(x, dtype=dtype)

    cfg = p.cfg
    stem = Stem(a(p["stem.weight"].T), a(p["stem.bias"]), *fold_norm(p, "stem.norm", dtype))
    blocks = []
    for j, d in enumerate(cfg.dilations):
        pre = f"blocks.{j}"
        has_skip = f"{pre}.skip.weight" in p.tensors
        blocks.append(ConvBlock(
            taps=a(p[f"{pre}.dw.weight"]),
            dw_bias=a(p[f"{pre}.dw.bias"]),
            dilation=int(d),
            pw=a(p[f"{pre}.pw.weight"].T),
            pw_bias=a(p[f"{pre}.pw.bias"]),
            se_reduce=a(p[f"{pre}.se.reduce.weight"].T),
            se_reduce_bias=a(p[f"{pre}.se.reduce.bias"]),
            se_expand=a(p[f"{pre}.se.expand.weight"].T),
            se_expand_bias=a(p[f"{pre}.se.expand.bias"]),
            norm_scale=fold_norm(p, f"{pre}.norm", dtype)[0],
            norm_shift=fold_norm(p, f"{pre}.norm", dtype)[1],
            skip=a(p[f"{pre}.skip.weight"].T) if has_skip else None,
            skip_bias=a(p[f"{pre}.skip.bias"]) if has_skip else None,
        ))
    return stem, blocks


def init_encoder_state(blocks: list[ConvBlock], dtype=np.float32) -> EncoderState:
    return EncoderState([
        BlockState(np.zeros((blk.context, blk.c_in), dtype=dtype),
                   PoolState(0, np.zeros(blk.c_out, dtype=np.float64)))
        for blk in blocks
    ])


def causal_dw_conv(frames: np.ndarray, block: ConvBlock, left_ctx: np.ndarray,
                   backend=None) -> tuple[np.ndarray, np.ndarray]:
    if left_ctx.shape != (block.context, block.c_in):
        raise ValueError(
            f"carry shape {left_ctx.shape} does not match block "
            f"(context {block.context}, channels {block.c_in})"
        )
    if frames.ndim != 2 or frames.shape[1] != block.c_in:
        raise ValueError(f"expected (T, {block.c_in}) frames, got {frames.shape}")
    k = get_backend(backend)
    x = np.ascontiguousarray(frames, dtype=block.taps.dtype)
    ctx = np.ascontiguousarray(left_ctx, dtype=block.taps.dtype)
    y = k.causal_depthwise(x, ctx, block.taps, block.dw_bias, block.dilation)
    if block.context:
        new_ctx = np.concatenate([ctx, x], axis=0)[-block.context:].copy()
    else:
        new_ctx = ctx
    return y, new_ctx


def squeeze_excitation(frames: np.ndarray, block: ConvBlock, pool: PoolState,
                       backend=None) -> tuple[np.ndarray, PoolState]:
    """Gate each frame by sigma(W2 relu(W1 m_t)), m_t the causal channel mean."""
    k = get_backend(backend)
    sums = pool.sums.copy()
    x = np.ascontiguousarray(frames)
    means, count = k.se_running_mean(x, pool.count, sums)
    hidden = relu(means @ block.se_reduce + block.se_reduce_bias)
    gates = sigmoid(hidden @ block.se_expand + block.se_expand_bias)
    return (x * gates).astype(x.dtype, copy=False), PoolState(int(count), sums)


def stem_forward(features: np.ndarray, stem: Stem) -> np.ndarray:
    x = features.astype(stem.weight.dtype, copy=False) @ stem.weight + stem.bias
    return relu(x * stem.norm_scale + stem.norm_shift)


def block_forward(x: np.ndarray, block: ConvBlock, state: BlockState,
                  backend=None) -> np.ndarray:
    u, state.left_ctx = causal_dw_conv(x, block, state.left_ctx, backend)
    v = u @ block.pw + block.pw_bias
    s, state.pool = squeeze_excitation(v, block, state.pool, backend)
    y = relu(s * block.norm_scale + block.norm_shift)
    if block.skip is not None:
        return y + (x @ block.skip + block.skip_bias)
    return y + x


def encoder_forward(features: np.ndarray, stem: Stem, blocks: list[ConvBlock],
                    state: EncoderState, backend=None) -> tuple[np.ndarray, EncoderState]:
    if len(state.blocks) != len(blocks):
        raise ValueError(
            f"state has {len(state.blocks)} block carries, model has {len(blocks)} blocks"
        )
    x = stem_forward(features, stem)
    for blk, st in zip(blocks, state.blocks):
        x = block_forward(x, blk, st, backend)
    return x, state
