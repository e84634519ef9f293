"""Unidirectional GRU, streaming attention pooling and the classifier."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .kernels import get_backend
from .params import ModelParams


@dataclass
class GruParams:
    w_ih: np.ndarray  # (C_in, 3H), gate order r, z, n
    b_ih: np.ndarray
    w_hh: np.ndarray  # (3H, H)
    b_hh: np.ndarray

    @property
    def hidden(self) -> int:
        return self.w_hh.shape[1]


@dataclass
class AttentionParams:
    score: np.ndarray  # (H,)
    score_bias: float
    classifier: np.ndarray  # (H, K)
    classifier_bias: np.ndarray


@dataclass
class AttnAccumulator:
    """Online-softmax state: running max, weighted sum of h, denominator."""

    max_score: float
    numerator: np.ndarray  # float64 (H,)
    denominator: float

    @classmethod
    def empty(cls, hidden: int) -> "AttnAccumulator":
        return cls(-math.inf, np.zeros(hidden, dtype=np.float64), 0.0)

    @property
    def is_empty(self) -> bool:
        return self.denominator == 0.0

    def copy(self) -> "AttnAccumulator":
        return AttnAccumulator(self.max_score, self.numerator.copy(), self.denominator)


def prepare_head(p: ModelParams, dtype=np.float32) -> tuple[GruParams, AttentionParams]:
    def a(x):
        return np.ascontiguousarray(x, dtype=dtype)

    gru = GruParams(a(p["gru.weight_ih"].T), a(p["gru.bias_ih"]),
                    a(p["gru.weight_hh"]), a(p["gru.bias_hh"]))
    att = AttentionParams(a(p["attn.score.weight"]), float(p["attn.score.bias"][0]),
                          a(p["classifier.weight"].T), a(p["classifier.bias"]))
    return gru, att


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def gru_step(x_t: np.ndarray, h_prev: np.ndarray, p: GruParams) -> np.ndarray:
    """One recurrence: h_t = (1 - z) * h_prev + z * candidate."""
    x_t = np.asarray(x_t)
    h_prev = np.asarray(h_prev)
    H = p.hidden
    if x_t.shape != (p.w_ih.shape[0],) or h_prev.shape != (H,):
        raise ValueError(
            f"dimension mismatch: x {x_t.shape} vs {p.w_ih.shape[0]}, h {h_prev.shape} vs {H}"
        )
    gi = x_t @ p.w_ih + p.b_ih
    gh = p.w_hh @ h_prev + p.b_hh
    r = _sigmoid(gi[:H] + gh[:H])
    z = _sigmoid(gi[H:2 * H] + gh[H:2 * H])
    n = np.tanh(gi[2 * H:] + r * gh[2 * H:])
    return (1.0 - z) * h_prev + z * n


def gru_sequence(x: np.ndarray, h: np.ndarray, p: GruParams, backend=None) -> np.ndarray:
    """Run the recurrence over (T, C_in) frames, updating ``h`` in place."""
    k = get_backend(backend)
    xp = np.ascontiguousarray(x.astype(p.w_ih.dtype, copy=False) @ p.w_ih + p.b_ih)
    return k.gru_scan(xp, h, p.w_hh, p.b_hh)


def attend_accumulate(h_t: np.ndarray, acc: AttnAccumulator, p: AttentionParams,
                      backend=None) -> AttnAccumulator:
    """Fold one hidden vector, or a (T, H) stack, into the accumulator."""
    hs = np.atleast_2d(np.asarray(h_t, dtype=p.score.dtype))
    k = get_backend(backend)
    state = np.array([acc.max_score, acc.denominator], dtype=np.float64)
    num = acc.numerator.copy()
    k.attn_scan(np.ascontiguousarray(hs), p.score, p.score_bias, state, num)
    return AttnAccumulator(float(state[0]), num, float(state[1]))


def finalize_context(acc: AttnAccumulator) -> np.ndarray:
    """Softmax-weighted mean of all accumulated frames (non-mutating)."""
    if acc.is_empty:
        raise ValueError("attention accumulator is empty")
    return acc.numerator / acc.denominator


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def logits(context: np.ndarray, p: AttentionParams) -> np.ndarray:
    c = np.asarray(context, dtype=np.float64)
    return c @ p.classifier.astype(np.float64) + p.classifier_bias.astype(np.float64)


def classify(context: np.ndarray, p: AttentionParams) -> np.ndarray:
    return softmax(logits(context, p))
