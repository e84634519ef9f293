"""Sigmoid-blended log/linear frequency warping and triangular filterbanks.

The learnable mapping blends a logarithmic and a linear frequency axis with
a sigmoid centred on the breakpoint ``b``; ``w`` sets how sharp the blend
is.  Filter centres are the warped values of an evenly spaced normalized
grid, and each triangle reaches its neighbours' centres.

Triangle gains are averaged over each FFT bin's frequency interval rather
than sampled at the bin centre.  This keeps the matrix differentiable in
the centre frequencies and guarantees that filters narrower than one bin
still collect energy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ConfigError, FilterbankParams

LOG_EPS = 1e-6


def _check_unit(x):
    x = np.asarray(x, dtype=np.float64)
    if np.any(x < 0.0) or np.any(x > 1.0) or np.any(np.isnan(x)):
        raise ValueError("normalized coordinate must lie in [0, 1]")
    return x


def warp_log(x, p: FilterbankParams):
    x = _check_unit(x)
    # f_min**(1-x) * f_max**x is exact at both endpoints
    return p.f_min ** (1.0 - x) * p.f_max ** x


def warp_linear(x, p: FilterbankParams):
    x = _check_unit(x)
    return (1.0 - x) * p.f_min + x * p.f_max


def stable_sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def breakpoint_coordinate(p: FilterbankParams) -> float:
    return (p.b - p.f_min) / (p.f_max - p.f_min)


def sigmoid_weight(x, p: FilterbankParams):
    x = _check_unit(x)
    return stable_sigmoid((x - breakpoint_coordinate(p)) * p.w)


def warp_combined(x, p: FilterbankParams):
    x = _check_unit(x)
    f_log = warp_log(x, p)
    f_lin = warp_linear(x, p)
    s = sigmoid_weight(x, p)
    # written as a correction to f_log so equal endpoints stay exact
    return f_log + s * (f_lin - f_log)


def grid(n: int) -> np.ndarray:
    return np.arange(n, dtype=np.float64) / (n - 1)


def center_frequencies(p: FilterbankParams) -> np.ndarray:
    return warp_combined(grid(p.n), p)


def compute_bin_indices(p: FilterbankParams) -> np.ndarray:
    f = center_frequencies(p)
    nyquist = p.sr / 2.0
    half = p.n_fft // 2
    idx = np.floor(f / nyquist * half).astype(np.int64)
    return np.clip(idx, 1, half - 2)


def mel_centers(p: FilterbankParams) -> np.ndarray:
    """HTK mel-spaced centres between f_min and f_max."""
    lo = 2595.0 * np.log10(1.0 + p.f_min / 700.0)
    hi = 2595.0 * np.log10(1.0 + p.f_max / 700.0)
    mel = lo + grid(p.n) * (hi - lo)
    c = 700.0 * (10.0 ** (mel / 2595.0) - 1.0)
    c[0], c[-1] = p.f_min, p.f_max
    return c


def linear_centers(p: FilterbankParams) -> np.ndarray:
    return warp_linear(grid(p.n), p)


def bin_edges(p: FilterbankParams) -> tuple[np.ndarray, np.ndarray]:
    """Lower and upper frequency edge (Hz) of every rfft bin."""
    df = p.sr / p.n_fft
    f = np.arange(p.n_bins, dtype=np.float64) * df
    return f - df / 2.0, f + df / 2.0


def triangle_cdf(f, left, center, right):
    """Integral of a unit-height triangle from -inf to ``f``.

    ``left == center`` or ``center == right`` give half triangles; both
    only occur at the outermost filters.
    """
    rise = center - left
    fall = right - center
    fr = np.clip(f, left, center)
    ff = np.clip(f, center, right)
    safe_rise = np.where(rise > 0, rise, 1.0)
    safe_fall = np.where(fall > 0, fall, 1.0)
    a = np.where(rise > 0, (fr - left) ** 2 / (2.0 * safe_rise), 0.0)
    b = np.where(fall > 0, (fall**2 - (right - ff) ** 2) / (2.0 * safe_fall), 0.0)
    return a + b


def triangles_from_centers(centers: np.ndarray, p: FilterbankParams) -> np.ndarray:
    c = np.asarray(centers, dtype=np.float64)
    gaps = np.diff(c)
    if np.any(gaps <= 0.0):
        i = int(np.argmin(gaps))
        raise ConfigError(
            f"degenerate filterbank: centres {i} and {i + 1} coincide "
            f"({c[i]:.6g} Hz, {c[i + 1]:.6g} Hz); b={p.b} w={p.w}"
        )
    left = np.concatenate([[c[0]], c[:-1]])[:, None]
    right = np.concatenate([c[1:], [c[-1]]])[:, None]
    center = c[:, None]
    lo, hi = bin_edges(p)
    df = p.sr / p.n_fft
    w = (triangle_cdf(hi[None, :], left, center, right)
         - triangle_cdf(lo[None, :], left, center, right)) / df
    return np.maximum(w, 0.0)


@dataclass(frozen=True)
class FilterbankMatrix:
    weights: np.ndarray  # (n, n_fft // 2 + 1)
    center_freqs: np.ndarray  # (n,)

    def __post_init__(self):
        self.weights.setflags(write=False)
        self.center_freqs.setflags(write=False)


def build_filterbank(p: FilterbankParams, mode: str = "semi") -> FilterbankMatrix:
    if mode == "semi":
        c = center_frequencies(p)
    elif mode == "mel":
        c = mel_centers(p)
    elif mode in ("linear", "full"):
        c = linear_centers(p)
    else:
        raise ConfigError(f"unknown filterbank mode {mode!r}")
    return FilterbankMatrix(triangles_from_centers(c, p), c)


def hann_window(n_fft: int, dtype=np.float32) -> np.ndarray:
    """Periodic Hann window."""
    k = np.arange(n_fft, dtype=np.float64)
    return (0.5 - 0.5 * np.cos(2.0 * np.pi * k / n_fft)).astype(dtype)


def power_spectrum(frames: np.ndarray, window: np.ndarray) -> np.ndarray:
    spec = np.fft.rfft(frames * window, axis=-1)
    return spec.real**2 + spec.imag**2


def frontend_frames(frames: np.ndarray, weights: np.ndarray,
                    window: np.ndarray | None = None) -> np.ndarray:
    """Log filterbank energies for a (T, n_fft) stack of frames."""
    frames = np.asarray(frames)
    n_fft = weights.shape[1] * 2 - 2
    if frames.ndim != 2 or frames.shape[1] != n_fft:
        raise ValueError(f"expected frames of {n_fft} samples, got shape {frames.shape}")
    if window is None:
        window = hann_window(n_fft, frames.dtype)
    power = power_spectrum(frames, window).astype(weights.dtype, copy=False)
    return np.log(power @ weights.T + LOG_EPS)


def frontend_forward(samples: np.ndarray, fb: FilterbankMatrix) -> np.ndarray:
    samples = np.asarray(samples, dtype=np.float64)
    n_fft = fb.weights.shape[1] * 2 - 2
    if samples.shape != (n_fft,):
        raise ValueError(f"frame must hold exactly {n_fft} samples, got {samples.shape}")
    return frontend_frames(samples[None, :], fb.weights)[0]


def frame_count(n_samples: int, n_fft: int, hop: int) -> int:
    if n_samples < n_fft:
        return 0
    return (n_samples - n_fft) // hop + 1


def frame_signal(audio: np.ndarray, n_fft: int, hop: int) -> np.ndarray:
    """Causal framing: frame t covers samples [t*hop, t*hop + n_fft)."""
    t = frame_count(len(audio), n_fft, hop)
    if t == 0:
        return np.zeros((0, n_fft), dtype=audio.dtype)
    view = np.lib.stride_tricks.sliding_window_view(audio, n_fft)[::hop]
    return view[:t]


def dump_filterbank(p: FilterbankParams) -> str:
    """Tab-separated (i, x_i, centre Hz, integer bin) table."""
    x = grid(p.n)
    c = center_frequencies(p)
    bins = compute_bin_indices(p)
    lines = [f"# b={p.b:.6f} w={p.w:.6f} f_min={p.f_min} f_max={p.f_max} "
             f"n={p.n} n_fft={p.n_fft} sr={p.sr}",
             "i\tx\tcenter_hz\tbin"]
    for i in range(p.n):
        lines.append(f"{i}\t{x[i]:.6f}\t{c[i]:.6f}\t{bins[i]}")
    return "\n".join(lines) + "\n"
