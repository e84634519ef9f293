"""Synthetic audio fixtures: band-separated tone/chirp classes and burst files."""

from __future__ import annotations

import numpy as np

from .training.trainer import ClipSet

# Class bands in Hz for the three-class toy task.
TOY_BANDS = ((400.0, 1200.0), (2500.0, 4500.0), (9000.0, 13000.0))
# Classes that differ only above 8 kHz; all share the same low-band clutter.
HIGH_BANDS = ((8500.0, 9500.0), (10500.0, 11500.0), (12500.0, 13500.0))


def _event(rng, sr, n, f_lo, f_hi, amp):
    dur = int(rng.uniform(0.1, 0.4) * sr)
    dur = min(dur, n)
    t = np.arange(dur) / sr
    f0, f1 = rng.uniform(f_lo, f_hi, size=2)
    if rng.random() < 0.5:
        f1 = f0  # pure tone, otherwise a linear chirp
    phase = 2 * np.pi * (f0 * t + 0.5 * (f1 - f0) / max(t[-1], 1e-9) * t**2)
    env = np.hanning(dur)
    start = rng.integers(0, n - dur + 1)
    out = np.zeros(n)
    out[start:start + dur] = amp * env * np.sin(phase)
    return out


def band_clip(rng, band, sr=32000, duration=1.0, n_events=(1, 3), noise=0.003,
              clutter_band=None) -> np.ndarray:
    n = int(sr * duration)
    x = rng.normal(0.0, noise, size=n)
    for _ in range(rng.integers(n_events[0], n_events[1] + 1)):
        x += _event(rng, sr, n, band[0], band[1], rng.uniform(0.05, 0.3))
    if clutter_band is not None:
        for _ in range(rng.integers(1, 4)):
            x += _event(rng, sr, n, clutter_band[0], clutter_band[1], rng.uniform(0.05, 0.3))
    return x.astype(np.float32)


def make_band_dataset(n_clips=300, bands=TOY_BANDS, sr=32000, duration=1.0, seed=0,
                      clutter_band=None) -> ClipSet:
    rng = np.random.default_rng(seed)
    labels = np.arange(n_clips) % len(bands)
    rng.shuffle(labels)
    audio = np.stack([band_clip(rng, bands[c], sr, duration, clutter_band=clutter_band)
                      for c in labels])
    return ClipSet(audio, labels.astype(np.int64))


def toy_dataset(n_clips=300, seed=0, duration=1.0) -> ClipSet:
    return make_band_dataset(n_clips, TOY_BANDS, seed=seed, duration=duration)


def highband_dataset(n_clips=300, seed=0, duration=1.0) -> ClipSet:
    return make_band_dataset(n_clips, HIGH_BANDS, seed=seed, duration=duration,
                             clutter_band=(300.0, 7000.0))


def split(data: ClipSet, val_frac=0.2, seed=0) -> tuple[ClipSet, ClipSet]:
    rng = np.random.default_rng(seed)
    idx = rng.permutation(len(data))
    n_val = int(round(len(data) * val_frac))
    return data.subset(np.sort(idx[n_val:])), data.subset(np.sort(idx[:n_val]))


def burst_recording(offsets_s, sr=32000, duration=10.0, burst_s=0.15, freq=4000.0,
                    amp=0.5, noise=0.002, seed=0) -> np.ndarray:
    """Low-level noise with tone bursts centred on ``offsets_s``."""
    rng = np.random.default_rng(seed)
    n = int(sr * duration)
    x = rng.normal(0.0, noise, size=n)
    m = int(burst_s * sr)
    t = np.arange(m) / sr
    burst = amp * np.hanning(m) * np.sin(2 * np.pi * freq * t)
    for o in offsets_s:
        s = int(round(o * sr)) - m // 2
        x[s:s + m] += burst
    return x
