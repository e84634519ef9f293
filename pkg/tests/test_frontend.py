from __future__ import annotations

from decimal import Decimal, getcontext

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from wrenkit.config import ConfigError, FilterbankParams
from wrenkit.frontend import (
    LOG_EPS, build_filterbank, center_frequencies, compute_bin_indices, dump_filterbank,
    frame_count, frame_signal, frontend_forward, grid, hann_window, sigmoid_weight,
    stable_sigmoid, triangles_from_centers, warp_combined, warp_linear, warp_log,
)
from wrenkit.training.torch_model import torch_centers, torch_triangles

P = FilterbankParams()

bs = st.floats(150.0, 16000.0)
ws = st.floats(0.0, 1e6)


def hp_sigmoid(z: float) -> float:
    getcontext().prec = 50
    return float(1 / (1 + Decimal(-z).exp()))


class TestWarps:
    def test_log_endpoints_and_midpoint(self):
        assert warp_log(0.0, P) == 150.0
        assert warp_log(1.0, P) == 16000.0
        getcontext().prec = 40
        mid = float((Decimal(150) * Decimal(16000)).sqrt())
        assert warp_log(0.5, P) == pytest.approx(mid, rel=1e-14)
        assert mid == pytest.approx(1549.19, abs=0.01)

    def test_linear_values(self):
        assert warp_linear(0.0, P) == 150.0
        assert warp_linear(1.0, P) == 16000.0
        assert warp_linear(0.5, P) == 8075.0

    @pytest.mark.parametrize("fn", [warp_log, warp_linear, warp_combined, sigmoid_weight])
    @pytest.mark.parametrize("x", [-1e-9, 1.0 + 1e-9, np.nan])
    def test_domain_errors(self, fn, x):
        with pytest.raises(ValueError):
            fn(x, P)

    def test_sigmoid_at_breakpoint_is_half(self):
        xb = (P.b - P.f_min) / (P.f_max - P.f_min)
        assert sigmoid_weight(xb, P) == 0.5

    def test_sigmoid_zero_width(self):
        p = FilterbankParams(w=0.0)
        np.testing.assert_array_equal(sigmoid_weight(grid(11), p), 0.5)

    def test_sigmoid_saturation_matches_high_precision(self):
        z = (1.0 - (8000 - 150) / (16000 - 150)) * 200
        assert z == pytest.approx(100.9463, abs=1e-3)
        assert abs(sigmoid_weight(1.0, P) - hp_sigmoid(z)) < 1e-12
        assert abs(sigmoid_weight(1.0, P) - 1.0) < 1e-12

    def test_stable_sigmoid_never_nan(self):
        z = np.array([-1e12, -745.0, -50.0, 0.0, 50.0, 745.0, 1e12])
        out = stable_sigmoid(z)
        assert np.all(np.isfinite(out))
        assert out[0] == 0.0 and out[-1] == 1.0

    def test_uniform_blend_value(self):
        p = FilterbankParams(w=0.0)
        assert warp_combined(0.5, p) == pytest.approx((np.sqrt(150 * 16000) + 8075) / 2, rel=1e-12)
        assert warp_combined(0.5, p) == pytest.approx(4812.10, abs=0.01)

    def test_hard_switch(self):
        p = FilterbankParams(b=4000.0, w=1e6)
        x = np.linspace(0, 1, 1001)
        xb = (p.b - p.f_min) / (p.f_max - p.f_min)
        f = warp_combined(x, p)
        lo = warp_linear(x, p) < 4000.0
        away = np.abs(x - xb) > 1e-4
        np.testing.assert_allclose(f[lo & away], warp_log(x, p)[lo & away], rtol=1e-6)
        np.testing.assert_allclose(f[~lo & away], warp_linear(x, p)[~lo & away], rtol=1e-6)


@settings(max_examples=200, deadline=None)
@given(b=bs, w=ws)
def test_endpoint_invariance(b, w):
    p = FilterbankParams(b=b, w=w)
    assert warp_combined(0.0, p) == 150.0
    assert warp_combined(1.0, p) == 16000.0


@settings(max_examples=200, deadline=None)
@given(b=bs, w=ws)
def test_combined_between_components_and_monotone(b, w):
    p = FilterbankParams(b=b, w=w)
    x = grid(100)
    f = warp_combined(x, p)
    lo = np.minimum(warp_log(x, p), warp_linear(x, p))
    hi = np.maximum(warp_log(x, p), warp_linear(x, p))
    assert np.all(f >= lo * (1 - 1e-12)) and np.all(f <= hi * (1 + 1e-12))
    assert np.all(np.diff(f) > 0)


@settings(max_examples=300, deadline=None)
@given(b=bs, w=ws)
def test_bin_indices_monotone_and_bounded(b, w):
    idx = compute_bin_indices(FilterbankParams(b=b, w=w))
    assert np.all(np.diff(idx) >= 0)
    assert idx.min() >= 1 and idx.max() <= 254


class TestBins:
    def test_endpoint_bins(self):
        idx = compute_bin_indices(P)
        assert idx[0] == 2  # floor(150 / 16000 * 256) = floor(2.4)
        assert idx[-1] == 254  # 256 clipped

    def test_lower_clip(self):
        p = FilterbankParams(f_min=20.0, b=8000.0, n=64)
        assert compute_bin_indices(p)[0] == 1

    def test_dump_format(self):
        text = dump_filterbank(FilterbankParams(n=4))
        lines = text.strip().split("\n")
        assert lines[0].startswith("# b=8000.000000 w=200.000000")
        assert lines[1] == "i\tx\tcenter_hz\tbin"
        assert len(lines) == 6
        assert lines[2].split("\t") == ["0", "0.000000", "150.000000", "2"]


def naive_filterbank(centers, p, sub=1000):
    """Midpoint-rule average of each unit triangle over every FFT bin."""
    df = p.sr / p.n_fft
    n_bins = p.n_fft // 2 + 1
    out = np.zeros((len(centers), n_bins))
    offs = (np.arange(sub) + 0.5) / sub * df - df / 2
    for i, c in enumerate(centers):
        left = centers[i - 1] if i > 0 else c
        right = centers[i + 1] if i < len(centers) - 1 else c
        for k in range(n_bins):
            f = k * df + offs
            if f[-1] < left or f[0] > right:
                continue
            tri = np.zeros_like(f)
            if c > left:
                m = (f >= left) & (f <= c)
                tri[m] = (f[m] - left) / (c - left)
            if right > c:
                m = (f >= c) & (f <= right)
                tri[m] = np.maximum(tri[m], (right - f[m]) / (right - c))
            out[i, k] = tri.mean()
    return out


class TestFilterbank:
    def test_matches_naive_reimplementation(self):
        fb = build_filterbank(P)
        ref = naive_filterbank(center_frequencies(P), P)
        np.testing.assert_allclose(fb.weights, ref, atol=1e-6)

    def test_rows_positive_and_unimodal_with_support(self):
        fb = build_filterbank(P)
        w = fb.weights
        assert np.all(w.sum(axis=1) > 0)
        c = fb.center_freqs
        df = P.sr / P.n_fft
        f = np.arange(w.shape[1]) * df
        for i in range(P.n):
            row = w[i]
            peak = int(np.argmax(row))
            assert np.all(np.diff(row[:peak + 1]) >= -1e-15)
            assert np.all(np.diff(row[peak:]) <= 1e-15)
            left = c[i - 1] if i else c[0]
            right = c[i + 1] if i < P.n - 1 else c[-1]
            outside = (f + df / 2 < left) | (f - df / 2 > right)
            assert np.all(row[outside] == 0.0)

    def test_every_bin_between_outer_centres_covered(self):
        fb = build_filterbank(P)
        df = P.sr / P.n_fft
        f = np.arange(P.n_bins) * df
        inside = (f >= fb.center_freqs[0]) & (f <= fb.center_freqs[-1])
        assert np.all(fb.weights[:, inside].sum(axis=0) > 0)

    def test_two_filters_cover_range(self):
        p = FilterbankParams(n=2)
        fb = build_filterbank(p)
        np.testing.assert_array_equal(fb.center_freqs, [150.0, 16000.0])
        df = p.sr / p.n_fft
        f = np.arange(p.n_bins) * df
        inside = (f - df / 2 >= 150) & (f + df / 2 <= 16000)
        np.testing.assert_allclose(fb.weights[:, inside].sum(axis=0), 1.0, atol=1e-12)

    def test_zero_width_ignores_breakpoint(self):
        a = build_filterbank(FilterbankParams(b=1000.0, w=0.0)).weights
        b = build_filterbank(FilterbankParams(b=12000.0, w=0.0)).weights
        np.testing.assert_array_equal(a, b)

    def test_coincident_centres_rejected(self):
        c = np.array([150.0, 400.0, 400.0, 16000.0])
        with pytest.raises(ConfigError, match="coincide"):
            triangles_from_centers(c, FilterbankParams(n=4))

    def test_matrix_is_read_only(self):
        fb = build_filterbank(P)
        with pytest.raises(ValueError):
            fb.weights[0, 0] = 1.0

    @pytest.mark.parametrize("mode", ["mel", "linear", "full"])
    def test_reference_banks(self, mode):
        fb = build_filterbank(P, mode)
        assert fb.weights.shape == (64, 257)
        assert np.all(np.diff(fb.center_freqs) > 0)
        assert fb.center_freqs[0] == 150.0 and fb.center_freqs[-1] == 16000.0

    def test_torch_geometry_matches_numpy(self):
        for b, w in [(8000.0, 200.0), (3000.0, 5.0), (12000.0, 0.5)]:
            p = FilterbankParams(b=b, w=w)
            c = torch_centers(torch.tensor(b, dtype=torch.float64), torch.tensor(w, dtype=torch.float64), p)
            np.testing.assert_allclose(c.numpy(), center_frequencies(p), rtol=1e-13)
            np.testing.assert_allclose(torch_triangles(c, p).numpy(), build_filterbank(p).weights,
                                       atol=1e-12)


class TestForward:
    def test_zero_frame(self):
        out = frontend_forward(np.zeros(512), build_filterbank(P))
        np.testing.assert_allclose(out, np.log(LOG_EPS))

    def test_wrong_length(self):
        with pytest.raises(ValueError, match="512"):
            frontend_forward(np.zeros(500), build_filterbank(P))

    def test_scaling_adds_log4(self):
        rng = np.random.default_rng(0)
        x = rng.normal(0, 1, 512)
        fb = build_filterbank(P)
        d = frontend_forward(2 * x, fb) - frontend_forward(x, fb)
        np.testing.assert_allclose(d, np.log(4.0), atol=1e-4)

    def test_sinusoid_peaks_in_its_filter(self):
        fb = build_filterbank(P)
        t = np.arange(512) / P.sr
        # filters wider than a few bins, where the triangle shape is resolved
        spacing = np.diff(fb.center_freqs)
        wide = [i for i in range(1, P.n - 1) if min(spacing[i - 1], spacing[i]) > 3 * P.sr / P.n_fft]
        assert len(wide) > 10
        for i in wide:
            out = frontend_forward(np.sin(2 * np.pi * fb.center_freqs[i] * t), fb)
            assert int(np.argmax(out)) == i

    def test_finite_for_large_inputs(self):
        out = frontend_forward(np.full(512, 1e6), build_filterbank(P))
        assert np.all(np.isfinite(out))

    def test_hann_is_periodic(self):
        w = hann_window(512, np.float64)
        assert w[0] == 0.0 and w[256] == pytest.approx(1.0)
        np.testing.assert_allclose(w[1:], w[1:][::-1], atol=1e-15)


class TestFraming:
    def test_three_second_frame_count(self):
        assert frame_count(96000, 512, 320) == 299
        assert frame_count(511, 512, 320) == 0
        assert frame_count(512, 512, 320) == 1

    def test_frames_are_causal_windows(self):
        x = np.arange(2000, dtype=np.float64)
        f = frame_signal(x, 512, 320)
        assert f.shape == (frame_count(2000, 512, 320), 512)
        for t in range(f.shape[0]):
            np.testing.assert_array_equal(f[t], x[t * 320:t * 320 + 512])


def test_frontend_gradients_match_finite_differences():
    """d(log energies)/d(b, w) through the continuous geometry, float64."""
    rng = np.random.default_rng(3)
    frames = torch.tensor(rng.normal(0, 1, (4, 512)))
    spec = torch.fft.rfft(frames * torch.hann_window(512, periodic=True, dtype=torch.float64))
    power = spec.real ** 2 + spec.imag ** 2
    p = FilterbankParams(b=5000.0, w=30.0)

    def feats(b, w):
        c = torch_centers(b, w, p)
        return torch.log(power @ torch_triangles(c, p).T + LOG_EPS)

    b = torch.tensor(p.b, dtype=torch.float64, requires_grad=True)
    w = torch.tensor(p.w, dtype=torch.float64, requires_grad=True)
    proj = torch.tensor(rng.normal(0, 1, (4, 64)))
    (feats(b, w) * proj).sum().backward()
    for var, scale, g in ((b, 1000.0, b.grad), (w, 100.0, w.grad)):
        h = 1e-3 * scale * 1e-3
        with torch.no_grad():
            base = var.item()
            var.fill_(base + h)
            up = float((feats(b, w) * proj).sum())
            var.fill_(base - h)
            down = float((feats(b, w) * proj).sum())
            var.fill_(base)
        fd = (up - down) / (2 * h)
        assert abs(fd - float(g)) <= 1e-4 * max(abs(fd), abs(float(g)), 1e-8)
