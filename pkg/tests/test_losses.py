from __future__ import annotations

import math
from decimal import Decimal, getcontext

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from wrenkit.config import ConfigError, TrainConfig
from wrenkit.training.losses import (
    adaptive_alpha, class_weights, combined_loss, focal_from_logits, focal_loss, soft_distill_loss,
)

f64 = torch.float64


class TestFocal:
    def test_certain_label_is_zero(self):
        assert float(focal_loss(torch.tensor([0.0, 1.0, 0.0], dtype=f64), 1, 4.0)) == 0.0

    def test_gamma_zero_is_cross_entropy(self):
        p = torch.tensor([0.2, 0.5, 0.3], dtype=f64)
        assert float(focal_loss(p, 2, 0.0)) == pytest.approx(-math.log(0.3), abs=1e-15)

    def test_half_probability(self):
        v = float(focal_loss(torch.tensor([0.5, 0.5], dtype=f64), 0, 4.0))
        assert v == pytest.approx(0.0625 * math.log(2), abs=1e-12)
        assert round(v, 6) == 0.043322

    def test_class_weight_scales(self):
        p = torch.tensor([0.7, 0.3], dtype=f64)
        assert float(focal_loss(p, 1, 2.0, 1.5)) == pytest.approx(1.5 * float(focal_loss(p, 1, 2.0)))

    def test_tiny_probability_clamped(self, caplog):
        v = focal_loss(torch.tensor([1.0, 0.0], dtype=f64), 1, 0.0)
        assert math.isfinite(float(v)) and float(v) == pytest.approx(-math.log(1e-12))
        assert "clamped" in caplog.text

    def test_batched_matches_logits_path(self):
        z = torch.randn(6, 4, dtype=f64, generator=torch.Generator().manual_seed(0))
        y = torch.tensor([0, 1, 2, 3, 1, 0])
        a = focal_loss(torch.softmax(z, -1), y, 2.0)
        b = focal_from_logits(z, y, 2.0, torch.ones(6, dtype=f64))
        torch.testing.assert_close(a, b)


@settings(max_examples=200, deadline=None)
@given(p=st.floats(1e-9, 1.0), gamma=st.floats(0, 8), w=st.floats(0, 5))
def test_focal_non_negative(p, gamma, w):
    probs = torch.tensor([p, 1 - p], dtype=f64)
    assert float(focal_loss(probs, 0, gamma, w)) >= 0.0


def _kl_oracle(student, teacher, T):
    getcontext().prec = 50

    def sm(z):
        e = [(Decimal(float(v)) / Decimal(T)).exp() for v in z]
        s = sum(e)
        return [x / s for x in e]

    ps, pt = sm(student), sm(teacher)
    return float(Decimal(T) ** 2 * sum(t * (t.ln() - s.ln()) for t, s in zip(pt, ps)))


class TestDistill:
    def test_identical_logits(self):
        z = torch.tensor([[1.0, -2.0, 0.5]], dtype=f64)
        assert float(soft_distill_loss(z, z, 3.0)) == 0.0

    def test_shifted_logits(self):
        z = torch.tensor([[1.0, -2.0, 0.5]], dtype=f64)
        assert float(soft_distill_loss(z + 7.25, z, 3.0)) == pytest.approx(0.0, abs=1e-14)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_high_precision_oracle(self, seed):
        rng = np.random.default_rng(seed)
        s, t = rng.normal(0, 2, 3), rng.normal(0, 2, 3)
        got = float(soft_distill_loss(torch.tensor(s[None]), torch.tensor(t[None]), 3.0))
        assert abs(got - _kl_oracle(s, t, 3.0)) <= 1e-9


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10_000), T=st.floats(0.5, 10))
def test_distill_non_negative(seed, T):
    rng = np.random.default_rng(seed)
    s, t = torch.tensor(rng.normal(0, 5, (2, 6))), torch.tensor(rng.normal(0, 5, (2, 6)))
    assert torch.all(soft_distill_loss(s, t, T) >= 0)


class TestCombined:
    def setup_method(self):
        g = torch.Generator().manual_seed(1)
        self.logits = torch.randn(4, 3, dtype=f64, generator=g)
        self.labels = torch.tensor([0, 1, 2, 1])
        self.teacher = torch.softmax(torch.randn(4, 3, dtype=f64, generator=g), -1)

    def test_alpha_zero_is_focal(self):
        cfg = TrainConfig(alpha=0.0)
        parts = combined_loss(self.logits, self.labels, cfg, 0.0, self.teacher)
        ref = focal_from_logits(self.logits, self.labels, cfg.gamma, torch.ones(4, dtype=f64)).mean()
        assert float(parts.total) == pytest.approx(float(ref), abs=1e-15)

    def test_no_teacher_rows(self):
        cfg = TrainConfig()
        parts = combined_loss(self.logits, self.labels, cfg, 0.4, self.teacher,
                              teacher_mask=np.zeros(4, bool))
        ref = combined_loss(self.logits, self.labels, cfg, 0.4)
        assert float(parts.total) == float(ref.total)
        assert parts.distilled == 0

    def test_low_confidence_teacher_ignored(self):
        cfg = TrainConfig(teacher_threshold=0.99)
        parts = combined_loss(self.logits, self.labels, cfg, 0.4, self.teacher)
        assert parts.distilled == 0

    def test_mix_is_convex_combination(self):
        cfg = TrainConfig()
        parts = combined_loss(self.logits, self.labels, cfg, 0.4, self.teacher)
        focal = focal_from_logits(self.logits, self.labels, cfg.gamma, torch.ones(4, dtype=f64))
        soft = soft_distill_loss(self.logits, torch.log(self.teacher), cfg.temperature)
        assert float(parts.total) == pytest.approx(float((0.6 * focal + 0.4 * soft).mean()), abs=1e-14)
        assert parts.distilled == 4
        assert parts.focal == pytest.approx(float(focal.mean()))
        assert parts.soft == pytest.approx(float(soft.mean()))

    def test_empty_batch(self):
        with pytest.raises(ValueError, match="empty batch"):
            combined_loss(torch.zeros(0, 3), torch.zeros(0), TrainConfig(), 0.4)


class TestAdaptiveAlpha:
    def test_fixed_point(self):
        cfg, a = TrainConfig(), 0.0
        for _ in range(500):
            a = adaptive_alpha(1.0, a, cfg)
        assert a == pytest.approx(0.4, abs=1e-12)

    def test_geometric_decay(self):
        cfg, a = TrainConfig(), 0.4
        for k in range(1, 6):
            a = adaptive_alpha(0.0, a, cfg)
            assert a == pytest.approx(0.4 * 0.9 ** k, rel=1e-12)

    def test_one_step(self):
        assert adaptive_alpha(0.5, 0.4, TrainConfig()) == pytest.approx(0.38, abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(conf=st.floats(0, 1), a=st.floats(0, 0.4))
def test_alpha_bounded(conf, a):
    out = adaptive_alpha(conf, a, TrainConfig())
    assert 0.0 <= out <= 0.4


class TestClassWeights:
    def test_balanced(self):
        np.testing.assert_allclose(class_weights([0, 1, 2] * 5), 1.0)

    def test_imbalanced(self):
        w = class_weights([0] * 75 + [1] * 25)
        np.testing.assert_allclose(w, [0.5, 1.5])
        raw = 100 / (2 * np.array([75, 25]))
        np.testing.assert_allclose(raw, [2 / 3, 2.0])

    def test_single_class(self):
        with pytest.raises(ValueError):
            class_weights([1, 1, 1])

    def test_empty_class(self):
        with pytest.raises(ValueError, match="empty class"):
            class_weights([0, 2, 2], n_classes=3)


@pytest.mark.parametrize("kw", [{"alpha": 1.2}, {"alpha": -0.1}, {"temperature": 0.0},
                                {"gamma": -1.0}, {"epochs": -1}, {"refine_epochs": -2},
                                {"batch_size": 0}, {"filter_search": "grid"}])
def test_train_config_validation(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)
