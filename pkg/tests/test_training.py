from __future__ import annotations

import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from wrenkit.config import PRESETS, ModelConfig, TrainConfig
from wrenkit.params import random_params
from wrenkit.synthetic import split, toy_dataset
from wrenkit.training.gradcheck import run_suite, tiny_config, worst
from wrenkit.training.torch_model import WrenModel
from wrenkit.training.trainer import (
    ClipSet, Trainer, backward, collect_tape, cosine_factor, phase_of,
)

TOY = PRESETS["toy"]


def quick_cfg(**kw) -> TrainConfig:
    base = dict(epochs=8, joint_epochs=1, network_epochs=2, filter_epochs=1, refine_epochs=1,
                patience=0, batch_size=12, seed=0)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def tiny_data():
    data = toy_dataset(36, seed=5, duration=0.25)
    return split(data, 0.25, seed=0)


class TestSchedule:
    def test_default_phases(self):
        cfg = TrainConfig()
        phases = [phase_of(e, cfg) for e in range(cfg.epochs)]
        assert phases[:5] == ["joint"] * 5
        assert phases[5:11] == ["network"] * 5 + ["filter"]
        assert phases[-20:] == ["refine"] * 20
        assert phases.count("filter") == (150 - 5 - 20) // 6

    def test_zero_cycle_is_joint(self):
        cfg = TrainConfig(epochs=10, network_epochs=0, filter_epochs=0, refine_epochs=0)
        assert {phase_of(e, cfg) for e in range(10)} == {"joint"}

    def test_cosine_endpoint(self):
        assert cosine_factor(0, 150) == 1.0
        assert cosine_factor(149, 150) <= 1e-2
        vals = [cosine_factor(e, 150) for e in range(150)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))


class TestPhaseExclusivity:
    def test_updated_groups_match_phase(self, tiny_data):
        train, val = tiny_data
        cfg = quick_cfg(perturb_every=0)
        tr = Trainer(TOY, cfg, audit=True)
        tr.fit(train, val)
        assert len(tr.audit_log) == len(tr.step_log) > 0
        for allowed, changed in zip(tr.step_log, tr.audit_log):
            assert changed == allowed
        assert {"filter"} in tr.step_log and {"network"} in tr.step_log

    def test_zero_cycle_updates_everything(self, tiny_data):
        train, val = tiny_data
        cfg = quick_cfg(epochs=2, network_epochs=0, filter_epochs=0, refine_epochs=0)
        tr = Trainer(TOY, cfg, audit=True)
        tr.fit(train, val)
        assert all(c == {"network", "filter"} for c in tr.audit_log)

    def test_fixed_frontend_never_updates_filter(self, tiny_data):
        train, val = tiny_data
        tr = Trainer(ModelConfig(width=0.5, hidden=32, n_classes=3, frontend_mode="mel"),
                     quick_cfg(epochs=4), audit=True)
        tr.fit(train, val)
        assert all(c <= {"network"} for c in tr.audit_log)


class TestFit:
    def test_deterministic(self, tiny_data):
        train, val = tiny_data

        def run():
            tr = Trainer(TOY, quick_cfg(epochs=4))
            log = tr.fit(train, val)
            return [r["loss"] for r in log.records], [r["b"] for r in log.records]

        assert run() == run()

    def test_patience(self, tiny_data):
        train, val = tiny_data
        cfg = quick_cfg(epochs=30, lr=0.0, perturb_every=0, patience=3, grad_noise=0.0)
        log = Trainer(TOY, cfg).fit(train, val)
        assert log.stopped_early
        assert len(log.records) == log.best_epoch + 1 + 3

    def test_no_early_stop_before_patience(self, tiny_data):
        train, val = tiny_data
        cfg = quick_cfg(epochs=6, lr=0.0, perturb_every=0, patience=35)
        log = Trainer(TOY, cfg).fit(train, val)
        assert not log.stopped_early and len(log.records) == 6

    def test_log_records_and_file(self, tiny_data, tmp_path):
        train, val = tiny_data
        path = tmp_path / "train.jsonl"
        log = Trainer(TOY, quick_cfg(epochs=3), log_path=path).fit(train, val)
        lines = [json.loads(s) for s in path.read_text().splitlines()]
        assert len(lines) == 3
        for k in ("epoch", "phase", "loss", "focal", "soft", "val_acc", "b", "w", "lr"):
            assert k in lines[0]
        assert log.records[-1]["lr"] <= log.records[0]["lr"]

    def test_final_lr_small(self, tiny_data):
        train, val = tiny_data
        log = Trainer(TOY, quick_cfg(epochs=5)).fit(train, val)
        assert log.records[-1]["lr"] <= 1e-2 * 1e-3

    def test_needs_two_classes(self, tiny_data):
        train, val = tiny_data
        one = ClipSet(train.audio[:4], np.zeros(4, np.int64))
        with pytest.raises(ValueError, match="two classes"):
            Trainer(TOY, quick_cfg()).fit(one, val)

    def test_empty_training_set(self, tiny_data):
        _, val = tiny_data
        with pytest.raises(ValueError, match="empty"):
            Trainer(TOY, quick_cfg()).fit(ClipSet(np.zeros((0, 8000), np.float32),
                                                  np.zeros(0, np.int64)), val)

    def test_filter_reject_restores(self, tiny_data):
        train, val = tiny_data
        cfg = quick_cfg(epochs=4, joint_epochs=1, network_epochs=1, filter_epochs=1,
                        refine_epochs=0, lr_mult_b=500.0, perturb_every=0)
        tr = Trainer(TOY, cfg)
        # scripted validation: the filter epoch drops accuracy by half
        scores = iter([1.0, 1.0, 0.5, 1.0, 1.0])
        tr.accuracy = lambda data: next(scores)
        log = tr.fit(train, val)
        filt = log.records[2]
        assert filt["phase"] == "filter" and filt["filter_restored"]
        assert filt["b"] == log.records[1]["b"] and filt["w"] == log.records[1]["w"]

    def test_small_drop_keeps_filter(self, tiny_data):
        train, val = tiny_data
        cfg = quick_cfg(epochs=4, joint_epochs=1, network_epochs=1, filter_epochs=1,
                        refine_epochs=0, lr_mult_b=500.0, perturb_every=0)
        tr = Trainer(TOY, cfg)
        scores = iter([1.0, 1.0, 0.95, 1.0])
        tr.accuracy = lambda data: next(scores)
        log = tr.fit(train, val)
        assert not log.records[2]["filter_restored"]
        assert log.records[2]["b"] != log.records[1]["b"]

    def test_bound_search_stays_within_range(self, tiny_data):
        train, val = tiny_data
        cfg = quick_cfg(epochs=4, joint_epochs=1, network_epochs=1, filter_epochs=1,
                        refine_epochs=0, lr_mult_b=5000.0, lr_mult_w=5000.0, perturb_every=0,
                        filter_search="bound")
        log = Trainer(TOY, cfg).fit(train, val)
        b0, w0 = log.records[1]["b"], log.records[1]["w"]
        b1, w1 = log.records[2]["b"], log.records[2]["w"]
        assert abs(b1 - b0) <= 0.1 * b0 + 1e-3
        assert abs(w1 - w0) <= 0.1 * w0 + 1e-3

    def test_exported_params_carry_breakpoint(self, tiny_data):
        train, val = tiny_data
        tr = Trainer(TOY, quick_cfg(epochs=3))
        tr.fit(train, val)
        p = tr.export()
        assert p.cfg.frontend.b == pytest.approx(float(tr.model.b_hz.detach()))
        assert p.cfg.frontend.w == pytest.approx(float(tr.model.w.detach()))


def _tiny_model(seed=0, n_filters=8):
    cfg = tiny_config(np.random.default_rng(seed), n_filters, 3)
    m = WrenModel(cfg, random_params(cfg, seed, np.float64, 0.3), dtype=torch.float64)
    return cfg, m


def _audio(cfg, batch, frames=5, seed=0):
    n = cfg.frontend.n_fft + (frames - 1) * cfg.frontend.hop
    return np.random.default_rng(seed).normal(0, 0.2, (batch, n))


class TestBackward:
    def test_tape_shapes_match_registry(self):
        cfg, m = _tiny_model()
        tape, loss = backward(m, _audio(cfg, 3), [0, 1, 2], TrainConfig())
        names = dict(m.named_registry_parameters())
        assert set(tape.grads) == set(names)
        for k, g in tape.grads.items():
            assert g.shape == tuple(names[k].shape)
        assert tape.all_finite() and loss > 0
        assert tape.d_b != 0.0 and tape.d_w != 0.0

    def test_zero_loss_zero_gradients(self):
        cfg, m = _tiny_model(1)
        with torch.no_grad():
            m.p("classifier.weight").zero_()
            m.p("classifier.bias").copy_(torch.tensor([1e3, 0.0, 0.0]))
        tape, loss = backward(m, _audio(cfg, 4), [0] * 4, TrainConfig(alpha=0.0, gamma=50.0))
        assert loss == 0.0
        assert all(not np.any(g) for g in tape.grads.values())
        assert tape.d_b == 0.0 and tape.d_w == 0.0

    def test_duplicate_batch_keeps_mean_gradient(self):
        cfg, m = _tiny_model(2)
        m.eval()
        x = _audio(cfg, 3, seed=4)
        y = [0, 2, 1]
        t1, l1 = backward(m, x, y, TrainConfig())
        t2, l2 = backward(m, np.concatenate([x, x]), y + y, TrainConfig())
        assert l2 == pytest.approx(l1, rel=1e-12)
        for k in t1.grads:
            np.testing.assert_allclose(t2.grads[k], t1.grads[k], rtol=1e-6, atol=1e-14)

    def test_doubling_loss_doubles_gradients(self):
        from wrenkit.training.losses import combined_loss

        cfg, m = _tiny_model(3)
        m.eval()
        x = torch.tensor(_audio(cfg, 3, seed=5))
        y = torch.tensor([0, 1, 2])
        m.zero_grad()
        combined_loss(m(x), y, TrainConfig(), 0.4).total.backward()
        once = collect_tape(m)
        m.zero_grad()
        (2 * combined_loss(m(x), y, TrainConfig(), 0.4).total).backward()
        twice = collect_tape(m)
        for k in once.grads:
            np.testing.assert_allclose(twice.grads[k], 2 * once.grads[k], rtol=1e-6, atol=1e-15)
        assert twice.d_b == pytest.approx(2 * once.d_b, rel=1e-6)

    def test_non_finite_input_detected(self):
        from wrenkit.training.trainer import NonFiniteGradient

        cfg, m = _tiny_model(4)
        x = _audio(cfg, 2)
        x[0, 10] = np.nan
        with pytest.raises(NonFiniteGradient):
            backward(m, x, [0, 1], TrainConfig())


class TestGradcheck:
    def test_two_filter_configs(self):
        suites = run_suite(n_configs=3, n_filters=2, hidden=3, frames=5, seed=0)
        for cfg, res in suites:
            assert {r.name for r in res} >= {"frontend.b", "frontend.w"}
            assert worst(res).rel_err <= 1e-4, worst(res)

    def test_eight_filter_configs_exercise_breakpoint(self):
        suites = run_suite(n_configs=3, n_filters=8, hidden=3, frames=5, seed=11)
        for cfg, res in suites:
            by = {r.name: r for r in res}
            assert by["frontend.b"].fd_norm > 0 or by["frontend.w"].fd_norm > 0
            assert worst(res).rel_err <= 1e-4, worst(res)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 1000))
def test_loss_non_negative_on_random_batches(seed):
    cfg, m = _tiny_model(seed % 7)
    rng = np.random.default_rng(seed)
    teacher = rng.dirichlet(np.ones(3), size=4)
    _, loss = backward(m, _audio(cfg, 4, seed=seed), rng.integers(0, 3, 4), TrainConfig(),
                       teacher=teacher)
    assert loss >= 0


@pytest.mark.parametrize("mode", ["semi", "mel", "linear", "full"])
def test_trained_model_matches_inference_engine(tiny_data, mode):
    from dataclasses import replace

    from wrenkit.runtime import Engine, offline_logits

    tr, va = tiny_data
    t = Trainer(replace(TOY, frontend_mode=mode), quick_cfg(epochs=3))
    t.fit(tr, va)
    t.model.eval()
    with torch.no_grad():
        ref = t.model(torch.as_tensor(va.audio, dtype=torch.float32)).numpy()
    eng = Engine(t.export(np.float64), np.float64)
    got = np.stack([offline_logits(eng, a) for a in va.audio])
    np.testing.assert_allclose(got, ref, rtol=1e-4, atol=1e-4)
