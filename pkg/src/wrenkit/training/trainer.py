"""Alternating network/filter training schedule with focal distillation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from ..config import ModelConfig, TrainConfig
from ..params import ModelParams
from .losses import adaptive_alpha, class_weights, combined_loss
from .torch_model import WrenModel, power_frames

log = logging.getLogger(__name__)


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class ClipSet:
    """In-memory clips. ``teacher`` rows are probability vectors; ``teacher_mask``
    marks which rows exist."""

    audio: np.ndarray  # (N, L) float32
    labels: np.ndarray  # (N,)
    teacher: np.ndarray | None = None
    teacher_mask: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "ClipSet":
        t = None if self.teacher is None else self.teacher[idx]
        m = None if self.teacher_mask is None else self.teacher_mask[idx]
        return ClipSet(self.audio[idx], self.labels[idx], t, m)


def phase_of(epoch: int, cfg: TrainConfig) -> str:
    """joint -> (network x N, filter x M)* -> refine, as a pure function of epoch."""
    if epoch < cfg.joint_epochs:
        return "joint"
    if epoch >= cfg.epochs - cfg.refine_epochs:
        return "refine"
    cycle = cfg.network_epochs + cfg.filter_epochs
    if cycle == 0:
        return "joint"
    return "network" if (epoch - cfg.joint_epochs) % cycle < cfg.network_epochs else "filter"


PHASE_GROUPS = {
    "joint": {"network", "filter"},
    "refine": {"network", "filter"},
    "network": {"network"},
    "filter": {"filter"},
}


def cosine_factor(epoch: int, horizon: int, floor: float = 1e-3) -> float:
    """Cosine decay from 1 at epoch 0 to ``floor`` at the final epoch."""
    if horizon <= 1:
        return 1.0
    c = 0.5 * (1.0 + math.cos(math.pi * min(epoch, horizon - 1) / (horizon - 1)))
    return floor + (1.0 - floor) * c


@dataclass
class GradientTape:
    grads: dict[str, np.ndarray]
    d_b: float  # dL/db, per Hz
    d_w: float

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(g)) for g in self.grads.values()) and \
            math.isfinite(self.d_b) and math.isfinite(self.d_w)


def collect_tape(model: WrenModel) -> GradientTape:
    grads = {}
    for name, p in model.named_registry_parameters():
        g = p.grad
        grads[name] = np.zeros(tuple(p.shape)) if g is None else g.detach().cpu().numpy().copy()
    db = 0.0 if model.b_param.grad is None else float(model.b_param.grad) / model.b_unit_hz
    dw = 0.0 if model.w_param.grad is None else float(model.w_param.grad) / model.w_unit
    return GradientTape(grads, db, dw)


def backward(model: WrenModel, audio, labels, cfg: TrainConfig, running_alpha: float | None = None,
             teacher=None, teacher_mask=None, weights=None) -> tuple[GradientTape, float]:
    """Forward + loss + reverse pass; returns the tape and the scalar loss."""
    model.zero_grad(set_to_none=True)
    dtype = next(model.parameters()).dtype
    logits = model(torch.as_tensor(np.asarray(audio)).to(dtype))
    alpha = cfg.alpha if running_alpha is None else running_alpha
    parts = combined_loss(logits, torch.as_tensor(np.asarray(labels)), cfg, alpha,
                          teacher, teacher_mask, weights)
    parts.total.backward()
    tape = collect_tape(model)
    if not tape.all_finite():
        bad = [k for k, g in tape.grads.items() if not np.all(np.isfinite(g))]
        raise NonFiniteGradient(f"non-finite gradients in {bad or ['frontend']}; loss={float(parts.total.detach())}")
    return tape, float(parts.total.detach())


def augment_batch(audio: torch.Tensor, cfg: TrainConfig, sr: int, gen: torch.Generator) -> torch.Tensor:
    """Gain jitter, circular time shift and additive noise at >= min SNR."""
    B, L = audio.shape
    gain_db = (torch.rand(B, 1, generator=gen, dtype=audio.dtype) * 2 - 1) * cfg.gain_db
    out = audio * 10 ** (gain_db / 20)
    max_shift = int(cfg.shift_ms * 1e-3 * sr)
    if max_shift:
        shifts = torch.randint(-max_shift, max_shift + 1, (B,), generator=gen)
        idx = (torch.arange(L)[None, :] - shifts[:, None]) % L
        out = out.gather(1, idx)
    snr_db = cfg.min_snr_db + torch.rand(B, 1, generator=gen, dtype=audio.dtype) * 20.0
    sig = out.pow(2).mean(dim=1, keepdim=True).clamp(min=1e-12)
    noise = torch.randn(B, L, generator=gen, dtype=audio.dtype)
    return out + noise * torch.sqrt(sig / 10 ** (snr_db / 10))


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val_acc: float = -1.0
    stopped_early: bool = False

    def write(self, path) -> None:
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps(r, sort_keys=False) + "\n")

    @property
    def b_trajectory(self) -> list[float]:
        return [r["b"] for r in self.records]


class Trainer:
    def __init__(self, model_cfg: ModelConfig, cfg: TrainConfig,
                 params: ModelParams | None = None, log_path=None, audit: bool = False):
        self.cfg = cfg
        # with ``audit`` every step records which groups actually changed
        self.audit = audit
        self.audit_log: list[set] = []
        torch.manual_seed(cfg.seed)
        if params is None:
            from ..params import init_params

            params = init_params(model_cfg, seed=cfg.seed)
        self.model = WrenModel(model_cfg, params, cfg.b_unit_hz, cfg.w_unit, cfg.dropout)
        self.gen = torch.Generator().manual_seed(cfg.seed)
        self.log_path = log_path
        self.running_alpha = cfg.alpha
        self.step_log: list[set] = []
        self.net_opt = torch.optim.AdamW(
            self.model.network_parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
        fparams = self.model.filter_parameters()
        self.filt_opt = None
        if fparams:
            self.filt_opt = torch.optim.AdamW([
                {"params": [self.model.b_param], "lr": cfg.lr * cfg.lr_mult_b, "mult": cfg.lr_mult_b},
                {"params": [self.model.w_param], "lr": cfg.lr * cfg.lr_mult_w, "mult": cfg.lr_mult_w},
            ], weight_decay=0.0)
        self._perturb_sign = 1.0

    # -- helpers -----------------------------------------------------------
    def _set_lr(self, epoch: int) -> float:
        f = cosine_factor(epoch, self.cfg.epochs)
        for g in self.net_opt.param_groups:
            g["lr"] = self.cfg.lr * f
        if self.filt_opt is not None:
            for g in self.filt_opt.param_groups:
                g["lr"] = self.cfg.lr * g["mult"] * f
        return self.cfg.lr * f

    def _filter_values(self) -> tuple[float, float]:
        return float(self.model.b_hz.detach()), float(self.model.w.detach())

    def _set_filter(self, b: float, w: float) -> None:
        with torch.no_grad():
            self.model.b_param.fill_(b / self.model.b_unit_hz)
            self.model.w_param.fill_(w / self.model.w_unit)
        self.model.clamp_filter()

    def _power(self, audio: np.ndarray, train: bool) -> torch.Tensor:
        x = torch.as_tensor(audio, dtype=torch.float32)
        fb = self.model.cfg.frontend
        if train and self.cfg.augment:
            x = augment_batch(x, self.cfg, fb.sr, self.gen)
        return power_frames(x, fb.n_fft, fb.hop)

    def _snapshot(self) -> dict:
        return {
            "network": [p.detach().clone() for p in self.model.network_parameters()],
            "filter": [self.model.b_param.detach().clone(), self.model.w_param.detach().clone()],
        }

    def _changed(self, before: dict) -> set:
        now = self._snapshot()
        return {g for g in before
                if any(not torch.equal(a, b) for a, b in zip(before[g], now[g]))}

    @torch.no_grad()
    def predict(self, data: ClipSet, batch: int = 128) -> np.ndarray:
        self.model.eval()
        out = []
        for i in range(0, len(data), batch):
            out.append(self.model.forward_power(self._power(data.audio[i:i + batch], False)))
        return torch.cat(out).argmax(dim=-1).numpy()

    def accuracy(self, data: ClipSet) -> float:
        if len(data) == 0:
            return float("nan")
        return float(np.mean(self.predict(data) == data.labels))

    # -- one epoch ---------------------------------------------------------
    def _epoch(self, data: ClipSet, phase: str, weights, noise_std: float) -> dict:
        cfg = self.cfg
        self.model.train()
        groups = PHASE_GROUPS[phase]
        if self.filt_opt is None:
            groups = groups - {"filter"}
        order = torch.randperm(len(data), generator=self.gen).numpy()
        tot = foc = soft = 0.0
        nb = 0
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            teacher = None if data.teacher is None else data.teacher[idx]
            mask = None if data.teacher_mask is None else data.teacher_mask[idx]
            if teacher is not None:
                rows = teacher if mask is None else teacher[mask]
                if len(rows):
                    self.running_alpha = adaptive_alpha(float(rows.max(axis=1).mean()),
                                                        self.running_alpha, cfg)
            self.model.zero_grad(set_to_none=True)
            logits = self.model.forward_power(self._power(data.audio[idx], True))
            parts = combined_loss(logits, torch.as_tensor(data.labels[idx]), cfg,
                                  self.running_alpha, teacher, mask, weights)
            if not torch.isfinite(parts.total):
                raise NonFiniteGradient(f"non-finite loss in phase {phase}")
            parts.total.backward()
            for p in self.model.parameters():
                if p.grad is not None and not torch.all(torch.isfinite(p.grad)):
                    raise NonFiniteGradient(f"non-finite gradient in phase {phase}")
            if "filter" in groups and noise_std > 0 and phase == "filter":
                for p in self.model.filter_parameters():
                    if p.grad is not None:
                        p.grad.add_(torch.randn(p.shape, generator=self.gen, dtype=p.dtype) * noise_std)
            before = self._snapshot() if self.audit else None
            if "network" in groups:
                self.net_opt.step()
            if "filter" in groups:
                self.filt_opt.step()
                if cfg.filter_search == "bound" and self._bound is not None:
                    b0, w0 = self._bound
                    b, w = self._filter_values()
                    f = cfg.filter_search_frac
                    self._set_filter(min(max(b, b0 * (1 - f)), b0 * (1 + f)),
                                     min(max(w, w0 * (1 - f)), w0 * (1 + f)))
            self.model.clamp_filter()
            self.step_log.append(set(groups))
            if before is not None:
                self.audit_log.append(self._changed(before))
            tot += float(parts.total.detach())
            foc += parts.focal
            soft += parts.soft
            nb += 1
        return {"loss": tot / nb, "focal": foc / nb, "soft": soft / nb}

    # -- full schedule -----------------------------------------------------
    def fit(self, train: ClipSet, val: ClipSet, track_train_acc: bool = False) -> TrainLog:
        cfg = self.cfg
        if len(train) == 0:
            raise ValueError("empty training set")
        if len(np.unique(train.labels)) < 2:
            raise ValueError("training set needs at least two classes")
        n_classes = self.model.cfg.n_classes
        weights = class_weights(train.labels, n_classes) if cfg.class_weighting else None
        tlog = TrainLog()
        best_state = None
        prev_phase = None
        pre_filter = None  # (b, w, val_acc) before the current filter phase
        self._bound = None
        since_best = 0
        last_val = None
        for epoch in range(cfg.epochs):
            phase = phase_of(epoch, cfg)
            lr = self._set_lr(epoch)
            if phase == "filter" and prev_phase != "filter" and self.filt_opt is not None:
                self.filt_opt.state.clear()  # momentum reset
                b, w = self._filter_values()
                pre_filter = (b, w, last_val)
                self._bound = (b, w)
            if (cfg.perturb_every and epoch > 0 and epoch % cfg.perturb_every == 0
                    and self.filt_opt is not None):
                b, w = self._filter_values()
                s = self._perturb_sign * cfg.perturb_frac
                self._set_filter(b * (1 + s), w * (1 + s))
                self._perturb_sign = -self._perturb_sign
            noise = cfg.grad_noise * cosine_factor(epoch, cfg.epochs)
            stats = self._epoch(train, phase, weights, noise)
            val_acc = self.accuracy(val) if len(val) else float("nan")
            restored = False
            next_phase = phase_of(epoch + 1, cfg) if epoch + 1 < cfg.epochs else None
            if (phase == "filter" and next_phase != "filter" and cfg.filter_search == "reject"
                    and pre_filter is not None and pre_filter[2] is not None
                    and val_acc < pre_filter[2] * (1 - cfg.filter_search_frac)):
                self._set_filter(pre_filter[0], pre_filter[1])
                val_acc = self.accuracy(val)
                restored = True
            b, w = self._filter_values()
            rec = {"epoch": epoch, "phase": phase, **stats, "val_acc": val_acc,
                   "b": b, "w": w, "lr": lr, "alpha": self.running_alpha,
                   "filter_restored": restored}
            if track_train_acc:
                rec["train_acc"] = self.accuracy(train)
            tlog.records.append(rec)
            if self.log_path is not None:
                with open(self.log_path, "a") as fh:
                    fh.write(json.dumps(rec) + "\n")
            log.info("epoch %d %s loss=%.4f val=%.3f b=%.1f w=%.2f",
                     epoch, phase, stats["loss"], val_acc, b, w)
            last_val = val_acc
            prev_phase = phase
            score = val_acc if not math.isnan(val_acc) else -stats["loss"]
            if score > tlog.best_val_acc:
                tlog.best_val_acc = score
                tlog.best_epoch = epoch
                best_state = {k: v.detach().clone() for k, v in self.model.state_dict().items()}
                since_best = 0
            else:
                since_best += 1
                if cfg.patience and since_best >= cfg.patience:
                    tlog.stopped_early = True
                    break
        if best_state is not None:
            self.model.load_state_dict(best_state)
        return tlog

    def export(self, dtype=np.float32) -> ModelParams:
        return self.model.to_params(dtype)
