"""Central finite-difference check of the training objective's gradients.

Every registry parameter and the breakpoint/width pair are perturbed one
element at a time in float64, and the resulting slopes are compared with
autograd per tensor::

    rel = ||g_fd - g_auto|| / max(||g_fd|| + ||g_auto||, floor)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..config import FilterbankParams, ModelConfig, TrainConfig
from ..params import random_params
from .losses import combined_loss
from .torch_model import WrenModel


@dataclass
class GradResult:
    name: str
    rel_err: float
    fd_norm: float
    auto_norm: float


def tiny_config(rng: np.random.Generator, n_filters: int = 2, hidden: int = 3) -> ModelConfig:
    k = int(rng.integers(2, 4))
    fb = FilterbankParams(
        b=float(rng.uniform(1000.0, 12000.0)), w=float(rng.uniform(5.0, 60.0)), n=n_filters,
    )
    return ModelConfig(
        frontend=fb, base_filters=int(rng.integers(2, 5)), width=1.0, kernel_size=k,
        dilations=(1, 2), channel_mults=(1, 2), se_reduction=2, hidden=hidden, n_classes=3,
    )


def _batch(cfg: ModelConfig, rng, frames: int, batch: int):
    fb = cfg.frontend
    n = fb.n_fft + (frames - 1) * fb.hop
    t = np.arange(n) / fb.sr
    audio = np.stack([
        0.3 * np.sin(2 * np.pi * rng.uniform(300, 14000) * t) + rng.normal(0, 0.05, n)
        for _ in range(batch)
    ])
    labels = rng.integers(0, cfg.n_classes, size=batch)
    teacher = rng.dirichlet(np.ones(cfg.n_classes), size=batch)
    mask = np.arange(batch) % 2 == 0
    return (torch.tensor(audio), torch.tensor(labels), torch.tensor(teacher),
            torch.tensor(mask))


def check_gradients(cfg: ModelConfig, seed: int = 0, frames: int = 5, batch: int = 2,
                    step: float = 1e-5, floor: float = 1e-5,
                    train_cfg: TrainConfig | None = None) -> list[GradResult]:
    rng = np.random.default_rng(seed)
    tc = train_cfg or TrainConfig()
    model = WrenModel(cfg, random_params(cfg, seed, np.float64, scale=0.3),
                      tc.b_unit_hz, tc.w_unit, dropout=0.0, dtype=torch.float64)
    model.train()
    audio, labels, teacher, mask = _batch(cfg, rng, frames, batch)
    weights = torch.tensor(rng.uniform(0.5, 1.5, cfg.n_classes))

    def loss() -> torch.Tensor:
        return combined_loss(model(audio), labels, tc, 0.3, teacher, mask, weights).total

    named = list(model.named_registry_parameters())
    if cfg.frontend_mode == "semi":
        named += [("frontend.b", model.b_param), ("frontend.w", model.w_param)]
    model.zero_grad()
    loss().backward()
    auto = {n: p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
            for n, p in named}

    results = []
    with torch.no_grad():
        for name, p in named:
            fd = torch.zeros_like(p)
            flat, gflat = p.view(-1), fd.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                up = loss().item()
                flat[i] = orig - step
                down = loss().item()
                flat[i] = orig
                gflat[i] = (up - down) / (2 * step)
            a = auto[name]
            num = float(torch.linalg.vector_norm(fd - a))
            den = max(float(torch.linalg.vector_norm(fd) + torch.linalg.vector_norm(a)), floor)
            results.append(GradResult(name, num / den, float(torch.linalg.vector_norm(fd)),
                                      float(torch.linalg.vector_norm(a))))
    return results


def run_suite(n_configs: int = 3, n_filters: int = 2, hidden: int = 3, frames: int = 5,
              seed: int = 0) -> list[tuple[ModelConfig, list[GradResult]]]:
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n_configs):
        cfg = tiny_config(rng, n_filters, hidden)
        out.append((cfg, check_gradients(cfg, seed=seed + k, frames=frames)))
    return out


def worst(results: list[GradResult]) -> GradResult:
    return max(results, key=lambda r: r.rel_err)


__all__ = ["GradResult", "tiny_config", "check_gradients", "run_suite", "worst"]
