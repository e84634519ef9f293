"""Train the same task under each frontend variant and tabulate the outcome."""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

from ..config import ModelConfig, TrainConfig
from .trainer import ClipSet, Trainer

FRONTEND_LABELS = {
    "mel": "Fixed mel",
    "linear": "Fixed linear",
    "semi": "Semi-learnable (b, w)",
    "full": "Fully learnable matrix",
}


@dataclass
class AblationRow:
    mode: str
    val_acc: float
    train_acc: float
    params: int
    b: float
    w: float
    best_epoch: int
    seconds: float


def run_ablation(train: ClipSet, val: ClipSet, model_cfg: ModelConfig, cfg: TrainConfig,
                 modes=("mel", "linear", "semi", "full")) -> list[AblationRow]:
    rows = []
    for mode in modes:
        t0 = time.perf_counter()
        tr = Trainer(replace(model_cfg, frontend_mode=mode), cfg)
        tlog = tr.fit(train, val)
        params = tr.export()
        fb = params.cfg.frontend
        rows.append(AblationRow(mode, tr.accuracy(val), tr.accuracy(train), params.param_count(),
                                fb.b, fb.w, tlog.best_epoch, time.perf_counter() - t0))
    return rows


def format_table(rows: list[AblationRow]) -> str:
    lines = ["| Frontend | Val accuracy (%) | Train accuracy (%) | Params | b (Hz) | w | Best epoch |",
             "|---|---|---|---|---|---|---|"]
    for r in rows:
        learned = r.mode == "semi"
        lines.append(
            f"| {FRONTEND_LABELS[r.mode]} | {100 * r.val_acc:.2f} | {100 * r.train_acc:.2f} | "
            f"{r.params} | {r.b:.1f}{'' if learned else ' (unused)'} | "
            f"{r.w:.2f}{'' if learned else ' (unused)'} | {r.best_epoch} |"
        )
    return "\n".join(lines) + "\n"
