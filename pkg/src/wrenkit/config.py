"""Configuration records shared by the frontend, network, runtime and trainer."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace


class ConfigError(ValueError):
    """Raised for invalid or mutually inconsistent configuration values."""


# Clamp range applied to the learnable breakpoint/width after every step.
B_MARGIN_HZ = 1.0
W_FLOOR = 1e-3
W_CEIL = 1e6


@dataclass(frozen=True)
class FilterbankParams:
    b: float = 8000.0
    w: float = 200.0
    f_min: float = 150.0
    f_max: float = 16000.0
    n: int = 64
    n_fft: int = 512
    hop: int = 320
    sr: int = 32000

    def __post_init__(self):
        if not self.f_min > 0:
            raise ConfigError(f"f_min must be > 0, got {self.f_min}")
        if not self.f_min < self.f_max <= self.sr / 2:
            raise ConfigError(
                f"need f_min < f_max <= sr/2, got f_min={self.f_min} "
                f"f_max={self.f_max} sr={self.sr}"
            )
        if not (math.isfinite(self.w) and self.w >= 0):
            raise ConfigError(f"w must be finite and >= 0, got {self.w}")
        if not math.isfinite(self.b):
            raise ConfigError(f"b must be finite, got {self.b}")
        if self.n < 2:
            raise ConfigError(f"n must be >= 2, got {self.n}")
        if self.n_fft < 4 or self.n_fft & (self.n_fft - 1):
            raise ConfigError(f"n_fft must be a power of two, got {self.n_fft}")
        if not 0 < self.hop <= self.n_fft:
            raise ConfigError(f"hop must be in (0, n_fft], got {self.hop}")

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1

    @property
    def b_range(self) -> tuple[float, float]:
        return self.f_min + B_MARGIN_HZ, self.f_max - B_MARGIN_HZ

    def clamped(self) -> "FilterbankParams":
        lo, hi = self.b_range
        return replace(
            self,
            b=min(max(self.b, lo), hi),
            w=min(max(self.w, W_FLOOR), W_CEIL),
        )


@dataclass(frozen=True)
class ModelConfig:
    """Network topology.

    ``width`` scales the 32/32/64 channel schedule of the three encoder
    blocks; ``width=2.8125`` (90 stem channels) gives the ~136k parameter
    deployment model and ``width=1.375`` (44 channels) the ~57k variant.
    """

    frontend: FilterbankParams = field(default_factory=FilterbankParams)
    frontend_mode: str = "semi"  # semi | mel | linear | full
    base_filters: int = 32
    width: float = 2.8125
    kernel_size: int = 5
    dilations: tuple[int, ...] = (1, 2, 4)
    channel_mults: tuple[int, ...] = (1, 1, 2)
    se_reduction: int = 4
    hidden: int = 64
    n_classes: int = 71
    norm_eps: float = 1e-5

    def __post_init__(self):
        if self.frontend_mode not in ("semi", "mel", "linear", "full"):
            raise ConfigError(f"unknown frontend_mode {self.frontend_mode!r}")
        if len(self.dilations) != len(self.channel_mults):
            raise ConfigError("dilations and channel_mults must have equal length")
        if any(d < 1 for d in self.dilations):
            raise ConfigError("dilations must be >= 1")
        if self.kernel_size < 1:
            raise ConfigError("kernel_size must be >= 1")
        if self.n_classes < 2:
            raise ConfigError("need at least 2 classes")
        if self.hidden < 1:
            raise ConfigError("hidden must be >= 1")

    @property
    def stem_channels(self) -> int:
        return max(1, round(self.base_filters * self.width))

    @property
    def block_channels(self) -> tuple[int, ...]:
        c = self.stem_channels
        return tuple(c * m for m in self.channel_mults)

    def se_hidden(self, channels: int) -> int:
        return max(1, channels // self.se_reduction)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dilations"] = list(self.dilations)
        d["channel_mults"] = list(self.channel_mults)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["frontend"] = FilterbankParams(**d["frontend"])
        d["dilations"] = tuple(d["dilations"])
        d["channel_mults"] = tuple(d["channel_mults"])
        return cls(**d)

    def topology_hash(self) -> str:
        """Hash of everything except the learnable breakpoint/width."""
        d = self.to_dict()
        d["frontend"].pop("b")
        d["frontend"].pop("w")
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


PRESETS = {
    "136k": ModelConfig(),
    "57k": ModelConfig(width=1.375),
    "toy": ModelConfig(width=0.5, hidden=32, n_classes=3),
}


@dataclass
class TrainConfig:
    alpha: float = 0.4
    temperature: float = 3.0
    gamma: float = 4.0
    lr: float = 1e-3
    weight_decay: float = 0.01
    lr_mult_b: float = 15.0
    lr_mult_w: float = 5.0
    epochs: int = 150
    joint_epochs: int = 5
    network_epochs: int = 5
    filter_epochs: int = 1
    refine_epochs: int = 20
    patience: int = 35
    batch_size: int = 64
    teacher_threshold: float = 0.05
    adapt_rate: float = 0.1
    dropout: float = 0.1
    grad_noise: float = 1e-4
    perturb_every: int = 5
    perturb_frac: float = 0.02
    filter_search: str = "reject"  # reject | bound
    filter_search_frac: float = 0.10
    # the optimizer sees b in kHz and w in hundreds
    b_unit_hz: float = 1000.0
    w_unit: float = 100.0
    augment: bool = True
    gain_db: float = 6.0
    shift_ms: float = 100.0
    min_snr_db: float = 20.0
    class_weighting: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if self.gamma < 0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")
        for name in ("epochs", "joint_epochs", "network_epochs", "filter_epochs",
                     "refine_epochs", "patience", "perturb_every"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.filter_search not in ("reject", "bound"):
            raise ConfigError(f"unknown filter_search {self.filter_search!r}")
