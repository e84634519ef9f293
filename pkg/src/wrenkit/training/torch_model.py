"""Differentiable full-sequence mirror of the inference network.

Parameter names match the ``ModelParams`` registry one to one, so weights
move between the trainer and the numpy runtime without renaming.  Breakpoint
and width are trained in rescaled units (``b_unit_hz``, ``w_unit``) so
that Adam's step size is meaningful for both of them.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import replace

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..config import W_CEIL, W_FLOOR, ModelConfig
from ..frontend import LOG_EPS, build_filterbank
from ..params import ModelParams, init_params, is_buffer, registry_shapes


def _key(name: str) -> str:
    return name.replace(".", "__")


def torch_grid(n: int, dtype) -> torch.Tensor:
    return torch.arange(n, dtype=dtype) / (n - 1)


def torch_centers(b_hz: torch.Tensor, w: torch.Tensor, cfg) -> torch.Tensor:
    x = torch_grid(cfg.n, b_hz.dtype)
    f_log = cfg.f_min ** (1.0 - x) * cfg.f_max ** x
    f_lin = (1.0 - x) * cfg.f_min + x * cfg.f_max
    s = torch.sigmoid((x - (b_hz - cfg.f_min) / (cfg.f_max - cfg.f_min)) * w)
    return f_log + s * (f_lin - f_log)


def torch_triangles(c: torch.Tensor, cfg) -> torch.Tensor:
    """Bin-averaged unit triangles; same geometry as ``frontend.triangles_from_centers``."""
    dtype = c.dtype
    df = cfg.sr / cfg.n_fft
    f = torch.arange(cfg.n_fft // 2 + 1, dtype=dtype) * df
    lo, hi = (f - df / 2)[None, :], (f + df / 2)[None, :]
    left = torch.cat([c[:1], c[:-1]])[:, None]
    right = torch.cat([c[1:], c[-1:]])[:, None]
    center = c[:, None]
    has_rise = torch.ones(cfg.n, 1, dtype=torch.bool)
    has_rise[0] = False
    has_fall = torch.ones(cfg.n, 1, dtype=torch.bool)
    has_fall[-1] = False
    rise = torch.where(has_rise, center - left, torch.ones_like(center))
    fall = torch.where(has_fall, right - center, torch.ones_like(center))

    def cdf(e):
        fr = torch.minimum(torch.maximum(e, left), center)
        ff = torch.minimum(torch.maximum(e, center), right)
        a = torch.where(has_rise, (fr - left) ** 2 / (2 * rise), torch.zeros_like(fr))
        b = torch.where(has_fall, (fall ** 2 - (right - ff) ** 2) / (2 * fall), torch.zeros_like(ff))
        return a + b

    return torch.clamp((cdf(hi) - cdf(lo)) / df, min=0.0)


def periodic_hann(n_fft: int, dtype) -> torch.Tensor:
    return torch.hann_window(n_fft, periodic=True, dtype=dtype)


def power_frames(audio: torch.Tensor, n_fft: int, hop: int) -> torch.Tensor:
    """(B, N) audio -> (B, T, n_fft/2+1) power spectra, causal framing."""
    frames = audio.unfold(-1, n_fft, hop)
    spec = torch.fft.rfft(frames * periodic_hann(n_fft, audio.dtype), dim=-1)
    return spec.real ** 2 + spec.imag ** 2


class WrenModel(nn.Module):
    def __init__(self, cfg: ModelConfig, params: ModelParams | None = None,
                 b_unit_hz: float = 1000.0, w_unit: float = 100.0,
                 dropout: float = 0.0, dtype=torch.float32):
        super().__init__()
        self.cfg = cfg
        self.b_unit_hz = b_unit_hz
        self.w_unit = w_unit
        self.dropout = dropout
        if params is None:
            params = init_params(cfg)
        self.net = nn.ParameterDict()
        for name, v in params.items():
            t = torch.as_tensor(np.asarray(v, dtype=np.float64)).to(dtype)
            if is_buffer(name):
                self.register_buffer(_key(name), t.clone())
            else:
                self.net[_key(name)] = nn.Parameter(t.clone())
        fb = cfg.frontend
        self.b_param = nn.Parameter(torch.tensor(fb.b / b_unit_hz, dtype=dtype),
                                    requires_grad=cfg.frontend_mode == "semi")
        self.w_param = nn.Parameter(torch.tensor(fb.w / w_unit, dtype=dtype),
                                    requires_grad=cfg.frontend_mode == "semi")
        if cfg.frontend_mode in ("mel", "linear"):
            w = build_filterbank(fb, cfg.frontend_mode).weights
            self.register_buffer("fixed_fb", torch.tensor(np.array(w)).to(dtype))
        else:
            self.fixed_fb = None

    # access helpers -------------------------------------------------------
    def p(self, name: str) -> torch.Tensor:
        k = _key(name)
        if k in self.net:
            return self.net[k]
        return getattr(self, k)

    def has(self, name: str) -> bool:
        k = _key(name)
        return k in self.net or hasattr(self, k)

    @property
    def b_hz(self) -> torch.Tensor:
        return self.b_param * self.b_unit_hz

    @property
    def w(self) -> torch.Tensor:
        return self.w_param * self.w_unit

    def filter_parameters(self) -> list[nn.Parameter]:
        if self.cfg.frontend_mode == "semi":
            return [self.b_param, self.w_param]
        return []

    def network_parameters(self) -> list[nn.Parameter]:
        return list(self.net.values())

    def named_registry_parameters(self):
        for name in registry_shapes(self.cfg):
            if not is_buffer(name):
                yield name, self.net[_key(name)]

    @torch.no_grad()
    def clamp_filter(self) -> None:
        lo, hi = self.cfg.frontend.b_range
        self.b_param.clamp_(lo / self.b_unit_hz, hi / self.b_unit_hz)
        self.w_param.clamp_(W_FLOOR / self.w_unit, W_CEIL / self.w_unit)
        if self.cfg.frontend_mode == "full":
            self.net[_key("frontend.weights")].clamp_(min=0.0)

    # forward --------------------------------------------------------------
    def filterbank(self) -> torch.Tensor:
        if self.fixed_fb is not None:
            return self.fixed_fb
        if self.cfg.frontend_mode == "full":
            return self.p("frontend.weights")
        return torch_triangles(torch_centers(self.b_hz, self.w, self.cfg.frontend), self.cfg.frontend)

    def features(self, power: torch.Tensor) -> torch.Tensor:
        return torch.log(power @ self.filterbank().T + LOG_EPS)

    def _norm(self, x: torch.Tensor, prefix: str) -> torch.Tensor:
        # x: (B, T, C); batch statistics over (B, T) while training
        return F.batch_norm(
            x.transpose(1, 2), self.p(f"{prefix}.running_mean"), self.p(f"{prefix}.running_var"),
            self.p(f"{prefix}.weight"), self.p(f"{prefix}.bias"),
            training=self.training, momentum=0.1, eps=self.cfg.norm_eps,
        ).transpose(1, 2)

    def encode(self, feats: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        x = feats @ self.p("stem.weight").T + self.p("stem.bias")
        x = torch.relu(self._norm(x, "stem.norm"))
        T = x.shape[1]
        for j, d in enumerate(cfg.dilations):
            pre = f"blocks.{j}"
            taps = self.p(f"{pre}.dw.weight")  # (k, C)
            k, c = taps.shape
            xin = F.pad(x.transpose(1, 2), ((k - 1) * d, 0))
            u = F.conv1d(xin, taps.T.unsqueeze(1), self.p(f"{pre}.dw.bias"),
                         dilation=d, groups=c).transpose(1, 2)
            v = u @ self.p(f"{pre}.pw.weight").T + self.p(f"{pre}.pw.bias")
            count = torch.arange(1, T + 1, dtype=v.dtype)[None, :, None]
            means = torch.cumsum(v, dim=1) / count
            g = torch.relu(means @ self.p(f"{pre}.se.reduce.weight").T + self.p(f"{pre}.se.reduce.bias"))
            g = torch.sigmoid(g @ self.p(f"{pre}.se.expand.weight").T + self.p(f"{pre}.se.expand.bias"))
            y = torch.relu(self._norm(v * g, f"{pre}.norm"))
            if self.has(f"{pre}.skip.weight"):
                x = y + (x @ self.p(f"{pre}.skip.weight").T + self.p(f"{pre}.skip.bias"))
            else:
                x = y + x
        return x

    def recur(self, x: torch.Tensor) -> torch.Tensor:
        H = self.cfg.hidden
        gi = x @ self.p("gru.weight_ih").T + self.p("gru.bias_ih")
        w_hh = self.p("gru.weight_hh")
        b_hh = self.p("gru.bias_hh")
        h = x.new_zeros(x.shape[0], H)
        out = []
        for t in range(x.shape[1]):
            gh = h @ w_hh.T + b_hh
            g = gi[:, t]
            r = torch.sigmoid(g[:, :H] + gh[:, :H])
            z = torch.sigmoid(g[:, H:2 * H] + gh[:, H:2 * H])
            n = torch.tanh(g[:, 2 * H:] + r * gh[:, 2 * H:])
            h = (1 - z) * h + z * n
            out.append(h)
        return torch.stack(out, dim=1)

    def head(self, hs: torch.Tensor) -> torch.Tensor:
        scores = hs @ self.p("attn.score.weight") + self.p("attn.score.bias")
        ctx = (torch.softmax(scores, dim=1).unsqueeze(-1) * hs).sum(dim=1)
        if self.dropout and self.training:
            ctx = F.dropout(ctx, self.dropout, training=True)
        return ctx @ self.p("classifier.weight").T + self.p("classifier.bias")

    def forward_power(self, power: torch.Tensor) -> torch.Tensor:
        return self.head(self.recur(self.encode(self.features(power))))

    def forward(self, audio: torch.Tensor) -> torch.Tensor:
        fb = self.cfg.frontend
        return self.forward_power(power_frames(audio, fb.n_fft, fb.hop))

    # export ---------------------------------------------------------------
    def export_config(self) -> ModelConfig:
        fb = replace(self.cfg.frontend, b=float(self.b_hz.detach()), w=float(self.w.detach()))
        return replace(self.cfg, frontend=fb.clamped() if self.cfg.frontend_mode == "semi" else fb)

    def to_params(self, dtype=np.float32) -> ModelParams:
        out = OrderedDict()
        for name in registry_shapes(self.cfg):
            out[name] = self.p(name).detach().cpu().numpy().astype(dtype)
        return ModelParams(self.export_config(), out)
