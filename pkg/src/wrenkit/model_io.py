"""Weight archives, int8 post-training quantization and the timing bench.

Float archive (all integers little-endian)::

    magic   b"WRKW"
    u16     format version (1)
    u32     header length L
    L bytes UTF-8 JSON header: config (complete), config_hash, species,
            b, w, n_fft, hop, n, tensor_count
    per tensor, in registry order:
        u16 name length, name (UTF-8)
        2 bytes dtype code ("f4" or "f8")
        u8  ndim, u32 x ndim dims
        u64 data length, raw little-endian data
    u32     CRC-32 of every preceding byte

Quantized archive uses magic b"WRKQ" with the same header plus an
``activation_scales`` table.  Each tensor record then carries a kind byte
(0 = float32, 1 = int8) after the dims; int8 records store an f32 scale
before the data.
"""

from __future__ import annotations

import json
import struct
import time
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import encoder as enc
from . import head
from .config import ConfigError, ModelConfig
from .frontend import frame_signal
from .params import ModelParams, is_buffer, registry_shapes
from .runtime import (Engine, final_logits, init_stream, offline_logits, process_chunk,
                      state_nbytes)

ARCHIVE_MAGIC = b"WRKW"
QUANT_MAGIC = b"WRKQ"
ARCHIVE_VERSION = 1
QMAX = 127
ACT_PERCENTILE = 99.9
MIN_CALIBRATION = 16


class ArchiveError(ValueError):
    """Corrupt, truncated or incompatible model file."""


# -- binary helpers ---------------------------------------------------------

def _header(params: ModelParams, species, extra=None) -> bytes:
    cfg = params.cfg
    fb = cfg.frontend
    h = {
        "config": cfg.to_dict(),
        "config_hash": cfg.topology_hash(),
        "species": list(species) if species is not None else [str(i) for i in range(cfg.n_classes)],
        "b": fb.b, "w": fb.w, "n_fft": fb.n_fft, "hop": fb.hop, "n": fb.n,
        "tensor_count": len(params.tensors),
    }
    if len(h["species"]) != cfg.n_classes:
        raise ConfigError(f"{len(h['species'])} species names for {cfg.n_classes} classes")
    h.update(extra or {})
    return json.dumps(h, sort_keys=True).encode()


def _name(name: str) -> bytes:
    nb = name.encode()
    return struct.pack("<H", len(nb)) + nb


def _dims(shape) -> bytes:
    return struct.pack("<B", len(shape)) + struct.pack(f"<{len(shape)}I", *shape)


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob, self.off, self.path = blob, 0, path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise ArchiveError(f"{self.path}: unexpected end of file")
        b = self.blob[self.off:self.off + n]
        self.off += n
        return b

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _open_checked(path, magic: bytes):
    blob = Path(path).read_bytes()
    if len(blob) < 14 or blob[:4] != magic:
        if len(blob) >= 4 and blob[:4] in (ARCHIVE_MAGIC, QUANT_MAGIC):
            raise ArchiveError(f"{path}: wrong archive kind {blob[:4]!r}, expected {magic!r}")
        if len(blob) < 14:
            raise ArchiveError(f"{path}: checksum failure (file truncated to {len(blob)} bytes)")
        raise ArchiveError(f"{path}: not a wrenkit archive")
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) != crc:
        raise ArchiveError(f"{path}: checksum failure (truncated or corrupted)")
    r = _Reader(blob[:-4], path)
    r.take(4)
    (version,) = r.unpack("<H")
    if version != ARCHIVE_VERSION:
        raise ArchiveError(f"{path}: archive version {version}, supported {ARCHIVE_VERSION}")
    (hlen,) = r.unpack("<I")
    header = json.loads(r.take(hlen).decode())
    return r, header


def config_diff(a: ModelConfig, b: ModelConfig, ignore=("b", "w")) -> list[str]:
    """Dotted names of the fields that differ (breakpoint/width ignored)."""
    out = []

    def walk(x, y, pre):
        for k in sorted(set(x) | set(y)):
            if k in ignore and pre == "frontend.":
                continue
            if isinstance(x.get(k), dict) and isinstance(y.get(k), dict):
                walk(x[k], y[k], pre + k + ".")
            elif x.get(k) != y.get(k):
                out.append(pre + k)

    walk(a.to_dict(), b.to_dict(), "")
    return out


def _check_against(cfg: ModelConfig, tensors: dict, expected: ModelConfig | None, path) -> None:
    if expected is None:
        return
    diff = config_diff(cfg, expected)
    fields = f" (differing config fields: {', '.join(diff)})" if diff else ""
    for name, shape in registry_shapes(expected).items():
        if name not in tensors:
            raise ArchiveError(f"{path}: tensor {name} missing from archive{fields}")
        got = tuple(tensors[name].shape)
        if got != shape:
            raise ArchiveError(f"{path}: shape mismatch for {name}: archive {got}, "
                               f"expected {shape}{fields}")
    if diff:
        raise ArchiveError(f"{path}: config field {diff[0]} differs "
                           f"(all differing: {', '.join(diff)})")


# -- float archives ---------------------------------------------------------

def save_model(path, params: ModelParams, species=None) -> None:
    out = bytearray(ARCHIVE_MAGIC)
    out += struct.pack("<H", ARCHIVE_VERSION)
    hdr = _header(params, species)
    out += struct.pack("<I", len(hdr)) + hdr
    for name, v in params.items():
        v = np.asarray(v)
        if v.dtype not in (np.float32, np.float64):
            raise ConfigError(f"{name}: unsupported dtype {v.dtype}")
        data = np.ascontiguousarray(v, dtype=v.dtype.newbyteorder("<")).tobytes()
        out += _name(name) + v.dtype.str[1:].encode() + _dims(v.shape)
        out += struct.pack("<Q", len(data)) + data
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    Path(path).write_bytes(bytes(out))


@dataclass
class LoadedModel:
    params: ModelParams
    species: list[str]
    header: dict


def load_archive(path, expected: ModelConfig | None = None) -> LoadedModel:
    r, header = _open_checked(path, ARCHIVE_MAGIC)
    cfg = ModelConfig.from_dict(header["config"])
    tensors = OrderedDict()
    for _ in range(header["tensor_count"]):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        code = r.take(2).decode()
        (ndim,) = r.unpack("<B")
        dims = r.unpack(f"<{ndim}I")
        (nbytes,) = r.unpack("<Q")
        dt = np.dtype("<" + code)
        tensors[name] = np.frombuffer(r.take(nbytes), dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
    _check_against(cfg, tensors, expected, path)
    try:
        params = ModelParams(cfg, tensors)
    except ConfigError as exc:
        raise ArchiveError(f"{path}: {exc}") from exc
    return LoadedModel(params, header["species"], header)


def load_model(path, expected: ModelConfig | None = None) -> ModelParams:
    return load_archive(path, expected).params


# -- int8 quantization ------------------------------------------------------

def quantize_tensor(w: np.ndarray) -> tuple[np.ndarray, float]:
    """Per-tensor symmetric int8; an all-zero tensor gets scale 1."""
    w = np.asarray(w, dtype=np.float64)
    m = float(np.max(np.abs(w))) if w.size else 0.0
    scale = m / QMAX if m > 0 else 1.0
    q = np.clip(np.round(w / scale), -QMAX, QMAX).astype(np.int8)
    return q, scale


def dequantize_tensor(q: np.ndarray, scale: float) -> np.ndarray:
    return q.astype(np.float32) * np.float32(scale)


def fake_quant(x: np.ndarray, scale: float) -> np.ndarray:
    return (np.clip(np.round(x / scale), -QMAX, QMAX) * scale).astype(x.dtype, copy=False)


def quantizable(name: str) -> bool:
    """Weight matrices, depthwise taps and the score vector are stored as int8."""
    if is_buffer(name) or ".norm." in name:
        return False
    return name.endswith((".weight", "weight_ih", "weight_hh"))


def snr_db(ref: np.ndarray, approx: np.ndarray) -> float:
    ref = np.asarray(ref, dtype=np.float64)
    err = float(np.sum((ref - np.asarray(approx, dtype=np.float64)) ** 2))
    sig = float(np.sum(ref ** 2))
    if err == 0.0:
        return float("inf")
    if sig == 0.0:
        return float("-inf")
    return 10.0 * np.log10(sig / err)


ACT_POINTS_FIXED = ("features", "stem")


def activation_points(cfg: ModelConfig) -> list[str]:
    return [*ACT_POINTS_FIXED, *(f"blocks.{j}" for j in range(len(cfg.dilations))),
            "hidden", "context"]


def forward_activations(engine: Engine, audio: np.ndarray,
                        act_scales: dict[str, float] | None = None):
    """Full-sequence forward exposing the tensors at each activation point.

    With ``act_scales`` every point is fake-quantized to int8 before it
    feeds the next layer.  The recurrence itself runs in float; only its
    output sequence is quantized.
    """
    acts = {}

    def tap(name, x):
        if act_scales is not None:
            x = fake_quant(x, act_scales[name])
        acts[name] = x
        return x

    audio = np.asarray(audio, dtype=engine.dtype)
    x = tap("features", engine.features(frame_signal(audio, engine.n_fft, engine.hop)))
    x = tap("stem", enc.stem_forward(x, engine.stem))
    state = enc.init_encoder_state(engine.blocks, engine.dtype)
    for j, (blk, st) in enumerate(zip(engine.blocks, state.blocks)):
        x = tap(f"blocks.{j}", enc.block_forward(x, blk, st, engine.backend))
    h = np.zeros(engine.gru.hidden, dtype=engine.dtype)
    hs = tap("hidden", head.gru_sequence(x, h, engine.gru, engine.backend))
    scores = hs.astype(np.float64) @ engine.att.score.astype(np.float64) + engine.att.score_bias
    ctx = head.softmax(scores) @ hs.astype(np.float64)
    ctx = tap("context", ctx.astype(engine.dtype))
    return head.logits(ctx, engine.att), acts


@dataclass
class QuantReport:
    weight_snr: "OrderedDict[str, float]" = field(default_factory=OrderedDict)
    activation_snr: "OrderedDict[str, float]" = field(default_factory=OrderedDict)
    activation_scales: "OrderedDict[str, float]" = field(default_factory=OrderedDict)

    def format(self) -> str:
        lines = ["# per-layer quantization SNR (dB)", "kind\tname\tscale\tsnr_db"]
        for k, v in self.weight_snr.items():
            lines.append(f"weight\t{k}\t-\t{v:.2f}")
        for k, v in self.activation_snr.items():
            lines.append(f"activation\t{k}\t{self.activation_scales[k]:.6g}\t{v:.2f}")
        return "\n".join(lines) + "\n"


@dataclass
class QuantizedModel:
    cfg: ModelConfig
    species: list[str]
    int8: "OrderedDict[str, tuple[np.ndarray, float]]"
    floats: "OrderedDict[str, np.ndarray]"
    activation_scales: "OrderedDict[str, float]"
    report: QuantReport | None = None

    def dequantized(self) -> ModelParams:
        out = OrderedDict()
        for name in registry_shapes(self.cfg):
            if name in self.int8:
                q, s = self.int8[name]
                out[name] = dequantize_tensor(q, s)
            else:
                out[name] = np.asarray(self.floats[name], dtype=np.float32)
        return ModelParams(self.cfg, out)

    def engine(self, backend=None) -> Engine:
        return Engine(self.dequantized(), np.float32, backend)

    def logits(self, audio: np.ndarray, engine: Engine | None = None) -> np.ndarray:
        return forward_activations(engine or self.engine(), audio, self.activation_scales)[0]

    def int8_bytes(self) -> int:
        return sum(q.size for q, _ in self.int8.values()) + sum(4 * v.size for v in self.floats.values())


def quantize_int8(params: ModelParams, calibration, species=None, backend=None) -> QuantizedModel:
    """Per-tensor int8 weights plus 99.9th-percentile activation scales."""
    calibration = list(calibration)
    if not calibration:
        raise ValueError("empty calibration set")
    if len(calibration) < MIN_CALIBRATION:
        raise ValueError(f"need at least {MIN_CALIBRATION} calibration clips, got {len(calibration)}")
    report = QuantReport()
    int8, floats = OrderedDict(), OrderedDict()
    for name, v in params.items():
        if quantizable(name):
            q, s = quantize_tensor(v)
            int8[name] = (q, s)
            report.weight_snr[name] = snr_db(v, dequantize_tensor(q, s))
        else:
            floats[name] = np.asarray(v, dtype=np.float32)

    float_engine = Engine(params.astype(np.float32), np.float32, backend)
    collected: dict[str, list[np.ndarray]] = {k: [] for k in activation_points(params.cfg)}
    for clip in calibration:
        _, acts = forward_activations(float_engine, clip)
        for k, a in acts.items():
            collected[k].append(np.abs(np.asarray(a, dtype=np.float64)).ravel())
    scales = OrderedDict()
    for k, chunks in collected.items():
        m = float(np.percentile(np.concatenate(chunks), ACT_PERCENTILE))
        scales[k] = m / QMAX if m > 0 else 1.0
    report.activation_scales = scales

    qm = QuantizedModel(params.cfg, list(species) if species is not None else
                        [str(i) for i in range(params.cfg.n_classes)], int8, floats, scales, report)
    q_engine = qm.engine(backend)
    ref_sq: dict[str, float] = {k: 0.0 for k in scales}
    err_sq: dict[str, float] = {k: 0.0 for k in scales}
    for clip in calibration:
        _, f_acts = forward_activations(float_engine, clip)
        _, q_acts = forward_activations(q_engine, clip, scales)
        for k in scales:
            a = np.asarray(f_acts[k], np.float64)
            ref_sq[k] += float(np.sum(a ** 2))
            err_sq[k] += float(np.sum((a - np.asarray(q_acts[k], np.float64)) ** 2))
    for k in scales:
        report.activation_snr[k] = (float("inf") if err_sq[k] == 0 else
                                    10.0 * np.log10(max(ref_sq[k], 1e-300) / err_sq[k]))
    return qm


def save_quantized(path, qm: QuantizedModel) -> None:
    # header reuses the float layout; tensor order is the registry order
    shell = qm.dequantized()
    out = bytearray(QUANT_MAGIC)
    out += struct.pack("<H", ARCHIVE_VERSION)
    hdr = _header(shell, qm.species, {"activation_scales": dict(qm.activation_scales)})
    out += struct.pack("<I", len(hdr)) + hdr
    for name in registry_shapes(qm.cfg):
        if name in qm.int8:
            q, s = qm.int8[name]
            out += _name(name) + _dims(q.shape) + struct.pack("<B", 1)
            out += struct.pack("<f", s)
            data = q.tobytes()
        else:
            v = qm.floats[name]
            out += _name(name) + _dims(v.shape) + struct.pack("<B", 0)
            data = np.ascontiguousarray(v, dtype="<f4").tobytes()
        out += struct.pack("<Q", len(data)) + data
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    Path(path).write_bytes(bytes(out))


def load_quantized(path) -> QuantizedModel:
    r, header = _open_checked(path, QUANT_MAGIC)
    cfg = ModelConfig.from_dict(header["config"])
    int8, floats = OrderedDict(), OrderedDict()
    for _ in range(header["tensor_count"]):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        (ndim,) = r.unpack("<B")
        dims = r.unpack(f"<{ndim}I")
        (kind,) = r.unpack("<B")
        if kind == 1:
            (s,) = r.unpack("<f")
            (nbytes,) = r.unpack("<Q")
            int8[name] = (np.frombuffer(r.take(nbytes), np.int8).reshape(dims).copy(), float(s))
        elif kind == 0:
            (nbytes,) = r.unpack("<Q")
            floats[name] = np.frombuffer(r.take(nbytes), "<f4").reshape(dims).astype(np.float32)
        else:
            raise ArchiveError(f"{path}: unknown tensor kind {kind} for {name}")
    scales = OrderedDict((k, float(v)) for k, v in header["activation_scales"].items())
    return QuantizedModel(cfg, header["species"], int8, floats, scales)


def agreement(params: ModelParams, qm: QuantizedModel, clips, backend=None) -> float:
    """Fraction of clips where float and int8 paths pick the same class."""
    clips = list(clips)
    if not clips:
        return float("nan")
    fe = Engine(params.astype(np.float32), np.float32, backend)
    qe = qm.engine(backend)
    same = sum(int(np.argmax(forward_activations(fe, c)[0]) == np.argmax(qm.logits(c, qe)))
               for c in clips)
    return same / len(clips)


# -- bench ------------------------------------------------------------------

@dataclass
class BenchReport:
    n_clips: int
    chunked: bool
    chunk_samples: int
    mean_s: float | None = None
    p95_s: float | None = None
    frames_per_s: float | None = None
    state_bytes: int = 0
    param_count: int = 0
    max_abs_vs_offline: float | None = None
    predictions_match: bool | None = None
    backend: str = ""

    def as_dict(self) -> dict:
        return dict(self.__dict__)

    def format(self) -> str:
        if self.n_clips == 0:
            return ("clips 0 (empty report)\n"
                    f"params {self.param_count}\nstate_bytes {self.state_bytes}\n")
        return "\n".join([
            f"clips {self.n_clips}",
            f"mode {'chunked' if self.chunked else 'offline'} (chunk {self.chunk_samples} samples)",
            f"backend {self.backend}",
            f"mean_s_per_3s {self.mean_s:.6f}",
            f"p95_s_per_3s {self.p95_s:.6f}",
            f"frames_per_s {self.frames_per_s:.1f}",
            f"state_bytes {self.state_bytes}",
            f"params {self.param_count}",
            f"max_abs_vs_offline {self.max_abs_vs_offline:.3g}",
            f"predictions_match {self.predictions_match}",
        ]) + "\n"


def bench(params: ModelParams, n_clips: int = 20, chunked: bool = True, chunk: int = 6400,
          seed: int = 0, backend: str | None = None, clips=None) -> BenchReport:
    from .kernels import BACKEND

    engine = Engine(params.astype(np.float32), np.float32, backend)
    rep = BenchReport(n_clips, chunked, chunk, state_bytes=state_nbytes(engine),
                      param_count=params.param_count(), backend=backend or BACKEND)
    if n_clips <= 0:
        rep.n_clips = 0
        return rep
    rng = np.random.default_rng(seed)
    n = 3 * engine.sr
    if clips is None:
        clips = [rng.normal(0, 0.1, n).astype(np.float32) for _ in range(n_clips)]
    times, worst, match, frames = [], 0.0, True, 0
    for clip in clips[:n_clips]:
        t0 = time.perf_counter()
        if chunked:
            st = init_stream(engine)
            for i in range(0, len(clip), chunk):
                process_chunk(engine, st, clip[i:i + chunk])
            lg = final_logits(engine, st)
            frames += st.frames
        else:
            lg = offline_logits(engine, clip)
            frames += 1 + (len(clip) - engine.n_fft) // engine.hop
        times.append(time.perf_counter() - t0)
        ref = offline_logits(engine, clip) if chunked else lg
        worst = max(worst, float(np.max(np.abs(lg - ref))))
        match &= int(np.argmax(lg)) == int(np.argmax(ref))
    t = np.array(times)
    rep.mean_s = float(t.mean())
    rep.p95_s = float(np.percentile(t, 95))
    rep.frames_per_s = frames / float(t.sum())
    rep.max_abs_vs_offline = worst
    rep.predictions_match = bool(match)
    return rep
