"""Recording preprocessing, vocalization segmentation and clip manifests.

Manifest file (tab separated, one header comment, one column header):

    # wrenkit-manifest v1
    clip_id  clip_path  source  start  label  split  prominence  teacher

``start`` is the sample offset of the clip in the preprocessed 32 kHz
source, ``prominence`` is ``nan`` for fallback and no_bird clips, and
``teacher`` is ``-`` or space-separated probabilities.

Soft-label file:

    # wrenkit-softlabels v1 threshold=0.05 classes=K
    clip_id<TAB>p_0 p_1 ... p_{K-1}      (6 decimals)
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy import signal
from scipy.io import wavfile

log = logging.getLogger(__name__)

TARGET_SR = 32000
CLIP_SAMPLES = 3 * TARGET_SR
ENV_WINDOW = 1600  # 50 ms
ENV_HOP = 320  # 10 ms
PEAK_DISTANCE = 100  # envelope steps, 1 s
PEAK_PERCENTILE = 75.0
LOW_ENERGY_PERCENTILE = 25.0
SILENCE_RMS = 1e-4
MIN_LOW_ENERGY_STEPS = 50  # 0.5 s
HIGHPASS_HZ = 150.0
NO_BIRD = "no_bird"

MANIFEST_HEADER = "# wrenkit-manifest v1"
MANIFEST_COLUMNS = ("clip_id", "clip_path", "source", "start", "label", "split",
                    "prominence", "teacher")
SOFTLABEL_TAG = "# wrenkit-softlabels v1"

# ESC-50 categories never used as no_bird material.
EXCLUDED_AMBIENT = frozenset({
    "chirping_birds", "crow", "rooster", "hen",
    "siren", "church_bells", "helicopter", "airplane", "fireworks", "chainsaw", "hand_saw",
})


class DataError(ValueError):
    """Unreadable, empty or malformed audio/manifest input."""


# -- audio io ---------------------------------------------------------------

def read_wav(path) -> tuple[np.ndarray, int]:
    """16-bit PCM WAV -> float64 samples in [-1, 1], shape (N,) or (N, C)."""
    try:
        sr, data = wavfile.read(path)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if data.dtype != np.int16:
        raise DataError(f"{path}: only 16-bit PCM WAV is supported, got {data.dtype}")
    if data.size == 0:
        raise DataError(f"{path}: empty audio")
    return data.astype(np.float64) / 32768.0, int(sr)


def write_wav(path, audio: np.ndarray, sr: int = TARGET_SR) -> None:
    pcm = np.clip(np.round(np.asarray(audio) * 32768.0), -32768, 32767).astype(np.int16)
    wavfile.write(path, sr, pcm)


def to_mono(audio: np.ndarray) -> np.ndarray:
    audio = np.asarray(audio, dtype=np.float64)
    return audio.mean(axis=1) if audio.ndim == 2 else audio


def resample_and_filter(audio: np.ndarray, src_rate: int, target_rate: int = TARGET_SR) -> np.ndarray:
    """Mono, resampled to ``target_rate`` and high-passed at 150 Hz.

    The 16 kHz upper band edge coincides with Nyquist at 32 kHz, so only the
    high-pass is realized.  It runs forward and backward (zero phase), which
    squares the 4th-order Butterworth magnitude response.
    """
    if src_rate <= 0:
        raise DataError(f"invalid sample rate {src_rate}")
    x = to_mono(audio)
    if x.size == 0:
        raise DataError("empty audio")
    if not np.all(np.isfinite(x)):
        raise DataError("non-finite samples")
    if src_rate != target_rate:
        ratio = Fraction(target_rate, src_rate).limit_denominator(10000)
        x = signal.resample_poly(x, ratio.numerator, ratio.denominator)
    sos = signal.butter(4, HIGHPASS_HZ, btype="highpass", fs=target_rate, output="sos")
    if len(x) > 3 * (2 * sos.shape[0] + 1):
        x = signal.sosfiltfilt(sos, x)
    else:
        x = signal.sosfilt(sos, x)
    return x


def load_preprocessed(path) -> np.ndarray:
    audio, sr = read_wav(path)
    return resample_and_filter(audio, sr)


# -- segmentation -----------------------------------------------------------

@dataclass
class EnvelopeSeries:
    values: np.ndarray
    source_length: int
    window: int = ENV_WINDOW
    hop: int = ENV_HOP

    def center_sample(self, i: int) -> int:
        return i * self.hop + self.window // 2


def envelope_length(n: int, window: int = ENV_WINDOW, hop: int = ENV_HOP) -> int:
    return (n - window) // hop + 1 if n >= window else 0


def compute_envelope(audio: np.ndarray, window: int = ENV_WINDOW, hop: int = ENV_HOP) -> EnvelopeSeries:
    """RMS over ``window``-sample windows every ``hop`` samples."""
    x = np.asarray(audio, dtype=np.float64)
    if len(x) < window:
        raise DataError(f"need at least {window} samples for an envelope, got {len(x)}")
    sq = np.concatenate([[0.0], np.cumsum(x * x)])
    n = envelope_length(len(x), window, hop)
    starts = np.arange(n) * hop
    energy = np.maximum(sq[starts + window] - sq[starts], 0.0) / window
    return EnvelopeSeries(np.sqrt(energy), len(x), window, hop)


@dataclass(frozen=True)
class Peak:
    index: int
    prominence: float


def detect_peaks(env: EnvelopeSeries, distance: int = PEAK_DISTANCE,
                 percentile: float = PEAK_PERCENTILE) -> list[Peak]:
    """Prominent envelope maxima, at least ``distance`` steps apart.

    Candidates are all local maxima.  Those below the ``percentile`` of the
    candidate prominences are discarded, then the rest are accepted greedily
    in order of prominence while respecting the distance constraint.
    """
    v = np.asarray(env.values, dtype=np.float64)
    if v.size == 0:
        return []
    idx, props = signal.find_peaks(v, prominence=0.0)
    if idx.size == 0:
        return []
    prom = props["prominences"]
    keep = prom >= np.percentile(prom, percentile)
    idx, prom = idx[keep], prom[keep]
    order = sorted(range(len(idx)), key=lambda k: (-prom[k], idx[k]))
    chosen: list[Peak] = []
    for k in order:
        if all(abs(int(idx[k]) - p.index) >= distance for p in chosen):
            chosen.append(Peak(int(idx[k]), float(prom[k])))
    return chosen


@dataclass
class ClipInfo:
    start: int
    fallback: bool
    peak_index: int | None = None
    prominence: float = float("nan")


def standardize(audio: np.ndarray, length: int = CLIP_SAMPLES) -> np.ndarray:
    out = np.zeros(length, dtype=np.float64)
    n = min(length, len(audio))
    out[:n] = audio[:n]
    return out


def extract_clip(audio: np.ndarray, peaks: list[Peak], env: EnvelopeSeries | None = None,
                 length: int = CLIP_SAMPLES) -> tuple[np.ndarray, ClipInfo]:
    """Clip centred on the earliest selected peak, else the first ``length`` samples."""
    audio = np.asarray(audio, dtype=np.float64)
    if not peaks:
        return standardize(audio, length), ClipInfo(0, True)
    first = min(peaks, key=lambda p: p.index)
    window = env.window if env is not None else ENV_WINDOW
    hop = env.hop if env is not None else ENV_HOP
    center = first.index * hop + window // 2
    start = center - length // 2
    start = max(0, min(start, len(audio) - length))
    return standardize(audio[start:], length), ClipInfo(start, False, first.index, first.prominence)


def low_energy_segments(env: EnvelopeSeries, percentile: float = LOW_ENERGY_PERCENTILE,
                        min_steps: int = MIN_LOW_ENERGY_STEPS,
                        silence: float = SILENCE_RMS) -> list[tuple[int, int]]:
    """Sample spans [start, stop) whose envelope stays below the file's percentile.

    A step qualifies when it is strictly below the percentile or below the
    absolute silence floor; runs shorter than ``min_steps`` are dropped.
    A run maps to the samples between the end of its first window and the
    start of its last one, so windows straddling a loud edge never pull
    loud samples into the span.  Runs touching a file end extend to it.
    """
    v = env.values
    thr = np.percentile(v, percentile)
    low = (v < thr) | (v <= silence)
    spans = []
    i = 0
    n = len(v)
    while i < n:
        if not low[i]:
            i += 1
            continue
        j = i
        while j < n and low[j]:
            j += 1
        if j - i >= min_steps:
            a = 0 if i == 0 else i * env.hop + env.window
            b = env.source_length if j == n else (j - 1) * env.hop
            if b > a:
                spans.append((a, b))
        i = j
    return spans


@dataclass
class NoBirdClip:
    audio: np.ndarray
    source: str
    start: int
    kind: str  # "low_energy" | "ambient"


def synthesize_no_bird(bird_pool, ambient_pool=(), exclude=EXCLUDED_AMBIENT,
                       max_per_file: int = 2, length: int = CLIP_SAMPLES) -> list[NoBirdClip]:
    """no_bird clips from quiet stretches of bird recordings and ambient files.

    ``bird_pool`` holds ``(name, audio)`` pairs; ``ambient_pool`` holds
    ``(name, category, audio)`` triples, and categories in ``exclude`` are
    rejected.  All audio is expected preprocessed at 32 kHz.
    """
    bird_pool = list(bird_pool)
    ambient_pool = list(ambient_pool)
    if not bird_pool and not ambient_pool:
        raise DataError("no_bird synthesis needs at least one bird or ambient file")
    out: list[NoBirdClip] = []
    for name, audio in bird_pool:
        if len(audio) < ENV_WINDOW:
            continue
        env = compute_envelope(audio)
        taken = 0
        for a, b in low_energy_segments(env):
            for s in range(a, b, length):
                if taken >= max_per_file:
                    break
                out.append(NoBirdClip(standardize(audio[s:min(b, s + length)], length),
                                      str(name), s, "low_energy"))
                taken += 1
    for name, category, audio in ambient_pool:
        if category in exclude:
            log.info("skipping ambient %s (excluded category %s)", name, category)
            continue
        out.append(NoBirdClip(standardize(audio, length), str(name), 0, "ambient"))
    return out


# -- manifests --------------------------------------------------------------

@dataclass
class ClipRecord:
    clip_id: str
    clip_path: str
    source: str
    start: int
    label: int
    split: str
    prominence: float = float("nan")
    teacher: np.ndarray | None = None


@dataclass
class ClipManifest:
    species: list[str]
    records: list[ClipRecord] = field(default_factory=list)

    @property
    def n_classes(self) -> int:
        return len(self.species)

    def split(self, tag: str) -> list[ClipRecord]:
        return [r for r in self.records if r.split == tag]

    def validate(self) -> None:
        for r in self.records:
            if not 0 <= r.label < self.n_classes:
                raise DataError(f"{r.clip_id}: label {r.label} outside species list")


def write_manifest(path, manifest: ClipManifest) -> None:
    with open(path, "w") as fh:
        fh.write(MANIFEST_HEADER + "\n")
        fh.write("# species=" + ",".join(manifest.species) + "\n")
        fh.write("\t".join(MANIFEST_COLUMNS) + "\n")
        for r in sorted(manifest.records, key=lambda r: r.clip_id):
            teacher = "-" if r.teacher is None else " ".join(f"{p:.6f}" for p in r.teacher)
            fh.write("\t".join([r.clip_id, r.clip_path, r.source, str(r.start), str(r.label),
                                r.split, f"{r.prominence:.6g}", teacher]) + "\n")


def read_manifest(path) -> ClipManifest:
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    if not lines or lines[0].strip() != MANIFEST_HEADER:
        raise DataError(f"{path}: missing '{MANIFEST_HEADER}' header")
    if len(lines) < 3 or not lines[1].startswith("# species="):
        raise DataError(f"{path}: missing species line")
    species = lines[1][len("# species="):].split(",")
    if tuple(lines[2].split("\t")) != MANIFEST_COLUMNS:
        raise DataError(f"{path}: unexpected columns {lines[2]!r}")
    records = []
    for ln, line in enumerate(lines[3:], start=4):
        if not line.strip():
            continue
        f = line.split("\t")
        if len(f) != len(MANIFEST_COLUMNS):
            raise DataError(f"{path}:{ln}: expected {len(MANIFEST_COLUMNS)} fields, got {len(f)}")
        teacher = None if f[7] == "-" else np.array([float(v) for v in f[7].split()])
        records.append(ClipRecord(f[0], f[1], f[2], int(f[3]), int(f[4]), f[5], float(f[6]), teacher))
    m = ClipManifest(species, records)
    m.validate()
    return m


def write_soft_labels(path, labels: dict[str, np.ndarray], threshold: float = 0.05) -> None:
    k = len(next(iter(labels.values()))) if labels else 0
    with open(path, "w") as fh:
        fh.write(f"{SOFTLABEL_TAG} threshold={threshold} classes={k}\n")
        for cid in sorted(labels):
            fh.write(cid + "\t" + " ".join(f"{p:.6f}" for p in labels[cid]) + "\n")


def read_soft_labels(path) -> tuple[dict[str, np.ndarray], float]:
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read soft labels {path}: {exc}") from exc
    if not lines or not lines[0].startswith(SOFTLABEL_TAG):
        raise DataError(f"{path}: missing '{SOFTLABEL_TAG}' header")
    meta = dict(kv.split("=", 1) for kv in lines[0][len(SOFTLABEL_TAG):].split())
    threshold, k = float(meta["threshold"]), int(meta["classes"])
    out = {}
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cid, _, rest = line.partition("\t")
        p = np.array([float(v) for v in rest.split()])
        if len(p) != k:
            raise DataError(f"{path}:{ln}: expected {k} probabilities, got {len(p)}")
        out[cid] = p
    return out, threshold


def attach_soft_labels(manifest: ClipManifest, labels: dict[str, np.ndarray]) -> int:
    n = 0
    for r in manifest.records:
        if r.clip_id in labels:
            if len(labels[r.clip_id]) != manifest.n_classes:
                raise DataError(f"{r.clip_id}: soft label has wrong class count")
            r.teacher = labels[r.clip_id]
            n += 1
    return n


def load_clip(record: ClipRecord, root=None) -> np.ndarray:
    path = Path(record.clip_path)
    if root is not None and not path.is_absolute():
        path = Path(root) / path
    audio, sr = read_wav(path)
    if sr != TARGET_SR:
        raise DataError(f"{path}: clip stored at {sr} Hz, expected {TARGET_SR}")
    audio = to_mono(audio)
    if len(audio) != CLIP_SAMPLES:
        raise DataError(f"{path}: clip has {len(audio)} samples, expected {CLIP_SAMPLES}")
    return audio


def load_clipset(manifest: ClipManifest, split: str, root=None):
    from .training.trainer import ClipSet

    recs = manifest.split(split)
    if not recs:
        return ClipSet(np.zeros((0, CLIP_SAMPLES), np.float32), np.zeros(0, np.int64))
    audio = np.stack([load_clip(r, root) for r in recs]).astype(np.float32)
    labels = np.array([r.label for r in recs], dtype=np.int64)
    mask = np.array([r.teacher is not None for r in recs])
    teacher = None
    if mask.any():
        teacher = np.stack([r.teacher if r.teacher is not None else np.zeros(manifest.n_classes)
                            for r in recs])
    return ClipSet(audio, labels, teacher, mask if teacher is not None else None)


# -- pipeline ---------------------------------------------------------------

def _process_bird_file(path: str):
    audio = load_preprocessed(path)
    if len(audio) >= ENV_WINDOW:
        env = compute_envelope(audio)
        peaks = detect_peaks(env)
    else:
        env, peaks = None, []
    clip, info = extract_clip(audio, peaks, env)
    return path, audio, clip, info


def _assign_splits(ids: list[str], val_frac: float, test_frac: float, seed: int) -> dict[str, str]:
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ids))
    n_val = int(round(len(ids) * val_frac))
    n_test = int(round(len(ids) * test_frac))
    tags = {}
    for rank, k in enumerate(order):
        tags[ids[k]] = "val" if rank < n_val else "test" if rank < n_val + n_test else "train"
    return tags


def prepare_dataset(species_dir, out_dir, ambient_dir=None, ambient_labels=None,
                    val_frac: float = 0.2, test_frac: float = 0.0, seed: int = 0,
                    workers: int = 1, no_bird: bool = True) -> ClipManifest:
    """Segment every ``species_dir/<species>/*.wav`` into one standardized clip.

    Clips are written to ``out_dir/clips`` and the manifest to
    ``out_dir/manifest.tsv``.  ``ambient_labels`` maps ambient file names to
    categories (e.g. read from the ESC-50 metadata); ambient files without a
    category are used as-is.
    """
    species_dir, out_dir = Path(species_dir), Path(out_dir)
    species = sorted(p.name for p in species_dir.iterdir() if p.is_dir())
    if not species:
        raise DataError(f"{species_dir}: no species sub-directories")
    files = [(s, str(f)) for s in species for f in sorted((species_dir / s).glob("*.wav"))]
    if not files:
        raise DataError(f"{species_dir}: no .wav files")
    if no_bird:
        species = species + [NO_BIRD]
    label_of = {s: i for i, s in enumerate(species)}
    clip_dir = out_dir / "clips"
    clip_dir.mkdir(parents=True, exist_ok=True)

    paths = [f for _, f in files]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            results = list(ex.map(_process_bird_file, paths))
    else:
        results = [_process_bird_file(p) for p in paths]

    pending = []  # (clip_id, audio, source, start, label, prominence)
    bird_pool = []
    for (sp, _), (path, audio, clip, info) in zip(files, results):
        cid = f"{sp}/{Path(path).stem}"
        pending.append((cid, clip, path, info.start, label_of[sp], info.prominence))
        bird_pool.append((path, audio))

    if no_bird:
        ambient = []
        if ambient_dir is not None:
            cats = ambient_labels or {}
            for f in sorted(Path(ambient_dir).glob("*.wav")):
                ambient.append((str(f), cats.get(f.name, ""), load_preprocessed(f)))
        for k, nb in enumerate(synthesize_no_bird(bird_pool, ambient)):
            cid = f"{NO_BIRD}/{k:06d}_{Path(nb.source).stem}_{nb.kind}"
            pending.append((cid, nb.audio, nb.source, nb.start, label_of[NO_BIRD], float("nan")))

    splits = _assign_splits([p[0] for p in pending], val_frac, test_frac, seed)
    manifest = ClipManifest(species)
    for cid, clip, src, start, label, prom in sorted(pending, key=lambda p: p[0]):
        rel = Path("clips") / (cid.replace("/", "__") + ".wav")
        write_wav(out_dir / rel, clip)
        manifest.records.append(ClipRecord(cid, str(rel), os.path.relpath(src, out_dir), start,
                                           label, splits[cid], prom))
    write_manifest(out_dir / "manifest.tsv", manifest)
    return manifest


def read_esc50_categories(meta_csv) -> dict[str, str]:
    """filename -> category from an ESC-50 style ``meta/esc50.csv``."""
    import csv

    with open(meta_csv, newline="") as fh:
        return {row["filename"]: row["category"] for row in csv.DictReader(fh)}

