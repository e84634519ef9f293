"""Command-line entry point: ``wrenkit <verb> ...``.

Exit codes:

    0  success
    2  usage error (bad flags)
    3  configuration error
    4  data error (unreadable audio, malformed manifest, stream misuse)
    5  model error (corrupt, truncated or incompatible archive)
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_DATA, EXIT_MODEL = 0, 2, 3, 4, 5

log = logging.getLogger("wrenkit")


class UsageError(Exception):
    pass


# -- shared helpers ---------------------------------------------------------

def _add_train_flags(p: argparse.ArgumentParser) -> None:
    """One flag per TrainConfig field, same name."""
    from .config import TrainConfig

    for f in dataclasses.fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type in ("bool", bool):
            p.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None)
        elif f.name == "filter_search":
            p.add_argument(flag, dest=f.name, choices=("reject", "bound"), default=None)
        else:
            typ = int if f.type in ("int", int) else float
            p.add_argument(flag, dest=f.name, type=typ, default=None, metavar=f.name.upper())


def _train_config(args):
    from .config import TrainConfig

    kw = {f.name: getattr(args, f.name) for f in dataclasses.fields(TrainConfig)
          if getattr(args, f.name, None) is not None}
    return TrainConfig(**kw)


def _model_config(args, n_classes: int):
    from .config import PRESETS

    cfg = PRESETS[args.preset]
    fb = cfg.frontend
    fb = dataclasses.replace(fb, b=args.b if args.b is not None else fb.b,
                             w=args.w if args.w is not None else fb.w)
    return dataclasses.replace(cfg, frontend=fb, n_classes=n_classes)


def _load(path):
    from .model_io import ArchiveError, load_archive

    if not Path(path).is_file():
        raise ArchiveError(f"model file {path} not found")
    return load_archive(path)


def _read_audio(path):
    from .dataset import load_preprocessed

    return load_preprocessed(path).astype(np.float32)


def _top(probs, species, k=3) -> str:
    order = np.argsort(probs)[::-1][:k]
    return ", ".join(f"{species[i]}={probs[i]:.3f}" for i in order)


# -- verbs ------------------------------------------------------------------

def cmd_prep(args) -> int:
    from .dataset import (attach_soft_labels, prepare_dataset, read_esc50_categories,
                          read_soft_labels, write_manifest)

    cats = read_esc50_categories(args.ambient_meta) if args.ambient_meta else None
    m = prepare_dataset(args.species_dir, args.out, args.ambient_dir, cats,
                        val_frac=args.val_frac, test_frac=args.test_frac, seed=args.seed,
                        workers=args.workers, no_bird=not args.no_no_bird)
    if args.soft_labels:
        labels, _ = read_soft_labels(args.soft_labels)
        n = attach_soft_labels(m, labels)
        write_manifest(Path(args.out) / "manifest.tsv", m)
        print(f"attached {n} soft labels")
    counts = {t: len(m.split(t)) for t in ("train", "val", "test")}
    print(f"{len(m.records)} clips, {m.n_classes} classes, splits {counts}")
    print(f"manifest: {Path(args.out) / 'manifest.tsv'}")
    return EXIT_OK


def _toy_data(args):
    from .synthetic import highband_dataset, split, toy_dataset

    make = toy_dataset if args.toy == "bands" else highband_dataset
    data = make(args.toy_clips, seed=args.data_seed, duration=args.toy_duration)
    tr, va = split(data, 0.2, seed=args.data_seed)
    return tr, va, ["class0", "class1", "class2"]


def cmd_train(args) -> int:
    from .model_io import save_model
    from .training.ablation import format_table, run_ablation
    from .training.trainer import Trainer

    if (args.manifest is None) == (args.toy is None):
        raise UsageError("train needs exactly one of --manifest or --toy")
    if args.toy:
        tr, va, species = _toy_data(args)
    else:
        from .dataset import load_clipset, read_manifest

        m = read_manifest(args.manifest)
        root = Path(args.manifest).parent
        tr, va, species = load_clipset(m, "train", root), load_clipset(m, "val", root), m.species
    tcfg = _train_config(args)
    mcfg = _model_config(args, len(species))
    if args.frontend == "all":
        rows = run_ablation(tr, va, mcfg, tcfg)
        table = format_table(rows)
        print(table, end="")
        if args.report:
            Path(args.report).write_text(table)
        return EXIT_OK
    mcfg = dataclasses.replace(mcfg, frontend_mode=args.frontend)
    trainer = Trainer(mcfg, tcfg, log_path=args.log)
    tlog = trainer.fit(tr, va, track_train_acc=args.track_train_acc)
    params = trainer.export()
    print(f"best epoch {tlog.best_epoch}, val acc {trainer.accuracy(va):.4f}, "
          f"train acc {trainer.accuracy(tr):.4f}, b={params.cfg.frontend.b:.1f} "
          f"w={params.cfg.frontend.w:.2f}{' (early stop)' if tlog.stopped_early else ''}")
    if args.out:
        save_model(args.out, params, species)
        print(f"saved {args.out} ({params.param_count()} params)")
    return EXIT_OK


def cmd_infer(args) -> int:
    from .runtime import Engine, offline_predict

    lm = _load(args.model)
    engine = Engine(lm.params, backend=args.backend)
    probs = offline_predict(engine, _read_audio(args.wav))
    i = int(np.argmax(probs))
    if args.json:
        print(json.dumps({"label": lm.species[i], "index": i, "probs": probs.tolist()}))
    else:
        print(f"{lm.species[i]}\t{probs[i]:.4f}\t({_top(probs, lm.species)})")
    return EXIT_OK


def cmd_stream(args) -> int:
    from .runtime import Engine, finalize, init_stream, process_chunk, start_segment

    lm = _load(args.model)
    engine = Engine(lm.params, backend=args.backend)
    audio = _read_audio(args.wav)
    chunk = max(1, int(round(args.chunk_ms * engine.sr / 1000)))
    seg = int(round(args.segment_s * engine.sr)) if args.segment_s else 0
    st = init_stream(engine)
    since = 0
    for s in range(0, len(audio), chunk):
        if seg and since >= seg:
            end_probs, k = finalize(engine, st)
            print(f"segment\t{s / engine.sr:.2f}s\t{lm.species[k]}\t{end_probs[k]:.4f}")
            st = start_segment(engine, st, reset_hidden=args.reset_hidden)
            since = 0
        st, probs = process_chunk(engine, st, audio[s:s + chunk])
        since += len(audio[s:s + chunk])
        t = min(len(audio), s + chunk) / engine.sr
        if probs is None:
            print(f"{t:.2f}s\t(warming up)")
        else:
            k = int(np.argmax(probs))
            print(f"{t:.2f}s\t{lm.species[k]}\t{probs[k]:.4f}")
    probs, k = finalize(engine, st, pad_tail=args.pad_tail)
    print(f"final\t{lm.species[k]}\t{probs[k]:.4f}\tframes={st.frames}")
    return EXIT_OK


def cmd_export(args) -> int:
    from .model_io import agreement, quantize_int8, save_quantized

    if not args.int8:
        raise UsageError("export currently supports --int8 only")
    lm = _load(args.model)
    if args.calib_manifest:
        from .dataset import load_clipset, read_manifest

        m = read_manifest(args.calib_manifest)
        clips = list(load_clipset(m, args.calib_split, Path(args.calib_manifest).parent).audio)
    else:
        from .synthetic import toy_dataset

        clips = list(toy_dataset(args.calib_clips, seed=args.calib_seed).audio)
    clips = clips[:args.calib_clips]
    try:
        qm = quantize_int8(lm.params, clips, lm.species, args.backend)
    except ValueError as exc:
        from .dataset import DataError

        raise DataError(f"calibration: {exc}") from exc
    save_quantized(args.out, qm)
    report = qm.report.format()
    if args.report:
        Path(args.report).write_text(report)
    print(report, end="")
    print(f"calibration agreement {agreement(lm.params, qm, clips, args.backend):.4f}")
    print(f"saved {args.out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .config import PRESETS
    from .model_io import bench
    from .params import init_params

    if args.model:
        params = _load(args.model).params
    else:
        params = init_params(PRESETS[args.preset])
    rep = bench(params, args.n_clips, chunked=not args.offline,
                chunk=max(1, int(round(args.chunk_ms * params.cfg.frontend.sr / 1000))),
                seed=args.seed, backend=args.backend)
    print(json.dumps(rep.as_dict()) if args.json else rep.format(), end="\n" if args.json else "")
    return EXIT_OK


def cmd_dump_filterbank(args) -> int:
    from .config import FilterbankParams
    from .frontend import dump_filterbank

    if args.model:
        fb = _load(args.model).params.cfg.frontend
    else:
        kw = {k: getattr(args, k) for k in ("b", "w", "n", "n_fft", "sr", "f_min", "f_max")
              if getattr(args, k) is not None}
        fb = FilterbankParams(**kw)
    sys.stdout.write(dump_filterbank(fb))
    return EXIT_OK


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    from .config import PRESETS

    ap = argparse.ArgumentParser(prog="wrenkit", description="Streaming bird-call classifier tools")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("prep", help="segment recordings into 3 s clips and write a manifest")
    p.add_argument("--species-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ambient-dir")
    p.add_argument("--ambient-meta", help="ESC-50 style meta csv (filename, category)")
    p.add_argument("--soft-labels", help="soft-label file to attach to the manifest")
    p.add_argument("--val-frac", type=float, default=0.2)
    p.add_argument("--test-frac", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--no-no-bird", action="store_true", help="skip no_bird synthesis")
    p.set_defaults(func=cmd_prep)

    p = sub.add_parser("train", help="train a model (or run the frontend ablation)")
    src = p.add_argument_group("data")
    src.add_argument("--manifest")
    src.add_argument("--toy", choices=("bands", "highband"))
    src.add_argument("--toy-clips", type=int, default=300)
    src.add_argument("--toy-duration", type=float, default=1.0)
    src.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--preset", choices=sorted(PRESETS), default="toy")
    p.add_argument("--frontend", choices=("semi", "mel", "linear", "full", "all"), default="semi")
    p.add_argument("--b", type=float, help="initial breakpoint in Hz")
    p.add_argument("--w", type=float, help="initial transition width")
    p.add_argument("--out", help="weight archive to write")
    p.add_argument("--log", help="JSON-lines epoch log")
    p.add_argument("--report", help="write the ablation table here (with --frontend all)")
    p.add_argument("--track-train-acc", action="store_true")
    _add_train_flags(p.add_argument_group("training (TrainConfig fields)"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="classify a WAV file")
    p.add_argument("wav")
    p.add_argument("--model", required=True)
    p.add_argument("--json", action="store_true")
    p.add_argument("--backend", choices=("compiled", "python"))
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("stream", help="chunked inference with running estimates")
    p.add_argument("wav")
    p.add_argument("--model", required=True)
    p.add_argument("--chunk-ms", type=float, default=200.0)
    p.add_argument("--segment-s", type=float, default=0.0, help="report and restart every N s")
    p.add_argument("--reset-hidden", action="store_true", help="zero carries at segment starts")
    p.add_argument("--pad-tail", action="store_true")
    p.add_argument("--backend", choices=("compiled", "python"))
    p.set_defaults(func=cmd_stream)

    p = sub.add_parser("export", help="write an int8 archive with a per-layer SNR report")
    p.add_argument("--model", required=True)
    p.add_argument("--int8", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("--calib-manifest")
    p.add_argument("--calib-split", default="train")
    p.add_argument("--calib-clips", type=int, default=32)
    p.add_argument("--calib-seed", type=int, default=0)
    p.add_argument("--report")
    p.add_argument("--backend", choices=("compiled", "python"))
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("bench", help="wall time per 3 s inference")
    p.add_argument("--model")
    p.add_argument("--preset", choices=sorted(PRESETS), default="136k")
    p.add_argument("--n-clips", type=int, default=20)
    p.add_argument("--chunk-ms", type=float, default=200.0)
    p.add_argument("--offline", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", action="store_true")
    p.add_argument("--backend", choices=("compiled", "python"))
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("dump-filterbank", help="print filter centres and FFT bins")
    p.add_argument("--model")
    for k, typ in (("b", float), ("w", float), ("n", int), ("n-fft", int), ("sr", int),
                   ("f-min", float), ("f-max", float)):
        p.add_argument("--" + k, dest=k.replace("-", "_"), type=typ)
    p.set_defaults(func=cmd_dump_filterbank)
    return ap


def main(argv=None) -> int:
    from .config import ConfigError
    from .dataset import DataError
    from .model_io import ArchiveError
    from .runtime import StreamError

    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ArchiveError as exc:
        print(f"model error: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, StreamError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
