"""Compare the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--preset 136k] [--clips 10] [--repeat 3]

Times each kernel in isolation on the shapes the deployment model uses and
then a full chunked 3 s inference per backend.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from wrenkit import kernels
from wrenkit.config import PRESETS
from wrenkit.params import init_params
from wrenkit.runtime import Engine, final_logits, init_stream, process_chunk


def _best(fn, repeat: int) -> float:
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def kernel_cases(cfg, rng):
    C = cfg.stem_channels
    H = cfg.hidden
    T = 20  # frames in one 200 ms chunk
    x = rng.normal(size=(T, C)).astype(np.float32)
    ctx = rng.normal(size=((cfg.kernel_size - 1) * 4, C)).astype(np.float32)
    taps = rng.normal(size=(cfg.kernel_size, C)).astype(np.float32)
    bias = rng.normal(size=C).astype(np.float32)
    xp = rng.normal(size=(T, 3 * H)).astype(np.float32)
    w_hh = rng.normal(0, 0.2, (3 * H, H)).astype(np.float32)
    b_hh = rng.normal(size=3 * H).astype(np.float32)
    hs = rng.normal(size=(T, H)).astype(np.float32)
    v = rng.normal(size=H).astype(np.float32)
    return {
        "causal_depthwise": lambda k: k.causal_depthwise(x, ctx, taps, bias, 4),
        "se_running_mean": lambda k: k.se_running_mean(x, 0, np.zeros(C)),
        "gru_scan": lambda k: k.gru_scan(xp, np.zeros(H, np.float32), w_hh, b_hh),
        "attn_scan": lambda k: k.attn_scan(hs, v, 0.0, np.array([-np.inf, 0.0]), np.zeros(H)),
    }


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--preset", default="136k", choices=sorted(PRESETS))
    ap.add_argument("--clips", type=int, default=10)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--inner", type=int, default=200, help="kernel calls per timing sample")
    args = ap.parse_args(argv)

    names = sorted(kernels.BACKENDS)
    if "compiled" not in names:
        print("compiled extension not built; only the python backend is available")
    cfg = PRESETS[args.preset]
    rng = np.random.default_rng(0)
    cases = kernel_cases(cfg, rng)

    print(f"{'kernel':<18}" + "".join(f"{n + ' us':>14}" for n in names) + f"{'speedup':>10}")
    for name, fn in cases.items():
        per = {}
        for b in names:
            k = kernels.BACKENDS[b]
            per[b] = _best(lambda: [fn(k) for _ in range(args.inner)], args.repeat) / args.inner * 1e6
        speed = per["python"] / per["compiled"] if "compiled" in per else float("nan")
        print(f"{name:<18}" + "".join(f"{per[b]:>14.2f}" for b in names) + f"{speed:>10.1f}x")

    params = init_params(cfg)
    clips = [rng.normal(0, 0.1, 96000).astype(np.float32) for _ in range(args.clips)]
    results, logits = {}, {}
    for b in names:
        eng = Engine(params, backend=b)

        def run():
            out = []
            for c in clips:
                st = init_stream(eng)
                for i in range(0, len(c), 6400):
                    process_chunk(eng, st, c[i:i + 6400])
                out.append(final_logits(eng, st))
            return out

        logits[b] = run()
        results[b] = _best(run, args.repeat) / len(clips)
    print()
    print(f"{'3 s clip, 200 ms chunks':<26}" + "".join(f"{b + ' ms':>14}" for b in names))
    print(f"{'':<26}" + "".join(f"{results[b] * 1e3:>14.2f}" for b in names))
    if len(names) == 2:
        diff = max(float(np.max(np.abs(a - c))) for a, c in zip(logits["compiled"], logits["python"]))
        speed = results["python"] / results["compiled"]
        print(f"speedup {speed:.1f}x, max |logit diff| {diff:.2e}")


if __name__ == "__main__":
    main()
