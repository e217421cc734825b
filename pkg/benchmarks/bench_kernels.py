"""Compare the numba kernels with the pure-numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--forward]

Prints median wall time per kernel and backend, the speedup, and the max
absolute difference between the two results.
"""

from __future__ import annotations

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from hidrop.kernels import _numpy as np_impl

try:
    from hidrop.kernels import _jit as jit_impl
except ImportError:  # numba missing
    jit_impl = None


def _median_time(fn, repeat: int) -> float:
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def cases(rng):
    x = rng.standard_normal((600, 64))
    w = rng.standard_normal((64, 128))
    q = rng.standard_normal((4, 600, 16))
    k = rng.standard_normal((4, 600, 16))
    v = rng.standard_normal((4, 600, 16))
    bias = np.where(np.tri(600, dtype=bool), 0.0, -np.inf)
    c = rng.standard_normal(576)
    return {
        "linear 600x64 @ 64x128": lambda m: m.linear(x, w),
        "attention 4x600x600": lambda m: m.attention(q, k, v, bias, 0.25),
        "rank_counts n=576": lambda m: m.rank_counts(c),
        "pairwise_sigmoid n=576": lambda m: m.pairwise_sigmoid(c, 1 / 576),
    }


def _first(out):
    return out[0] if isinstance(out, tuple) else out


def forward_time(backend: str) -> float:
    """Wall time of one 576-token toy forward in a fresh interpreter with the given backend."""
    code = (
        "import time\n"
        "from hidrop.layout import build_layout\n"
        "from hidrop.pipeline import ToyModel, forward, make_embeddings\n"
        "from hidrop.schedule import ModelShape\n"
        "from hidrop import presets\n"
        "m = ToyModel.build(ModelShape(32, 64, 128, 4), seed=0)\n"
        "lay = build_layout(4, 576, [12, 8])\n"
        "emb = make_embeddings(lay, 64, 0)\n"
        "forward(m, lay, emb, presets.schedule('hidrop'))\n"
        "t = time.perf_counter(); forward(m, lay, emb, presets.schedule('hidrop'))\n"
        "print(time.perf_counter() - t)\n"
    )
    env = {**os.environ, "HIDROP_KERNELS": backend}
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    return float(out.stdout.strip())


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--forward", action="store_true", help="also time a full pruned forward per backend")
    args = ap.parse_args(argv)
    if jit_impl is None:
        print("numba is not installed; only the numpy backend is available")
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':<26}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}{'max |diff|':>12}")
    for name, call in cases(rng).items():
        call(jit_impl)  # compile outside the timed region
        a, b = _first(call(np_impl)), _first(call(jit_impl))
        t_np = _median_time(lambda: call(np_impl), args.repeat)
        t_jit = _median_time(lambda: call(jit_impl), args.repeat)
        diff = float(np.max(np.abs(a - b)))
        print(f"{name:<26}{t_np * 1e3:>10.2f}{t_jit * 1e3:>10.2f}{t_np / t_jit:>8.1f}x{diff:>12.2e}")
    if args.forward:
        t_np, t_jit = forward_time("numpy"), forward_time("numba")
        print(f"{'forward 600 tok, 32 L':<26}{t_np * 1e3:>10.1f}{t_jit * 1e3:>10.1f}{t_np / t_jit:>8.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
