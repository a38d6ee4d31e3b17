"""Time the compiled and numpy kernel backends side by side.

Usage: python benchmarks/bench_kernels.py [--repeat N] [--size S]

Besides the raw kernels it times one full training step of the
segmentation network under each backend (in a subprocess, since the
backend is fixed at import).
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from cpgan import _pykernels

try:
    from cpgan import _ckernels
except ImportError:
    _ckernels = None

STEP_SNIPPET = """
import time
from cpgan import kernels
from cpgan.data import SynthConfig, generate_synthetic
from cpgan.networks import init_params
from cpgan.trainer import TrainConfig, make_optimizers, train_step
batch = generate_synthetic(SynthConfig(count=4, size={size}, seed=0))
nets = init_params(0); nets.assistant.freeze()
cfg = TrainConfig()
opt = make_optimizers(nets, cfg.lr)
train_step(batch, nets, opt, cfg)
t = time.perf_counter()
for _ in range({n}):
    train_step(batch, nets, opt, cfg)
print(kernels.BACKEND, (time.perf_counter() - t) / {n})
"""


def cases(size: int):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(8, 16, size, size)).astype(np.float32)
    cols, _, _ = _pykernels.im2col(x, 3, 3, 1, 1)
    y = _pykernels.softmax_lastaxis(rng.normal(size=(2, (size // 2) ** 2, (size // 2) ** 2)).astype(np.float32))
    g = rng.normal(size=y.shape).astype(np.float32)
    return {
        f"im2col 3x3 (8,16,{size},{size})": lambda m: m.im2col(x, 3, 3, 1, 1),
        f"im2col 3x3 stride 2 (8,16,{size},{size})": lambda m: m.im2col(x, 3, 3, 2, 1),
        f"col2im 3x3 (8,16,{size},{size})": lambda m: m.col2im(cols, x.shape, 3, 3, 1, 1),
        f"softmax grad {y.shape}": lambda m: m.softmax_lastaxis_grad(y, g),
    }


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--size", type=int, default=32)
    ap.add_argument("--steps", type=int, default=5, help="training steps per backend (0 skips)")
    args = ap.parse_args(argv)

    if _ckernels is None:
        print("compiled extension not built; only the numpy backend is available")
    print(f"{'kernel':44s} {'numpy ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for name, fn in cases(args.size).items():
        t_py = min(timeit.repeat(lambda: fn(_pykernels), number=1, repeat=args.repeat)) * 1e3
        if _ckernels is None:
            print(f"{name:44s} {t_py:10.3f} {'-':>10s} {'-':>8s}")
            continue
        t_c = min(timeit.repeat(lambda: fn(_ckernels), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:44s} {t_py:10.3f} {t_c:10.3f} {t_py / t_c:7.2f}x")

    if args.steps:
        print(f"\ntrain_step, batch 4 at {args.size}x{args.size}, mean of {args.steps}:")
        for pure in ("1", "0"):
            env = dict(os.environ, CPGAN_PURE_PYTHON=pure)
            code = STEP_SNIPPET.format(size=args.size, n=args.steps)
            out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
            backend, secs = out.stdout.split()
            print(f"  {backend:8s} {float(secs):.3f} s/step")
    return 0


if __name__ == "__main__":
    sys.exit(main())
