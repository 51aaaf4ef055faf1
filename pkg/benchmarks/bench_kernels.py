"""Compare the numba and numpy convolution kernels.

Run ``python3 benchmarks/bench_kernels.py``. The first numba call compiles
(or loads the on-disk cache), so it is warmed up before timing. A second
table times a full learner update with each backend in a fresh process,
since the backend is chosen from ``DARQN_NUMBA`` at import time.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from darqn import _kernels as K

# (label, input shape, kernel, stride): the first layer of each profile at batch 32 x unroll 5
CASES = [
    ("small conv1", (160, 1, 24, 24), 4, 2),
    ("small conv2", (160, 8, 11, 11), 3, 2),
    ("paper conv1", (32, 1, 84, 84), 8, 4),
    ("paper conv2", (32, 32, 20, 20), 4, 2),
]

UPDATE_SNIPPET = """
import time, numpy as np
from darqn.agent import Architecture, Network
from darqn.training import Learner, SegmentBatch, TrainConfig
from darqn import _kernels
net = Network(Architecture.from_profile("{model}", "small", 3))
rng = np.random.default_rng(0)
p = net.init_params(rng)
learner = Learner(net, p, TrainConfig(), rng)
b = SegmentBatch(rng.random((32, 5, 24, 24)), rng.integers(3, size=(32, 4)),
                 rng.normal(size=(32, 4)), np.zeros((32, 4), bool),
                 np.zeros(32, np.int64), np.zeros(32, np.int64))
learner.update(b, 1e-4)
t = time.perf_counter()
for _ in range({reps}):
    learner.update(b, 1e-4)
print(_kernels.backend(), (time.perf_counter() - t) / {reps} * 1e3)
"""


def best_ms(fn, number):
    return min(timeit.repeat(fn, number=number, repeat=5)) / number * 1e3


def kernel_table(number):
    rng = np.random.default_rng(0)
    print(f"{'case':<12} {'op':<7} {'numpy ms':>9} {'numba ms':>9} {'speedup':>8}")
    for label, shape, k, s in CASES:
        x = rng.random(shape)
        cols = K.im2col_numpy(x, k, s)
        assert np.array_equal(cols, K.im2col_numba(x, k, s))
        back_np = K.col2im_numpy(cols, shape, k, s)
        back_nb = K.col2im_numba(cols, shape, k, s)
        assert np.allclose(back_np, back_nb, rtol=0, atol=1e-12)
        for op, f_np, f_nb in (
                ("im2col", lambda: K.im2col_numpy(x, k, s), lambda: K.im2col_numba(x, k, s)),
                ("col2im", lambda: K.col2im_numpy(cols, shape, k, s),
                 lambda: K.col2im_numba(cols, shape, k, s))):
            t_np, t_nb = best_ms(f_np, number), best_ms(f_nb, number)
            print(f"{label:<12} {op:<7} {t_np:9.3f} {t_nb:9.3f} {t_np / t_nb:7.2f}x")


def update_table(reps):
    print(f"\n{'model':<11} {'backend':<7} {'ms / update':>11}")
    for model in ("dqn", "darqn_soft"):
        for flag in ("1", "0"):
            env = dict(os.environ, DARQN_NUMBA=flag)
            out = subprocess.run([sys.executable, "-c", UPDATE_SNIPPET.format(model=model, reps=reps)],
                                 env=env, capture_output=True, text=True, check=True).stdout.split()
            print(f"{model:<11} {out[0]:<7} {float(out[1]):11.2f}")


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--number", type=int, default=20, help="calls per timing repeat")
    ap.add_argument("--updates", type=int, default=20, help="learner updates per backend")
    ap.add_argument("--skip-updates", action="store_true")
    args = ap.parse_args(argv)
    if not K.HAS_NUMBA:
        sys.exit("numba is not importable; nothing to compare")
    kernel_table(args.number)
    if not args.skip_updates:
        update_table(args.updates)


if __name__ == "__main__":
    main()
