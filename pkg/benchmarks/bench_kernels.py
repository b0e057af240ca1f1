"""Time the numba and numpy kernel flavors side by side.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Also times one desk-scale training step under each backend (the backend is
fixed at import, so that part runs in subprocesses).
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from deepcount import _kernels as K

STEP = """
import time, numpy as np
from deepcount import network as N, trainer as TR, synthetic as S
spec = N.NetworkSpec.desk()
m = N.build(spec, seed=0)
b = TR.make_batch(S.make_samples(8, seed=0), spec)
cfg = TR.TrainConfig.desk()
st = TR.OptimizerState.for_model(m)
TR.compute_gradients(m, b, cfg); TR.step(m, st, cfg)
t = time.perf_counter()
for _ in range(%d):
    TR.compute_gradients(m, b, cfg); TR.step(m, st, cfg)
print((time.perf_counter() - t) / %d)
"""


def best(fn, repeat):
    fn()  # warm up (numba compiles on first call)
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if not K.HAVE_NUMBA:
        sys.exit("numba is not installed; nothing to compare")
    rng = np.random.default_rng(0)
    cases = []
    xp = rng.standard_normal((8, 50, 66, 32)).astype(np.float32)
    cases.append(("im2col 8x48x64x32 k3",
                  lambda: K.im2col_numpy(xp, 3, 3, 1, 48, 64), lambda: K.im2col_numba(xp, 3, 3, 1, 48, 64)))
    cols = rng.standard_normal((8, 12, 16, 4, 4, 64)).astype(np.float32)
    cases.append(("col2im 8x12x16 k4 s2 c64",
                  lambda: K.col2im_numpy(cols, 26, 34, 2), lambda: K.col2im_numba(cols, 26, 34, 2)))
    xs, ys = rng.uniform(0, 512, 300), rng.uniform(0, 384, 300)
    cases.append(("splat 300 heads 384x512",
                  lambda: K.splat_numpy(xs, ys, 384, 512, 5.0, 20), lambda: K.splat_numba(xs, ys, 384, 512, 5.0, 20)))
    print(f"{'kernel':<28s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, a, b in cases:
        ta, tb = best(a, args.repeat), best(b, args.repeat)
        print(f"{name:<28s} {1e3 * ta:10.2f} {1e3 * tb:10.2f} {ta / tb:8.2f}")
    print()
    for backend in ("numpy", "numba"):
        env = dict(os.environ, DEEPCOUNT_BACKEND=backend)
        out = subprocess.run([sys.executable, "-c", STEP % (args.repeat, args.repeat)], env=env,
                             capture_output=True, text=True, check=True)
        print(f"desk training step, batch 8, {backend:<5s}: {1e3 * float(out.stdout):8.1f} ms")


if __name__ == "__main__":
    main()
