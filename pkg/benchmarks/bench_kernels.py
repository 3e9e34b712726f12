"""Compare the numba and pure-numpy kernel paths, plus exact vs anchored attention.

    python benchmarks/bench_kernels.py [--repeats 20] [--steps 10]

Kernel timings call both implementations directly. The training-step timing
runs a child process per backend because the dispatch is fixed at import
(``GRL_NUMBA``).
"""

import argparse
import json
import os
import statistics
import subprocess
import sys
import time

import numpy as np

from grl.tensor import kernels


def median_ms(fn, repeats):
    fn()  # warm-up (and JIT compile)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(times)


def kernel_rows(repeats):
    r = np.random.default_rng(0)
    # shapes seen in a GRL-micro training step (batch 4, 32x32, 16 channels)
    src = r.standard_normal((4, 1024, 8)).astype(np.float32)
    idx = r.permutation(1024)
    x = r.standard_normal((4, 16, 34, 34)).astype(np.float32)
    cols = kernels.im2col_numpy(x, 3, 3)
    cases = {
        "scatter_add": (lambda: kernels.scatter_add_numpy(src, idx, 1024), lambda: kernels.scatter_add_numba(src, idx, 1024)),
        "im2col": (lambda: kernels.im2col_numpy(x, 3, 3), lambda: kernels.im2col_numba(x, 3, 3)),
        "col2im": (lambda: kernels.col2im_numpy(cols, 16, 3, 3), lambda: kernels.col2im_numba(cols, 16, 3, 3)),
    }
    for name, (np_fn, nb_fn) in cases.items():
        np.testing.assert_allclose(np_fn(), nb_fn(), rtol=1e-5, atol=1e-5)
        yield name, median_ms(np_fn, repeats), median_ms(nb_fn, repeats)


STEP_SCRIPT = """
import json, sys, time
from grl.model import GRL, GRLConfig
from grl.train import TrainConfig, training_batch, loss_and_grads
steps = int(sys.argv[1])
model = GRL(GRLConfig(), seed=0)
x, y = training_batch(TrainConfig(), 0)
loss_and_grads(model, x, y)
t0 = time.perf_counter()
for _ in range(steps):
    loss_and_grads(model, x, y)
print(json.dumps((time.perf_counter() - t0) / steps * 1e3))
"""


def train_step_ms(backend, steps):
    env = dict(os.environ, GRL_NUMBA="1" if backend == "numba" else "0")
    out = subprocess.run([sys.executable, "-c", STEP_SCRIPT, str(steps)], env=env, capture_output=True, text=True, check=True)
    return json.loads(out.stdout)


def attention_row(repeats):
    from grl.cli import bench_row

    return bench_row(2048, 128, 32, repeats)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--steps", type=int, default=10)
    args = ap.parse_args()

    print(f"{'kernel':<14}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for name, t_np, t_nb in kernel_rows(args.repeats):
        print(f"{name:<14}{t_np:>12.3f}{t_nb:>12.3f}{t_np / t_nb:>9.1f}x")
    t_np, t_nb = train_step_ms("numpy", args.steps), train_step_ms("numba", args.steps)
    print(f"{'train step':<14}{t_np:>12.1f}{t_nb:>12.1f}{t_np / t_nb:>9.1f}x")

    n, na, d, fe, fa, we, wa = attention_row(3)
    print(f"\nattention n={n} na={na} d={d}: flops {fe} vs {fa} ({fe / fa:.1f}x), "
          f"wall {we} ms vs {wa} ms ({float(we) / float(wa):.1f}x)")


if __name__ == "__main__":
    main()
