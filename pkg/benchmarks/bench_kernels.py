"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--batch 4]

Each kernel runs on shapes taken from the default 32x32x16 network, and a
full forward/backward/AdamW step closes the table. Both backends must give
identical outputs, which is checked before anything is timed.
"""

import argparse
import time

import numpy as np

from tlbias.engine import Tensor, backward, kernels, masked_mse
from tlbias.model import ModelConfig, build_model
from tlbias.optim import AdamWState, adamw_step


def best_of(fn, repeat):
    fn()  # warm caches and any lazy allocation
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def kernel_cases(rng, batch):
    # im2col on the widest stage (32 channels at 16x16x8), pooling on the fused input
    xp = rng.standard_normal((batch, 18, 18, 10, 32)).astype(np.float32)
    cols = np.empty((batch * 16 * 16 * 8, 27 * 32), np.float32)
    x = rng.standard_normal((batch, 32, 32, 32, 16)).astype(np.float32)
    pooled = np.empty((batch, 32, 16, 16, 8), np.float32)
    offs = np.empty(pooled.shape, np.int64)
    flat_vals = pooled.reshape(batch * 32, -1)
    flat_offs = offs.reshape(batch * 32, -1)
    dense = np.empty((batch * 32, 32 * 32 * 16), np.float32)
    gathered = np.empty_like(flat_vals)

    def unpool():
        dense[...] = 0
        kernels.active().scatter_unpool(flat_vals, flat_offs, dense)

    return {
        "im2col3": (lambda: kernels.active().im2col3(xp, cols), lambda: (cols.copy(),)),
        "maxpool3d": (lambda: kernels.active().maxpool3d(x, pooled, offs),
                      lambda: (pooled.copy(), offs.copy())),
        "scatter_unpool": (unpool, lambda: (dense.copy(),)),
        "gather_unpool": (lambda: kernels.active().gather_unpool(dense, flat_offs, gathered),
                          lambda: (gathered.copy(),)),
    }


def train_step_case(rng, batch):
    model = build_model(ModelConfig())
    params = model.parameters()
    state = AdamWState()
    a = rng.random((batch, 1, 32, 32, 16)).astype(np.float32)
    b = rng.random((batch, 1, 32, 32, 16)).astype(np.float32)
    y = rng.random((batch, 1, 32, 32, 16)).astype(np.float32)
    mask = np.ones((batch, 1, 32, 32, 16), bool)

    def step():
        model.zero_grad()
        backward(masked_mse(model.forward(Tensor(a), Tensor(b), "train"), y, mask))
        adamw_step(params, state, 1e-4)

    return step


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--batch", type=int, default=4)
    args = ap.parse_args(argv)

    if "compiled" not in kernels.BACKENDS:
        raise SystemExit("compiled extension not built; run `pip install -e . --no-build-isolation`")

    rng = np.random.default_rng(0)
    cases = kernel_cases(rng, args.batch)
    start = kernels.BACKEND
    rows = []
    try:
        for name, (run, snapshot) in cases.items():
            results, times = {}, {}
            for backend in ("python", "compiled"):
                kernels.use(backend)
                run()
                results[backend] = snapshot()
                times[backend] = best_of(run, args.repeat)
            if not all(map(np.array_equal, results["python"], results["compiled"])):
                raise SystemExit(f"{name}: backends disagree")
            rows.append((name, times["python"], times["compiled"]))

        times = {}
        for backend in ("python", "compiled"):
            kernels.use(backend)
            times[backend] = best_of(train_step_case(np.random.default_rng(1), args.batch),
                                     max(1, args.repeat // 2))
        rows.append((f"train step (batch {args.batch})", times["python"], times["compiled"]))
    finally:
        kernels.use(start)

    print(f"{'kernel':<24}{'python ms':>12}{'compiled ms':>14}{'speedup':>10}")
    for name, tp, tc in rows:
        print(f"{name:<24}{tp * 1e3:>12.2f}{tc * 1e3:>14.2f}{tp / tc:>9.2f}x")


if __name__ == "__main__":
    main()
