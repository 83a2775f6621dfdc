"""Time the numba kernels against their numpy fallbacks.

Usage::

    python3 benchmarks/bench_kernels.py [--repeat 20] [--hidden 64] [--batch 16]

Prints one row per kernel that has both implementations (LSTM backward pass,
embedding scatter-add) with the median wall time of each and the speed-up,
then the same for one full route-1 training step, and the largest difference
between the two implementations' outputs. The LSTM forward pass and attention
run on numpy under both backends.
"""
import argparse
import statistics
import time

import numpy as np

from semiseq import _kernels
from semiseq.model import ModelConfig, Seq2SeqModel
from semiseq.training import RouteContext, TrainConfig, train_route1


def median_time(fn, repeat):
    fn()  # warm-up (includes numba compilation)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def kernel_cases(T, B, H, V, rng):
    """Kernels that have both a numba and a numpy implementation."""
    xw = rng.normal(size=(T, B, 4 * H))
    wh = rng.normal(scale=0.1, size=(H, 4 * H))
    h0, c0 = rng.normal(size=(B, H)), rng.normal(size=(B, H))
    mask = np.ones((T, B))
    fwd = _kernels.lstm_forward_np(xw, wh, h0, c0, mask, False)
    gh, gc = rng.normal(size=(T, B, H)), rng.normal(size=(T, B, H))
    ids = rng.integers(0, V, T * B)
    g = rng.normal(size=(T * B, H))
    return {
        "lstm backward": {
            "numpy": lambda: _kernels.lstm_backward_np(gh, gc, wh, h0, c0, mask, False, *fwd),
            "numba": lambda: _kernels.lstm_backward_nb(gh, gc, wh, h0, c0, mask, False, *fwd),
        },
        "embedding scatter": {
            "numpy": lambda: _kernels.scatter_rows_np(ids, g, V),
            "numba": lambda: _kernels.scatter_rows_nb(ids, g, V),
        },
    }


def max_disagreement(cases):
    worst = 0.0
    for impls in cases.values():
        a, b = impls["numpy"](), impls["numba"]()
        for x, y in zip(a if isinstance(a, tuple) else (a,), b if isinstance(b, tuple) else (b,)):
            worst = max(worst, float(np.max(np.abs(x - y))))
    return worst


def train_step_time(backend, args):
    _kernels.set_backend(backend)
    rng = np.random.default_rng(0)
    model = Seq2SeqModel(ModelConfig(60, 60, args.hidden, args.hidden), seed=0)
    pairs = [(rng.integers(4, 60, args.length).tolist(), rng.integers(4, 60, args.length).tolist())
             for _ in range(args.batch)]
    cfg = TrainConfig()
    ctx = RouteContext(None, np.random.default_rng(1), np.random.default_rng(2))
    return median_time(lambda: train_route1(pairs, model, cfg, ctx), args.repeat)


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=20)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--length", type=int, default=20, help="sequence length")
    args = p.parse_args()
    if not _kernels._NUMBA_IMPORTED:
        raise SystemExit("numba is unavailable (or SEMISEQ_DISABLE_NUMBA is set); nothing to compare")

    rng = np.random.default_rng(0)
    cases = kernel_cases(args.length, args.batch, args.hidden, 60, rng)
    print(f"T={args.length} B={args.batch} H={args.hidden}, median of {args.repeat} runs")
    print(f"{'kernel':<22}{'numpy ms':>12}{'numba ms':>12}{'speed-up':>10}")
    for kernel, impls in cases.items():
        t_np = median_time(impls["numpy"], args.repeat)
        t_nb = median_time(impls["numba"], args.repeat)
        print(f"{kernel:<22}{t_np * 1e3:>12.3f}{t_nb * 1e3:>12.3f}{t_np / t_nb:>9.1f}x")
    prev = _kernels.backend()
    t_np = train_step_time("numpy", args)
    t_nb = train_step_time("numba", args)
    _kernels.set_backend(prev)
    print(f"{'route-1 train step':<22}{t_np * 1e3:>12.3f}{t_nb * 1e3:>12.3f}{t_np / t_nb:>9.1f}x")
    print(f"max |numpy - numba| over the kernel outputs: {max_disagreement(cases):.2e}")


if __name__ == "__main__":
    main()
