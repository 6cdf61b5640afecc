"""Compare the numba and numpy kernel backends on the Monte Carlo hot path.

    python3 benchmarks/bench_kernels.py [--trials 2000] [--repeat 3]

Both backends run the same workload; the script also checks that their
outputs are identical before reporting timings.
"""

import argparse
import time

import numpy as np

from stochimg import kernels
from stochimg.experiments import gaussian_heatmap
from stochimg.model import values_from_heatmap
from stochimg.protocol import trial_stream_keys
from stochimg.sampler import build_alias


def workload(trials, blocks_x=32, blocks_y=18):
    vm = values_from_heatmap(gaussian_heatmap(blocks_x, blocks_y))
    prob, alias = build_alias(vm.probabilities)
    keys = np.array([trial_stream_keys(s) for s in range(trials)], dtype=np.uint64)
    return prob, alias, keys


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--trials", type=int, default=2000)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    prob, alias, keys = workload(args.trials)
    cases = [
        ("block, K=1, N=576", 576, 1, 0.25, False),
        ("packet, K=4, N=1152", 1152, 4, 0.25, True),
        ("block, K=1, N=2304", 2304, 1, 0.5, False),
    ]
    try:
        fast = kernels.backend_module("numba")
    except ImportError:
        fast = None
        print("numba not installed; timing the numpy backend only")
    slow = kernels.backend_module("numpy")

    print(f"{'case':<22}{'numpy s':>10}{'numba s':>10}{'speedup':>9}")
    for label, n, k, loss, per_packet in cases:
        thr = loss if per_packet else loss ** k
        call = lambda mod: mod.simulate_trials(prob, alias, n, k, thr, per_packet,
                                              keys[:, 0], keys[:, 1], 0)
        t_np, out_np = best_of(lambda: call(slow), args.repeat)
        if fast is None:
            print(f"{label:<22}{t_np:>10.3f}")
            continue
        call(fast)  # compile outside the timed region
        t_nb, out_nb = best_of(lambda: call(fast), args.repeat)
        assert np.array_equal(out_np, out_nb), "backends disagree"
        print(f"{label:<22}{t_np:>10.3f}{t_nb:>10.3f}{t_np / t_nb:>8.1f}x")


if __name__ == "__main__":
    main()
