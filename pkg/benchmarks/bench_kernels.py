"""Wall-clock comparison of the compiled and numpy kernels.

Run with ``python benchmarks/bench_kernels.py [--blocks B] [--repeat R]``.
Prints the best-of-R time per call for each backend and the speed-up.
"""
import argparse
import timeit

import numpy as np

from embp import kernels
from embp.channel import BPSK, QPSK, random_blocks
from embp.graph import bp_init, graph_for


def _cases(blocks):
    for const, L in ((BPSK, 2), (BPSK, 5), (QPSK, 3)):
        blk = random_blocks(blocks, 100, L, const, 8.0, seed=0)
        yield f"{const.name} L={L}", graph_for(blk.y, blk.truth, const)


def _time(fn, repeat):
    fn()  # warm-up
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--blocks", type=int, default=200)
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)
    if not kernels.compiled_available():
        print("compiled kernels are not built; only the numpy backend is timed")
    backends = ["numpy"] + (["cython"] if kernels.compiled_available() else [])

    print(f"{'kernel':<10}{'case':<14}" + "".join(f"{b + ' [ms]':>14}" for b in backends) + f"{'speed-up':>10}")
    for label, graph in _cases(args.blocks):
        arrays = bp_init(graph).arrays()
        jobs = {
            "bp_sweep": lambda b: kernels.bp_sweep(graph.F, graph.I, *arrays, 0.8, backend=b),
            "bcjr": lambda b: kernels.bcjr(graph.F, graph.I, backend=b),
        }
        for name, job in jobs.items():
            times = [_time(lambda b=b: job(b), args.repeat) * 1e3 for b in backends]
            speed = f"{times[0] / times[-1]:>9.1f}x" if len(times) > 1 else ""
            print(f"{name:<10}{label:<14}" + "".join(f"{t:>14.2f}" for t in times) + speed)


if __name__ == "__main__":
    main()
