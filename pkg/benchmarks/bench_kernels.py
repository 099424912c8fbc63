"""Time the numba and numpy kernel paths side by side.

    python benchmarks/bench_kernels.py [--repeat 5]

Each kernel is warmed up once per backend (this also triggers numba
compilation) and then timed ``--repeat`` times; the best time is shown.
"""

import argparse
import timeit

import numpy as np

from anchorinv import _kernels
from anchorinv.forward import BoundaryConditions, solve_heads_batch
from anchorinv.geostat import Grid


def cases():
    rng = np.random.default_rng(0)
    locs = rng.uniform(0, 16, (256, 2))
    cloud = rng.standard_normal((2000, 3))
    query = np.zeros(3)
    grid = Grid((16, 16), 1.0)
    K = np.exp(rng.normal(size=(120, 256)))
    bc = BoundaryConditions(left=1.0, right=0.0)
    return [
        ("pairwise 256x256 (2-D)", lambda: _kernels.pairwise_distances(locs, locs), 20),
        ("kth neighbour n=2000 d=3 k=45", lambda: _kernels.kth_neighbor_distance(cloud, query, 45), 500),
        ("Darcy 16x16 batch of 120", lambda: solve_heads_batch(grid, K, bc), 1),
    ]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    backends = ["numba", "numpy"] if _kernels.HAVE_NUMBA else ["numpy"]
    previous = _kernels.get_backend()
    print(f"{'kernel':34s}" + "".join(f"{b:>14s}" for b in backends) + ("     speedup" if len(backends) == 2 else ""))
    try:
        for name, fn, number in cases():
            times = []
            for b in backends:
                _kernels.set_backend(b)
                fn()
                times.append(min(timeit.repeat(fn, number=number, repeat=args.repeat)) / number)
            line = f"{name:34s}" + "".join(f"{t * 1e3:12.3f}ms" for t in times)
            if len(times) == 2:
                line += f"{times[1] / times[0]:11.1f}x"
            print(line)
    finally:
        _kernels.set_backend(previous)


if __name__ == "__main__":
    main()
