"""Time the compiled kernels against the pure-Python fallback.

    python3 benchmarks/bench_kernels.py [--repeat N] [--case NAME]

Each kernel runs on the same inputs under both backends; outputs are
checked for bit identity before timings are reported.
"""

import argparse
import time

import numpy as np

from clk import costmap, endpoints, kernels, minpath, phantom


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def workloads(mask, truth):
    root = minpath.nearest_foreground(mask, truth.centerline.root)
    offs = kernels.neighbour_offsets(26)
    fg = mask.foreground().ravel(order="F").astype(np.uint8)
    w = 1.0 + costmap.edt_exact(mask).data.ravel(order="F")
    src = np.array([np.ravel_multi_index(root, mask.dims, order="F")])
    lengths = kernels.offset_lengths(offs, mask.spacing)
    arrival = endpoints.geodesic_distance(mask, [root]).ravel(order="F")
    reach = np.flatnonzero(np.isfinite(arrival))
    order = reach[np.lexsort((reach, -arrival[reach]))]
    vals = np.where(np.isfinite(arrival), arrival, -1.0)
    return {
        "edt": lambda b: costmap.edt_exact(mask, backend=b).data,
        "dijkstra": lambda b: kernels.dijkstra(fg, w, mask.dims, offs, lengths, src, w[src], backend=b),
        "components": lambda b: kernels.label_components(fg, mask.dims, offs, backend=b),
        "persistence": lambda b: kernels.peak_persistence(vals, order, mask.dims, offs, backend=b),
    }


def same(a, b):
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    if isinstance(a, np.ndarray):
        return a.tobytes() == np.asarray(b).tobytes()
    return a == b


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--case", default="tree7", help="standard-suite phantom")
    args = ap.parse_args(argv)
    if "compiled" not in kernels.BACKENDS:
        raise SystemExit("compiled kernels not built; nothing to compare")
    mask, truth = dict((n, phantom.rasterize(s)) for n, s in phantom.standard_suite(42))[args.case]
    print(f"case {args.case}: dims {mask.dims}, {int(mask.data.sum())} foreground voxels")
    print(f"{'kernel':12s} {'python s':>10s} {'compiled s':>11s} {'speedup':>8s}  identical")
    for name, fn in workloads(mask, truth).items():
        tp, a = best_of(lambda: fn("python"), args.repeat)
        tc, b = best_of(lambda: fn("compiled"), args.repeat)
        print(f"{name:12s} {tp:10.4f} {tc:11.4f} {tp / tc:7.1f}x  {same(a, b)}")


if __name__ == "__main__":
    main()
