"""Slow independent references shared by the unit and acceptance tests."""

import itertools

import numpy as np

from clk.volume import Volume3D

OFFS26 = [o for o in itertools.product((-1, 0, 1), repeat=3) if o != (0, 0, 0)]


def brute_edt(mask):
    """Nearest background centre for every foreground voxel by scanning all pairs."""
    fg = mask.foreground()
    bg = mask.centers(np.argwhere(~fg))
    out = np.zeros(mask.dims)
    for idx in np.argwhere(fg):
        c = mask.centers([idx])[0]
        out[tuple(idx)] = np.sqrt(((bg - c) ** 2).sum(axis=1).min())
    return out


def random_edt_mask(r, max_side=10):
    dims = tuple(int(d) for d in r.integers(1, max_side + 1, 3))
    fg = r.random(dims) < r.uniform(0.3, 0.95)
    fg.flat[r.integers(fg.size)] = False
    sp = tuple(float(s) for s in r.choice([0.4, 0.5, 1.0, 0.7, 1.3], 3))
    return Volume3D.mask(fg, sp)


def simple_path_min(fg, w, s, t):
    """Minimum vertex-weight sum over simple 26-paths from ``s`` to ``t``.

    Depth-first enumeration of simple paths. A partial path is abandoned
    once its cost reaches the best complete one; weights are positive, so
    this never discards the optimum.
    """
    best = [np.inf]
    seen = {s}

    def walk(u, cost):
        if cost >= best[0]:
            return
        if u == t:
            best[0] = cost
            return
        for o in OFFS26:
            v = (u[0] + o[0], u[1] + o[1], u[2] + o[2])
            if v in seen or not all(0 <= c < n for c, n in zip(v, fg.shape)) or not fg[v]:
                continue
            seen.add(v)
            walk(v, cost + w[v])
            seen.discard(v)

    walk(s, w[s])
    return best[0]


def random_graph(r, max_vertices=30):
    """Small random foreground with random positive weights and two distinct foreground voxels."""
    while True:
        dims = tuple(int(d) for d in r.integers(1, 5, 3))
        if np.prod(dims) < 2:
            continue
        fg = r.random(dims) < r.uniform(0.4, 0.9)
        idx = np.argwhere(fg)
        if len(idx) > max_vertices:
            drop = r.choice(len(idx), len(idx) - max_vertices, replace=False)
            fg[tuple(idx[drop].T)] = False
            idx = np.argwhere(fg)
        if len(idx) < 2:
            continue
        w = np.where(fg, r.uniform(0.1, 5.0, dims), 0.0)
        a, b = r.choice(len(idx), 2, replace=False)
        return fg, w, tuple(int(c) for c in idx[a]), tuple(int(c) for c in idx[b])
