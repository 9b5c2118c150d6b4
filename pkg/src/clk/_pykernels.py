"""Pure-Python kernels, used when the compiled extension is unavailable.

Every function here has the same signature and produces bit-identical
results to its counterpart in ``_ckernels.pyx``.
"""

import heapq
import math

import numpy as np


def edt_sq_lines(f, spacing):
    """In-place 1-D squared distance transform (lower envelope) of every row."""
    n_lines, n = f.shape
    inf = math.inf
    for line in range(n_lines):
        row = f[line].tolist()
        v = [0] * n
        z = [0.0] * (n + 1)
        k = -1
        s = 0.0
        for q in range(n):
            fq = row[q]
            if fq == inf:
                continue
            pos_q = q * spacing
            while k >= 0:
                pos_v = v[k] * spacing
                s = ((fq + pos_q * pos_q) - (row[v[k]] + pos_v * pos_v)) / (2.0 * (pos_q - pos_v))
                if s <= z[k]:
                    k -= 1
                else:
                    break
            k += 1
            v[k] = q
            z[k] = -inf if k == 0 else s
            z[k + 1] = inf
        if k < 0:
            continue
        out = [0.0] * n
        k = 0
        for j in range(n):
            while z[k + 1] < j * spacing:
                k += 1
            dj = (j - v[k]) * spacing
            out[j] = row[v[k]] + dj * dj
        f[line, :] = out


def _neighbours(u, nx, ny, nz, offsets):
    z, rem = divmod(u, nx * ny)
    y, x = divmod(rem, nx)
    for k, (ox, oy, oz) in enumerate(offsets):
        xx, yy, zz = x + ox, y + oy, z + oz
        if 0 <= xx < nx and 0 <= yy < ny and 0 <= zz < nz:
            yield k, xx + nx * (yy + ny * zz)


def dijkstra(fg, weight, dims, offsets, lengths, sources, init):
    """Single- or multi-source Dijkstra; see the compiled twin for semantics."""
    nx, ny, nz = dims
    n = nx * ny * nz
    offsets = [tuple(int(c) for c in row) for row in offsets]
    lengths = [float(x) for x in lengths]
    fg = fg.tolist()
    weight = weight.tolist()
    dist = [math.inf] * n
    pred = [-1] * n
    done = [False] * n
    heap = []
    for s, c in zip(sources.tolist(), init.tolist()):
        if c < dist[s]:
            dist[s] = c
            heapq.heappush(heap, (c, s))
    while heap:
        d, u = heapq.heappop(heap)
        if done[u] or d > dist[u]:
            continue
        done[u] = True
        for k, v in _neighbours(u, nx, ny, nz, offsets):
            if not fg[v] or done[v]:
                continue
            nd = d + weight[v] * lengths[k]
            if nd < dist[v]:
                dist[v] = nd
                pred[v] = u
                heapq.heappush(heap, (nd, v))
            elif nd == dist[v] and u < pred[v]:
                pred[v] = u
    return np.array(dist, dtype=np.float64), np.array(pred, dtype=np.int64)


def label_components(fg, dims, offsets):
    """Flood-fill labelling; labels follow the smallest flat index of each component."""
    nx, ny, nz = dims
    offsets = [tuple(int(c) for c in row) for row in offsets]
    fg = fg.tolist()
    labels = [0] * len(fg)
    count = 0
    for start, on in enumerate(fg):
        if not on or labels[start]:
            continue
        count += 1
        labels[start] = count
        stack = [start]
        while stack:
            u = stack.pop()
            for _, v in _neighbours(u, nx, ny, nz, offsets):
                if fg[v] and not labels[v]:
                    labels[v] = count
                    stack.append(v)
    return np.array(labels, dtype=np.int32), count


def peak_persistence(values, order, dims, offsets):
    """Superlevel-set persistence of local maxima; see the compiled twin."""
    nx, ny, nz = dims
    offsets = [tuple(int(c) for c in row) for row in offsets]
    values = values.tolist()
    parent = {}
    peak = {}

    def find(a):
        root = a
        while parent[root] != root:
            root = parent[root]
        while parent[a] != root:
            parent[a], a = root, parent[a]
        return root

    peaks, pers = [], []
    order = order.tolist()
    for u in order:
        level = values[u]
        parent[u] = u
        peak[u] = u
        for _, v in _neighbours(u, nx, ny, nz, offsets):
            if v not in parent:
                continue
            ru, rv = find(u), find(v)
            if ru == rv:
                continue
            pu, pv = peak[ru], peak[rv]
            if values[pu] > values[pv] or (values[pu] == values[pv] and pu < pv):
                winner, loser = ru, rv
            else:
                winner, loser = rv, ru
            if peak[loser] != u:
                peaks.append(peak[loser])
                pers.append(values[peak[loser]] - level)
            parent[loser] = winner
    for u in order:
        if find(u) == u:
            peaks.append(peak[u])
            pers.append(math.inf)
    return peaks, pers
