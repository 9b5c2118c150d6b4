# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
# distutils: language = c++
"""Compiled inner loops. Signatures mirror :mod:`clk._pykernels` exactly."""

import numpy as np

cimport numpy as cnp
from libc.math cimport INFINITY
from libcpp.pair cimport pair
from libcpp.queue cimport priority_queue
from libcpp.vector cimport vector

cnp.import_array()

ctypedef pair[double, cnp.int64_t] entry_t


def edt_sq_lines(double[:, ::1] f, double spacing):
    """In-place 1-D squared distance transform (lower envelope) of every row."""
    cdef Py_ssize_t n_lines = f.shape[0]
    cdef Py_ssize_t n = f.shape[1]
    cdef Py_ssize_t line, q, k, j
    cdef double s, pos_q, pos_v, best, dj
    cdef cnp.ndarray[cnp.int64_t, ndim=1] v_arr = np.empty(n, dtype=np.int64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] z_arr = np.empty(n + 1, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] row_arr = np.empty(n, dtype=np.float64)
    cdef cnp.int64_t[::1] v = v_arr
    cdef double[::1] z = z_arr
    cdef double[::1] row = row_arr

    for line in range(n_lines):
        for q in range(n):
            row[q] = f[line, q]
        k = -1
        for q in range(n):
            if row[q] == INFINITY:
                continue
            pos_q = q * spacing
            while k >= 0:
                pos_v = v[k] * spacing
                s = ((row[q] + pos_q * pos_q) - (row[v[k]] + pos_v * pos_v)) / (2.0 * (pos_q - pos_v))
                if s <= z[k]:
                    k -= 1
                else:
                    break
            k += 1
            v[k] = q
            if k == 0:
                z[k] = -INFINITY
            else:
                z[k] = s
            z[k + 1] = INFINITY
        if k < 0:
            continue
        k = 0
        for j in range(n):
            while z[k + 1] < j * spacing:
                k += 1
            dj = (j - v[k]) * spacing
            f[line, j] = row[v[k]] + dj * dj


def dijkstra(
    const cnp.uint8_t[::1] fg,
    const double[::1] weight,
    tuple dims,
    const cnp.int64_t[:, ::1] offsets,
    const double[::1] lengths,
    const cnp.int64_t[::1] sources,
    const double[::1] init,
):
    """Single- or multi-source Dijkstra on a voxel grid.

    Entering voxel ``v`` from ``u`` costs ``weight[v] * lengths[k]`` for
    neighbour offset ``k``. Ties in cost prefer the predecessor with the
    smaller flat index.
    """
    cdef Py_ssize_t nx = dims[0], ny = dims[1], nz = dims[2]
    cdef Py_ssize_t n = nx * ny * nz
    cdef Py_ssize_t n_off = offsets.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] dist_arr = np.full(n, np.inf)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] pred_arr = np.full(n, -1, dtype=np.int64)
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] done_arr = np.zeros(n, dtype=np.uint8)
    cdef double[::1] dist = dist_arr
    cdef cnp.int64_t[::1] pred = pred_arr
    cdef cnp.uint8_t[::1] done = done_arr
    cdef priority_queue[entry_t] heap
    cdef entry_t top
    cdef cnp.int64_t u, v, x, y, z, xx, yy, zz, s
    cdef Py_ssize_t i, k
    cdef double d, nd

    for i in range(sources.shape[0]):
        s = sources[i]
        if init[i] < dist[s]:
            dist[s] = init[i]
            heap.push(entry_t(-init[i], -s))
    while not heap.empty():
        top = heap.top()
        heap.pop()
        d = -top.first
        u = -top.second
        if done[u] or d > dist[u]:
            continue
        done[u] = 1
        z = u // (nx * ny)
        y = (u // nx) % ny
        x = u % nx
        for k in range(n_off):
            xx = x + offsets[k, 0]
            yy = y + offsets[k, 1]
            zz = z + offsets[k, 2]
            if xx < 0 or yy < 0 or zz < 0 or xx >= nx or yy >= ny or zz >= nz:
                continue
            v = xx + nx * (yy + ny * zz)
            if not fg[v] or done[v]:
                continue
            nd = d + weight[v] * lengths[k]
            if nd < dist[v]:
                dist[v] = nd
                pred[v] = u
                heap.push(entry_t(-nd, -v))
            elif nd == dist[v] and u < pred[v]:
                pred[v] = u
    return dist_arr, pred_arr


def label_components(const cnp.uint8_t[::1] fg, tuple dims, const cnp.int64_t[:, ::1] offsets):
    """Flood-fill labelling; labels follow the smallest flat index of each component."""
    cdef Py_ssize_t nx = dims[0], ny = dims[1], nz = dims[2]
    cdef Py_ssize_t n = nx * ny * nz
    cdef Py_ssize_t n_off = offsets.shape[0]
    cdef cnp.ndarray[cnp.int32_t, ndim=1] labels_arr = np.zeros(n, dtype=np.int32)
    cdef cnp.int32_t[::1] labels = labels_arr
    cdef vector[cnp.int64_t] stack
    cdef cnp.int32_t count = 0
    cdef cnp.int64_t start, u, v, x, y, z, xx, yy, zz
    cdef Py_ssize_t k

    for start in range(n):
        if not fg[start] or labels[start]:
            continue
        count += 1
        labels[start] = count
        stack.push_back(start)
        while not stack.empty():
            u = stack.back()
            stack.pop_back()
            z = u // (nx * ny)
            y = (u // nx) % ny
            x = u % nx
            for k in range(n_off):
                xx = x + offsets[k, 0]
                yy = y + offsets[k, 1]
                zz = z + offsets[k, 2]
                if xx < 0 or yy < 0 or zz < 0 or xx >= nx or yy >= ny or zz >= nz:
                    continue
                v = xx + nx * (yy + ny * zz)
                if fg[v] and not labels[v]:
                    labels[v] = count
                    stack.push_back(v)
    return labels_arr, int(count)


cdef cnp.int64_t _find(cnp.int64_t[::1] parent, cnp.int64_t a) noexcept:
    cdef cnp.int64_t root = a, nxt
    while parent[root] != root:
        root = parent[root]
    while parent[a] != root:
        nxt = parent[a]
        parent[a] = root
        a = nxt
    return root


def peak_persistence(
    const double[::1] values,
    const cnp.int64_t[::1] order,
    tuple dims,
    const cnp.int64_t[:, ::1] offsets,
):
    """Superlevel-set persistence of local maxima.

    ``order`` lists foreground voxels by descending value (ties: ascending
    index). Returns ``(peaks, persistence)``; the global maximum of each
    connected component gets ``inf``.
    """
    cdef Py_ssize_t nx = dims[0], ny = dims[1], nz = dims[2]
    cdef Py_ssize_t n = nx * ny * nz
    cdef Py_ssize_t n_off = offsets.shape[0]
    cdef cnp.ndarray[cnp.int64_t, ndim=1] parent_arr = np.full(n, -1, dtype=np.int64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] peak_arr = np.full(n, -1, dtype=np.int64)
    cdef cnp.int64_t[::1] parent = parent_arr
    cdef cnp.int64_t[::1] peak = peak_arr
    cdef Py_ssize_t i, k
    cdef cnp.int64_t u, v, x, y, z, xx, yy, zz, ru, rv, pu, pv, winner, loser
    cdef double level
    peaks = []
    pers = []

    for i in range(order.shape[0]):
        u = order[i]
        level = values[u]
        parent[u] = u
        peak[u] = u
        z = u // (nx * ny)
        y = (u // nx) % ny
        x = u % nx
        for k in range(n_off):
            xx = x + offsets[k, 0]
            yy = y + offsets[k, 1]
            zz = z + offsets[k, 2]
            if xx < 0 or yy < 0 or zz < 0 or xx >= nx or yy >= ny or zz >= nz:
                continue
            v = xx + nx * (yy + ny * zz)
            if parent[v] < 0:
                continue
            ru = _find(parent, u)
            rv = _find(parent, v)
            if ru == rv:
                continue
            pu = peak[ru]
            pv = peak[rv]
            if values[pu] > values[pv] or (values[pu] == values[pv] and pu < pv):
                winner, loser = ru, rv
            else:
                winner, loser = rv, ru
            if peak[loser] != u:
                peaks.append(int(peak[loser]))
                pers.append(values[peak[loser]] - level)
            parent[loser] = winner
    for i in range(order.shape[0]):
        u = order[i]
        if _find(parent, u) == u:
            peaks.append(int(peak[u]))
            pers.append(float("inf"))
    return peaks, pers
