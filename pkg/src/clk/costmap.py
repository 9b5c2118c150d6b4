"""Cost images: exact EDT, the locally normalised centerline distance map, the triple-sigmoid baseline."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from clk import kernels
from clk.volume import Volume3D

DEFAULT_DELTA = 0.01
DEFAULT_POWER = 4.0


class CostMapError(Exception):
    pass


@dataclass(frozen=True)
class SigmoidParams:
    """Three (width, level) contrast windows in mm, ordered by level."""

    alphas: tuple = (0.15, 0.3, 0.6)
    betas: tuple = (0.3, 0.8, 1.8)

    def __post_init__(self):
        if len(self.alphas) != 3 or len(self.betas) != 3:
            raise ValueError("need exactly three (alpha, beta) pairs")
        if not all(a > 0 for a in self.alphas):
            raise ValueError(f"alphas must be positive, got {self.alphas}")
        if not (self.betas[0] < self.betas[1] < self.betas[2]):
            raise ValueError(f"betas must be strictly increasing, got {self.betas}")

    @classmethod
    def parse(cls, text):
        """From ``"a1,b1,a2,b2,a3,b3"``."""
        vals = [float(v) for v in text.split(",")]
        if len(vals) != 6:
            raise ValueError(f"expected 6 comma-separated numbers, got {text!r}")
        return cls(tuple(vals[0::2]), tuple(vals[1::2]))


@dataclass
class DistanceMaps:
    edt: Volume3D
    cl_dist: Volume3D
    cl_log: Volume3D
    delta: float = DEFAULT_DELTA


def edt_exact(mask: Volume3D, backend=None) -> Volume3D:
    """Distance (mm) from each foreground voxel centre to the nearest background voxel centre.

    Separable lower-envelope squared EDT along x, y, z in turn; exact up to
    floating-point rounding. Background voxels are 0.
    """
    fg = mask.foreground()
    if fg.all():
        raise CostMapError("mask has no background voxels; EDT undefined")
    f = np.where(fg, np.inf, 0.0)
    for axis in range(3):
        moved = np.ascontiguousarray(np.moveaxis(f, axis, -1))
        lines = moved.reshape(-1, moved.shape[-1])
        kernels.edt_sq_lines(lines, mask.spacing[axis], backend=backend)
        f = np.moveaxis(lines.reshape(moved.shape), -1, axis)
    return mask.like(np.sqrt(f))


def _nearest_samples(points, centers, branch_ids):
    """Nearest sample index per centre, ties going to the smallest branch id then sample index."""
    tree = cKDTree(points)
    k = min(4, len(points))
    d, idx = tree.query(centers, k=k)
    d = d.reshape(len(centers), k)
    idx = idx.reshape(len(centers), k)
    best = idx[:, 0].copy()
    dmin = d[:, 0]
    tie = np.isclose(d, dmin[:, None], rtol=0.0, atol=1e-12)
    multi = np.flatnonzero(tie.sum(axis=1) > 1)
    for r in multi:
        cand = idx[r][tie[r]]
        best[r] = min(cand, key=lambda j: (branch_ids[j], j))
    return best, dmin


def reference_cl_distance(
    mask: Volume3D, centerline, delta: float = DEFAULT_DELTA, edt: Volume3D | None = None, window_mm=None
):
    """Locally normalised centerline distance and its log transform.

    Every foreground voxel is assigned to its nearest centerline sample; the
    voxels assigned to samples within ``window_mm`` arc length (default: half
    the smallest spacing) of a sample ``p`` form its cross-section slab, and
    ``local_radius(p)`` is the largest centre distance found in that slab.
    ``cl_dist(i) = dist(i, p) / local_radius(p)`` therefore lies in [0, 1].
    ``cl_log = log(cl_dist + delta)``; background holds ``log(1 + delta)``.
    The EDT (computed if not given) is only a fallback radius for samples
    whose slab is empty.
    """
    if delta <= 0:
        raise ValueError(f"delta must be positive, got {delta}")
    segs = [seg.points for seg in centerline.segments]
    if not segs:
        raise CostMapError("centerline is empty")
    points = np.concatenate(segs)
    branch_ids = np.concatenate([np.full(len(p), k) for k, p in enumerate(segs)])

    fg = mask.foreground()
    sample_vox = np.floor((points - mask.origin) / mask.spacing + 0.5).astype(np.int64)
    inb = ((sample_vox >= 0) & (sample_vox < mask.dims)).all(axis=1)
    on_fg = np.zeros(len(points), dtype=bool)
    on_fg[inb] = fg[tuple(sample_vox[inb].T)]
    bad = np.flatnonzero(~on_fg)
    if len(bad):
        raise CostMapError(f"centerline sample {points[bad[0]].tolist()} lies outside the mask foreground")

    if window_mm is None:
        window_mm = 0.5 * min(mask.spacing)
    idx = np.argwhere(fg)
    centers = mask.centers(idx)
    nearest, dist = _nearest_samples(points, centers, branch_ids)

    cell_max = np.zeros(len(points))
    np.maximum.at(cell_max, nearest, dist)
    local_r = np.empty(len(points))
    start = 0
    for p in segs:
        n = len(p)
        arc = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(p, axis=0), axis=1))])
        lo = np.searchsorted(arc, arc - window_mm, side="left")
        hi = np.searchsorted(arc, arc + window_mm, side="right")
        cm = cell_max[start:start + n]
        local_r[start:start + n] = [cm[a:b].max() for a, b in zip(lo, hi)]
        start += n

    empty = local_r <= 0
    if empty.any():
        if edt is None:
            edt = edt_exact(mask)
        local_r[empty] = edt.data[tuple(sample_vox[empty].T)] - 0.5 * min(mask.spacing)
    local_r = np.maximum(local_r, 0.5 * min(mask.spacing))

    cl_dist = np.zeros(mask.dims)
    cl_dist[tuple(idx.T)] = dist / local_r[nearest]
    cl_log = np.full(mask.dims, math.log(1.0 + delta))
    cl_log[fg] = np.log(cl_dist[fg] + delta)
    return DistanceMaps(edt, mask.like(cl_dist), mask.like(cl_log), delta)


def baseline_sigmoid_map(edt: Volume3D, params: SigmoidParams = SigmoidParams()) -> Volume3D:
    """Sum of three logistic windows of the EDT; rises from 0 at the wall toward 3 at thick centres."""
    e = edt.data
    out = np.zeros_like(e)
    for a, b in zip(params.alphas, params.betas):
        out += 1.0 / (1.0 + np.exp(-(e - b) / a))
    return edt.like(out)


def baseline_cost(
    mask: Volume3D, sigmoid: Volume3D, delta: float = DEFAULT_DELTA, power: float = DEFAULT_POWER
) -> Volume3D:
    """Log-domain vertex cost for the baseline: ``power * log(3 - D_sig + delta)`` inside the mask.

    ``exp`` of this, ``(3 - D_sig + delta)**power``, is small on vessel
    centres and grows toward the wall, the same orientation as the reference
    map. With ``power=1`` the centre/wall weight ratio on thin tubes is too
    flat to stop the path cutting corners on tortuous segments.
    """
    if power <= 0:
        raise ValueError(f"power must be positive, got {power}")
    fg = mask.foreground()
    c = np.full(mask.dims, power * math.log(3.0 + delta))
    c[fg] = power * np.log(3.0 - sigmoid.data[fg] + delta)
    return mask.like(c)
