"""Synthetic tube-tree masks with analytic centerlines, radii and endpoints."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from clk.endpoints import EndpointSet
from clk.minpath import Centerline, Segment
from clk.volume import Volume3D

MARGIN_VOXELS = 2
_EPS = 1e-9


class PhantomError(Exception):
    pass


@dataclass
class BranchSpec:
    control_points: list
    r_start: float
    r_end: float
    parent: int | None = None

    def __post_init__(self):
        self.control_points = [tuple(float(c) for c in p) for p in self.control_points]
        if len(self.control_points) < 2:
            raise PhantomError("a branch needs at least 2 control points")
        if not (self.r_start >= self.r_end > 0):
            raise PhantomError(f"radius profile must taper: r_start={self.r_start}, r_end={self.r_end}")

    def to_json(self):
        return {
            "parent": self.parent,
            "control_points": [list(p) for p in self.control_points],
            "radius_profile": [self.r_start, self.r_end],
        }

    @classmethod
    def from_json(cls, obj):
        r0, r1 = obj["radius_profile"]
        return cls(obj["control_points"], r0, r1, obj.get("parent"))


@dataclass
class PhantomSpec:
    branches: list
    dims: tuple
    spacing: tuple = (0.4, 0.4, 0.4)
    origin: tuple = (0.0, 0.0, 0.0)
    seed: int = 0

    def to_json(self):
        return {
            "branches": [b.to_json() for b in self.branches],
            "grid": {"dims": list(self.dims), "spacing": list(self.spacing), "origin": list(self.origin)},
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, obj):
        g = obj["grid"]
        return cls(
            [BranchSpec.from_json(b) for b in obj["branches"]],
            tuple(g["dims"]),
            tuple(g["spacing"]),
            tuple(g.get("origin", (0.0, 0.0, 0.0))),
            int(obj.get("seed", 0)),
        )


@dataclass
class GroundTruth:
    centerline: Centerline
    endpoints: EndpointSet
    radii: list = field(default_factory=list)
    arclength: list = field(default_factory=list)

    def radius_at(self, branch, s):
        """Radius (mm) of ``branch`` at arc length ``s`` (mm)."""
        return float(np.interp(s, self.arclength[branch], self.radii[branch]))

    @property
    def max_radius(self):
        return max(float(r.max()) for r in self.radii)

    def to_json(self):
        return {
            "centerline": self.centerline.to_json(),
            "endpoints": self.endpoints.to_json(),
            "radii": [[float(x) for x in r] for r in self.radii],
            "arclength": [[float(x) for x in a] for a in self.arclength],
        }

    @classmethod
    def from_json(cls, obj):
        return cls(
            Centerline.from_json(obj["centerline"]),
            EndpointSet.from_json(obj["endpoints"]),
            [np.asarray(r, dtype=np.float64) for r in obj["radii"]],
            [np.asarray(a, dtype=np.float64) for a in obj.get("arclength", [])],
        )


def catmull_rom(points, step):
    """Uniform Catmull-Rom curve through ``points`` resampled at arc-length ``step``.

    Returns ``(samples, arclength)``; both the first and last control points
    are hit exactly.
    """
    p = np.asarray(points, dtype=np.float64)
    ext = np.vstack([2 * p[0] - p[1], p, 2 * p[-1] - p[-2]])
    dense = []
    per_span = 64
    for j in range(len(p) - 1):
        p0, p1, p2, p3 = ext[j], ext[j + 1], ext[j + 2], ext[j + 3]
        t = np.linspace(0.0, 1.0, per_span, endpoint=False)[:, None]
        t2, t3 = t * t, t * t * t
        dense.append(
            0.5 * ((2 * p1) + (-p0 + p2) * t + (2 * p0 - 5 * p1 + 4 * p2 - p3) * t2 + (-p0 + 3 * p1 - 3 * p2 + p3) * t3)
        )
    dense.append(p[-1][None, :])
    dense = np.vstack(dense)
    seg = np.linalg.norm(np.diff(dense, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    total = s[-1]
    n = max(2, int(math.ceil(total / step)) + 1)
    target = np.linspace(0.0, total, n)
    out = np.stack([np.interp(target, s, dense[:, k]) for k in range(3)], axis=1)
    out[0], out[-1] = p[0], p[-1]
    return out, target


def _sample_branches(spec: PhantomSpec):
    step = min(0.25 * min(spec.spacing), 0.1)
    curves = []
    for b in spec.branches:
        pts, s = catmull_rom(b.control_points, step)
        r = b.r_start + (b.r_end - b.r_start) * (s / s[-1])
        curves.append((pts, s, r))
    return curves


def _validate(spec: PhantomSpec, curves):
    if not spec.branches:
        raise PhantomError("phantom needs at least one branch")
    if spec.branches[0].parent is not None:
        raise PhantomError("branch 0 must be the root branch")
    lo = np.asarray(spec.origin) + MARGIN_VOXELS * np.asarray(spec.spacing)
    hi = np.asarray(spec.origin) + (np.asarray(spec.dims) - 1 - MARGIN_VOXELS) * np.asarray(spec.spacing)
    for k, (b, (pts, s, r)) in enumerate(zip(spec.branches, curves)):
        if s[-1] <= 2 * b.r_start:
            raise PhantomError(f"branch {k}: curve length {s[-1]:.3f} mm not above 2*r_start")
        if k > 0:
            if b.parent is None or not (0 <= b.parent < k):
                raise PhantomError(f"branch {k}: parent must be an earlier branch, got {b.parent}")
            ppts = curves[b.parent][0]
            if np.linalg.norm(ppts - pts[0], axis=1).min() > 0.05:
                raise PhantomError(f"branch {k}: first control point is not on parent branch {b.parent}")
        if (pts - r[:, None] < lo - _EPS).any() or (pts + r[:, None] > hi + _EPS).any():
            raise PhantomError(f"branch {k} exits the grid (needs a {MARGIN_VOXELS}-voxel background margin)")


def _paint_branch(fg, vol_shape, spacing, origin, pts, r, round_start):
    sp = np.asarray(spacing)
    org = np.asarray(origin)
    n = len(pts)
    t0 = (pts[1] - pts[0]) / np.linalg.norm(pts[1] - pts[0])
    t1 = (pts[-1] - pts[-2]) / np.linalg.norm(pts[-1] - pts[-2])
    reach0 = 2 * r[0] + sp.max()
    reach1 = 2 * r[-1] + sp.max()
    for j in range(n - 1):
        a, b = pts[j], pts[j + 1]
        ra, rb = r[j], r[j + 1]
        rmax = max(ra, rb)
        lo = np.maximum(np.floor((np.minimum(a, b) - rmax - org) / sp).astype(int), 0)
        hi = np.minimum(np.ceil((np.maximum(a, b) + rmax - org) / sp).astype(int), np.asarray(vol_shape) - 1)
        gx, gy, gz = (np.arange(lo[k], hi[k] + 1) * sp[k] + org[k] for k in range(3))
        P = np.stack(np.meshgrid(gx, gy, gz, indexing="ij"), axis=-1)
        ab = b - a
        t = np.clip(((P - a) @ ab) / float(ab @ ab), 0.0, 1.0)
        d = np.linalg.norm(P - (a + t[..., None] * ab), axis=-1)
        inside = d <= ra + t * (rb - ra) + _EPS
        # flat cuts: drop anything past the end planes near the curve ends
        if not round_start:
            rel = P - pts[0]
            inside &= ~((rel @ t0 < -_EPS) & (np.linalg.norm(rel, axis=-1) <= reach0))
        rel = P - pts[-1]
        inside &= ~((rel @ t1 > _EPS) & (np.linalg.norm(rel, axis=-1) <= reach1))
        fg[lo[0]:hi[0] + 1, lo[1]:hi[1] + 1, lo[2]:hi[2] + 1] |= inside


def rasterize(spec: PhantomSpec):
    """Paint the tube tree and return ``(mask, truth)``.

    A voxel is foreground when its centre lies within the local radius of a
    branch curve. Each branch is a chain of tapered capsules; the root's
    start and every branch end are cut flat, child branches get a round
    start cap to fill the joint. The voxels containing the curve samples
    are always foreground, even where a tilted flat end would cut them off.
    """
    curves = _sample_branches(spec)
    _validate(spec, curves)
    fg = np.zeros(tuple(spec.dims), dtype=bool)
    for k, (pts, s, r) in enumerate(curves):
        _paint_branch(fg, spec.dims, spec.spacing, spec.origin, pts, r, round_start=k > 0)
    for pts, _, _ in curves:
        vox = np.floor((pts - np.asarray(spec.origin)) / np.asarray(spec.spacing) + 0.5).astype(np.int64)
        fg[tuple(vox.T)] = True
    mask = Volume3D.mask(fg, spec.spacing, spec.origin)

    segs = []
    for k, (b, (pts, s, r)) in enumerate(zip(spec.branches, curves)):
        if b.parent is None:
            segs.append(Segment(pts))
        else:
            ppts = curves[b.parent][0]
            pidx = int(np.argmin(np.linalg.norm(ppts - pts[0], axis=1)))
            pts = pts.copy()
            pts[0] = ppts[pidx]
            segs.append(Segment(pts, b.parent, pidx))
    root = curves[0][0][0]
    cl = Centerline(root, segs)
    leaves = cl.leaves()
    eps = EndpointSet(root, [(segs[k].points[-1], 1.0) for k in leaves], "analytic")
    truth = GroundTruth(cl, eps, [c[2] for c in curves], [c[1] for c in curves])
    return mask, truth


def _grid_for(branches, spacing=0.4, margin_voxels=4):
    pts = np.array([p for b in branches for p in b.control_points])
    rmax = max(b.r_start for b in branches)
    lo = pts.min(axis=0) - rmax - margin_voxels * spacing
    hi = pts.max(axis=0) + rmax + margin_voxels * spacing
    origin = np.floor(lo / spacing) * spacing
    dims = np.ceil((hi - origin) / spacing).astype(int) + 1
    return tuple(int(d) for d in dims), (spacing,) * 3, tuple(float(round(o, 9)) for o in origin)


def make_spec(branches, seed=0, spacing=0.4):
    dims, sp, origin = _grid_for(branches, spacing)
    return PhantomSpec(branches, dims, sp, origin, seed)


def straight_tube(radius=2.0, length=14.0, spacing=0.4, seed=0):
    return make_spec([BranchSpec([(0, 0, 0), (0, 0, length)], radius, radius)], seed, spacing)


def tapered_tube(r_start=3.0, ratio=5.0, length=30.0, spacing=0.4, seed=0):
    return make_spec([BranchSpec([(0, 0, 0), (0, 0, length)], r_start, r_start / ratio)], seed, spacing)


def helix_tube(radius=1.0, helix_radius=4.0, pitch=8.0, turns=2.0, phase=0.0, spacing=0.4, seed=0, per_turn=16):
    t = np.linspace(0.0, turns * 2 * math.pi, int(turns * per_turn) + 1)
    pts = np.stack(
        [helix_radius * np.cos(t + phase), helix_radius * np.sin(t + phase), pitch * t / (2 * math.pi)], axis=1
    )
    return make_spec([BranchSpec(pts.tolist(), radius, radius)], seed, spacing)


def helix_arclength(helix_radius=4.0, pitch=8.0, turns=2.0):
    return turns * math.hypot(2 * math.pi * helix_radius, pitch)


def y_tree(seed=0, spacing=0.4):
    return make_spec(
        [
            BranchSpec([(0, 0, 0), (0, 0, 12)], 1.6, 1.4),
            BranchSpec([(0, 0, 12), (5, 0, 20), (7, 1, 26)], 1.2, 0.8, parent=0),
            BranchSpec([(0, 0, 12), (-5, 0, 20), (-7, -1, 26)], 1.2, 0.8, parent=0),
        ],
        seed,
        spacing,
    )


def binary_tree(seed=0, spacing=0.4, jitter=0.5):
    """Seven-branch, two-level binary tree (four leaves) spreading in 3-D."""
    rng = np.random.default_rng(seed)

    def j(p):
        return tuple(float(c) for c in np.asarray(p, dtype=float) + rng.uniform(-jitter, jitter, 3) * (1, 1, 0.5))

    b0 = (0.0, 0.0, 14.0)
    left = j((-6.0, 0.0, 24.0))
    right = j((6.0, 0.0, 24.0))
    branches = [
        BranchSpec([(0, 0, 0), (0, 0, 7), b0], 2.0, 1.6),
        BranchSpec([b0, j((-3.5, 0, 19.5)), left], 1.4, 1.1, parent=0),
        BranchSpec([b0, j((3.5, 0, 19.5)), right], 1.4, 1.1, parent=0),
    ]
    for parent, base in ((1, left), (2, right)):
        for sy in (-1.0, 1.0):
            mid = j((base[0] + 0.5 * np.sign(base[0]), base[1] + 4.0 * sy, base[2] + 4.0))
            tip = j((base[0] + 1.0 * np.sign(base[0]), base[1] + 8.0 * sy, base[2] + 9.0))
            branches.append(BranchSpec([base, mid, tip], 1.0, 0.7, parent=parent))
    return make_spec(branches, seed, spacing)


def near_touching(seed=0, spacing=0.4):
    """Two sibling branches running parallel with a single background voxel between them."""
    gap_axis = 3 * spacing
    return make_spec(
        [
            BranchSpec([(0, 0, 0), (0, 0, 10)], 1.4, 1.2),
            BranchSpec([(0, 0, 10), (-gap_axis, 0, 14), (-gap_axis, 0, 16), (-gap_axis, 0, 21), (-gap_axis, 0, 23), (-5, 0, 29)], 0.8, 0.8, parent=0),
            BranchSpec([(0, 0, 10), (gap_axis, 0, 14), (gap_axis, 0, 16), (gap_axis, 0, 21), (gap_axis, 0, 23), (5, 0, 29)], 0.8, 0.8, parent=0),
        ],
        seed,
        spacing,
    )


def standard_suite(seed=42):
    """Named phantom specs covering straight, tapered, tortuous, branching and near-touching tubes."""
    rng = np.random.default_rng(seed)
    phase = float(rng.uniform(0.0, 2 * math.pi))
    return [
        ("straight", straight_tube(seed=seed)),
        ("tapered", tapered_tube(seed=seed)),
        ("helix", helix_tube(phase=phase, seed=seed)),
        ("ytree", y_tree(seed=seed)),
        ("tree7", binary_tree(seed=seed)),
        ("near_touching", near_touching(seed=seed)),
    ]
