"""Vertex-weighted minimal paths on the 26-neighbourhood voxel graph.

Path cost is the sum of vertex weights along the path, start vertex
included. Dijkstra realises this by charging ``w(v)`` when entering ``v``
and seeding the source with ``w(s)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from clk import kernels
from clk.volume import Volume3D, connected_components

log = logging.getLogger(__name__)


class PathError(Exception):
    pass


@dataclass
class Segment:
    """One polyline of a centerline tree, ordered from its junction (or the root) outward."""

    points: np.ndarray
    parent: int | None = None
    parent_index: int | None = None
    voxels: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)

    @property
    def junction(self):
        return None if self.parent is None else self.points[0]

    def length(self):
        return float(np.linalg.norm(np.diff(self.points, axis=0), axis=1).sum())


@dataclass
class Centerline:
    """Tree of polylines in physical coordinates."""

    root: np.ndarray
    segments: list = field(default_factory=list)
    unreached: list = field(default_factory=list)

    def __post_init__(self):
        self.root = np.asarray(self.root, dtype=np.float64).reshape(3)

    def all_points(self):
        if not self.segments:
            return self.root[None, :].copy()
        return np.concatenate([s.points for s in self.segments])

    def junctions(self):
        """Distinct junction points (child segment start points on a parent)."""
        pts = [s.points[0] for s in self.segments if s.parent is not None]
        out = []
        for p in pts:
            if not any(np.array_equal(p, q) for q in out):
                out.append(p)
        return np.array(out, dtype=np.float64).reshape(-1, 3)

    def leaves(self):
        """Indices of segments whose last point starts no other segment."""
        starts = {}
        for s in self.segments:
            if s.parent is not None:
                starts.setdefault(s.parent, set()).add(s.parent_index)
        out = []
        for k, s in enumerate(self.segments):
            last = len(s.points) - 1
            if last not in starts.get(k, set()):
                out.append(k)
        return out

    def to_json(self):
        return {
            "root": [float(c) for c in self.root],
            "segments": [
                {
                    "parent": s.parent,
                    "junction": None if s.parent is None else [float(c) for c in s.points[0]],
                    "points": [[float(c) for c in p] for p in s.points],
                }
                for s in self.segments
            ],
        }

    @classmethod
    def from_json(cls, obj):
        segs = []
        for raw in obj["segments"]:
            segs.append(Segment(np.array(raw["points"], dtype=np.float64), raw["parent"]))
        for s in segs:
            if s.parent is not None:
                d = np.linalg.norm(segs[s.parent].points - s.points[0], axis=1)
                s.parent_index = int(np.argmin(d))
        return cls(np.array(obj["root"], dtype=np.float64), segs)


@dataclass
class MinimalPath:
    voxels: np.ndarray
    cost: float

    def points(self, vol: Volume3D):
        return vol.centers(self.voxels)


class VoxelGraph:
    """Foreground voxels of ``mask`` joined under 26-adjacency, weighted per vertex."""

    def __init__(self, mask: Volume3D, weights, edge_length=False):
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != mask.dims:
            raise ValueError(f"weights shape {w.shape} does not match mask dims {mask.dims}")
        fg = mask.foreground()
        if not fg.any():
            raise PathError("graph has no foreground vertices")
        wf = w[fg]
        if not (np.isfinite(wf).all() and (wf > 0).all()):
            raise PathError("vertex weights must be finite and strictly positive on foreground")
        self.mask = mask
        self.weights = np.where(fg, w, 0.0)
        self.edge_length = edge_length
        self.offsets = kernels.neighbour_offsets(26)
        if edge_length:
            self.lengths = kernels.offset_lengths(self.offsets, mask.spacing)
        else:
            self.lengths = np.ones(len(self.offsets))
        self._fg_flat = fg.ravel(order="F").astype(np.uint8)
        self._w_flat = self.weights.ravel(order="F")
        self._trees = {}

    @classmethod
    def from_cost(cls, mask: Volume3D, cost, edge_length=False):
        """Weights ``exp(cost)`` from a log-domain cost map (array or Volume3D)."""
        c = cost.data if isinstance(cost, Volume3D) else np.asarray(cost, dtype=np.float64)
        with np.errstate(over="ignore"):
            w = np.exp(np.where(mask.foreground(), c, 0.0))
        return cls(mask, w, edge_length=edge_length)

    def weight_of(self, i):
        return float(self.weights[tuple(int(c) for c in i)])

    def is_vertex(self, i):
        try:
            self.mask.check_index(i)
        except IndexError:
            return False
        return bool(self._fg_flat[self.mask.flat_index(i)])

    def tree(self, source):
        """Dijkstra ``(dist, pred)`` flat arrays from ``source`` (cached)."""
        s = self.mask.flat_index(source)
        if s not in self._trees:
            if not self._fg_flat[s]:
                raise PathError(f"source {tuple(source)} is on background")
            self._trees[s] = kernels.dijkstra(
                self._fg_flat,
                self._w_flat,
                self.mask.dims,
                self.offsets,
                self.lengths,
                np.array([s]),
                np.array([self._w_flat[s]]),
            )
        return self._trees[s]

    def _unreachable(self, s, t):
        labels, _ = connected_components(self.mask, 26)
        ls = int(labels.data[tuple(s)])
        lt = int(labels.data[tuple(t)])
        size = int((labels.data == lt).sum())
        return PathError(
            f"target {tuple(t)} lies in 26-component {lt} ({size} voxels), "
            f"disconnected from source component {ls}"
        )

    def trace(self, pred, t_flat):
        path = [t_flat]
        while pred[path[-1]] >= 0:
            path.append(int(pred[path[-1]]))
        path.reverse()
        return path


def shortest_path(g: VoxelGraph, s, t) -> MinimalPath:
    """Minimum vertex-weight-sum path from ``s`` to ``t`` (both inclusive)."""
    for name, v in (("source", s), ("target", t)):
        if not g.is_vertex(v):
            raise PathError(f"{name} {tuple(v)} is not a foreground voxel")
    dist, pred = g.tree(s)
    tf = g.mask.flat_index(t)
    if not np.isfinite(dist[tf]):
        raise g._unreachable(s, t)
    flat = g.trace(pred, tf)
    vox = np.stack(g.mask.unflat(np.array(flat)), axis=1)
    return MinimalPath(vox.astype(np.int64), float(dist[tf]))


def nearest_foreground(mask: Volume3D, p):
    """Foreground voxel whose centre is closest to physical point ``p``."""
    idx = mask.mm_to_index(p)
    fg = mask.foreground()
    if all(0 <= c < d for c, d in zip(idx, mask.dims)) and fg[idx]:
        return idx
    cand = np.argwhere(fg)
    if len(cand) == 0:
        raise PathError("mask has no foreground")
    d = np.linalg.norm(mask.centers(cand) - np.asarray(p, dtype=np.float64), axis=1)
    return tuple(int(c) for c in cand[int(np.argmin(d))])


def extract_tree(g: VoxelGraph, root, endpoints) -> Centerline:
    """Trace root-to-endpoint minimal paths and merge them into one tree.

    Paths come from a single Dijkstra tree rooted at ``root``. Endpoints
    are traced in order of descending path cost (ties: input order); each
    trace walks back from the endpoint and stops at the first voxel
    already claimed by an earlier path, which becomes a junction.
    Unreachable endpoints are logged in ``Centerline.unreached``.
    """
    vol = g.mask
    root = tuple(int(c) for c in root)
    if not g.is_vertex(root):
        raise PathError(f"root {root} is not a foreground voxel")
    dist, pred = g.tree(root)
    root_flat = vol.flat_index(root)
    cl = Centerline(np.array(index_to_point(vol, root)))

    if hasattr(endpoints, "points"):
        endpoints = endpoints.points()
    targets = []
    for k, ep in enumerate(endpoints):
        t = nearest_foreground(vol, ep)
        tf = vol.flat_index(t)
        if not np.isfinite(dist[tf]):
            err = g._unreachable(root, t)
            log.warning("endpoint %d: %s", k, err)
            cl.unreached.append((k, str(err)))
            continue
        targets.append((-float(dist[tf]), k, tf))
    targets.sort()

    owner = {root_flat: (None, None)}
    for _, k, tf in targets:
        if tf in owner:
            log.info("endpoint %d already lies on a traced path; no new branch", k)
            continue
        collected = []
        cur = tf
        while cur not in owner:
            collected.append(cur)
            cur = int(pred[cur])
        parent, parent_index = owner[cur]
        flat = [cur] + collected[::-1]
        seg_id = len(cl.segments)
        for j, v in enumerate(flat[1:], start=1):
            owner[v] = (seg_id, j)
        vox = np.stack(vol.unflat(np.array(flat)), axis=1).astype(np.int64)
        cl.segments.append(Segment(vol.centers(vox), parent, parent_index, vox))
    return cl


def index_to_point(vol: Volume3D, idx):
    return tuple(o + c * s for o, c, s in zip(vol.origin, idx, vol.spacing))


def smooth(cl: Centerline, window: int = 5, iterations: int = 3) -> Centerline:
    """Iterated moving-average of interior points; end and junction points stay put.

    Near a segment end the window shrinks symmetrically so a point never
    averages over more neighbours on one side than on the other.
    """
    if window < 1 or window % 2 == 0:
        raise ValueError(f"smoothing window must be a positive odd integer, got {window}")
    if iterations < 0:
        raise ValueError(f"iterations must be >= 0, got {iterations}")
    half = window // 2
    fixed = {k: {0, len(s.points) - 1} for k, s in enumerate(cl.segments)}
    for s in cl.segments:
        if s.parent is not None and s.parent_index is not None:
            fixed[s.parent].add(s.parent_index)

    out = Centerline(cl.root.copy(), unreached=list(cl.unreached))
    for k, seg in enumerate(cl.segments):
        pts = seg.points.copy()
        n = len(pts)
        for _ in range(iterations):
            new = pts.copy()
            for i in range(n):
                if i in fixed[k]:
                    continue
                h = min(half, i, n - 1 - i)
                new[i] = pts[i - h:i + h + 1].mean(axis=0)
            pts = new
        out.segments.append(Segment(pts, seg.parent, seg.parent_index, seg.voxels))
    return out
