"""Branch endpoints: arrival-time detection, Gaussian confidence encoding and decoding."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from clk import kernels
from clk.costmap import edt_exact
from clk.volume import Volume3D, connected_components

log = logging.getLogger(__name__)

SOURCES = ("analytic", "bfs", "decoded")
DECODE_METHODS = ("peak", "weighted", "geometric")


class EndpointError(Exception):
    pass


@dataclass
class EndpointSet:
    """Root point plus branch-terminal points (mm) with confidences in (0, 1]."""

    root: np.ndarray | None
    endpoints: list = field(default_factory=list)
    source: str = "analytic"

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"source must be one of {SOURCES}, got {self.source!r}")
        if self.root is not None:
            self.root = np.asarray(self.root, dtype=np.float64).reshape(3)
        self.endpoints = [(np.asarray(p, dtype=np.float64).reshape(3), float(c)) for p, c in self.endpoints]

    def __len__(self):
        return len(self.endpoints)

    def points(self):
        return np.array([p for p, _ in self.endpoints], dtype=np.float64).reshape(-1, 3)

    def to_json(self):
        return {
            "root": None if self.root is None else [float(c) for c in self.root],
            "endpoints": [{"p": [float(c) for c in p], "conf": c} for p, c in self.endpoints],
            "source": self.source,
        }

    @classmethod
    def from_json(cls, obj):
        return cls(obj.get("root"), [(e["p"], e["conf"]) for e in obj["endpoints"]], obj.get("source", "analytic"))


@dataclass
class ConfidenceField:
    map: Volume3D
    delta_mm: float = 3.0

    @property
    def peak_value(self):
        return gaussian_peak(self.delta_mm)


def gaussian_peak(delta_mm):
    """Largest possible confidence value, ``1/sqrt(2*pi*delta)``."""
    return 1.0 / math.sqrt(2.0 * math.pi * delta_mm)


def geodesic_distance(mask: Volume3D, sources, connectivity=26):
    """Within-mask distance (mm, centre-to-centre steps) from the nearest of ``sources``.

    ``sources`` are voxel indices. Unreachable and background voxels get ``inf``.
    """
    fg = mask.foreground().ravel(order="F").astype(np.uint8)
    offsets = kernels.neighbour_offsets(connectivity)
    lengths = kernels.offset_lengths(offsets, mask.spacing)
    src = np.array([mask.flat_index(s) for s in sources], dtype=np.int64)
    for s, idx in zip(src, sources):
        if not fg[s]:
            raise EndpointError(f"geodesic source {tuple(idx)} is on background")
    dist, _ = kernels.dijkstra(fg, np.ones(mask.size), mask.dims, offsets, lengths, src, np.zeros(len(src)))
    return dist.reshape(mask.dims, order="F")


def _grow(mask, arrival, seeds, level):
    """Voxels 26-connected to ``seeds`` through arrival >= ``level``."""
    offsets = kernels.neighbour_offsets(26)
    seen = set(seeds)
    stack = list(seeds)
    while stack:
        u = stack.pop()
        for o in offsets:
            v = (u[0] + int(o[0]), u[1] + int(o[1]), u[2] + int(o[2]))
            if v in seen or not all(0 <= c < d for c, d in zip(v, mask.dims)):
                continue
            if np.isfinite(arrival[v]) and arrival[v] >= level:
                seen.add(v)
                stack.append(v)
    return seen


def _tip_voxel(mask, arrival, edt, peak, depth):
    """Centre of the terminal face behind arrival-time peak ``peak``.

    The tip cap (arrival within ``depth`` of the peak) and the shell behind
    it give a tip axis. The cap voxel reaching furthest along that axis,
    less its distance off the axis line, is the tip. Caps no more than a
    voxel diagonal thick keep the peak itself.
    """
    top = arrival[peak]
    cap = sorted(_grow(mask, arrival, [peak], top - depth))
    if max(edt[v] for v in cap) <= max(mask.spacing):
        return peak
    shell = _grow(mask, arrival, cap, top - 2 * depth) - set(cap)
    pts = mask.centers(cap)
    c1 = pts.mean(axis=0)
    if shell:
        axis = c1 - mask.centers(sorted(shell)).mean(axis=0)
    else:
        axis = mask.centers([peak])[0] - c1
    norm = np.linalg.norm(axis)
    if norm == 0:
        return peak
    axis /= norm
    rel = pts - c1
    along = rel @ axis
    off = np.linalg.norm(rel - along[:, None] * axis, axis=1)
    return cap[int(np.argmax(along - off))]


def bfs_arrival_endpoints(mask: Volume3D, root, r_nms=2.5) -> EndpointSet:
    """Branch ends as prominent local maxima of geodesic arrival time from ``root``.

    Arrival time is the within-mask 26-neighbourhood path length (mm). A
    local maximum is kept when its prominence (drop in arrival time needed
    to reach a higher maximum) is at least ``r_nms``. Each kept maximum is
    then moved to the centre of its terminal face, since on a tube end
    wider than a voxel the raw maximum sits on the rim.
    """
    root = tuple(int(c) for c in root)
    mask.check_index(root)
    if not mask.foreground()[root]:
        raise EndpointError(f"root {root} is on background")
    arrival = geodesic_distance(mask, [root])
    fg = mask.foreground()
    unreached = fg & ~np.isfinite(arrival)
    if unreached.any():
        labels, _ = connected_components(mask.like(unreached.astype(float), "mask"), 26)
        sizes = np.bincount(labels.data.astype(np.int64).ravel())[1:]
        log.warning("%d foreground voxels unreachable from root; component sizes %s", int(unreached.sum()), sizes.tolist())

    flat = arrival.ravel(order="F")
    reach = np.flatnonzero(np.isfinite(flat))
    order = reach[np.lexsort((reach, -flat[reach]))]
    peaks, pers = kernels.peak_persistence(
        np.where(np.isfinite(flat), flat, -1.0), order, mask.dims, kernels.neighbour_offsets(26)
    )
    kept = sorted(
        ((int(p), q) for p, q in zip(peaks, pers) if q >= r_nms and int(p) != mask.flat_index(root)),
        key=lambda pq: (-flat[pq[0]], pq[0]),
    )
    edt = edt_exact(mask).data if kept and not fg.all() else np.full(mask.dims, np.inf)
    tips = []
    for p, q in kept:
        idx = tuple(int(c) for c in np.unravel_index(p, mask.dims, order="F"))
        tips.append(_tip_voxel(mask, arrival, edt, idx, min(r_nms, 0.5 * q)))
    tips.sort(key=lambda v: (-arrival[v], mask.flat_index(v)))
    eps = [(mask.centers([v])[0], 1.0) for v in tips]
    return EndpointSet(mask.centers([root])[0], eps, "bfs")


def encode_confidence(mask: Volume3D, eps: EndpointSet, delta_mm: float = 3.0) -> ConfidenceField:
    """Gaussian of the geodesic distance to the nearest endpoint.

    ``Y(i) = exp(-D(i)^2 / delta^2) / sqrt(2*pi*delta)`` on foreground,
    0 elsewhere; ``delta`` is used both ways exactly as written.
    """
    from clk.minpath import nearest_foreground

    if delta_mm <= 0:
        raise ValueError(f"delta_mm must be positive, got {delta_mm}")
    if len(eps) == 0:
        log.warning("no endpoints to encode; confidence map is all zeros")
        return ConfidenceField(mask.like(np.zeros(mask.dims)), delta_mm)
    seeds = []
    for p in eps.points():
        v = nearest_foreground(mask, p)
        if np.linalg.norm(mask.centers([v])[0] - p) > np.linalg.norm(mask.spacing):
            raise EndpointError(f"endpoint {p.tolist()} is not inside the mask foreground")
        seeds.append(v)
    d = geodesic_distance(mask, seeds)
    with np.errstate(over="ignore"):
        y = gaussian_peak(delta_mm) * np.exp(-(d**2) / delta_mm**2)
    y[~np.isfinite(d)] = 0.0
    y[~mask.foreground()] = 0.0
    return ConfidenceField(mask.like(y), delta_mm)


def decode_confidence(field: ConfidenceField, mask: Volume3D, method="peak", root=None) -> EndpointSet:
    """Threshold at half the peak value and return one endpoint per 26-component.

    ``method`` picks the point reported for each component: ``"peak"`` (the
    maximum voxel), ``"weighted"`` (intensity-weighted centroid) or
    ``"geometric"`` (plain centroid); centroids are snapped to the nearest
    component voxel. Confidence is the component maximum over the peak value.
    """
    if method not in DECODE_METHODS:
        raise ValueError(f"method must be one of {DECODE_METHODS}, got {method!r}")
    if field.delta_mm <= 0:
        raise ValueError(f"delta_mm must be positive, got {field.delta_mm}")
    top = gaussian_peak(field.delta_mm)
    values = field.map.data
    binary = (values >= 0.5 * top) & mask.foreground()
    labels, count = connected_components(mask.like(binary.astype(float), "mask"), 26)
    lab = labels.data.astype(np.int64)
    eps = []
    for k in range(1, count + 1):
        idx = np.argwhere(lab == k)
        idx = idx[np.lexsort((idx[:, 0], idx[:, 1], idx[:, 2]))]
        vals = values[tuple(idx.T)]
        if method == "peak":
            choice = idx[int(np.argmax(vals))]
        else:
            pts = mask.centers(idx)
            w = vals if method == "weighted" else np.ones(len(vals))
            c = (pts * w[:, None]).sum(axis=0) / w.sum()
            choice = idx[int(np.argmin(np.linalg.norm(pts - c, axis=1)))]
        conf = min(1.0, float(vals.max()) / top)
        eps.append((mask.centers([choice])[0], conf))
    return EndpointSet(root, eps, "decoded")
