"""Centerline evaluation against phantom truth or another centerline."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

RESAMPLE_STEP = 0.1


class MetricError(Exception):
    pass


def resample_polyline(points, step=RESAMPLE_STEP):
    """Insert points so consecutive samples are at most ``step`` apart (originals kept)."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(p) < 2:
        return p.copy()
    out = [p[:1]]
    for a, b in zip(p[:-1], p[1:]):
        n = max(1, int(np.ceil(np.linalg.norm(b - a) / step)))
        t = np.arange(1, n + 1)[:, None] / n
        out.append(a + t * (b - a))
    return np.concatenate(out)


def sample_centerline(cl, step=RESAMPLE_STEP):
    if not cl.segments:
        raise MetricError("centerline has no segments")
    return np.concatenate([resample_polyline(s.points, step) for s in cl.segments])


def cl_to_cl(a, b, spacing=0.4, step=RESAMPLE_STEP):
    """Mean nearest distance from ``a`` to ``b`` (mm) and % of ``a`` covered within half a voxel."""
    pa = sample_centerline(a, step)
    pb = sample_centerline(b, step)
    d, _ = cKDTree(pb).query(pa)
    half = 0.5 * float(np.min(spacing))
    return float(d.mean()), float(100.0 * np.mean(d <= half + 1e-9))


def hausdorff_mask_to_cl(mask, cl, step=RESAMPLE_STEP):
    """Largest distance from a foreground voxel centre to the centerline."""
    idx = np.argwhere(mask.foreground())
    if len(idx) == 0:
        raise MetricError("mask has no foreground")
    d, _ = cKDTree(sample_centerline(cl, step)).query(mask.centers(idx))
    return float(d.max())


def total_length(cl):
    return float(sum(s.length() for s in cl.segments))


def endpoint_recall(found, truth, tol_mm=1.0):
    """Greedy nearest matching; returns ``(missing, total, pairs)`` with pairs as (found, truth) indices."""
    if tol_mm <= 0:
        raise ValueError("tol_mm must be positive")
    f = np.asarray(found, dtype=np.float64).reshape(-1, 3)
    t = np.asarray(truth, dtype=np.float64).reshape(-1, 3)
    pairs = []
    if len(f) and len(t):
        d = np.linalg.norm(f[:, None, :] - t[None, :, :], axis=-1)
        used_f, used_t = set(), set()
        for flat in np.argsort(d, axis=None, kind="stable"):
            i, j = divmod(int(flat), len(t))
            if d[i, j] > tol_mm:
                break
            if i in used_f or j in used_t:
                continue
            used_f.add(i)
            used_t.add(j)
            pairs.append((i, j))
    return len(t) - len(pairs), len(t), pairs


def wrong_bifurcation_count(cl, truth, tol_mm=2.0):
    """Junctions of ``cl`` farther than ``tol_mm`` from every junction of ``truth``."""
    jc = cl.junctions()
    jt = truth.junctions()
    if len(jc) == 0:
        return 0
    if len(jt) == 0:
        return len(jc)
    d = np.linalg.norm(jc[:, None, :] - jt[None, :, :], axis=-1).min(axis=1)
    return int((d > tol_mm).sum())


def leaf_tips(cl):
    return np.array([cl.segments[k].points[-1] for k in cl.leaves()]).reshape(-1, 3)


@dataclass
class EvalReport:
    case: str
    mean_cl_to_cl_mm: float
    mean_truth_to_cl_mm: float
    coverage_pct: float
    truth_coverage_pct: float
    hausdorff_mm: float
    total_length_mm: float
    truth_length_mm: float
    endpoints_missing: int
    endpoints_total: int
    extra_leaves: int
    wrong_bifurcations: int
    success: bool = field(default=False)

    def to_json(self):
        return asdict(self)


def evaluate(case, cl, truth_cl, truth_endpoints, mask, max_radius, endpoint_tol=1.0, bifurcation_tol=2.0):
    """Full report of ``cl`` against a truth centerline, plus the phantom success predicate.

    Success: no missing endpoints, no wrong bifurcations, Hausdorff within
    ``max_radius`` + 2 voxels and at least 99 % coverage in both directions.
    """
    spacing = min(mask.spacing)
    m_ab, c_ab = cl_to_cl(cl, truth_cl, spacing)
    m_ba, c_ba = cl_to_cl(truth_cl, cl, spacing)
    tips = leaf_tips(cl)
    missing, total, pairs = endpoint_recall(tips, truth_endpoints, endpoint_tol)
    hd = hausdorff_mask_to_cl(mask, cl)
    wrong = wrong_bifurcation_count(cl, truth_cl, bifurcation_tol)
    report = EvalReport(
        case=case,
        mean_cl_to_cl_mm=m_ab,
        mean_truth_to_cl_mm=m_ba,
        coverage_pct=c_ab,
        truth_coverage_pct=c_ba,
        hausdorff_mm=hd,
        total_length_mm=total_length(cl),
        truth_length_mm=total_length(truth_cl),
        endpoints_missing=missing,
        endpoints_total=total,
        extra_leaves=len(tips) - len(pairs),
        wrong_bifurcations=wrong,
    )
    report.success = bool(
        missing == 0
        and wrong == 0
        and hd <= max_radius + 2 * max(mask.spacing)
        and c_ab >= 99.0
        and c_ba >= 99.0
    )
    return report
