"""End-to-end runs: phantom -> cost map + endpoints -> minimal-path tree -> evaluation."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from clk import costmap, endpoints, metrics, minpath, phantom
from clk.nnet import NetConfig, NetParams, make_patches, predict_volume, train
from clk.volume import Volume3D, read_volume, write_volume

log = logging.getLogger(__name__)

MODES = ("baseline", "deep", "reference-oracle")


class StageError(Exception):
    """Failure inside one pipeline stage; ``stage`` names it."""

    def __init__(self, stage, err):
        super().__init__(f"stage {stage!r} failed: {err}")
        self.stage = stage


@dataclass
class PipelineConfig:
    mode: str = "reference-oracle"
    case: str = "straight"
    mask_path: str | None = None
    truth_path: str | None = None
    out_dir: str = "out"
    seed: int = 42
    delta: float = costmap.DEFAULT_DELTA
    delta_mm: float = 3.0
    sigmoid: str = "0.15,0.3,0.3,0.8,0.6,1.8"
    baseline_power: float = costmap.DEFAULT_POWER
    r_nms: float = 2.5
    decode_method: str = "peak"
    smooth_window: int = 5
    smooth_iters: int = 3
    euclidean_edge_scale: bool = False
    endpoint_tol: float = 1.0
    bifurcation_tol: float = 2.0
    net_dir: str | None = None
    train_patches: int = 40
    net: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.decode_method not in endpoints.DECODE_METHODS:
            raise ValueError(f"decode_method must be one of {endpoints.DECODE_METHODS}")
        if self.smooth_window < 1 or self.smooth_window % 2 == 0:
            raise ValueError(f"smooth_window must be a positive odd integer, got {self.smooth_window}")
        if self.smooth_iters < 0:
            raise ValueError(f"smooth_iters must be >= 0, got {self.smooth_iters}")
        for name in ("delta", "delta_mm", "r_nms", "baseline_power", "endpoint_tol", "bifurcation_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.train_patches < 1:
            raise ValueError(f"train_patches must be >= 1, got {self.train_patches}")
        costmap.SigmoidParams.parse(self.sigmoid)

    def net_config(self):
        d = {"seed": self.seed, "gamma": 0.5, "delta": self.delta, "delta_mm": self.delta_mm}
        d.update(self.net)
        return NetConfig.from_dict(d)

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown config keys: {sorted(extra)}")
        return cls(**d)


# -- artifacts ---------------------------------------------------------------


def dump_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def report_csv(reports):
    """One row per report, a column per metric; floats in ``repr`` form."""
    buf = io.StringIO()
    rows = [r.to_json() for r in reports]
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return buf.getvalue()


def write_pgm(path, img):
    """Binary 8-bit portable graymap; ``img`` is indexed ``[row, col]``."""
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + img.tobytes())


def render_slices(mask: Volume3D, cl, out_dir, stem="render"):
    """Mid-slice images along each axis: mask grey, centerline samples near the slice white."""
    pts = metrics.sample_centerline(cl) if cl.segments else np.empty((0, 3))
    q = (pts - mask.origin) / mask.spacing
    paths = []
    for axis, name in enumerate(("sagittal", "coronal", "axial")):
        mid = mask.dims[axis] // 2
        img = np.where(np.take(mask.foreground(), mid, axis=axis), 100, 0).astype(np.uint8)
        near = np.abs(q[:, axis] - mid) <= 1.0
        rest = [a for a in range(3) if a != axis]
        ij = np.floor(q[near][:, rest] + 0.5).astype(int)
        inside = (ij >= 0).all(axis=1) & (ij[:, 0] < img.shape[0]) & (ij[:, 1] < img.shape[1])
        img[ij[inside, 0], ij[inside, 1]] = 255
        path = Path(out_dir) / f"{stem}_{name}.pgm"
        write_pgm(path, img.T[::-1])
        paths.append(path)
    return paths


# -- stages ------------------------------------------------------------------


def load_case(cfg: PipelineConfig):
    """``(name, mask, truth)`` from files if given, else the named suite phantom."""
    if cfg.mask_path:
        mask = read_volume(cfg.mask_path)
        if not cfg.truth_path:
            raise ValueError("mask_path given without truth_path")
        truth = phantom.GroundTruth.from_json(json.loads(Path(cfg.truth_path).read_text()))
        return Path(cfg.mask_path).stem, mask, truth
    suite = dict(phantom.standard_suite(cfg.seed))
    if cfg.case not in suite:
        raise ValueError(f"unknown phantom {cfg.case!r}; choose from {sorted(suite)}")
    mask, truth = phantom.rasterize(suite[cfg.case])
    return cfg.case, mask, truth


def training_phantoms(seed, exclude=()):
    return [phantom.rasterize(spec) for name, spec in phantom.standard_suite(seed) if name not in exclude]


def train_net(cfg: PipelineConfig, exclude=(), attention=None):
    ncfg = cfg.net_config()
    if attention is not None:
        ncfg.attention = attention
    data = make_patches(training_phantoms(cfg.seed, exclude), cfg.train_patches, ncfg.patch, ncfg.seed, cfg.delta, cfg.delta_mm)
    return train(ncfg, data)


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except Exception as err:  # noqa: BLE001 - re-raised with the stage name
        raise StageError(name, err) from err


def _cost_and_endpoints(cfg, case, mask, truth, root, out):
    if cfg.mode == "reference-oracle":
        dm = costmap.reference_cl_distance(mask, truth.centerline, cfg.delta)
        field_ = endpoints.encode_confidence(mask, truth.endpoints, cfg.delta_mm)
        eps = endpoints.decode_confidence(field_, mask, cfg.decode_method, root=truth.endpoints.root)
        return dm.cl_log, eps
    if cfg.mode == "baseline":
        edt = costmap.edt_exact(mask)
        sig = costmap.baseline_sigmoid_map(edt, costmap.SigmoidParams.parse(cfg.sigmoid))
        cost = costmap.baseline_cost(mask, sig, cfg.delta, cfg.baseline_power)
        return cost, endpoints.bfs_arrival_endpoints(mask, root, cfg.r_nms)
    if cfg.net_dir:
        params = NetParams.load(cfg.net_dir)
    else:
        result = train_net(cfg, exclude=(case,))
        params = result.params
        params.save(out / "net")
        dump_json({"initial_loss": result.initial_loss, "epoch_loss": result.epoch_loss}, out / "train_loss.json")
    yc, ye = predict_volume(params, mask)
    write_volume(ye, out / "endpoint_map.v3j")
    field_ = endpoints.ConfidenceField(ye, cfg.delta_mm)
    return yc, endpoints.decode_confidence(field_, mask, cfg.decode_method, root=truth.endpoints.root)


def run_pipeline(cfg: PipelineConfig):
    """Run one case end to end and write its artifacts to ``cfg.out_dir``.

    Returns the :class:`metrics.EvalReport`; ``report.success`` is the
    phantom success predicate. Artifacts already written stay on disk when
    a later stage fails.
    """
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_json(asdict(cfg), out / "config.json")
    case, mask, truth = _stage("load", load_case, cfg)
    root = minpath.nearest_foreground(mask, truth.centerline.root)
    cost, eps = _stage("costmap", _cost_and_endpoints, cfg, case, mask, truth, root, out)
    write_volume(cost, out / "cost.v3j")
    dump_json(eps.to_json(), out / "endpoints.json")

    def extract():
        g = minpath.VoxelGraph.from_cost(mask, cost, edge_length=cfg.euclidean_edge_scale)
        raw = minpath.extract_tree(g, root, eps)
        return minpath.smooth(raw, cfg.smooth_window, cfg.smooth_iters)

    cl = _stage("extract", extract)
    dump_json(cl.to_json(), out / "centerline.json")
    if not cl.segments:
        raise StageError("evaluate", "no centerline segments extracted")
    report = _stage(
        "evaluate",
        metrics.evaluate,
        case,
        cl,
        truth.centerline,
        truth.endpoints.points(),
        mask,
        truth.max_radius,
        cfg.endpoint_tol,
        cfg.bifurcation_tol,
    )
    dump_json(report.to_json(), out / "eval.json")
    (out / "eval.csv").write_text(report_csv([report]))
    render_slices(mask, cl, out)
    return report


# -- attention ablation --------------------------------------------------------


def diameter_profile(yc: Volume3D, mask: Volume3D, axis_point, axis_dir=(0.0, 0.0, 1.0)):
    """Foreground values of ``yc`` along the x-diameter through ``axis_point``.

    Returns ``(pos_mm, values)``; ``pos_mm`` is signed offset from the axis.
    """
    c = mask.mm_to_index(axis_point)
    xs = np.arange(mask.dims[0])
    keep = mask.foreground()[xs, c[1], c[2]]
    pos = (xs[keep] - c[0]) * mask.spacing[0]
    return pos, yc.data[xs[keep], c[1], c[2]]


def sharpness(pos, values, core_mm=1.0):
    """Value range within ``core_mm`` of the centre over the range outside it."""
    core = np.abs(pos) <= core_mm
    if core.sum() < 1 or (~core).sum() < 1:
        return float("nan")
    inner = float(np.ptp(values[core]))
    outer = float(np.ptp(values[~core]))
    return inner / outer if outer > 0 else float("inf")


def ablate_attention(cfg: PipelineConfig):
    """Train twin nets differing only in attention and compare ``yc`` cross-section profiles.

    Both twins see the same patches (same seed). The profile is taken on a
    held-out straight tube, across its middle cross section. Writes
    ``profile.csv`` (pos_mm, with_attn, without_attn) and ``ablation.json``.
    """
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_json(asdict(cfg), out / "config.json")
    spec = phantom.straight_tube(radius=1.6, length=12.0, seed=cfg.seed)
    mask, truth = phantom.rasterize(spec)
    mid = truth.centerline.segments[0].points
    center = mid[len(mid) // 2]
    arms = {}
    for name, att in (("with_attn", True), ("without_attn", False)):
        result = _stage("train", train_net, cfg, ("straight",), att)
        yc, _ = predict_volume(result.params, mask)
        pos, vals = diameter_profile(yc, mask, center)
        arms[name] = {"pos": pos, "values": vals, "loss": result.epoch_loss, "sharpness": sharpness(pos, vals)}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["pos_mm", "with_attn", "without_attn"])
    for p, a, b in zip(arms["with_attn"]["pos"], arms["with_attn"]["values"], arms["without_attn"]["values"]):
        w.writerow([repr(float(p)), repr(float(a)), repr(float(b))])
    (out / "profile.csv").write_text(buf.getvalue())
    summary = {
        name: {"sharpness": arm["sharpness"], "final_loss": arm["loss"][-1], "epoch_loss": arm["loss"]}
        for name, arm in arms.items()
    }
    s_on, s_off = summary["with_attn"]["sharpness"], summary["without_attn"]["sharpness"]
    summary["sharper_arm"] = "with_attn" if s_on > s_off else "without_attn" if s_off > s_on else "tie"
    dump_json(summary, out / "ablation.json")
    return summary
