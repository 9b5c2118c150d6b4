"""Command-line entry point: ``clk <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from clk import costmap, endpoints, metrics, minpath, phantom, pipeline
from clk.nnet import NetParams, predict_volume
from clk.nnet.gradcheck import gradcheck_all
from clk.volume import VolumeError, read_volume, write_volume

log = logging.getLogger("clk")


def _point(text):
    vals = [float(v) for v in text.split(",")]
    if len(vals) != 3:
        raise argparse.ArgumentTypeError(f"expected x,y,z, got {text!r}")
    return np.array(vals)


def _load_config(path):
    if not path:
        return {}
    return json.loads(Path(path).read_text())


def _seed(args, cfg, default=42):
    """Flag beats ``CLK_SEED``, which beats the config file."""
    if getattr(args, "seed", None) is not None:
        return args.seed
    if os.environ.get("CLK_SEED"):
        return int(os.environ["CLK_SEED"])
    return int(cfg.get("seed", default))


def _out_dir(path):
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


# -- subcommands ---------------------------------------------------------------


def cmd_phantom(args):
    cfg = _load_config(args.config)
    seed = _seed(args, cfg)
    if args.spec:
        spec = phantom.PhantomSpec.from_json(json.loads(Path(args.spec).read_text()))
        name = Path(args.spec).stem
    else:
        suite = dict(phantom.standard_suite(seed))
        name = args.name or cfg.get("case", "straight")
        if name not in suite:
            raise SystemExit(f"unknown phantom {name!r}; choose from {sorted(suite)}")
        spec = suite[name]
    mask, truth = phantom.rasterize(spec)
    out = _out_dir(args.out)
    write_volume(mask, out / "mask.v3j")
    pipeline.dump_json(truth.to_json(), out / "truth.json")
    pipeline.dump_json(spec.to_json(), out / "spec.json")
    print(f"{name}: dims {mask.dims}, {int(mask.data.sum())} foreground voxels, {len(truth.endpoints)} endpoints")
    return 0


def cmd_costmap(args):
    mask = read_volume(args.mask)
    out = _out_dir(args.out)
    if args.mode == "reference":
        if not args.truth:
            raise SystemExit("--truth is required for the reference cost map")
        truth = phantom.GroundTruth.from_json(json.loads(Path(args.truth).read_text()))
        dm = costmap.reference_cl_distance(mask, truth.centerline, args.delta)
        write_volume(dm.cl_dist, out / "cl_dist.v3j")
        write_volume(dm.cl_log, out / "cost.v3j")
    else:
        edt = costmap.edt_exact(mask)
        sig = costmap.baseline_sigmoid_map(edt, costmap.SigmoidParams.parse(args.sigmoid))
        write_volume(edt, out / "edt.v3j")
        write_volume(sig, out / "sigmoid.v3j")
        write_volume(costmap.baseline_cost(mask, sig, args.delta, args.power), out / "cost.v3j")
    print(f"wrote {out / 'cost.v3j'}")
    return 0


def _root_from(args, mask):
    if args.root is not None:
        return minpath.nearest_foreground(mask, args.root)
    if args.truth:
        truth = phantom.GroundTruth.from_json(json.loads(Path(args.truth).read_text()))
        return minpath.nearest_foreground(mask, truth.centerline.root)
    raise SystemExit("give --root or --truth to locate the root point")


def cmd_endpoints(args):
    mask = read_volume(args.mask)
    if args.method == "bfs":
        eps = endpoints.bfs_arrival_endpoints(mask, _root_from(args, mask), args.r_nms)
    else:
        if args.field:
            field = endpoints.ConfidenceField(read_volume(args.field), args.delta_mm)
        elif args.truth:
            truth = phantom.GroundTruth.from_json(json.loads(Path(args.truth).read_text()))
            field = endpoints.encode_confidence(mask, truth.endpoints, args.delta_mm)
        else:
            raise SystemExit("decode needs --field or --truth")
        root = None if args.root is None else args.root
        eps = endpoints.decode_confidence(field, mask, args.decode_method, root=root)
    pipeline.dump_json(eps.to_json(), args.out)
    print(f"{len(eps)} endpoints -> {args.out}")
    return 0


def cmd_extract(args):
    mask = read_volume(args.mask)
    cost = read_volume(args.cost)
    eps = endpoints.EndpointSet.from_json(json.loads(Path(args.endpoints).read_text()))
    if eps.root is None:
        raise SystemExit("endpoint file has no root point")
    g = minpath.VoxelGraph.from_cost(mask, cost, edge_length=args.euclidean_edge_scale)
    root = minpath.nearest_foreground(mask, eps.root)
    cl = minpath.smooth(minpath.extract_tree(g, root, eps), args.smooth_window, args.smooth_iters)
    pipeline.dump_json(cl.to_json(), args.out)
    print(f"{len(cl.segments)} segments, {metrics.total_length(cl):.2f} mm -> {args.out}")
    return 0 if not cl.unreached else 1


def _pipeline_config(args):
    cfg = _load_config(args.config)
    flags = {
        "mode": args.mode,
        "case": args.case,
        "mask_path": args.mask,
        "truth_path": args.truth,
        "out_dir": args.out,
        "delta": args.delta,
        "delta_mm": args.delta_mm,
        "sigmoid": args.sigmoid,
        "baseline_power": args.power,
        "r_nms": args.r_nms,
        "decode_method": args.decode_method,
        "smooth_window": args.smooth_window,
        "smooth_iters": args.smooth_iters,
        "net_dir": args.net_dir,
        "train_patches": args.patches,
    }
    cfg.update({k: v for k, v in flags.items() if v is not None})
    if args.euclidean_edge_scale:
        cfg["euclidean_edge_scale"] = True
    net = dict(cfg.get("net", {}))
    for key in ("epochs", "patch", "depth", "base_channels", "block_convs"):
        v = getattr(args, key, None)
        if v is not None:
            net[key] = v
    if getattr(args, "no_attention", False):
        net["attention"] = False
    cfg["net"] = net
    cfg["seed"] = _seed(args, cfg)
    return pipeline.PipelineConfig.from_dict(cfg)


def cmd_train(args):
    pcfg = _pipeline_config(args)
    result = pipeline.train_net(pcfg, exclude=tuple(args.exclude or ()))
    out = _out_dir(args.out or "net")
    result.params.save(out)
    pipeline.dump_json({"initial_loss": result.initial_loss, "epoch_loss": result.epoch_loss}, out / "train_loss.json")
    for epoch, value in enumerate(result.epoch_loss):
        print(f"epoch {epoch:3d}  lr {pcfg.net_config().lr_at(epoch):.2e}  loss {value:.6f}")
    return 0


def cmd_predict(args):
    params = NetParams.load(args.net)
    mask = read_volume(args.mask)
    yc, ye = predict_volume(params, mask, stride=args.stride)
    out = _out_dir(args.out)
    write_volume(yc, out / "yc.v3j")
    write_volume(ye, out / "ye.v3j")
    print(f"wrote {out / 'yc.v3j'} and {out / 'ye.v3j'}")
    return 0


def cmd_gradcheck(args):
    results = gradcheck_all(args.seed if args.seed is not None else 0)
    worst = 0.0
    for name, err in results.items():
        print(f"{name:20s} max rel err {err:.3e}")
        worst = max(worst, err)
    return 0 if worst < args.tol else 1


def cmd_eval(args):
    mask = read_volume(args.mask)
    cl = minpath.Centerline.from_json(json.loads(Path(args.centerline).read_text()))
    out = _out_dir(args.out)
    if args.against == "truth":
        truth = phantom.GroundTruth.from_json(json.loads(Path(args.truth).read_text()))
        report = metrics.evaluate(
            Path(args.centerline).stem, cl, truth.centerline, truth.endpoints.points(), mask, truth.max_radius
        )
        pipeline.dump_json(report.to_json(), out / "eval.json")
        (out / "eval.csv").write_text(pipeline.report_csv([report]))
        print(json.dumps(report.to_json(), indent=1, sort_keys=True))
        return 0 if report.success else 1
    other = minpath.Centerline.from_json(json.loads(Path(args.other).read_text()))
    spacing = min(mask.spacing)
    m_ab, c_ab = metrics.cl_to_cl(cl, other, spacing)
    m_ba, c_ba = metrics.cl_to_cl(other, cl, spacing)
    res = {"mean_a_to_b_mm": m_ab, "coverage_a_by_b_pct": c_ab, "mean_b_to_a_mm": m_ba, "coverage_b_by_a_pct": c_ba}
    pipeline.dump_json(res, out / "agreement.json")
    print(json.dumps(res, indent=1, sort_keys=True))
    return 0


def cmd_run(args):
    cfg = _pipeline_config(args)
    report = pipeline.run_pipeline(cfg)
    print(json.dumps(report.to_json(), indent=1, sort_keys=True))
    return 0 if report.success else 1


def cmd_ablate(args):
    cfg = _pipeline_config(args)
    summary = pipeline.ablate_attention(cfg)
    for arm in ("with_attn", "without_attn"):
        print(f"{arm:13s} sharpness {summary[arm]['sharpness']:.4f}  final loss {summary[arm]['final_loss']:.6f}")
    print(f"sharper arm: {summary['sharper_arm']}")
    return 0


# -- parser ------------------------------------------------------------------


def _pipeline_flags(p, with_mode=True):
    if with_mode:
        p.add_argument("--mode", choices=pipeline.MODES)
    p.add_argument("--case", help="standard-suite phantom name")
    p.add_argument("--mask")
    p.add_argument("--truth")
    p.add_argument("--out")
    p.add_argument("--delta", type=float)
    p.add_argument("--delta-mm", type=float)
    p.add_argument("--sigmoid")
    p.add_argument("--power", type=float)
    p.add_argument("--r-nms", type=float)
    p.add_argument("--decode-method", choices=endpoints.DECODE_METHODS)
    p.add_argument("--smooth-window", type=int)
    p.add_argument("--smooth-iters", type=int)
    p.add_argument("--euclidean-edge-scale", action="store_true")
    p.add_argument("--net-dir")
    p.add_argument("--patches", type=int, help="number of training patches")
    p.add_argument("--epochs", type=int)
    p.add_argument("--patch", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--base-channels", type=int)
    p.add_argument("--block-convs", type=int)
    p.add_argument("--no-attention", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="clk", description="Centerline extraction from tubular-tree masks.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config; flags override it")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, default=None, help="cap BLAS/OpenMP threads")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", parents=[common], help="rasterize a phantom")
    p.add_argument("--name")
    p.add_argument("--spec", help="PhantomSpec JSON")
    p.add_argument("--out", default="phantom")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("costmap", parents=[common], help="reference or baseline cost map")
    p.add_argument("--mode", choices=("reference", "baseline"), default="reference")
    p.add_argument("--mask", required=True)
    p.add_argument("--truth")
    p.add_argument("--delta", type=float, default=costmap.DEFAULT_DELTA)
    p.add_argument("--sigmoid", default="0.15,0.3,0.3,0.8,0.6,1.8")
    p.add_argument("--power", type=float, default=costmap.DEFAULT_POWER)
    p.add_argument("--out", default="costmap")
    p.set_defaults(func=cmd_costmap)

    p = sub.add_parser("endpoints", parents=[common], help="detect or decode branch endpoints")
    p.add_argument("--method", choices=("bfs", "decode"), default="bfs")
    p.add_argument("--mask", required=True)
    p.add_argument("--truth")
    p.add_argument("--field", help="confidence map to decode")
    p.add_argument("--root", type=_point, help="root point x,y,z in mm")
    p.add_argument("--r-nms", type=float, default=2.5)
    p.add_argument("--delta-mm", type=float, default=3.0)
    p.add_argument("--decode-method", choices=endpoints.DECODE_METHODS, default="peak")
    p.add_argument("--out", default="endpoints.json")
    p.set_defaults(func=cmd_endpoints)

    p = sub.add_parser("extract", parents=[common], help="minimal-path centerline tree")
    p.add_argument("--cost", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--endpoints", required=True)
    p.add_argument("--smooth-window", type=int, default=5)
    p.add_argument("--smooth-iters", type=int, default=3)
    p.add_argument("--euclidean-edge-scale", action="store_true")
    p.add_argument("--out", default="centerline.json")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", parents=[common], help="train the network on suite phantoms")
    _pipeline_flags(p, with_mode=False)
    p.add_argument("--exclude", nargs="*", help="suite phantoms kept out of training")
    p.set_defaults(func=cmd_train, mode=None)

    p = sub.add_parser("predict", parents=[common], help="predict both maps for a mask")
    p.add_argument("--net", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--stride", type=int)
    p.add_argument("--out", default="predict")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("eval", parents=[common], help="evaluate a centerline")
    p.add_argument("--centerline", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--against", choices=("truth", "other-centerline"), default="truth")
    p.add_argument("--truth")
    p.add_argument("--other")
    p.add_argument("--out", default="eval")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("run", parents=[common], help="full pipeline on one case")
    _pipeline_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", parents=[common], help="attention on/off twin training")
    _pipeline_flags(p, with_mode=False)
    p.set_defaults(func=cmd_ablate, mode=None)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except (VolumeError, pipeline.StageError, minpath.PathError, endpoints.EndpointError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2 if isinstance(err, ValueError) else 3


if __name__ == "__main__":
    sys.exit(main())
