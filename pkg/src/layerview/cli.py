"""Command-line front end.

Verbs: render, warp-mpi, bench-psv, bench-grouping, bench-supersample,
metrics, train. Exit codes: 0 ok, 2 usage, 3 data error, 4 numeric failure;
failures print one machine-parsable line `error: <class>: <message>`.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import backbone, bench, mpi as mpi_mod, psv as psv_mod, tensor as T, training
from .geometry import CameraModel, DegeneratePlaneError, GeometryError
from .mpi import MpiFormatError, MultiplaneImage, composite, composite_disparity, warp_mpi
from .psv import GroupingError, make_schedule
from .scenes_io import (SceneFormatError, load_scene_dir, oracle_alpha,
                        save_image)
from .backbone import WeightFormatError
from .tensor import ShapeError, Tensor
from .training import TrainingDivergedError


def _add_common(p):
    p.add_argument("--planes", type=int, default=None, help="input depth planes D")
    p.add_argument("--groups", type=int, default=None, help="plane groups G")
    p.add_argument("--supersample", type=int, default=None, help="output planes per input plane S")
    p.add_argument("--near", type=float, default=None, help="near plane distance (m)")
    p.add_argument("--far", type=float, default=None, help="far plane distance (m; inf allowed)")
    p.add_argument("--threads", type=int, default=0, help="worker threads for volume building")
    p.add_argument("--precision", choices=["f32", "f64"], default="f32")
    p.add_argument("--upsample-mode", choices=["bilinear", "nearest"], default=None)
    p.add_argument("--seed", type=int, default=0)


def build_parser():
    parser = argparse.ArgumentParser(prog="layerview",
                                     description="layered novel-view synthesis pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("render", help="synthesize a target view from a scene directory")
    p.add_argument("scene_dir")
    p.add_argument("out_prefix")
    p.add_argument("--weights", help="FMPW weight file (optional with --oracle-alpha)")
    p.add_argument("--target-index", type=int, default=0)
    p.add_argument("--static-mpi", action="store_true",
                   help="build one MPI at the rig center and warp it to the target")
    p.add_argument("--oracle-alpha", action="store_true",
                   help="bypass the network: ground-truth alpha + view-averaged colors")
    p.add_argument("--pad-to-multiple", action="store_true",
                   help="zero-pad inputs to a multiple of 8 and crop the output back")
    p.add_argument("--save-mpi", default=None, help="also write the MPI as an FMPI file")
    _add_common(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("warp-mpi", help="re-render a saved FMPI at a scene target view")
    p.add_argument("mpi_file")
    p.add_argument("scene_dir")
    p.add_argument("out_prefix")
    p.add_argument("--target-index", type=int, default=0)
    _add_common(p)
    p.set_defaults(func=cmd_warp_mpi)

    p = sub.add_parser("bench-psv", help="sweep-volume build time scaling")
    p.add_argument("--planes-list", type=int, nargs="+", default=[8, 16, 32, 64, 128])
    p.add_argument("--views-list", type=int, nargs="+", default=[2, 3, 4, 6, 8])
    p.add_argument("--height", type=int, default=464)
    p.add_argument("--width", type=int, default=800)
    p.add_argument("--repeats", type=int, default=30)
    p.add_argument("--out-prefix", default="bench_psv")
    _add_common(p)
    p.set_defaults(func=cmd_bench_psv)

    p = sub.add_parser("bench-grouping", help="network latency/FLOPs per group count")
    p.add_argument("--planes", type=int, default=64)
    p.add_argument("--groups-list", type=int, nargs="+", default=[1, 2, 4, 8, 16, 32, 64])
    p.add_argument("--views", type=int, default=4)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--parallel-groups", type=int, default=0,
                   help="0: sequential group execution; N: N-thread pool")
    p.add_argument("--out-prefix", default="bench_grouping")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench_grouping)

    p = sub.add_parser("bench-supersample", help="sweep-build savings from super-sampling")
    p.add_argument("--planes-list", type=int, nargs="+", default=[32, 64])
    p.add_argument("--supersample-list", type=int, nargs="+", default=[2, 1])
    p.add_argument("--height", type=int, default=464)
    p.add_argument("--width", type=int, default=800)
    p.add_argument("--views", type=int, default=4)
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--out-prefix", default="bench_supersample")
    _add_common(p)
    p.set_defaults(func=cmd_bench_supersample)

    p = sub.add_parser("metrics", help="PSNR/SSIM/L1 between two images")
    p.add_argument("rendered")
    p.add_argument("ground_truth")
    p.add_argument("--csv", default=None)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("train", help="toy training on the synthetic scene family")
    p.add_argument("out_weights")
    p.add_argument("--config", default=None, help="JSON file mirroring these flags")
    p.add_argument("--iters", type=int, default=2000)
    p.add_argument("--patch", type=int, default=64)
    p.add_argument("--views", type=int, default=4)
    p.add_argument("--lr", type=float, default=9e-5)
    p.add_argument("--eval-interval", type=int, default=100)
    p.add_argument("--log", default=None, help="metrics CSV path")
    p.add_argument("--resume", default=None, help="FMPW file to continue from")
    _add_common(p)
    p.set_defaults(func=cmd_train)
    return parser


# ---------------------------------------------------------------------------
# render helpers


def _schedule_from_args(args, bundle, planes):
    near = args.near if args.near is not None else bundle.near
    far = args.far if args.far is not None else bundle.far
    return make_schedule(near, far, planes)


def _load_net(args, views):
    """Resolve config and weights from the flags and/or the weight file."""
    if args.weights:
        store, cfg = backbone.load_weights(args.weights)
        for flag, value in (("planes", args.planes), ("groups", args.groups),
                            ("supersample", args.supersample), ("views", views)):
            if value is not None and getattr(cfg, flag) != value:
                raise WeightFormatError(
                    f"--{flag}={value} conflicts with weight file ({flag}={getattr(cfg, flag)})")
        if args.upsample_mode and args.upsample_mode != cfg.upsample_mode:
            cfg = backbone.UNetConfig(cfg.planes, cfg.groups, cfg.supersample,
                                      cfg.views, args.upsample_mode)
        if args.precision == "f64" and store.dtype != np.float64:
            for name, t in store.tensors.items():
                store.tensors[name] = Tensor(t.data.astype(np.float64), requires_grad=True)
        return cfg, store
    if not args.oracle_alpha:
        raise WeightFormatError("render needs --weights (or --oracle-alpha)")
    cfg = backbone.UNetConfig(planes=args.planes or 16, groups=args.groups or 4,
                              supersample=args.supersample or 2, views=views,
                              upsample_mode=args.upsample_mode or "bilinear")
    return cfg, backbone.init_weights(cfg, seed=args.seed)


def _pad_bundle(bundle):
    """Zero-pad all views (bottom/right) to the next multiple of 8."""
    def pad_one(img, cam):
        h, w = cam.height, cam.width
        hp, wp = (h + 7) // 8 * 8, (w + 7) // 8 * 8
        if (hp, wp) == (h, w):
            return img, cam
        out = np.zeros((img.shape[0], hp, wp), dtype=img.dtype)
        out[:, :h, :w] = img
        return out, cam.resized(wp, hp)

    from .scenes_io import SceneBundle
    sources = [pad_one(img, cam) for img, cam in bundle.sources]
    targets = []
    for cam, img in bundle.targets:
        if img is None:
            hp, wp = (cam.height + 7) // 8 * 8, (cam.width + 7) // 8 * 8
            targets.append((cam.resized(wp, hp), None))
        else:
            img_p, cam_p = pad_one(img, cam)
            targets.append((cam_p, img_p))
    return SceneBundle(sources=sources, targets=targets, near=bundle.near,
                       far=bundle.far, synthetic=bundle.synthetic)


def _oracle_mpi(bundle, target_cam, cfg, schedule_in, threads):
    """MPI with ray-traced alpha and validity-weighted mean view colors."""
    if bundle.synthetic is None:
        raise SceneFormatError("--oracle-alpha needs a scene.json with a 'synthetic' block")
    vol = psv_mod.build_psv(bundle.view_images(), bundle.view_cameras(),
                            target_cam, schedule_in, threads=threads)
    out_schedule = make_schedule(schedule_in.near, schedule_in.far,
                                 cfg.supersample * schedule_in.count)
    mapping = mpi_mod.nearest_plane_map(schedule_in, out_schedule)
    cand = vol.data[mapping]                        # [D',V,3,H,W]
    valid = vol.valid[mapping].astype(np.float32)   # [D',V,1,H,W]
    weight_sum = np.maximum(valid.sum(axis=1), 1.0)
    rgb = (cand * valid).sum(axis=1) / weight_sum
    alpha = oracle_alpha(bundle.synthetic, target_cam, out_schedule)
    rgba = np.concatenate([rgb, alpha], axis=1).astype(np.float32)
    return MultiplaneImage(rgba=Tensor(rgba), schedule=out_schedule,
                           camera=target_cam), vol


def _rig_center_camera(bundle):
    like = bundle.sources[0][1]
    centers = np.stack([cam.center_world() for _, cam in bundle.sources])
    center = centers.mean(axis=0)
    return CameraModel(like.fx, like.fy, like.cx, like.cy, like.width, like.height,
                       like.R, -like.R @ center)


def _write_render(out_prefix, image, mpi):
    out_prefix = Path(out_prefix)
    out_prefix.parent.mkdir(parents=True, exist_ok=True)
    rgb = np.clip(image, 0.0, 1.0)
    save_image(f"{out_prefix}_rgb.png", rgb)
    save_image(f"{out_prefix}_rgb.fimg", image)
    disp = composite_disparity(mpi).data
    save_image(f"{out_prefix}_disparity.fimg", disp.repeat(3, axis=0))
    peak = disp.max()
    save_image(f"{out_prefix}_disparity.png", (disp / peak if peak > 0 else disp).repeat(3, axis=0))


def cmd_render(args):
    bundle = load_scene_dir(args.scene_dir)
    if args.pad_to_multiple:
        orig_size = (bundle.targets[args.target_index][0].height
                     if bundle.targets else bundle.sources[0][1].height,
                     bundle.targets[args.target_index][0].width
                     if bundle.targets else bundle.sources[0][1].width)
        bundle = _pad_bundle(bundle)
    if not bundle.targets or args.target_index >= len(bundle.targets):
        raise SceneFormatError(f"scene has no target with index {args.target_index}")
    target_cam = bundle.targets[args.target_index][0]
    cfg, weights = _load_net(args, bundle.num_views)
    schedule_in = _schedule_from_args(args, bundle, cfg.planes)

    mpi_camera = _rig_center_camera(bundle) if args.static_mpi else target_cam
    with T.no_grad():
        if args.oracle_alpha:
            mpi, _ = _oracle_mpi(bundle, mpi_camera, cfg, schedule_in, args.threads)
        else:
            mpi, _ = mpi_mod.predict_mpi(bundle.view_images(), bundle.view_cameras(),
                                         mpi_camera, schedule_in, cfg, weights,
                                         threads=args.threads)
        image = (warp_mpi(mpi, target_cam).data if args.static_mpi
                 else composite(mpi).data)
    if args.pad_to_multiple:
        image = image[:, :orig_size[0], :orig_size[1]]
    if args.save_mpi:
        mpi_mod.save_mpi(args.save_mpi, mpi)
    _write_render(args.out_prefix, image, mpi)
    print(f"rendered target {args.target_index} -> {args.out_prefix}_rgb.png "
          f"(D={cfg.planes} G={cfg.groups} S={cfg.supersample} V={cfg.views})")
    return 0


def cmd_warp_mpi(args):
    mpi = mpi_mod.load_mpi(args.mpi_file)
    bundle = load_scene_dir(args.scene_dir)
    if not bundle.targets or args.target_index >= len(bundle.targets):
        raise SceneFormatError(f"scene has no target with index {args.target_index}")
    target_cam = bundle.targets[args.target_index][0]
    with T.no_grad():
        image = warp_mpi(mpi, target_cam).data
    _write_render(args.out_prefix, image, mpi)
    print(f"warped MPI ({mpi.num_planes} planes) to target {args.target_index}")
    return 0


# ---------------------------------------------------------------------------
# benchmarks


def cmd_bench_psv(args):
    report = bench.bench_psv(args.planes_list, args.views_list, args.height,
                             args.width, repeats=args.repeats, threads=args.threads,
                             near=args.near or 1.0, far=args.far or 100.0)
    report.to_csv(f"{args.out_prefix}.csv")
    d_rows = [r for r in report.rows if r.V == 4 and r.D in args.planes_list]
    v_rows = [r for r in report.rows if r.D == 32 and r.V in args.views_list]
    series = {}
    if d_rows:
        series["vs planes (V=4)"] = ([r.D for r in d_rows], [r.mean_ms for r in d_rows])
    if v_rows:
        series["vs views (D=32)"] = ([r.V for r in v_rows], [r.mean_ms for r in v_rows])
    bench.write_svg_plot(f"{args.out_prefix}.svg", "sweep-volume build time",
                         "count", "ms", series)
    for name, fit in report.fits.items():
        print(f"{name}: slope={fit['slope']:.3f} ms, r2={fit['r2']:.5f}")
    print(f"wrote {args.out_prefix}.csv and {args.out_prefix}.svg")
    return 0


def cmd_bench_grouping(args):
    for g in args.groups_list:
        if args.planes % g:
            raise GroupingError(f"group count {g} does not divide planes {args.planes}")
    report = bench.bench_grouping(args.planes, args.groups_list, args.height,
                                  args.width, views=args.views,
                                  repeats=args.repeats, seed=args.seed,
                                  parallel_groups=args.parallel_groups)
    report.to_csv(f"{args.out_prefix}.csv")
    bench.write_svg_plot(f"{args.out_prefix}.svg", "grouped inference latency",
                         "groups", "ms",
                         {"latency": ([r.G for r in report.rows],
                                      [r.mean_ms for r in report.rows])})
    for r in report.rows:
        drift = abs(r.flops_measured - r.flops_model) / r.flops_model
        print(f"G={r.G}: {r.mean_ms:.2f} ms, flops={r.flops_measured} (model drift {drift:.2%})")
    print(f"wrote {args.out_prefix}.csv and {args.out_prefix}.svg")
    return 0


def cmd_bench_supersample(args):
    report = bench.bench_supersample(args.planes_list, args.supersample_list,
                                     args.height, args.width, views=args.views,
                                     repeats=args.repeats, threads=args.threads,
                                     near=args.near or 1.0, far=args.far or 100.0)
    report.to_csv(f"{args.out_prefix}.csv")
    bench.write_svg_plot(f"{args.out_prefix}.svg", "sweep-build cost vs output planes",
                         "output planes (D*S)", "ms",
                         {"build time": ([r.D * r.S for r in report.rows],
                                         [r.mean_ms for r in report.rows])})
    for r in report.rows:
        print(f"D={r.D} S={r.S}: build {r.mean_ms:.2f} ms, {r.D * r.S} output planes, "
              f"{r.flops_model} params")
    print(f"wrote {args.out_prefix}.csv and {args.out_prefix}.svg")
    return 0


def cmd_metrics(args):
    from .scenes_io import load_image
    a = load_image(args.rendered)
    b = load_image(args.ground_truth)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    p = training.psnr(a, b)
    s = float(training.ssim(a, b).item())
    l1 = float(np.mean(np.abs(a - b)))
    print(f"psnr_db={p:.4f} ssim={s:.6f} l1={l1:.6f}")
    if args.csv:
        with open(args.csv, "w") as f:
            f.write("psnr_db,ssim,l1\n")
            f.write(f"{p:.4f},{s:.6f},{l1:.6f}\n")
    return 0


def cmd_train(args):
    from .scenes_io import FamilySpec, scene_pool

    flags = {"iters": args.iters, "patch": args.patch, "views": args.views,
             "lr": args.lr, "seed": args.seed, "eval_interval": args.eval_interval,
             "planes": args.planes or 16, "groups": args.groups or 4,
             "supersample": args.supersample or 2,
             "upsample_mode": args.upsample_mode or "bilinear",
             "precision": args.precision,
             "near": args.near or 1.0, "far": args.far or 20.0}
    if args.config:
        with open(args.config) as f:
            flags.update(json.load(f))
    net = backbone.UNetConfig(planes=flags["planes"], groups=flags["groups"],
                              supersample=flags["supersample"], views=flags["views"],
                              upsample_mode=flags["upsample_mode"])
    cfg = training.TrainConfig(net=net, iters=flags["iters"], patch=flags["patch"],
                               lr=flags["lr"], seed=flags["seed"],
                               eval_interval=flags["eval_interval"],
                               dtype=flags["precision"])
    spec = FamilySpec(width=max(flags["patch"], 64), height=max(flags["patch"], 64),
                      num_views=flags["views"], near=flags["near"], far=flags["far"])
    gen = scene_pool(flags["seed"], spec, size=min(256, max(1, flags["iters"])))
    weights = None
    if args.resume:
        weights, resumed_cfg = backbone.load_weights(args.resume, net)
        if cfg.dtype == "f64" and weights.dtype != np.float64:
            for name, t in weights.tensors.items():
                weights.tensors[name] = Tensor(t.data.astype(np.float64), requires_grad=True)
    weights, rows = training.train_toy(cfg, gen, weights=weights)
    backbone.save_weights(args.out_weights, weights, net)
    if args.log:
        training.write_metrics_csv(args.log, rows)
    last = rows[-1] if rows else {"loss": float("nan"), "psnr": float("nan")}
    print(f"trained {flags['iters']} iters -> {args.out_weights} "
          f"(final loss={last['loss']:.4f}, psnr={last['psnr']:.2f} dB)")
    return 0


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args) or 0
    except (SceneFormatError, WeightFormatError, MpiFormatError, GroupingError,
            GeometryError, DegeneratePlaneError, ShapeError, FileNotFoundError) as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return 3
    except (TrainingDivergedError, FloatingPointError) as exc:
        print(f"error: numeric: {exc}", file=sys.stderr)
        return 4
    except ValueError as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
