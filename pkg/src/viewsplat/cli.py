"""Command-line surface: synth, train, infer, render, cost, check.

Configuration files are JSON with optional "model", "loss", "schedule" and
"train" sections mirroring the corresponding dataclasses; explicit CLI flags
override file values. Exit codes: 0 success, 1 suite/tool failure, 2 usage.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .cameras import farthest_point_sample, normalize_poses
from .costs import cost_report, cross_attn_flops
from .decoder import decode_views
from .errors import FormatError, ValidationError
from .model import MINIBATCH_BLOCKS, Model, ModelConfig, forward
from .renderer import make_frame, project, rasterize_tiled
from . import sceneio
from .training import LossConfig, OptimizerState, ScheduleConfig, train


def _parse_res(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"resolution must look like 256x256, got {text!r}") from e


def load_config_file(path) -> dict:
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, dict):
        raise FormatError(f"{path}: config root must be a JSON object")
    return doc


def model_config_from(doc: dict, overrides: dict | None = None) -> ModelConfig:
    fields = dict(doc.get("model", {}))
    for key, value in (overrides or {}).items():
        if value is not None:
            fields[key] = value
    return ModelConfig(**fields)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="viewsplat", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a deterministic synthetic scene")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--views", type=int, default=6)
    p.add_argument("--res", type=_parse_res, default=(32, 32), metavar="HxW")
    p.add_argument("--gaussians", type=int, default=96)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train on a scene directory")
    p.add_argument("--scene", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="checkpoint path")

    p = sub.add_parser("infer", help="reconstruct a scene from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--views", type=int, default=2, help="input view count (FPS selected)")
    p.add_argument("--viewpoint-res", choices=["F", "H", "Q"], default=None)
    p.add_argument("--minibatch", choices=sorted(MINIBATCH_BLOCKS), default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-splat", required=True)
    p.add_argument("--render-targets", default=None, metavar="DIR",
                   help="also render every scene view to PNGs in DIR")

    p = sub.add_parser("render", help="render a splat file from a manifest camera")
    p.add_argument("--splat", required=True)
    p.add_argument("--camera-from-manifest", required=True, metavar="MANIFEST")
    p.add_argument("--view-index", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("cost", help="analytical cost report")
    p.add_argument("--config", default=None)
    p.add_argument("--views", type=int, default=8)
    p.add_argument("--res", type=_parse_res, default=(256, 256), metavar="HxW")
    p.add_argument("--sweep", default=None,
                   help="semicolon-separated key=v1,v2 lists; cross product to CSV")
    p.add_argument("--out", default=None, help="write JSON (or CSV for --sweep) here")

    p = sub.add_parser("check", help="run gradient/oracle/invariant suites")
    p.add_argument("--seed", type=int, default=0)
    return parser


# -- subcommands -----------------------------------------------------------------------

def cmd_synth(args) -> int:
    h, w = args.res
    result = sceneio.synth_scene(args.out, seed=args.seed, n_views=args.views,
                                 height=h, width=w, n_gaussians=args.gaussians)
    print(f"wrote {args.views} views at {h}x{w} to {result.directory}")
    return 0


def cmd_train(args) -> int:
    doc = load_config_file(args.config) if args.config else {}
    cfg = model_config_from(doc)
    scene = sceneio.load_manifest(args.scene)

    sched_fields = dict(doc.get("schedule", {}))
    sched_fields.setdefault("total_steps", max(args.steps, 2))
    sched_fields.setdefault("warmup_steps", max(1, min(100, args.steps // 10)))
    sched = ScheduleConfig(**sched_fields)
    loss_cfg = LossConfig(**doc.get("loss", {}))
    train_fields = doc.get("train", {})
    n_inputs = int(train_fields.get("inputs", 2))
    n_targets = int(train_fields.get("targets", 1))

    model = Model.create(cfg, seed=args.seed)
    opt = OptimizerState(**doc.get("optimizer", {}))
    train(model, [scene], args.steps, sched=sched, loss_cfg=loss_cfg, opt=opt,
          seed=args.seed, n_inputs=n_inputs, n_targets=n_targets,
          log_fn=lambda rec: print(json.dumps(rec, sort_keys=True)))
    sceneio.save_checkpoint(args.out, model)
    print(f"saved checkpoint to {args.out}")
    return 0


def cmd_infer(args) -> int:
    overrides = {}
    if args.viewpoint_res:
        overrides["viewpoint_res"] = args.viewpoint_res
    if args.minibatch:
        overrides["minibatch"] = args.minibatch
    model = sceneio.load_checkpoint(args.ckpt)
    if overrides:
        model.config = ModelConfig(**{**model.config.__dict__, **overrides})
    scene = sceneio.load_manifest(args.scene)
    if args.views > len(scene.cameras):
        raise ValidationError(
            f"scene has {len(scene.cameras)} views, asked for {args.views} inputs"
        )

    positions = np.stack([c.pose.translation for c in scene.cameras])
    input_ids = farthest_point_sample(positions, args.views)
    in_cams = [scene.cameras[i] for i in input_ids]
    _, norm = normalize_poses([c.pose for c in in_cams])
    in_cams = [norm.apply_camera(c) for c in in_cams]
    images = [scene.images[i] for i in input_ids]

    rng = np.random.default_rng(args.seed)
    tokens = forward(model, in_cams, images, rng=rng)
    gaussians = decode_views(tokens, in_cams, model.head,
                             near=scene.near / norm.scale, far=scene.far / norm.scale)
    world = sceneio.denormalize_gaussians(gaussians, norm)
    sceneio.save_splats(args.out_splat, world)
    print(f"wrote {len(world)} gaussians from {len(input_ids)} views to {args.out_splat}")

    if args.render_targets:
        out_dir = Path(args.render_targets)
        out_dir.mkdir(parents=True, exist_ok=True)
        for i, cam in enumerate(scene.cameras):
            frame = make_frame(cam.intrinsics.width, cam.intrinsics.height)
            target = rasterize_tiled(project(world, cam), frame)
            sceneio.write_png(out_dir / f"render_{i:03d}.png", target.image)
        print(f"rendered {len(scene.cameras)} views to {out_dir}")
    return 0


def cmd_render(args) -> int:
    gaussians = sceneio.load_splats(args.splat)
    scene = sceneio.load_manifest(args.camera_from_manifest)
    if not 0 <= args.view_index < len(scene.cameras):
        raise ValidationError(f"view index {args.view_index} out of range")
    cam = scene.cameras[args.view_index]
    frame = make_frame(cam.intrinsics.width, cam.intrinsics.height)
    target = rasterize_tiled(project(gaussians, cam), frame)
    sceneio.write_png(args.out, target.image)
    print(f"rendered view {args.view_index} to {args.out}")
    return 0


def _gflops(v: int) -> str:
    return f"{v / 1e9:.2f}"


def cmd_cost(args) -> int:
    doc = load_config_file(args.config) if args.config else {}
    if args.sweep:
        return _cost_sweep(args, doc)
    cfg = model_config_from(doc)
    h, w = args.res
    report = cost_report(cfg, args.views, h, w)

    lv = report.viewpoint_height * report.viewpoint_width // cfg.patch ** 2
    li = h * w // cfg.patch ** 2
    rows = [
        ("baseline cross-attention", cross_attn_flops(cfg.dim, lv, li)),
        ("half cross-attention", cross_attn_flops(cfg.dim, -(-lv // 2), -(-li // 2))),
        ("quarter cross-attention", cross_attn_flops(cfg.dim, -(-lv // 4), -(-li // 4))),
    ]
    width_name = max(len(r[0]) for r in rows)
    print(f"configuration: {args.views} views at {h}x{w}, viewpoint {cfg.viewpoint_res}")
    for name, flops in rows:
        print(f"  {name:<{width_name}}  {_gflops(flops):>8} GFLOPs")
    print(f"  {'parameters':<{width_name}}  {report.parameter_total / 1e6:>8.1f} M")
    print(f"  {'gaussians':<{width_name}}  {report.gaussian_total:>8d}")
    print(f"  {'activation memory':<{width_name}}  {report.activation_bytes / 2**30:>8.2f} GiB")
    ratios = report.scheme_scores.ratios()
    print("  scheme ratios (full : decoupled : group : two-stage) = "
          + " : ".join(f"{r:g}" for r in ratios))

    payload = json.dumps(report.to_dict(), indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(payload)
        print(f"wrote JSON report to {args.out}")
    else:
        print(payload)
    return 0


def _cost_sweep(args, doc: dict) -> int:
    import csv
    import io as _io

    axes: dict[str, list] = {}
    for part in args.sweep.split(";"):
        key, _, values = part.partition("=")
        if not values:
            raise ValidationError(f"sweep part {part!r} is not key=v1,v2,...")
        axes[key.strip()] = [v.strip() for v in values.split(",")]

    def typed(key, value):
        if key in ("views",):
            return int(value)
        if key == "res":
            return _parse_res(value)
        return value  # ModelConfig field: json-typed below

    combos = [{}]
    for key, values in axes.items():
        combos = [{**c, key: typed(key, v)} for c in combos for v in values]

    buf = _io.StringIO()
    writer = None
    for combo in combos:
        views = combo.pop("views", args.views)
        h, w = combo.pop("res", args.res)
        fields = dict(doc.get("model", {}))
        for key, value in combo.items():
            try:
                fields[key] = json.loads(value)
            except (json.JSONDecodeError, TypeError):
                fields[key] = value
        report = cost_report(ModelConfig(**fields), views, h, w)
        row = {
            "views": views, "height": h, "width": w, **combo,
            "total_gflops": report.total_flops / 1e9,
            "cross_gflops_per_view": report.cross_flops_per_view_minibatch / 1e9,
            "parameters_m": report.parameter_total / 1e6,
            "gaussians": report.gaussian_total,
            "activation_gib": report.activation_bytes / 2**30,
        }
        if writer is None:
            writer = csv.DictWriter(buf, fieldnames=list(row))
            writer.writeheader()
        writer.writerow(row)
    text = buf.getvalue()
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {len(combos)} sweep rows to {args.out}")
    else:
        print(text, end="")
    return 0


def cmd_check(args) -> int:
    from . import checks

    results = checks.run_all(seed=args.seed)
    failed = 0
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else ""))
        failed += 0 if ok else 1
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 1 if failed else 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "synth": cmd_synth,
        "train": cmd_train,
        "infer": cmd_infer,
        "render": cmd_render,
        "cost": cmd_cost,
        "check": cmd_check,
    }
    try:
        return handlers[args.command](args)
    except (FileNotFoundError, ValidationError, FormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
