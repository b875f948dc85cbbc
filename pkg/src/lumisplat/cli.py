"""Command-line pipeline: synth -> calibrate -> build -> render/relight.

Exit codes: 0 success, 2 bad input or schema, 3 filesystem conflict,
4 numerical failure.  Every command is deterministic given its input
files and --seed.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import imageio
from .calibration import (
    CalibrationSchedule,
    calib_loss,
    load_dataset,
    load_schedule,
    run_calibration,
)
from .errors import LumisplatError, NonFiniteLoss, SchemaError
from .lights import AmbientLight, ConstantRid, FalloffModel, load_rig, save_rig
from .scene import (
    KEEP,
    SceneSchedule,
    init_scene_from_manifest,
    load_scene,
    load_scene_manifest,
    relight,
    render,
    save_scene,
    scene_image_loss,
    train_scene,
    white_balance,
)
from .synth import CalibFixtureSpec, SceneFixtureSpec, gen_calib_fixture, gen_scene_fixture


def _write_losses_csv(path: Path, stage_reports) -> None:
    lines = ["stage,iteration,loss"]
    for rep in stage_reports:
        for i, v in enumerate(rep.losses):
            lines.append(f"{rep.name},{i},{v!r}")
    path.write_text("\n".join(lines) + "\n")


def cmd_synth(args) -> int:
    spec_path = Path(args.spec)
    try:
        spec_dict = json.loads(spec_path.read_text())
    except OSError as exc:
        print(f"error: cannot read spec file: {exc}", file=sys.stderr)
        return 2
    except json.JSONDecodeError as exc:
        print(
            f"error: {spec_path}:{exc.lineno}:{exc.colno}: {exc.msg}", file=sys.stderr
        )
        return 2
    out_dir = Path(args.out)
    if out_dir.exists() and any(out_dir.iterdir()) and not args.force:
        print(f"error: output directory {out_dir} exists (use --force)", file=sys.stderr)
        return 3
    kind = spec_dict.get("kind", "calibration")
    try:
        if kind == "calibration":
            gen_calib_fixture(CalibFixtureSpec.from_dict(spec_dict), out_dir)
        elif kind == "scene":
            gen_scene_fixture(SceneFixtureSpec.from_dict(spec_dict), out_dir)
        else:
            print(f"error: unknown fixture kind {kind!r}", file=sys.stderr)
            return 2
    except SchemaError as exc:
        print(f"error: {spec_path}: {exc}", file=sys.stderr)
        return 2
    print(f"fixture written to {out_dir}")
    print(f"ground truth: {out_dir / 'ground_truth.json'}")
    return 0


def cmd_calibrate(args) -> int:
    try:
        dataset = load_dataset(args.manifest)
        init = load_rig(args.init)
        if args.schedule:
            schedule = load_schedule(args.schedule)
        else:
            schedule = CalibrationSchedule.default()
        if args.seed is not None:
            schedule.seed = args.seed
    except (SchemaError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        result = run_calibration(dataset, init, schedule)
    except NonFiniteLoss as exc:
        print(f"error: calibration diverged: {exc}", file=sys.stderr)
        return 4
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    aborted = any(r.aborted for r in result.stage_reports)
    save_rig(result.rig, out)
    _write_losses_csv(out.with_suffix(".losses.csv"), result.stage_reports)
    report = {
        "albedo": result.albedo.tolist(),
        "stages": [
            {
                "name": r.name,
                "iterations": len(r.losses),
                "final_loss": r.losses[-1] if r.losses else None,
                "warnings": r.warnings,
                "aborted": r.aborted,
            }
            for r in result.stage_reports
        ],
        "train": result.train.terms if result.train else None,
        "test": result.test.terms if result.test else None,
    }
    out.with_suffix(".report.json").write_text(json.dumps(report, indent=1))
    if aborted:
        print("calibration aborted on non-finite loss; partial results written", file=sys.stderr)
        return 4
    print(f"rig written to {out}")
    print(f"train L1 {result.train.terms['l1']:.6g}  MSE {result.train.terms['mse']:.6g}")
    print(f"test  L1 {result.test.terms['l1']:.6g}  MSE {result.test.terms['mse']:.6g}")
    return 0


def cmd_build(args) -> int:
    try:
        manifest, images, rig, train_idx, test_idx = load_scene_manifest(args.manifest)
        if args.rig:
            rig = load_rig(args.rig)
        schedule = (
            SceneSchedule.from_dict(json.loads(Path(args.schedule).read_text()))
            if args.schedule
            else SceneSchedule.default()
        )
        if args.seed is not None:
            schedule.seed = args.seed
        if args.warmup_k is not None:
            schedule.warmup_k = args.warmup_k
        scene = init_scene_from_manifest(manifest, rig)
    except (SchemaError, OSError, ValueError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        result = train_scene(scene, images, schedule, list(train_idx))
    except NonFiniteLoss as exc:
        print(f"error: scene training diverged: {exc}", file=sys.stderr)
        return 4
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_scene(result.scene, out)
    _write_losses_csv(out.with_suffix(".losses.csv"), result.stage_reports)
    train_l1 = scene_image_loss(result.scene, images, list(train_idx), options=schedule.options)
    test_l1 = (
        scene_image_loss(result.scene, images, list(test_idx), options=schedule.options)
        if len(test_idx)
        else None
    )
    report = {
        "scale": result.scene.scale,
        "ambient": result.scene.ambient.value.tolist(),
        "warmup_k": result.warmup_k,
        "train_l1": train_l1,
        "test_l1": test_l1,
        "stages": [
            {
                "name": r.name,
                "iterations": len(r.losses),
                "final_loss": r.losses[-1] if r.losses else None,
                "warnings": r.warnings,
                "aborted": r.aborted,
            }
            for r in result.stage_reports
        ],
    }
    out.with_suffix(".report.json").write_text(json.dumps(report, indent=1))
    if any(r.aborted for r in result.stage_reports):
        print("training aborted on non-finite loss; partial scene written", file=sys.stderr)
        return 4
    print(f"scene written to {out}")
    print(f"recovered scale {result.scene.scale:.6g}; train L1 {train_l1:.6g}"
          + (f"; test L1 {test_l1:.6g}" if test_l1 is not None else ""))
    return 0


def _parse_channels(text: str, channels: int, what: str) -> np.ndarray:
    try:
        vals = [float(x) for x in text.split(",")]
    except ValueError as exc:
        raise SchemaError(f"bad {what} value {text!r}: {exc}") from exc
    if len(vals) == 1:
        vals = vals * channels
    if len(vals) != channels:
        raise SchemaError(f"{what} needs 1 or {channels} comma-separated values")
    return np.asarray(vals)


def _parse_light_overrides(args, scene):
    rid = KEEP
    falloff = KEEP
    ambient = KEEP
    channels = scene.channels
    if args.rid and args.rid != "keep":
        if args.rid.startswith("constant:"):
            rid = ConstantRid(_parse_channels(args.rid[len("constant:"):], channels, "--rid"))
        else:
            raise SchemaError(f"unsupported --rid {args.rid!r} (use keep | constant:V[,V,V])")
    if args.falloff and args.falloff != "keep":
        if args.falloff == "none":
            falloff = None
        elif args.falloff.startswith("tau:"):
            falloff = FalloffModel(float(args.falloff[len("tau:"):]))
        else:
            raise SchemaError(f"unsupported --falloff {args.falloff!r} (use keep | none | tau:V)")
    if args.ambient and args.ambient != "keep":
        ambient = AmbientLight(_parse_channels(args.ambient, channels, "--ambient"))
    return rid, falloff, ambient


def _render_common(args, use_overrides: bool) -> int:
    try:
        scene = load_scene(args.scene)
        if not 0 <= args.camera < len(scene.cameras):
            print(f"error: camera index {args.camera} out of range "
                  f"(scene has {len(scene.cameras)})", file=sys.stderr)
            return 2
        if use_overrides:
            rid, falloff, ambient = _parse_light_overrides(args, scene)
            img = relight(scene, rid, falloff, ambient, args.camera)
        else:
            img = render(scene, args.camera)
        if args.wb:
            img = white_balance(img, _parse_channels(args.wb, scene.channels, "--wb"))
    except (SchemaError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if out.suffix.lower() == ".pfm":
        imageio.write_pfm(out, img)
    elif out.suffix.lower() == ".png":
        imageio.write_png16(out, img, max_value=max(float(img.max()), 1e-12))
    else:
        print(f"error: unsupported output format {out.suffix!r}", file=sys.stderr)
        return 2
    imageio.write_preview_png(out.with_suffix(".preview.png"), img)
    print(f"image written to {out}")
    return 0


def cmd_render(args) -> int:
    return _render_common(args, use_overrides=False)


def cmd_relight(args) -> int:
    return _render_common(args, use_overrides=True)


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(), host=args.host, port=args.port, log_level="warning")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lumisplat",
        description="Camera-light calibration and relightable Gaussian scenes",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic ground-truth fixture")
    p.add_argument("spec", help="fixture spec JSON file")
    p.add_argument("out", help="output directory")
    p.add_argument("--force", action="store_true", help="overwrite existing output")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("calibrate", help="fit a light rig to a calibration dataset")
    p.add_argument("manifest", help="dataset manifest JSON")
    p.add_argument("--init", required=True, help="initial rig JSON (operator estimate)")
    p.add_argument("--schedule", help="stage schedule JSON (default: built-in)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="output rig JSON path")
    p.set_defaults(fn=cmd_calibrate)

    p = sub.add_parser("build", help="train a relightable scene from a manifest")
    p.add_argument("manifest", help="scene manifest JSON")
    p.add_argument("--rig", help="calibrated rig JSON (overrides manifest reference)")
    p.add_argument("--schedule", help="training schedule JSON")
    p.add_argument("--warmup-k", type=int, default=None, help="override warm-up length")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="output scene JSON path")
    p.set_defaults(fn=cmd_build)

    for name, fn, extra in (
        ("render", cmd_render, False),
        ("relight", cmd_relight, True),
    ):
        p = sub.add_parser(name, help=f"{name} a trained scene view")
        p.add_argument("scene", help="scene JSON file")
        p.add_argument("--camera", type=int, default=0, help="camera index")
        p.add_argument("--out", required=True, help="output image (.pfm or .png)")
        p.add_argument("--wb", help="white balance gains, e.g. 2,1,1")
        if extra:
            p.add_argument("--rid", default="keep", help="keep | constant:V[,V,V]")
            p.add_argument("--falloff", default="keep", help="keep | none | tau:V")
            p.add_argument("--ambient", default="keep", help="keep | V,V,V")
        p.set_defaults(fn=fn)

    p = sub.add_parser("serve", help="run the interactive calibration service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8321)
    p.set_defaults(fn=cmd_serve)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except LumisplatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
