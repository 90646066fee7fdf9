"""Command-line entry point: synth, init-dynamic, train, render, eval, scene lint.

Exit codes: 0 success, 1 usage error, 2 data/validation error,
3 numerical failure. With --json a machine-readable status object is
written to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import load_train_config
from .dataio import lint_scene, load_scene
from .densify import densify_dynamic
from .errors import (
    ContractViolationError,
    InvalidParameterError,
    NumericalFailureError,
    SceneLoadError,
)
from .evalsuite import evaluate
from .formats import write_flo, write_pfm, write_ply, write_png, write_png16
from .oracle import render_oracle
from .render import RenderSettings, render
from .synth import SynthSpec, moving_quad_spec, single_ellipsoid_spec, synth_scene
from .trainer import load_checkpoint, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 instead of argparse's default 2
        raise UsageError(message)


def build_parser() -> _Parser:
    p = _Parser(prog="splat4d", description="Desk-scale differentiable 4D Gaussian splatting")
    p.add_argument("--json", action="store_true", help="emit a machine-readable status object on stderr")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic scene directory")
    sp.add_argument("--out", required=True)
    sp.add_argument("--preset", default="moving-ellipsoid",
                    choices=["static-ellipsoid", "moving-ellipsoid", "moving-quad"])
    sp.add_argument("--frames", type=int, default=4)
    sp.add_argument("--val-frames", type=int, default=2)
    sp.add_argument("--width", type=int, default=64)
    sp.add_argument("--height", type=int, default=48)
    sp.add_argument("--camera-span", type=float, default=0.25)
    sp.add_argument("--seed", type=int, default=0)

    ip = sub.add_parser("init-dynamic", help="seed primitives on dynamic regions, write a PLY")
    ip.add_argument("--scene", required=True)
    ip.add_argument("--out", required=True)
    ip.add_argument("--budget", type=int, default=2000)
    ip.add_argument("--tau", type=float, default=1.0, help="flow-magnitude threshold in pixels")
    ip.add_argument("--seed", type=int, default=0)

    tp = sub.add_parser("train", help="optimize a model on a scene")
    tp.add_argument("--scene", required=True)
    tp.add_argument("--out", required=True)
    tp.add_argument("--config", default=None)
    tp.add_argument("--refiner", default=None, help="identity | blur | external command")
    tp.add_argument("--iters", type=int, default=None)
    tp.add_argument("--seed", type=int, default=None)
    tp.add_argument("--threads", type=int, default=None)
    tp.add_argument("--init-dynamic-budget", type=int, default=None)
    tp.add_argument("--f64-check", action="store_true",
                    help="verify the initial model against the float64 oracle before training")

    rp = sub.add_parser("render", help="render a checkpoint into image files")
    rp.add_argument("--checkpoint", required=True)
    rp.add_argument("--scene", required=True)
    rp.add_argument("--split", default="val", choices=["train", "val"])
    rp.add_argument("--index", type=int, default=0)
    rp.add_argument("--channel", default="color",
                    choices=["color", "depth", "uncertainty", "flow", "alpha"])
    rp.add_argument("--out", required=True)

    ep = sub.add_parser("eval", help="compute metrics over a split")
    ep.add_argument("--checkpoint", required=True)
    ep.add_argument("--scene", required=True)
    ep.add_argument("--split", default="val", choices=["train", "val"])
    ep.add_argument("--out", required=True)
    ep.add_argument("--diff-dir", default=None)

    scp = sub.add_parser("scene", help="scene utilities")
    scsub = scp.add_subparsers(dest="scene_command", required=True)
    lintp = scsub.add_parser("lint", help="validate a scene directory")
    lintp.add_argument("directory")

    return p


def _cmd_synth(args) -> dict:
    overrides = dict(
        n_frames=args.frames, n_val=args.val_frames, width=args.width,
        height=args.height, camera_span=args.camera_span, seed=args.seed,
    )
    if args.preset == "static-ellipsoid":
        spec = single_ellipsoid_spec(moving=False, **overrides)
    elif args.preset == "moving-ellipsoid":
        spec = single_ellipsoid_spec(moving=True, **overrides)
    else:
        spec = moving_quad_spec(**overrides)
    bundle = synth_scene(spec, args.out)
    return {"scene": str(bundle.root), "frames": len(bundle.train_frames), "val_frames": len(bundle.val_frames)}


def _cmd_init_dynamic(args) -> dict:
    bundle = load_scene(args.scene)
    result = densify_dynamic(bundle.train_frames, budget=args.budget, seed=args.seed, flow_threshold=args.tau)
    xyz = result.cloud.positions.detach().numpy()
    dirs = torch.zeros(len(result.cloud), 3)
    dirs[:, 2] = 1.0
    from .core import eval_sh

    rgb = eval_sh(result.cloud.features, dirs).detach().numpy() if len(result.cloud) else np.zeros((0, 3))
    write_ply(args.out, xyz, rgb)
    out = {"points": int(len(xyz)), "out": args.out}
    if result.warning:
        out["warning"] = result.warning
    return out


def _cmd_train(args) -> dict:
    bundle = load_scene(args.scene)
    flags = {
        "refiner": args.refiner,
        "total_iters": args.iters,
        "seed": args.seed,
        "threads": args.threads,
        "init_dynamic_budget": args.init_dynamic_budget,
    }
    config = load_train_config(args.config, flags)
    if args.f64_check:
        from .trainer import init_model

        cloud, field = init_model(bundle, config)
        cam = bundle.train_frames[0].camera
        got = render(cloud.to(torch.float64), field.to(torch.float64) if field else None, cam,
                     RenderSettings(dtype=torch.float64, exact=True)).numpy()
        want = render_oracle(cloud, field, cam)
        worst = max(float(np.max(np.abs(got[k] - want[k]))) for k in ("color", "depth", "alpha"))
        if worst > 1e-8:
            raise NumericalFailureError(f"float64 verification failed: max |delta| = {worst:.3e}")
    result = train(bundle, config, args.out)
    return result


def _cmd_render(args) -> dict:
    bundle = load_scene(args.scene)
    cloud, field, _ = load_checkpoint(args.checkpoint)
    frames = bundle.val_frames if args.split == "val" else bundle.train_frames
    if not 0 <= args.index < len(frames):
        raise InvalidParameterError(f"frame index {args.index} out of range for split {args.split!r}")
    frame = frames[args.index]
    flow_cam = None
    if args.channel == "flow":
        nxt = args.index + 1
        if nxt >= len(frames):
            raise InvalidParameterError("flow rendering needs a successor frame in the split")
        flow_cam = frames[nxt].camera
    with torch.no_grad():
        out = render(cloud, field, frame.camera, RenderSettings(), flow_to=flow_cam)
    path = Path(args.out)
    path.parent.mkdir(parents=True, exist_ok=True)
    if args.channel == "color":
        write_png(path, out.color.numpy())
    elif args.channel == "depth":
        write_pfm(path, out.depth.numpy().astype(np.float32))
    elif args.channel == "uncertainty":
        write_png16(path, out.uncertainty.numpy())
    elif args.channel == "alpha":
        write_png16(path, out.alpha.numpy())
    else:
        write_flo(path, out.flow.numpy().astype(np.float32))
    return {"out": str(path), "channel": args.channel}


def _cmd_eval(args) -> dict:
    bundle = load_scene(args.scene)
    cloud, field, _ = load_checkpoint(args.checkpoint)
    rows = evaluate(cloud, field, bundle, split=args.split, out_csv=args.out, diff_dir=args.diff_dir)
    return {"out": args.out, "frames": len(rows)}


def _cmd_scene(args) -> dict:
    problems = lint_scene(args.directory)
    if problems:
        raise SceneLoadError("; ".join(problems))
    return {"scene": args.directory, "lint": "ok"}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    want_json = "--json" in argv  # global modifier, usable anywhere on the line
    argv = [a for a in argv if a != "--json"]
    parser = build_parser()
    status: dict = {}
    code = EXIT_OK
    try:
        args = parser.parse_args(argv)
        handler = {
            "synth": _cmd_synth,
            "init-dynamic": _cmd_init_dynamic,
            "train": _cmd_train,
            "render": _cmd_render,
            "eval": _cmd_eval,
            "scene": _cmd_scene,
        }[args.command]
        status = {"status": "ok", "outputs": handler(args)}
    except UsageError as e:
        status = {"status": "error", "kind": "usage", "message": str(e)}
        print(f"error: {e}", file=sys.stderr)
        code = EXIT_USAGE
    except (SceneLoadError, InvalidParameterError, ContractViolationError) as e:
        status = {"status": "error", "kind": "data", "message": str(e)}
        print(f"error: {e}", file=sys.stderr)
        code = EXIT_DATA
    except NumericalFailureError as e:
        status = {"status": "error", "kind": "numerical", "message": str(e), "breakdown": e.breakdown}
        print(f"error: {e}", file=sys.stderr)
        code = EXIT_NUMERIC
    if want_json:
        status["exit_code"] = code
        print(json.dumps(status, sort_keys=True), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
