"""Command-line entry point: synth, fit, eval, calibrate-vj, gradcheck, overlay."""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from .errors import InvalidArgument, NumericalFailure
from .io import read_json, write_json, write_pgm
from .metrics import barycentric_grid, calibrate_virtual_joints, evaluate_fit
from .model import BodyParams, build_template_model, forward
from .optim import fit_staged, load_config, load_fit_virtual_joints
from .raster import rasterize_hard
from .synth import NoiseSpec, generate_scene, keypoints_from_json, load_scene, merge_keypoints, save_scene

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_NUMERICAL = 2

log = logging.getLogger("bodyfit")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _require(path):
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    return path


def scene_name(index):
    return f"scene_{index:04d}"


def cmd_synth(args, model):
    noise = NoiseSpec.from_dict(read_json(_require(args.noise))) if args.noise else NoiseSpec()
    if args.count < 1:
        raise InvalidArgument("--count must be at least 1")
    for i in range(args.count):
        scene = generate_scene(model, args.seed + i, noise, partial_fraction=args.partial)
        save_scene(scene, os.path.join(args.out, scene_name(i)))
    return EXIT_OK


def _fit_scene(model, scene, config, extrapolated=None):
    obs = scene.observation
    if extrapolated:
        obs = obs.with_keypoints(merge_keypoints(obs.keypoints, extrapolated))
    init = scene.init_params if scene.init_params is not None else BodyParams.zeros(
        model, scene.gt_params.trans_t)
    params, report = fit_staged(model, load_fit_virtual_joints(config), obs, config, init)
    if not np.all(np.isfinite(params.to_vector())):
        raise NumericalFailure("fit produced non-finite parameters")
    return params, report


def cmd_fit(args, model):
    config = load_config(_require(args.config))
    needs_mask = any(s.enable_silhouette and (s.weights.lambda_m > 0 or s.weights.lambda_d > 0)
                     for s in config.stages)
    scene = load_scene(_require(args.scene), require_mask=needs_mask)
    if config.virtual_joints:
        _require(config.virtual_joints)
    extrapolated = keypoints_from_json(read_json(_require(args.extrapolated))) if args.extrapolated else None
    params, report = _fit_scene(model, scene, config, extrapolated)
    write_json(args.out, params.to_dict())
    if args.report:
        write_json(args.report, report.to_dict())
    return EXIT_OK


def cmd_eval(args, model):
    scene = load_scene(_require(args.scene), require_mask=False)
    if scene.gt_silhouette is None:
        _require(os.path.join(args.scene, "gt_mask.pgm"))
    params = BodyParams.from_dict(read_json(_require(args.params)))
    write_json(args.out, evaluate_fit(model, scene, params).to_dict())
    return EXIT_OK


def cmd_calibrate(args, model):
    root = _require(args.scenes)
    names = sorted(n for n in os.listdir(root) if os.path.exists(os.path.join(root, n, "scene.json")))
    if not names:
        raise InvalidArgument(f"no scene directories under {root}")
    scenes = [load_scene(os.path.join(root, n)) for n in names]
    levels = 1 if args.grid == "coarse" else 2
    config, _ = calibrate_virtual_joints(model, scenes, barycentric_grid(), levels=levels)
    write_json(args.out, config.to_list())
    return EXIT_OK


def cmd_gradcheck(args, model):
    from .gradcheck import run_all
    failed = False
    for result in run_all(model, args.seed, states=args.states, bodies=args.bodies, pixels=args.pixels):
        status = "ok" if result.ok else "FAIL"
        print(f"{result.name:10s} max rel err {result.error:.3e} over {result.count} {status}")
        failed |= not result.ok
    if failed:
        raise NumericalFailure("gradient check failed")
    return EXIT_OK


def cmd_overlay(args, model):
    scene = load_scene(_require(args.scene))
    params = BodyParams.from_dict(read_json(_require(args.params)))
    V, _ = forward(model, params)
    rendered = rasterize_hard(scene.camera, V, model.faces).values
    write_pgm(args.out, 0.5 * rendered + 0.5 * scene.observation.silhouette.values)
    return EXIT_OK


def build_parser():
    parser = _Parser(prog="bodyfit", description="Fit a parametric body to keypoints and a silhouette.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write synthetic scene directories")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--partial", type=float)
    p.add_argument("--noise", help="JSON noise spec")
    p.set_defaults(run=cmd_synth)

    p = sub.add_parser("fit", help="fit one scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--extrapolated")
    p.add_argument("--report")
    p.set_defaults(run=cmd_fit)

    p = sub.add_parser("eval", help="score fitted params against ground truth")
    p.add_argument("--scene", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(run=cmd_eval)

    p = sub.add_parser("calibrate-vj", help="search virtual-joint weights over scenes")
    p.add_argument("--scenes", required=True)
    p.add_argument("--grid", choices=("coarse", "fine"), required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(run=cmd_calibrate)

    p = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--states", type=int, default=50, help=argparse.SUPPRESS)
    p.add_argument("--bodies", type=int, default=10, help=argparse.SUPPRESS)
    p.add_argument("--pixels", type=int, default=100, help=argparse.SUPPRESS)
    p.set_defaults(run=cmd_gradcheck)

    p = sub.add_parser("overlay", help="blend the fitted silhouette with the observed mask")
    p.add_argument("--scene", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(run=cmd_overlay)
    return parser


def run(argv=None):
    """Parse ``argv`` and run one subcommand; returns the process exit code."""
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    try:
        return args.run(args, build_template_model())
    except FileNotFoundError as exc:
        print(f"error: missing file {exc.filename or exc.args[0]}", file=sys.stderr)
        return EXIT_INVALID
    except NumericalFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (InvalidArgument, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
