"""``headfit`` command line: gen-model | synth | fit | eval | export.

Exit codes: 0 success, 2 invalid arguments, 3 I/O or rendering failure,
4 solver failure, 5 alignment failure.
"""

import argparse
import json
import math
import os
import sys

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .errors import (AlignmentError, ConfigError, EmptyRenderError, HeadfitError, MapFileError,
                     ModelFileError, PrealignmentError, SolverError)
from .eval import evaluate
from .fit import FitResult, FitWeights, SolverConfig, ViewObservation, fit
from .geometry import CameraPose, Intrinsics
from .meshio import MeshFileError, read_mesh, write_mesh
from .model import generate_procedural_model, instantiate, load_model, sample_shape, save_model
from .raster import (load_landmarks, load_normal_map, normal_map_to_rgb8, render_views,
                     save_landmarks, save_normal_map)

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_SOLVER, EXIT_ALIGN = 0, 2, 3, 4, 5


class CommandError(Exception):
    def __init__(self, code, kind, message):
        super().__init__(message)
        self.code = code
        self.kind = kind


def _usage(message):
    return CommandError(EXIT_USAGE, "usage", message)


def _io(message):
    return CommandError(EXIT_IO, "io", message)


def _float_list(text, n, name):
    try:
        vals = [float(v) for v in str(text).split(",")]
    except ValueError:
        raise _usage(f"{name} must be {n} comma-separated numbers") from None
    if len(vals) != n or not all(math.isfinite(v) for v in vals):
        raise _usage(f"{name} must be {n} comma-separated finite numbers")
    return vals


def _size(text):
    try:
        w, h = (int(v) for v in str(text).lower().split("x"))
    except ValueError:
        raise _usage("--size must look like 256x256") from None
    if w < 8 or h < 8:
        raise _usage("--size must be at least 8x8")
    return w, h


def _load_model(path):
    try:
        return load_model(path)
    except OSError as exc:
        raise _io(f"cannot read model {path}: {exc}") from None
    except ModelFileError as exc:
        raise _io(f"{path}: {exc}") from None


def _write_text(path, text):
    try:
        with open(path, "w") as fh:
            fh.write(text)
    except OSError as exc:
        raise _io(f"cannot write {path}: {exc}") from None


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise _io(f"cannot read {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise _io(f"{path}: invalid JSON ({exc})") from None


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_model(args):
    if args.subdiv is None or args.subdiv < 2:
        raise _usage("--subdiv must be an integer >= 2")
    if args.components is None or args.components < 1:
        raise _usage("--components must be an integer >= 1")
    try:
        model = generate_procedural_model(args.subdiv, args.components, args.seed)
    except ConfigError as exc:
        raise _usage(str(exc)) from None
    try:
        save_model(model, args.out)
        size = os.path.getsize(args.out)
    except OSError as exc:
        raise _io(f"cannot write {args.out}: {exc}") from None
    print(f"model N_X={model.n_vertices} N_y={model.n_components} "
          f"faces={len(model.topology.faces)} seed={model.seed} bytes={size} -> {args.out}")


def _shape_from_args(model, args):
    if args.y_file is not None:
        doc = _read_json(args.y_file)
        y = np.asarray(doc["y"] if isinstance(doc, dict) else doc, dtype=np.float64)
        if y.shape != (model.n_components,):
            raise _usage(f"--y-file holds {y.size} values, model has {model.n_components} components")
        return y
    rng = np.random.default_rng(args.y_seed if args.y_seed is not None else 0)
    return sample_shape(model, rng, args.y_scale)


def cmd_synth(args):
    model = _load_model(args.model)
    if args.y_file is not None and args.y_seed is not None:
        raise _usage("use only one of --y-seed and --y-file")
    w, h = _size(args.size)
    n_pose = len(str(args.pose).split(","))
    pose_vals = _float_list(args.pose, 3 if n_pose == 3 else 6, "--pose")
    try:
        r = tuple(math.radians(a) for a in pose_vals[:3])
        if n_pose == 3:
            pose = CameraPose.looking_at(r, args.distance)
        else:
            pose = CameraPose(r, tuple(pose_vals[3:]))
        K = Intrinsics.prior(w, h) if args.focal is None else Intrinsics(args.focal, w / 2.0, h / 2.0)
    except ConfigError as exc:
        raise _usage(str(exc)) from None
    y = _shape_from_args(model, args)
    mesh = instantiate(model, y)
    try:
        nmap, lmk = render_views(mesh, model, pose, K, w, h)
    except EmptyRenderError as exc:
        raise _io(f"render failed: {exc}") from None
    prefix = args.out_prefix
    try:
        save_normal_map(nmap, prefix + ".nmap")
        save_landmarks(lmk, prefix + ".lmk.json")
        write_mesh(prefix + ".gt.obj", mesh)
    except OSError as exc:
        raise _io(f"cannot write outputs under {prefix}: {exc}") from None
    params = {
        "y": [float(v) for v in y],
        "pose": {"roll": pose.r[0], "pitch": pose.r[1], "yaw": pose.r[2],
                 "tx": pose.t[0], "ty": pose.t[1], "tz": pose.t[2]},
        "intrinsics": {"f": K.f, "u0": K.u0, "v0": K.v0},
        "width": w, "height": h,
    }
    _write_text(prefix + ".params.json", json.dumps(params, indent=1, sort_keys=True))
    n_vis = sum(d.visible for d in lmk.detections)
    print(f"synth coverage={nmap.coverage:.4f} landmarks_visible={n_vis} -> {prefix}.*")


def _parse_view(text):
    parts = str(text).split(",")
    if len(parts) != 2:
        raise _usage("--view takes NMAP,LMK")
    return parts


def cmd_fit(args):
    if not args.view:
        raise _usage("at least one --view NMAP,LMK is required")
    wts = _float_list(args.weights, 3, "--weights")
    try:
        weights = FitWeights(*wts)
        config = SolverConfig(max_iterations=args.max_iters)
    except ConfigError as exc:
        raise _usage(str(exc)) from None
    view_paths = [_parse_view(v) for v in args.view]
    model = _load_model(args.model)

    views = []
    for nmap_path, lmk_path in view_paths:
        try:
            nmap = load_normal_map(nmap_path)
            lmk = load_landmarks(lmk_path, nmap.width, nmap.height)
        except OSError as exc:
            raise _io(f"cannot read view: {exc}") from None
        except MapFileError as exc:
            raise _io(str(exc)) from None
        if any(d.channel < 0 or d.channel >= len(model.landmark_indices) for d in lmk.detections):
            raise _usage(f"{lmk_path}: landmark channel outside the model's "
                         f"{len(model.landmark_indices)} landmarks")
        try:
            views.append(ViewObservation(nmap, lmk))
        except ConfigError as exc:
            raise _usage(str(exc)) from None

    out = args.out
    result_path = args.result or os.path.splitext(out)[0] + ".fit.json"
    if os.path.splitext(out)[1].lower() not in (".obj", ".ply"):
        raise _usage("--out must end in .obj or .ply")
    try:
        result = fit(model, views, weights, config, threads=args.threads)
    except (SolverError, PrealignmentError) as exc:
        diag = {"error": type(exc).__name__, "message": str(exc),
                "diagnostics": getattr(exc, "diagnostics", {})}
        _write_text(result_path, json.dumps(diag, indent=1, sort_keys=True, default=float))
        raise CommandError(EXIT_SOLVER, "solver", str(exc)) from None
    try:
        write_mesh(out, instantiate(model, result.y))
    except OSError as exc:
        raise _io(f"cannot write {out}: {exc}") from None
    _write_text(result_path, result.to_json())
    print(f"fit converged={result.converged} status={result.status} "
          f"iterations={result.iterations} energy={result.energy:.6g} -> {out}, {result_path}")
    if not result.converged:
        raise CommandError(EXIT_SOLVER, "solver",
                           f"no convergence after {result.iterations} iterations")


def _anchors(args):
    if args.anchors is not None:
        doc = _read_json(args.anchors)
        if isinstance(doc, dict):
            return doc.get("reference"), doc.get("recon", doc.get("reference"))
        return doc, doc
    if args.model is not None:
        model = _load_model(args.model)
        idx = [int(i) for i in model.eval_anchor_indices]
        return idx, idx
    return None, None


def cmd_eval(args):
    try:
        ref = read_mesh(args.reference)
        rec = read_mesh(args.recon)
    except (OSError, MeshFileError, ConfigError) as exc:
        raise _io(f"cannot read mesh: {exc}") from None
    ref_a, rec_a = _anchors(args)
    for idx, mesh in ((ref_a, ref), (rec_a, rec)):
        if idx is not None and (len(idx) < 3 or max(idx) >= len(mesh.vertices) or min(idx) < 0):
            raise _usage("anchor indices must name at least 3 existing vertices")
    try:
        report = evaluate(ref, rec, ref_a, rec_a)
    except AlignmentError as exc:
        raise CommandError(EXIT_ALIGN, "alignment", str(exc)) from None
    except HeadfitError as exc:
        raise CommandError(EXIT_ALIGN, "alignment", str(exc)) from None
    _write_text(args.report, report.to_json())
    table_path = os.path.splitext(args.report)[0] + ".txt"
    _write_text(table_path, report.table())
    sys.stdout.write(report.table())


def cmd_export(args):
    if args.nmap is not None:
        try:
            nmap = load_normal_map(args.nmap)
        except (OSError, MapFileError) as exc:
            raise _io(str(exc)) from None
        from PIL import Image

        try:
            Image.fromarray(normal_map_to_rgb8(nmap), mode="RGB").save(args.out, format="PNG")
        except OSError as exc:
            raise _io(f"cannot write {args.out}: {exc}") from None
        print(f"export normal map -> {args.out}")
        return
    if args.model is None:
        raise _usage("export needs --model (mesh) or --nmap (image)")
    model = _load_model(args.model)
    if args.fit_result is not None:
        y = np.asarray(_read_json(args.fit_result)["y"], dtype=np.float64)
        if y.shape != (model.n_components,):
            raise _usage("fit result does not match the model's component count")
    elif args.y_file is not None:
        args.y_seed = None
        y = _shape_from_args(model, args)
    else:
        y = np.zeros(model.n_components)
    try:
        write_mesh(args.out, instantiate(model, y))
    except MeshFileError as exc:
        raise _usage(str(exc)) from None
    except OSError as exc:
        raise _io(f"cannot write {args.out}: {exc}") from None
    print(f"export mesh -> {args.out}")


# ---------------------------------------------------------------------------
# argument handling

_DEFAULTS = {
    "gen-model": {"subdiv": 4, "components": 30, "seed": 0},
    "synth": {"y_scale": 0.7, "pose": "0,0,0", "distance": 450.0, "size": "256x256"},
    "fit": {"weights": "1,0.8,0.4", "max_iters": 200, "view": []},
    "eval": {},
    "export": {},
}

_REQUIRED = {
    "gen-model": ["out"],
    "synth": ["model", "out_prefix"],
    "fit": ["model", "out"],
    "eval": ["reference", "recon", "report"],
    "export": ["out"],
}


def build_parser():
    p = argparse.ArgumentParser(prog="headfit", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"headfit {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON file of option values; flags take precedence")
        sp.add_argument("--threads", type=int, help="worker cap (env HEADFIT_THREADS)")
        return sp

    g = common(sub.add_parser("gen-model", help="generate a procedural morphable model"))
    g.add_argument("--subdiv", type=int)
    g.add_argument("--components", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--out")

    s = common(sub.add_parser("synth", help="render normal and landmark maps of a subject"))
    s.add_argument("--model")
    s.add_argument("--y-seed", type=int)
    s.add_argument("--y-file")
    s.add_argument("--y-scale", type=float, help="per-component scale of sigma for --y-seed")
    s.add_argument("--pose", help="roll,pitch,yaw (degrees),tx,ty,tz (mm, model frame); "
                                  "with only three angles the head centre is placed on the "
                                  "optical axis at --distance")
    s.add_argument("--distance", type=float, help="camera distance in mm for 3-angle poses")
    s.add_argument("--focal", type=float)
    s.add_argument("--size", help="WxH in pixels")
    s.add_argument("--out-prefix")

    f = common(sub.add_parser("fit", help="fit the model to one or more views"))
    f.add_argument("--model")
    f.add_argument("--view", action="append", help="NMAP,LMK (repeatable)")
    f.add_argument("--weights", help="lambda_N,lambda_Z,lambda_P")
    f.add_argument("--out", help="fitted mesh (.obj or .ply)")
    f.add_argument("--result", help="FitResult JSON (default: <out>.fit.json)")
    f.add_argument("--max-iters", type=int)

    e = common(sub.add_parser("eval", help="compare a reconstruction with a reference mesh"))
    e.add_argument("--reference")
    e.add_argument("--recon")
    e.add_argument("--anchors", help="JSON list of anchor vertex indices, or "
                                     "{\"reference\": [...], \"recon\": [...]}")
    e.add_argument("--model", help="take anchor indices from this model")
    e.add_argument("--report")

    x = common(sub.add_parser("export", help="export a model mesh or a normal-map image"))
    x.add_argument("--model")
    x.add_argument("--y-file")
    x.add_argument("--fit-result")
    x.add_argument("--nmap")
    x.add_argument("--out")
    return p


def resolve_args(parser, argv):
    """Parse flags, merge the optional JSON config file and apply defaults."""
    args = parser.parse_args(argv)
    cmd = args.command
    allowed = {k for k in vars(args) if k not in ("command", "config")}
    if args.config is not None:
        cfg = _read_json(args.config)
        if not isinstance(cfg, dict):
            raise _usage("--config must hold a JSON object")
        for key, value in cfg.items():
            dest = key.replace("-", "_")
            if dest not in allowed:
                raise _usage(f"unknown config key {key!r} for {cmd}")
            if getattr(args, dest) is None:
                setattr(args, dest, value)
    for key, value in _DEFAULTS[cmd].items():
        if getattr(args, key) is None:
            setattr(args, key, value)
    for key in _REQUIRED[cmd]:
        if getattr(args, key) is None:
            raise _usage(f"missing required option --{key.replace('_', '-')}")
    if args.threads is None:
        env = os.environ.get("HEADFIT_THREADS")
        try:
            args.threads = int(env) if env else 1
        except ValueError:
            raise _usage("HEADFIT_THREADS must be an integer") from None
    if args.threads < 1:
        raise _usage("--threads must be >= 1")
    return args


_COMMANDS = {
    "gen-model": cmd_gen_model,
    "synth": cmd_synth,
    "fit": cmd_fit,
    "eval": cmd_eval,
    "export": cmd_export,
}


def main(argv=None):
    parser = build_parser()
    try:
        try:
            args = resolve_args(parser, argv)
        except SystemExit as exc:  # argparse reports bad flags with exit status 2
            return exc.code
        # BLAS stays single-threaded so results do not depend on --threads
        with threadpool_limits(limits=1):
            _COMMANDS[args.command](args)
    except CommandError as exc:
        if exc.code == EXIT_USAGE:
            parser.print_usage(sys.stderr)
        print(f"headfit: error: {exc.kind}: {exc}", file=sys.stderr)
        return exc.code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
