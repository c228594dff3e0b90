"""Batch command line: scene, simulate, optimize, evaluate, export.

Every command writes a ``.manifest`` text file next to its outputs with the
resolved configuration, the seed, the tool version and SHA-256 hashes of the
files it read and wrote. A manifest can be fed back through ``--config`` to
repeat the run. Exit status is 0 on success, 1 on usage errors and 2 on
runtime or numerical failures.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import os
import sys
import time

import numpy as np

from . import __version__
from .forward import NoiseConfig, ToFConfig, correlation_stack, add_noise
from .mask import init_mask, parse_pattern, throughput, tile_mask, write_pgm
from .metrics import REPORT_FIELDS, evaluate_mask, write_report_csv
from .optim import LossConfig, TrainConfig, TrainingDiverged, train, write_log_csv
from .reconstruction import depth_from_phase, phase_estimate, project_points, write_ply
from .refiner import RefinerConfig, read_weights, refine_forward, write_weights
from .scene import (DEFAULT_BASELINE, central_depth, load_lightfield, preset_scene,
                    read_keyvalue, render_lightfield, save_lightfield)
from .tensor import RngState, tns_read, tns_write

log = logging.getLogger("tofmask")

USAGE_ERROR, RUNTIME_ERROR = 1, 2
# manifest keys that describe the run rather than configure it
RESERVED = ("command", "tool", "version", "timestamp")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, args, inputs=(), outputs=()) -> str:
    lines = [f"command = {args.command}", "tool = tofmask", f"version = {__version__}",
             f"timestamp = {time.strftime('%Y-%m-%dT%H:%M:%S%z')}"]
    for key in sorted(vars(args)):
        if key in ("command", "func", "config"):
            continue
        val = getattr(args, key)
        if isinstance(val, (list, tuple)):
            val = " ".join(str(v) for v in val)
        lines.append(f"{key} = {'' if val is None else val}")
    lines += [f"input:{p} = {sha256(p)}" for p in inputs]
    lines += [f"output:{p} = {sha256(p)}" for p in outputs]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


def _file_defaults(sub: argparse.ArgumentParser, path) -> dict:
    """Config file values converted with each option's own type."""
    actions = {a.dest: a for a in sub._actions}
    out = {}
    for key, raw in read_keyvalue(path).items():
        if key in RESERVED or ":" in key:
            continue
        if key not in actions:
            raise UsageError(f"{path}: unknown config key {key!r}")
        action = actions[key]
        if raw == "":
            out[key] = None
        elif isinstance(action, argparse._StoreTrueAction):
            out[key] = raw.lower() in ("1", "true", "yes", "on")
        elif action.nargs in ("+", "*"):
            conv = action.type or str
            out[key] = [conv(v) for v in raw.split()]
        else:
            out[key] = (action.type or str)(raw)
    return out


# --- shared option groups ----------------------------------------------------------

def _tof_opts(p):
    g = p.add_argument_group("sensor")
    g.add_argument("--mod-freq-hz", dest="mod_freq_hz", type=float, default=30e6)
    g.add_argument("--gain", type=float, default=20.0)
    g.add_argument("--integration-ms", dest="integration_ms", type=float, default=1.0)
    g.add_argument("--amplitude", type=float, default=255.0)
    g.add_argument("--noise", choices=("on", "off"), default="on")
    g.add_argument("--noise-a", dest="noise_a", type=float, default=0.75)
    g.add_argument("--noise-b", dest="noise_b", type=float, default=1.25)
    g.add_argument("--noise-mu", dest="noise_mu", type=float, default=0.0)
    g.add_argument("--noise-sigma", dest="noise_sigma", type=float, default=3.0)


def _tof(args):
    return ToFConfig(args.mod_freq_hz, args.amplitude, gain=args.gain,
                     integration_ms=args.integration_ms)


def _noise(args):
    if args.noise == "off":
        return NoiseConfig.off()
    return NoiseConfig(args.noise_a, args.noise_b, args.noise_mu, args.noise_sigma)


def _mask_opts(p, required=True):
    g = p.add_mutually_exclusive_group(required=required)
    g.add_argument("--mask", help="mask patch (TNS1 [U,V,P,P])")
    g.add_argument("--mask-pattern", dest="mask_pattern",
                   help="initial pattern, e.g. ones, circle:5, bernoulli:0.5")
    p.add_argument("--patch-size", dest="patch_side", type=int, default=80,
                   help="side P of a generated pattern patch")
    p.add_argument("--crop", type=int, default=64, help="tiling crop side K")


def _load_mask(args, U, V, rng=None):
    if args.mask:
        patch = tns_read(args.mask)
    else:
        name, params = parse_pattern(args.mask_pattern)
        patch = init_mask(name, params, rng or RngState(args.seed or 0), U, V, args.patch_side)
    if patch.ndim != 4 or patch.shape[:2] != (U, V):
        raise ValueError(f"mask views {patch.shape[:2]} do not match scene views {(U, V)}")
    return patch


# --- commands ----------------------------------------------------------------------------

def cmd_scene(args):
    params = {k: getattr(args, k) for k in ("size", "fg", "bg", "depth", "split", "orientation",
                                             "period", "duty", "radius", "steps", "near", "far",
                                             "albedo") if getattr(args, k) is not None}
    sc = preset_scene(args.preset, params, RngState(args.seed))
    lf = render_lightfield(sc, args.views, args.views, args.baseline, args.focus)
    outs = save_lightfield(lf, args.out)
    write_manifest(args.out + ".manifest", args, outputs=outs)
    log.info("wrote %s", " ".join(outs))


def cmd_simulate(args):
    lf = load_lightfield(args.scene)
    inputs = [args.scene + ext for ext in (".amp.tns", ".dep.tns", ".meta")]
    patch = _load_mask(args, lf.U, lf.V)
    if args.mask:
        inputs.append(args.mask)
    log.info("mask throughput %.6f (%d/%d open views at the centre pixel)", throughput(patch),
             int(np.count_nonzero(patch[:, :, 0, 0] > 0.5)), lf.U * lf.V)
    mask = tile_mask(patch, lf.H, lf.W, args.crop).array()
    tof = _tof(args)
    _, stack = correlation_stack(lf, mask, cfg=tof)
    stack = np.asarray(add_noise(stack, _noise(args), RngState(args.seed)))
    depth = np.asarray(depth_from_phase(phase_estimate(stack), tof))
    outs = [args.out + ".corr.tns", args.out + ".depth.tns"]
    tns_write(stack, outs[0])
    tns_write(depth, outs[1])
    if args.weights:
        inputs.append(args.weights)
        refined = np.asarray(refine_forward(depth, mask, read_weights(args.weights)))
        outs.append(args.out + ".refined.tns")
        tns_write(refined, outs[-1])
    write_manifest(args.out + ".manifest", args, inputs, outs)
    log.info("wrote %s", " ".join(outs))


def cmd_optimize(args):
    scenes = [load_lightfield(s) for s in args.scenes]
    holdout = [load_lightfield(s) for s in args.holdout or ()]
    U, V = scenes[0].U, scenes[0].V
    init = _load_mask(args, U, V, RngState(args.seed).split(2)[1])
    tcfg = TrainConfig(args.lr_refiner, args.lr_mask, args.halve_every, args.mask_freeze,
                       args.train_patch, args.crop, args.batch, args.steps, args.epochs,
                       args.seed, args.threads, args.eval_seed, args.checkpoint_every)
    lcfg = LossConfig(args.w_l, args.w_c, args.delta, args.s_z, unit_mm=args.unit_mm)
    rcfg = RefinerConfig(args.hidden, args.layers, not args.no_downsample)
    os.makedirs(args.out, exist_ok=True)
    inputs = [s + ext for s in args.scenes + (args.holdout or []) for ext in (".amp.tns", ".dep.tns")]
    if args.mask:
        inputs.append(args.mask)

    def progress(row):
        log.info("epoch %d loss %.6g throughput %.4f", row["epoch"], row["loss"], row["throughput"])

    try:
        res = train(scenes, tcfg, lcfg, _noise(args), rcfg, init, _tof(args), holdout or None,
                    out_dir=args.out, train_mask=not args.fixed_mask, progress=progress)
    except TrainingDiverged:
        write_manifest(os.path.join(args.out, "manifest.txt"), args, inputs)
        raise
    outs = [os.path.join(args.out, n) for n in ("mask.tns", "weights.tnsc", "log.csv")]
    tns_write(res.mask, outs[0])
    write_weights(outs[1], res.weights)
    write_log_csv(outs[2], res.log)
    write_manifest(os.path.join(args.out, "manifest.txt"), args, inputs, outs)
    log.info("final throughput %.4f", throughput(res.mask))


def cmd_evaluate(args):
    scenes = [load_lightfield(s) for s in args.scenes]
    inputs = [s + ext for s in args.scenes for ext in (".amp.tns", ".dep.tns")]
    tof, ncfg = _tof(args), _noise(args)
    lcfg = LossConfig(s_z=args.s_z)
    rows, names = [], []

    if args.predictions:
        if len(args.predictions) != len(scenes):
            raise UsageError("--predictions needs one depth map per scene")
        from .metrics import default_margin, fp_count, rmse_mae, thresh_metric
        from .optim import chamfer
        for path, lf in zip(args.predictions, scenes):
            inputs.append(path)
            depth, gt = tns_read(path), central_depth(lf)
            rmse, mae = rmse_mae(depth, gt)
            count = fp_count(depth, lf.layer_depths_mm, default_margin(lf.layer_depths_mm))
            rows.append({"rmse": rmse, "mae": mae, "thresh3": thresh_metric(depth, gt, 3.0),
                         "thresh15": thresh_metric(depth, gt, 15.0), "fp_ratio": float(count),
                         "chamfer": chamfer(project_points(depth, lcfg.s_z),
                                            project_points(gt, lcfg.s_z)),
                         "throughput": float("nan")})
        agg = {k: float(np.mean([r[k] for r in rows])) for k in REPORT_FIELDS}
        write_report_csv(args.out, {"scenes": rows, "aggregate": agg}, list(args.scenes))
        write_manifest(args.out + ".manifest", args, inputs, [args.out])
        return

    if not (args.mask or args.mask_pattern):
        raise UsageError("evaluate needs --mask, --mask-pattern or --predictions")
    U, V = scenes[0].U, scenes[0].V
    entries = [("mask", _load_mask(args, U, V), args.weights)]
    if args.mask:
        inputs.append(args.mask)
    for item in args.compare or ():
        label, _, rest = item.partition("=")
        source, _, weights = rest.partition(",")
        if not label or not source:
            raise UsageError(f"--compare expects LABEL=MASK[,WEIGHTS], got {item!r}")
        if os.path.exists(source):
            patch = tns_read(source)
            inputs.append(source)
        else:
            name, params = parse_pattern(source)
            patch = init_mask(name, params, RngState(args.seed), U, V, args.patch_side)
        entries.append((label, patch, weights or None))

    report_sets = []
    for label, patch, wpath in entries:
        weights = read_weights(wpath) if wpath else None
        if wpath:
            inputs.append(wpath)
        if args.fp_protocol:
            ones = np.ones((U, V, args.crop, args.crop), np.float32)
            ref = evaluate_mask(ones, weights, scenes, tof, ncfg, args.crop, args.seed)
            ref_counts = [r["fp_count"] for r in ref["scenes"]]
            if label == "mask":
                report_sets.append(("ones_reference", ref))
        else:
            ref_counts = None
        rep = evaluate_mask(patch, weights, scenes, tof, ncfg, args.crop, args.seed,
                            reference=ref_counts, lcfg=lcfg)
        report_sets.append((label, rep))

    main = dict(report_sets)["mask"]
    names = list(args.scenes)
    rows = list(main["scenes"])
    extra = []
    for label, rep in report_sets:
        if label != "mask":
            extra.append((f"{label}:aggregate", rep["aggregate"]))
    write_report_csv(args.out, {"scenes": rows, "aggregate": main["aggregate"]}, names)
    with open(args.out, "a", newline="") as fh:
        for name, agg in extra:
            fh.write(",".join([name] + [repr(float(agg[k])) for k in REPORT_FIELDS]) + "\n")
        if args.compare:
            ratios = [rep["aggregate"]["fp_ratio"] for _, rep in report_sets
                      if _ != "ones_reference"]
            ok = all(a < b for a, b in zip(ratios, ratios[1:]))
            fh.write(f"fp_ordering,{'PASS' if ok else 'FAIL'}\n")
            log.info("fp ordering %s: %s", "PASS" if ok else "FAIL",
                     " < ".join(f"{lab}={rep['aggregate']['fp_ratio']:.4f}"
                                for lab, rep in report_sets if lab != "ones_reference"))
    write_manifest(args.out + ".manifest", args, inputs, [args.out])
    log.info("aggregate %s", {k: round(v, 4) for k, v in main["aggregate"].items()})


def cmd_export(args):
    if not (args.depth or args.mask):
        raise UsageError("export needs --depth and/or --mask")
    inputs, outs = [], []
    if args.depth:
        if not args.ply:
            raise UsageError("--depth needs --ply")
        inputs.append(args.depth)
        write_ply(args.ply, project_points(tns_read(args.depth), args.s_z))
        outs.append(args.ply)
    if args.mask:
        if not (args.pgm or args.tns):
            raise UsageError("--mask needs --pgm and/or --tns")
        inputs.append(args.mask)
        patch = tns_read(args.mask)
        if args.pgm:
            write_pgm(args.pgm, patch, args.threshold)
            outs.append(args.pgm)
        if args.tns:
            from .mask import binarize
            tns_write(binarize(patch, args.threshold)[0], args.tns)
            outs.append(args.tns)
    write_manifest(outs[0] + ".manifest", args, inputs, outs)
    log.info("wrote %s", " ".join(outs))


# --- parser --------------------------------------------------------------------------------

def build_parser() -> Parser:
    p = Parser(prog="tofmask", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"tofmask {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    def common(sp, seed_required=True):
        sp.add_argument("--config", help="key = value file; flags override it")
        sp.add_argument("--seed", type=int, required=seed_required)
        sp.add_argument("--threads", type=int, default=1)
        sp.add_argument("-v", "--verbose", action="store_true")

    s = sub.add_parser("scene", help="render a parametric light field")
    common(s)
    s.add_argument("--preset", required=True, choices=("flat", "edge", "bars", "staircase", "disk"))
    s.add_argument("--out", required=True, help="output stem")
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--views", type=int, default=9)
    s.add_argument("--baseline", type=float, default=DEFAULT_BASELINE)
    s.add_argument("--focus", type=float, help="focus depth in mm (default: back layer)")
    for name in ("fg", "bg", "depth", "near", "far", "radius", "duty", "albedo"):
        s.add_argument(f"--{name}", type=float)
    for name in ("split", "period", "steps"):
        s.add_argument(f"--{name}", type=int)
    s.add_argument("--orientation", choices=("vertical", "horizontal"))
    s.set_defaults(func=cmd_scene)

    s = sub.add_parser("simulate", help="correlation stack and depth for one scene")
    common(s)
    s.add_argument("--scene", required=True, help="light-field stem")
    s.add_argument("--out", required=True, help="output stem")
    s.add_argument("--weights", help="refiner weights; also writes the refined depth")
    _mask_opts(s)
    _tof_opts(s)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("optimize", help="jointly train mask and refiner")
    common(s)
    s.add_argument("--scenes", nargs="+", required=True)
    s.add_argument("--holdout", nargs="*")
    s.add_argument("--out", required=True, help="output directory")
    _mask_opts(s, required=False)
    s.set_defaults(mask_pattern="ones")
    s.add_argument("--epochs", type=int, default=200)
    s.add_argument("--lr-refiner", dest="lr_refiner", type=float, default=0.004)
    s.add_argument("--lr-mask", dest="lr_mask", type=float, default=0.1)
    s.add_argument("--halve-every", dest="halve_every", type=int, default=80)
    s.add_argument("--mask-freeze", dest="mask_freeze", type=int, default=70)
    s.add_argument("--train-patch", dest="train_patch", type=int, default=80)
    s.add_argument("--batch", type=int, default=4)
    s.add_argument("--steps", type=int, default=2, help="steps per epoch")
    s.add_argument("--eval-seed", dest="eval_seed", type=int, default=12345)
    s.add_argument("--checkpoint-every", dest="checkpoint_every", type=int, default=0)
    s.add_argument("--fixed-mask", dest="fixed_mask", action="store_true",
                   help="train the refiner only")
    s.add_argument("--w-l", dest="w_l", type=float, default=100.0)
    s.add_argument("--w-c", dest="w_c", type=float, default=0.08)
    s.add_argument("--delta", type=float, default=1.0)
    s.add_argument("--s-z", dest="s_z", type=float, default=1.0)
    s.add_argument("--unit-mm", dest="unit_mm", type=float, default=1.0)
    s.add_argument("--hidden", type=int, default=16)
    s.add_argument("--layers", type=int, default=4)
    s.add_argument("--no-downsample", dest="no_downsample", action="store_true")
    _tof_opts(s)
    s.set_defaults(func=cmd_optimize)

    s = sub.add_parser("evaluate", help="metrics CSV for a mask over scenes")
    common(s)
    s.add_argument("--scenes", nargs="+", required=True)
    s.add_argument("--out", required=True, help="CSV path")
    s.add_argument("--weights")
    s.add_argument("--predictions", nargs="+", help="score these depth maps instead")
    s.add_argument("--compare", nargs="+", metavar="LABEL=MASK[,WEIGHTS]",
                   help="further masks; adds an fp ordering row (mask < first < ...)")
    s.add_argument("--fp-protocol", dest="fp_protocol", action="store_true",
                   help="normalize against the ones mask through the same refiner")
    s.add_argument("--s-z", dest="s_z", type=float, default=1.0)
    _mask_opts(s, required=False)
    _tof_opts(s)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("export", help="depth to PLY, mask to PGM/TNS1")
    common(s, seed_required=False)
    s.add_argument("--depth")
    s.add_argument("--ply")
    s.add_argument("--s-z", dest="s_z", type=float, default=1.0)
    s.add_argument("--mask")
    s.add_argument("--pgm")
    s.add_argument("--tns")
    s.add_argument("--threshold", type=float, default=0.5)
    s.set_defaults(func=cmd_export)
    return p


def _config_path(argv):
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def parse_args(argv=None):
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    path = _config_path(argv)
    command = next((t for t in argv if not t.startswith("-")), None)
    subs = parser._subparsers._group_actions[0].choices
    if path and command in subs:
        sub = subs[command]
        values = _file_defaults(sub, path)
        for action in sub._actions:
            if action.dest in values:
                action.required = False
        sub.set_defaults(**values)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return USAGE_ERROR
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except UsageError as exc:
        print(f"tofmask {args.command}: error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (ValueError, OSError, KeyError, TrainingDiverged) as exc:
        print(f"tofmask {args.command}: {exc}", file=sys.stderr)
        return RUNTIME_ERROR
    return 0


if __name__ == "__main__":
    sys.exit(main())
