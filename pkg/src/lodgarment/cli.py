"""Command-line entry point: ``python -m lodgarment.cli <command> ...``.

Commands: synth, reconstruct, eval, sample-field, fit-boundary, register.
Verbosity follows the GARVERSE_LOG environment variable (DEBUG, INFO, ...).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import boundary_fit, fields, pipeline, registration
from .config import resolve
from .mesh import TemplateDescriptor, close_holes, load_obj, obj_text

log = logging.getLogger("lodgarment")

EXIT_CODES = {
    "usage": 2,
    "input-stage": 10,
    "pose-stage": 11,
    "implicit-stage": 12,
    "boundary-stage": 13,
    "fit-stage": 14,
    "landmark-stage": 15,
    "registration-stage": 16,
    "eval-stage": 17,
}


def _setup_logging():
    level = os.environ.get("GARVERSE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _config(args):
    return resolve(args.config, seed=args.seed, workers=args.workers,
                   category=getattr(args, "category", None))


# ---------------------------------------------------------------- commands


def cmd_synth(args):
    cfg = _config(args)
    manifest = pipeline.synth(cfg, args.n, args.out)
    print(f"{len(manifest['samples'])} samples in {args.out} (config {manifest['config_hash']})")
    return 0


def _bundles(args):
    src = Path(args.input)
    if (src / "bundle.json").exists():
        return [src]
    manifest, root = pipeline.load_manifest(src)
    ids = args.id or [r["id"] for r in manifest["samples"]]
    known = {r["id"]: r for r in manifest["samples"]}
    missing = [i for i in ids if i not in known]
    if missing:
        raise KeyError(f"unknown sample ids: {missing}")
    return [root / Path(known[i]["bundle"]).parent for i in ids]


def _reconstruct_one(job):
    bundle, out, cfg_dict = job
    cfg = pipeline.RunConfig.from_dict(cfg_dict)
    try:
        return pipeline.reconstruct_bundle(bundle, out, cfg), None
    except registration.StageError as exc:
        return None, (str(bundle), exc.stage, str(exc))


def cmd_reconstruct(args):
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bundles = _bundles(args)
    jobs = [(b, out, cfg.to_dict()) for b in bundles]
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(cfg.workers) as ex:
            results = list(ex.map(_reconstruct_one, jobs))
    else:
        results = [_reconstruct_one(j) for j in jobs]
    records = [r for r, err in results if r is not None]
    errors = [err for _, err in results if err is not None]
    for bundle, stage, msg in errors:
        print(f"error {stage}: {bundle}: {msg}", file=sys.stderr)
    if records:
        pipeline.write_reconstruct_manifest(out, cfg, records)
    if errors:
        return EXIT_CODES[errors[0][1]]
    print(f"{len(records)} reconstructions in {out}")
    return 0


def cmd_eval(args):
    cfg = _config(args)
    m = cfg.metrics
    samples = args.samples or m.samples
    resolution = args.resolution or m.resolution
    try:
        report = pipeline.evaluate_dirs(args.pred, args.gt, samples, resolution, m.seed)
    except pipeline.IdMismatch as exc:
        print(f"error eval-stage: {exc}", file=sys.stderr)
        return EXIT_CODES["eval-stage"]
    table = pipeline.format_table(report)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        pipeline.write_text_atomic(out / "eval.json", pipeline.dumps(report))
        pipeline.write_text_atomic(out / "eval.txt", table)
    print(table, end="")
    return 0


def cmd_sample_field(args):
    mesh = load_obj(args.mesh)
    closed = close_holes(mesh)
    seed = args.seed if args.seed is not None else 0
    pts, labels = fields.sample_training_points(
        closed, {"surface_near": args.near, "uniform": args.uniform}, args.sigma, seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fields.write_point_records(out, pts, labels)
    print(f"{len(pts)} records ({int(labels.sum())} inside) -> {out}")
    return 0


def _load_target(path, resolution_radii=0.5):
    p = Path(path)
    if p.suffix == ".json":
        tube = fields.CurveTube.load(p)
        lo, hi = tube.bbox(pad=2 * tube.radius)
        res = np.maximum(np.ceil((hi - lo) / (resolution_radii * tube.radius)).astype(int) + 1, 8)
        return fields.tube_field_to_curve_samples(fields.boundary_tube_field(tube), (lo, hi), res)
    return np.loadtxt(p, ndmin=2)


def cmd_fit_boundary(args):
    cfg = _config(args)
    mesh = load_obj(args.mesh)
    desc = TemplateDescriptor.from_json(Path(args.descriptor).read_text())
    target = _load_target(args.target)
    fit_cfg = boundary_fit.FitConfig.load(args.fit_config) if args.fit_config else cfg.reconstruct.fit
    try:
        res = boundary_fit.fit_boundary_strip(mesh, desc, args.label, target, fit_cfg)
    except boundary_fit.DivergenceError as exc:
        print(f"error fit-stage: {exc}", file=sys.stderr)
        return EXIT_CODES["fit-stage"]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pipeline.write_text_atomic(out / f"{args.label}_fitted.obj", obj_text(res.strip.apply_to(mesh)))
    res.write_trace_csv(out / f"{args.label}_trace.csv")
    print(f"{args.label}: loss {res.trace[0][1]:.6g} -> {res.final_loss:.6g} "
          f"in {len(res.trace) - 1} steps")
    return 0


def cmd_register(args):
    cfg = _config(args)
    source = load_obj(args.source)
    target = load_obj(args.target)
    landmarks = None
    if args.landmarks:
        if not args.descriptor:
            print("error usage: --landmarks needs --descriptor", file=sys.stderr)
            return EXIT_CODES["usage"]
        desc = TemplateDescriptor.from_json(Path(args.descriptor).read_text())
        pts = json.loads(Path(args.landmarks).read_text())
        loops = desc.loops(source)
        landmarks = registration.build_landmarks(
            loops, {k: np.asarray(v) for k, v in pts.items()}, cfg.reconstruct.samples_per_loop)
    state = registration.NicpState.initial(source.n_vertices, cfg.reconstruct.nicp)
    try:
        out_mesh, diag = registration.nonrigid_icp(source, target, landmarks, state)
    except (registration.SingularSystemError, registration.EmptyCorrespondenceError) as exc:
        print(f"error registration-stage: {exc}", file=sys.stderr)
        return EXIT_CODES["registration-stage"]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.source).stem
    pipeline.write_text_atomic(out / f"{stem}_registered.obj", obj_text(out_mesh))
    pipeline.write_text_atomic(out / f"{stem}_registered.diagnostics.json", pipeline.dumps(diag))
    print(f"registered {args.source} -> {out}")
    return 0


# ---------------------------------------------------------------- parser


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int)
    common.add_argument("--out", help="output directory")

    p = argparse.ArgumentParser(prog="lodgarment", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic fine-garment dataset")
    s.add_argument("--n", type=int, default=1, help="number of samples")
    s.add_argument("--category")
    s.set_defaults(func=cmd_synth, out_required=True)

    s = sub.add_parser("reconstruct", parents=[common], help="run the reconstruction pipeline")
    s.add_argument("--input", required=True, help="bundle directory, synth directory or manifest")
    s.add_argument("--id", action="append", help="sample id (repeatable); default all")
    s.set_defaults(func=cmd_reconstruct, out_required=True)

    s = sub.add_parser("eval", parents=[common], help="compare predicted and ground-truth meshes")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--samples", type=int, help="surface samples per mesh")
    s.add_argument("--resolution", type=int, help="IoU grid resolution")
    s.set_defaults(func=cmd_eval, out_required=False)

    s = sub.add_parser("sample-field", parents=[common], help="occupancy training samples")
    s.add_argument("--mesh", required=True)
    s.add_argument("--near", type=int, default=10000)
    s.add_argument("--uniform", type=int, default=10000)
    s.add_argument("--sigma", type=float, default=0.01)
    s.set_defaults(func=cmd_sample_field, out_required=True)

    s = sub.add_parser("fit-boundary", parents=[common], help="fit one boundary strip")
    s.add_argument("--mesh", required=True)
    s.add_argument("--descriptor", required=True)
    s.add_argument("--label", required=True)
    s.add_argument("--target", required=True, help="tube JSON or whitespace xyz text file")
    s.add_argument("--fit-config", help="FitConfig JSON")
    s.set_defaults(func=cmd_fit_boundary, out_required=True)

    s = sub.add_parser("register", parents=[common], help="non-rigid ICP of two meshes")
    s.add_argument("--source", required=True)
    s.add_argument("--target", required=True)
    s.add_argument("--descriptor")
    s.add_argument("--landmarks", help="JSON {label: [[x, y, z], ...]}")
    s.set_defaults(func=cmd_register, out_required=True)
    return p


def main(argv=None):
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.out_required and not args.out:
        parser.error(f"{args.command} needs --out")
    try:
        return args.func(args)
    except registration.StageError as exc:
        print(f"error {exc.stage}: {exc}", file=sys.stderr)
        return EXIT_CODES.get(exc.stage, 1)
    except (FileNotFoundError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
