"""Dataset synthesis, bundle-based reconstruction and batch evaluation.

Layout of a synth output directory::

    manifest.json
    assets/        body model, garment PCA, template descriptor
    samples/<id>/  coarse.obj detailed.obj fine.obj fine_closed.obj
                   body_params.json provenance.json tubes/<label>.json bundle.json

Every sample directory is written under a temporary name and renamed into
place when complete, so a crash never leaves a half-written sample and a
rerun skips whatever already exists.
"""
from __future__ import annotations

import json
import logging
import os
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__, garments, lod, pca
from .body import BodyModel, BodyParams, build_procedural_body
from .config import RunConfig
from .fields import CurveTube, mesh_occupancy_field
from .mesh import Mesh, TemplateDescriptor, close_holes, load_obj, obj_text
from .metrics import evaluate_pair
from .registration import ReconstructInputs, StageError, reconstruct

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_text_atomic(path, text: str):
    """Write via a temporary file and rename; an identical existing file is
    left untouched."""
    path = Path(path)
    data = text.encode()
    if path.exists() and path.read_bytes() == data:
        return False
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    tmp.write_bytes(data)
    tmp.replace(path)
    return True


def effective_config(cfg: RunConfig) -> dict:
    """Config as echoed into manifests; the worker count never changes
    outputs, so it is left out."""
    d = cfg.to_dict()
    d.pop("workers")
    return d


def sample_seed(seed: int, index: int) -> int:
    return seed + index


def sample_id(index: int) -> str:
    return f"sample_{index:05d}"


# ---------------------------------------------------------------- assets


@dataclass
class Assets:
    body: BodyModel
    style: pca.GarmentBlendshapeModel
    descriptor: TemplateDescriptor
    detail_bank: list
    deform_bank: list


def build_assets(cfg: RunConfig) -> Assets:
    ss = np.random.SeedSequence(cfg.seed).generate_state(4)
    s = cfg.synth
    body = BodyModel.load(cfg.body_model) if cfg.body_model else \
        build_procedural_body(cfg.body_resolution, seed=int(ss[0]))
    desc = garments.template_descriptor(cfg.category, cfg.resolution)
    corpus = garments.style_corpus(cfg.category, s.n_style, int(ss[1]), cfg.resolution)
    style = pca.build_pca(corpus, s.n_components, desc)
    detail = lod.make_detail_bank(cfg.category, s.n_detail, int(ss[2]), cfg.resolution,
                                  s.detail_amplitude)
    deform = lod.make_deformation_bank(cfg.category, body, s.n_deform, int(ss[3]), cfg.resolution,
                                       s.swing_amplitude, s.beta_scale)
    return Assets(body, style, desc, detail, deform)


def save_assets(assets: Assets, out: Path):
    """Write the asset directory once; an existing one is kept as is."""
    final = out / "assets"
    if final.exists():
        return
    tmp = out / f".assets.tmp{os.getpid()}"
    shutil.rmtree(tmp, ignore_errors=True)
    tmp.mkdir(parents=True)
    assets.body.save(tmp / "body.json")
    assets.style.save(tmp / "style_pca.json")
    (tmp / "descriptor.json").write_text(assets.descriptor.to_json() + "\n")
    tmp.rename(final)


# ---------------------------------------------------------------- synth


def oracle_tubes(fine: Mesh, descriptor: TemplateDescriptor, radius_fraction: float) -> dict:
    r = radius_fraction * fine.bbox_diagonal()
    return {label: CurveTube(lp.positions(), r, label)
            for label, lp in descriptor.loops(fine).items()}


def oracle_inputs(assets: Assets, cfg: RunConfig, index: int):
    """Synthesize sample ``index`` in memory and wrap it as reconstruction
    inputs with oracle fields. Returns (SynthResult, ReconstructInputs)."""
    res = lod.synth_sample(assets.style, assets.detail_bank, assets.deform_bank, assets.body,
                           sample_seed(cfg.seed, index), cfg.synth.k)
    params = assets.deform_bank[res.provenance["deform_index"]].params
    inputs = ReconstructInputs(res.coarse, assets.descriptor, assets.body, params,
                               mesh_occupancy_field(close_holes(res.fine)),
                               oracle_tubes(res.fine, assets.descriptor, cfg.synth.tube_radius))
    return res, inputs


def _write_sample(out: Path, index: int, seed: int, cfg: RunConfig, assets: Assets) -> dict:
    sid = sample_id(index)
    final = out / "samples" / sid
    rec = {
        "id": sid,
        "category": cfg.category,
        "seed": sample_seed(seed, index),
        "provenance": f"samples/{sid}/provenance.json",
        "meshes": {k: f"samples/{sid}/{k}.obj" for k in ("coarse", "detailed", "fine")},
        "body_params": f"samples/{sid}/body_params.json",
        "bundle": f"samples/{sid}/bundle.json",
    }
    if (final / "bundle.json").exists():
        return rec
    res = lod.synth_sample(assets.style, assets.detail_bank, assets.deform_bank, assets.body,
                           rec["seed"], cfg.synth.k)
    params = assets.deform_bank[res.provenance["deform_index"]].params
    tmp = out / "samples" / f".{sid}.tmp{os.getpid()}"
    shutil.rmtree(tmp, ignore_errors=True)
    (tmp / "tubes").mkdir(parents=True)
    (tmp / "coarse.obj").write_text(obj_text(res.coarse))
    (tmp / "detailed.obj").write_text(obj_text(res.detailed))
    (tmp / "fine.obj").write_text(obj_text(res.fine))
    (tmp / "fine_closed.obj").write_text(obj_text(close_holes(res.fine)))
    (tmp / "body_params.json").write_text(dumps(params.to_dict()))
    (tmp / "provenance.json").write_text(dumps(res.provenance))
    tubes = oracle_tubes(res.fine, assets.descriptor, cfg.synth.tube_radius)
    for label, tube in tubes.items():
        (tmp / "tubes" / f"{label}.json").write_text(dumps(tube.to_dict()))
    bundle = {
        "id": sid,
        "category": cfg.category,
        "coarse": "coarse.obj",
        "fine_closed": "fine_closed.obj",
        "body_params": "body_params.json",
        "tubes": {label: f"tubes/{label}.json" for label in sorted(tubes)},
        "body_model": "../../assets/body.json",
        "descriptor": "../../assets/descriptor.json",
    }
    (tmp / "bundle.json").write_text(dumps(bundle))
    tmp.rename(final)
    return rec


_WORKER = {}


def _worker_init(cfg_dict, out):
    cfg = RunConfig.from_dict(cfg_dict)
    _WORKER.update(cfg=cfg, out=Path(out), assets=build_assets(cfg))


def _worker_sample(index):
    w = _WORKER
    return _write_sample(w["out"], index, w["cfg"].seed, w["cfg"], w["assets"])


def synth(cfg: RunConfig, n_samples: int, out) -> dict:
    """Generate ``n_samples`` samples into ``out``; returns the manifest."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    _check_existing(out, cfg)
    assets = build_assets(cfg)
    save_assets(assets, out)
    (out / "samples").mkdir(exist_ok=True)
    if cfg.workers > 1 and n_samples > 1:
        with ProcessPoolExecutor(cfg.workers, initializer=_worker_init,
                                 initargs=(cfg.to_dict(), str(out))) as ex:
            records = list(ex.map(_worker_sample, range(n_samples)))
    else:
        records = [_write_sample(out, i, cfg.seed, cfg, assets) for i in range(n_samples)]
    manifest = {
        "kind": "synth",
        "toolkit_version": __version__,
        "config_hash": cfg.hash(),
        "config": effective_config(cfg),
        "seed": cfg.seed,
        "samples": records,
    }
    validate_manifest(manifest, out)
    write_text_atomic(out / MANIFEST, dumps(manifest))
    return manifest


def _check_existing(out: Path, cfg: RunConfig):
    path = out / MANIFEST
    if path.exists():
        old = json.loads(path.read_text())
        if old.get("config_hash") != cfg.hash():
            raise ValueError(f"{out} holds outputs of a different configuration "
                             f"({old.get('config_hash')} != {cfg.hash()})")


def _manifest_paths(rec):
    for k, v in rec.items():
        if isinstance(v, str) and v.endswith((".json", ".obj")):
            yield v
        elif isinstance(v, dict):
            yield from (p for p in v.values() if isinstance(p, str))


def validate_manifest(manifest: dict, root):
    root = Path(root)
    ids = [r["id"] for r in manifest["samples"]]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate sample ids in manifest")
    for rec in manifest["samples"]:
        for p in _manifest_paths(rec):
            if not (root / p).exists():
                raise FileNotFoundError(f"{rec['id']}: missing {p}")


def load_manifest(path):
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST
    manifest = json.loads(path.read_text())
    validate_manifest(manifest, path.parent)
    return manifest, path.parent


def replay_sample(manifest: dict, root, sid: str) -> Mesh:
    """Recompose a sample's fine garment from its provenance record."""
    cfg = RunConfig.from_dict(manifest["config"])
    rec = next(r for r in manifest["samples"] if r["id"] == sid)
    prov = json.loads((Path(root) / rec["provenance"]).read_text())
    a = build_assets(cfg)
    return lod.replay(prov, a.style, a.detail_bank, a.deform_bank, a.body).fine


# ---------------------------------------------------------------- reconstruct


def load_bundle_inputs(bundle_dir) -> tuple:
    """Load a reconstruction bundle; failures are tagged by the stage whose
    input is missing."""
    d = Path(bundle_dir)
    try:
        b = json.loads((d / "bundle.json").read_text())
        coarse = load_obj(d / b["coarse"])
        desc = TemplateDescriptor.from_json((d / b["descriptor"]).read_text())
        body = BodyModel.load(d / b["body_model"])
        params = BodyParams.load(d / b["body_params"])
    except Exception as exc:
        raise StageError("input-stage", exc) from exc
    try:
        fine = mesh_occupancy_field(load_obj(d / b["fine_closed"]))
    except Exception as exc:
        raise StageError("implicit-stage", exc) from exc
    try:
        tubes = {label: CurveTube.load(d / p) for label, p in b["tubes"].items()}
    except Exception as exc:
        raise StageError("boundary-stage", exc) from exc
    return b["id"], ReconstructInputs(coarse, desc, body, params, fine, tubes)


def reconstruct_bundle(bundle_dir, out, cfg: RunConfig) -> dict:
    """Run the pipeline on one bundle, writing ``<id>.obj`` and
    ``<id>.diagnostics.json`` only on success."""
    out = Path(out)
    sid, inputs = load_bundle_inputs(bundle_dir)
    result = reconstruct(inputs, cfg.reconstruct)
    diag = dict(result.diagnostics, id=sid, seed=cfg.seed, config_hash=cfg.hash())
    write_text_atomic(out / f"{sid}.diagnostics.json", dumps(diag))
    write_text_atomic(out / f"{sid}.obj", obj_text(result.mesh))
    return {"id": sid, "mesh": f"{sid}.obj", "diagnostics": f"{sid}.diagnostics.json"}


def write_reconstruct_manifest(out, cfg: RunConfig, records):
    out = Path(out)
    manifest = {
        "kind": "reconstruct",
        "toolkit_version": __version__,
        "config_hash": cfg.hash(),
        "config": effective_config(cfg),
        "seed": cfg.seed,
        "samples": sorted(records, key=lambda r: r["id"]),
    }
    validate_manifest(manifest, out)
    write_text_atomic(out / MANIFEST, dumps(manifest))
    return manifest


# ---------------------------------------------------------------- eval


def mesh_index(directory) -> dict:
    """id -> OBJ path. A synth output directory maps ids to their fine
    garments; anything else is read as a flat folder of ``<id>.obj``."""
    d = Path(directory)
    if (d / MANIFEST).exists():
        m = json.loads((d / MANIFEST).read_text())
        if m.get("kind") == "synth":
            return {r["id"]: d / r["meshes"]["fine"] for r in m["samples"]}
        return {r["id"]: d / r["mesh"] for r in m["samples"]}
    return {p.stem: p for p in sorted(d.glob("*.obj"))}


class IdMismatch(ValueError):
    pass


def evaluate_dirs(pred_dir, gt_dir, samples, resolution, seed) -> dict:
    pred, gt = mesh_index(pred_dir), mesh_index(gt_dir)
    if set(pred) != set(gt):
        only_p = sorted(set(pred) - set(gt))
        only_g = sorted(set(gt) - set(pred))
        raise IdMismatch(f"id mismatch: only in pred {only_p}, only in gt {only_g}")
    rows = []
    for sid in sorted(pred):
        a, b = load_obj(pred[sid]), load_obj(gt[sid])
        rep = evaluate_pair(a, b, samples, resolution, seed, close_holes(a), close_holes(b))
        rows.append({"id": sid, **json.loads(rep.to_json())})
    keys = ("chamfer", "normal_consistency", "iou")
    mean = {k: float(np.mean([r[k] for r in rows])) for k in keys} if rows else {}
    return {"samples": samples, "resolution": resolution, "seed": seed, "rows": rows, "mean": mean}


def format_table(report: dict) -> str:
    head = ("id", "chamfer", "nc", "iou")
    body = [(r["id"], f"{r['chamfer']:.4f}", f"{r['normal_consistency']:.4f}", f"{r['iou']:.2f}")
            for r in report["rows"]]
    if report["rows"]:
        m = report["mean"]
        body.append(("mean", f"{m['chamfer']:.4f}", f"{m['normal_consistency']:.4f}",
                     f"{m['iou']:.2f}"))
    widths = [max(len(row[i]) for row in [head, *body]) for i in range(4)]

    def fmt(row):
        return "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths)))

    return "\n".join(fmt(r) for r in [head, *body]) + "\n"

