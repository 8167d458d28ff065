import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from lodgarment import pipeline
from lodgarment.cli import EXIT_CODES, main
from lodgarment.config import RunConfig, resolve
from lodgarment.fields import read_point_records
from lodgarment.mesh import load_obj

SMALL = {
    "category": "skirt",
    "resolution": 1,
    "synth": {"n_style": 12, "n_components": 8, "n_detail": 2, "n_deform": 2},
    "reconstruct": {"field_resolution": 64},
    "metrics": {"samples": 4000, "resolution": 32},
}


def tree(root):
    root = Path(root)
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def cfg_file(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "small.json"
    p.write_text(json.dumps(SMALL))
    return p


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory, cfg_file):
    out = tmp_path_factory.mktemp("synth") / "a"
    assert main(["synth", "--config", str(cfg_file), "--seed", "3", "--n", "2", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def recon_dir(tmp_path_factory, cfg_file, synth_dir):
    out = tmp_path_factory.mktemp("recon") / "r"
    rc = main(["reconstruct", "--config", str(cfg_file), "--seed", "3", "--input", str(synth_dir),
               "--id", "sample_00000", "--out", str(out)])
    assert rc == 0
    return out


def test_config_precedence(cfg_file):
    cfg = resolve(cfg_file, seed=9, workers=None)
    assert cfg.seed == 9 and cfg.category == "skirt" and cfg.workers == 1
    assert cfg.synth.n_style == 12 and cfg.synth.k == 4
    assert RunConfig.from_dict(cfg.to_dict()).hash() == cfg.hash()
    other = resolve(cfg_file, seed=9, workers=4)
    assert other.hash() == cfg.hash()          # worker count never changes outputs
    with pytest.raises(ValueError, match="unknown config keys"):
        RunConfig.from_dict({"colour": "red"})
    with pytest.raises(ValueError):
        resolve(None, category="hat")


def test_synth_manifest(synth_dir):
    manifest, root = pipeline.load_manifest(synth_dir)
    assert manifest["seed"] == 3 and len(manifest["samples"]) == 2
    assert manifest["config"]["category"] == "skirt" and "workers" not in manifest["config"]
    assert [r["seed"] for r in manifest["samples"]] == [3, 4]
    for r in manifest["samples"]:
        for k in ("coarse", "detailed", "fine"):
            assert (root / r["meshes"][k]).exists()
        assert (root / r["provenance"]).exists() and (root / r["body_params"]).exists()


def test_synth_is_deterministic(tmp_path, cfg_file, synth_dir):
    out = tmp_path / "b"
    assert main(["synth", "--config", str(cfg_file), "--seed", "3", "--n", "2", "--out", str(out)]) == 0
    assert tree(out) == tree(synth_dir)


def test_synth_parallel_matches_serial(tmp_path, cfg_file, synth_dir):
    out = tmp_path / "par"
    assert main(["synth", "--config", str(cfg_file), "--seed", "3", "--n", "2", "--workers", "2",
                 "--out", str(out)]) == 0
    assert tree(out) == tree(synth_dir)


def test_synth_resume_rewrites_nothing(cfg_file, synth_dir):
    before = {p: p.stat().st_mtime_ns for p in synth_dir.rglob("*") if p.is_file()}
    assert main(["synth", "--config", str(cfg_file), "--seed", "3", "--n", "2", "--out",
                 str(synth_dir)]) == 0
    after = {p: p.stat().st_mtime_ns for p in synth_dir.rglob("*") if p.is_file()}
    assert before == after


def test_synth_refuses_other_config(cfg_file, synth_dir, capsys):
    rc = main(["synth", "--config", str(cfg_file), "--seed", "5", "--n", "1", "--out", str(synth_dir)])
    assert rc != 0
    assert "different configuration" in capsys.readouterr().err


def test_provenance_replay_bit_identical(synth_dir):
    manifest, root = pipeline.load_manifest(synth_dir)
    for r in manifest["samples"]:
        replayed = pipeline.replay_sample(manifest, root, r["id"])
        on_disk = (root / r["meshes"]["fine"]).read_text()
        from lodgarment.mesh import obj_text
        assert obj_text(replayed) == on_disk


def test_reconstruct_outputs(recon_dir):
    m = json.loads((recon_dir / "manifest.json").read_text())
    assert m["kind"] == "reconstruct" and [r["id"] for r in m["samples"]] == ["sample_00000"]
    mesh = load_obj(recon_dir / "sample_00000.obj")
    diag = json.loads((recon_dir / "sample_00000.diagnostics.json").read_text())
    assert diag["id"] == "sample_00000" and "registration" in diag["stages"]
    assert mesh.n_vertices > 0


def test_reconstruct_is_deterministic(tmp_path, cfg_file, synth_dir, recon_dir):
    out = tmp_path / "r2"
    assert main(["reconstruct", "--config", str(cfg_file), "--seed", "3", "--input", str(synth_dir),
                 "--id", "sample_00000", "--out", str(out)]) == 0
    assert tree(out) == tree(recon_dir)


def test_reconstruct_from_bundle_dir(tmp_path, cfg_file, synth_dir, recon_dir):
    out = tmp_path / "rb"
    bundle = synth_dir / "samples" / "sample_00000"
    assert main(["reconstruct", "--config", str(cfg_file), "--seed", "3", "--input", str(bundle),
                 "--out", str(out)]) == 0
    assert (out / "sample_00000.obj").read_bytes() == (recon_dir / "sample_00000.obj").read_bytes()


def test_missing_boundary_field(tmp_path, cfg_file, synth_dir, capsys):
    import shutil
    src = tmp_path / "copy"
    shutil.copytree(synth_dir, src)
    (src / "samples" / "sample_00001" / "tubes" / "hem.json").unlink()
    out = tmp_path / "fail"
    rc = main(["reconstruct", "--config", str(cfg_file), "--seed", "3",
               "--input", str(src / "samples" / "sample_00001"), "--out", str(out)])
    assert rc == EXIT_CODES["boundary-stage"]
    assert "boundary-stage" in capsys.readouterr().err
    assert not list(out.glob("*.obj"))


def test_eval_identity(tmp_path, cfg_file, synth_dir):
    out = tmp_path / "ev"
    assert main(["eval", "--config", str(cfg_file), "--pred", str(synth_dir), "--gt", str(synth_dir),
                 "--out", str(out)]) == 0
    rep = json.loads((out / "eval.json").read_text())
    for r in rep["rows"]:
        assert r["chamfer"] == 0.0 and r["iou"] == 100.0
        assert abs(r["normal_consistency"] - 1.0) < 1e-6
    txt = (out / "eval.txt").read_text().splitlines()
    assert txt[0].split() == ["id", "chamfer", "nc", "iou"] and txt[-1].startswith("mean")
    assert len({len(line) for line in txt}) == 1     # aligned columns


def test_eval_mean_is_row_average(tmp_path, cfg_file, synth_dir, recon_dir):
    # predictions: reconstructed sample_00000 plus the coarse mesh for sample_00001
    pred = tmp_path / "pred"
    pred.mkdir()
    (pred / "sample_00000.obj").write_bytes((recon_dir / "sample_00000.obj").read_bytes())
    (pred / "sample_00001.obj").write_bytes(
        (synth_dir / "samples" / "sample_00001" / "coarse.obj").read_bytes())
    rep = pipeline.evaluate_dirs(pred, synth_dir, 4000, 32, 42)
    for k in ("chamfer", "normal_consistency", "iou"):
        assert rep["mean"][k] == pytest.approx(sum(r[k] for r in rep["rows"]) / 2)


def test_eval_halved_samples_stable(synth_dir):
    root = synth_dir / "samples" / "sample_00000"
    from lodgarment.metrics import chamfer_distance
    a, b = load_obj(root / "coarse.obj"), load_obj(root / "fine.obj")
    full = chamfer_distance(a, b, 40_000, 42, normalize=True)
    half = chamfer_distance(a, b, 20_000, 42, normalize=True)
    assert abs(half - full) / full < 0.05


def test_eval_id_mismatch(tmp_path, cfg_file, synth_dir, capsys):
    pred = tmp_path / "p"
    pred.mkdir()
    (pred / "sample_00000.obj").write_bytes((synth_dir / "samples" / "sample_00000" / "fine.obj")
                                            .read_bytes())
    (pred / "extra.obj").write_bytes((pred / "sample_00000.obj").read_bytes())
    rc = main(["eval", "--config", str(cfg_file), "--pred", str(pred), "--gt", str(synth_dir)])
    assert rc == EXIT_CODES["eval-stage"]
    err = capsys.readouterr().err
    assert "extra" in err and "sample_00001" in err


def test_sample_field(tmp_path, synth_dir):
    out = tmp_path / "pts.bin"
    rc = main(["sample-field", "--mesh", str(synth_dir / "samples/sample_00000/fine.obj"),
               "--near", "300", "--uniform", "200", "--seed", "1", "--out", str(out)])
    assert rc == 0
    pts, lab = read_point_records(out)
    assert pts.shape == (500, 3) and set(np.unique(lab)) <= {0, 1}


def test_fit_boundary_command(tmp_path, synth_dir):
    s = synth_dir / "samples" / "sample_00000"
    out = tmp_path / "fit"
    rc = main(["fit-boundary", "--mesh", str(s / "coarse.obj"),
               "--descriptor", str(synth_dir / "assets" / "descriptor.json"), "--label", "hem",
               "--target", str(s / "tubes" / "hem.json"), "--out", str(out)])
    assert rc == 0
    assert (out / "hem_fitted.obj").exists()
    rows = (out / "hem_trace.csv").read_text().splitlines()
    assert rows[0] == "step,loss,step_size" and len(rows) > 2


def test_register_command(tmp_path, synth_dir):
    s = synth_dir / "samples" / "sample_00000"
    out = tmp_path / "reg"
    rc = main(["register", "--source", str(s / "detailed.obj"), "--target", str(s / "detailed.obj"),
               "--out", str(out)])
    assert rc == 0
    a, b = load_obj(s / "detailed.obj"), load_obj(out / "detailed_registered.obj")
    assert np.abs(a.vertices - b.vertices).max() < 2e-6
    assert main(["register", "--source", str(s / "detailed.obj"), "--target", str(s / "fine.obj"),
                 "--landmarks", "x.json", "--out", str(out)]) == EXIT_CODES["usage"]


def test_usage_errors():
    with pytest.raises(SystemExit) as exc:
        main(["synth", "--n", "1"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit):
        main([])


def test_console_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "lodgarment.cli", "--help"], capture_output=True,
                       text=True)
    assert r.returncode == 0 and "reconstruct" in r.stdout
