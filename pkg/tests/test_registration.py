import numpy as np
import pytest
from conftest import icosphere

from lodgarment.boundary_fit import extract_strip
from lodgarment.config import RunConfig, SynthConfig
from lodgarment.garments import make_garment, template_descriptor
from lodgarment.mesh import BoundaryLoop, Mesh, boundary_loops, check_topology
from lodgarment.metrics import surface_chamfer
from lodgarment.pipeline import build_assets, oracle_inputs
from lodgarment.registration import (EmptyCorrespondenceError, LandmarkSet, NicpConfig,
                                     NicpProblem, NicpState, ReconstructConfig,
                                     SingularSystemError, StageError, align_loop,
                                     build_landmarks, nonrigid_icp, reconstruct)


def ring(n=64, R=1.0, noise=0.0, seed=0):
    t = np.arange(n) * 2 * np.pi / n
    r = R * (1 + noise * np.random.default_rng(seed).standard_normal(n))
    return np.stack([r * np.cos(t), r * np.sin(t), 0.1 * np.sin(3 * t)], 1)


def loop_of(points):
    m = Mesh(np.vstack([points, points.mean(0)]),
             [[i, (i + 1) % len(points), len(points)] for i in range(len(points))])
    return BoundaryLoop(tuple(range(len(points))), m)


@pytest.fixture(scope="module")
def dress():
    g = make_garment("dress", None, 2)
    return g, template_descriptor("dress", 2)


# ---------------------------------------------------------------- landmarks


def test_landmarks_identity_has_zero_displacement():
    pts = ring(32)
    lm = build_landmarks({"hem": loop_of(pts)}, {"hem": pts})
    assert len(lm) == 32
    assert np.abs(lm.points - pts[lm.indices]).max() < 1e-12
    assert lm.loops["hem"].shift == 0 and not lm.loops["hem"].flipped


@pytest.mark.parametrize("k", [1, 7, 20])
def test_landmarks_recover_cyclic_shift(k):
    pts = ring(32, noise=0.05, seed=k)
    target = np.roll(pts, k, axis=0)
    # exhaustive phase oracle over vertex origins
    costs = [np.linalg.norm(pts - np.roll(target, -s, axis=0), axis=1).sum() for s in range(32)]
    assert int(np.argmin(costs)) == k
    lm = build_landmarks({"hem": loop_of(pts)}, {"hem": target})
    assert lm.loops["hem"].shift == k and not lm.loops["hem"].flipped
    assert np.abs(lm.points - pts).max() < 1e-12


def test_landmarks_detect_reversed_orientation():
    pts = ring(24, noise=0.03, seed=3)
    lm = build_landmarks({"hem": loop_of(pts)}, {"hem": pts[::-1]})
    assert lm.loops["hem"].flipped
    assert np.abs(lm.points - pts).max() < 1e-12


def test_landmarks_resampling_contract():
    pts = ring(64, noise=0.002, seed=1)
    lm = build_landmarks({"hem": loop_of(pts)}, {"hem": pts * 1.05}, samples_per_loop=8)
    loop = lm.loops["hem"]
    assert len(loop.indices) == 8
    gaps = np.diff(np.concatenate([loop.params, [loop.params[0] + 1.0]]))
    assert np.abs(gaps / (1 / 8) - 1).max() < 0.05
    assert np.all(np.diff(loop.params) > 0)


def test_landmarks_label_mismatch_and_minimum():
    pts = ring(16)
    with pytest.raises(ValueError, match="label mismatch"):
        build_landmarks({"hem": loop_of(pts)}, {"neck": pts})
    with pytest.raises(ValueError, match="< 8"):
        build_landmarks({"hem": loop_of(pts)}, {"hem": pts}, samples_per_loop=6)


def test_align_loop_against_denser_target():
    src = ring(16)
    dense = ring(160)
    sel, pts, params, shift, flipped = align_loop(src, dense)
    # arc length of the coarse polygon differs slightly from the fine one
    assert np.abs(pts - src).max() < 2e-3 and shift == 0


# ---------------------------------------------------------------- NICP


def identity_landmarks(mesh, desc):
    loops = desc.loops(mesh)
    return LandmarkSet.from_pairs(loops, {k: lp.positions() for k, lp in loops.items()})


def test_nicp_identity(dress):
    g, desc = dress
    out, diag = nonrigid_icp(g, g, identity_landmarks(g, desc))
    assert np.abs(out.vertices - g.vertices).max() < 1e-6
    assert np.array_equal(out.faces, g.faces)


def rigid(g, rng):
    from scipy.spatial.transform import Rotation
    R = Rotation.from_rotvec([0.05, -0.08, 0.03]).as_matrix()
    c = g.vertices.mean(0)
    return g.with_vertices((g.vertices - c) @ R.T + c + [0.01, -0.02, 0.015])


def test_nicp_rigid_target(dress, rng):
    g, desc = dress
    tgt = rigid(g, rng)
    loops = desc.loops(g)
    lm = LandmarkSet.from_pairs(loops, {k: tgt.vertices[list(lp.vertices)] for k, lp in loops.items()})
    out, diag = nonrigid_icp(g, tgt, lm)
    assert np.sqrt(surface_chamfer(out, tgt, 20_000, 0)) < 1e-4 * g.bbox_diagonal()
    for lvl in diag["levels"]:
        assert np.all(np.diff(lvl["trace"]) <= 1e-12 * max(1.0, lvl["trace"][0]))


def test_nicp_smooth_deformation(dress):
    g, desc = dress
    v = g.vertices
    amp = 0.03 * g.bbox_diagonal()
    off = amp * np.stack([np.sin(3 * v[:, 1]), 0.5 * np.cos(2 * v[:, 0] + v[:, 1]),
                          np.sin(2 * v[:, 2] + 1.0)], 1)
    tgt = g.with_vertices(v + off)
    loops = desc.loops(g)
    lm = LandmarkSet.from_pairs(loops, {k: tgt.vertices[list(lp.vertices)] for k, lp in loops.items()})
    before = surface_chamfer(g, tgt, 20_000, 0)
    out, diag = nonrigid_icp(g, tgt, lm)
    assert surface_chamfer(out, tgt, 20_000, 0) < 0.1 * before
    assert boundary_loops(out) and len(boundary_loops(out)) == len(desc.boundary_labels)
    for lvl in diag["levels"]:
        assert np.all(np.diff(lvl["trace"]) <= 1e-12 * max(1.0, lvl["trace"][0]))


def test_stiffness_monotonicity_fixed_correspondences(rng):
    src = icosphere(2)
    prob = NicpProblem(src)
    targets = prob.V + rng.normal(scale=0.02, size=prob.V.shape)
    w = np.ones(prob.n)
    cfg = NicpConfig(lambda_b=0.0)
    lds = []
    for s in np.geomspace(1e3, 1e-3, 13):
        X = prob.solve(w, targets, s, cfg)
        lds.append(prob.terms(X, w, targets)[0])
    assert np.all(np.diff(lds) <= 1e-12)


def test_singular_system_reported():
    src = icosphere(1)
    prob = NicpProblem(src)
    with pytest.raises(SingularSystemError, match="stiffness"):
        prob.solve(np.zeros(prob.n), prob.V, 5.0, NicpConfig(lambda_b=0.0), level=3)


def test_empty_correspondences():
    src = icosphere(1)
    far = src.with_vertices(src.vertices + 100.0)
    with pytest.raises(EmptyCorrespondenceError):
        nonrigid_icp(src, far)


def test_config_validation():
    with pytest.raises(ValueError):
        NicpConfig(stiffness=[1.0, 2.0])
    with pytest.raises(ValueError):
        NicpConfig(stiffness=[1.0, 0.0])
    cfg = NicpConfig(stiffness=[10, 1], lambda_b=3)
    assert NicpConfig.from_dict(cfg.to_dict()) == cfg
    st = NicpState.initial(5, cfg)
    assert st.X.shape == (20, 3) and np.array_equal(st.X[:3], np.eye(3))


# ---------------------------------------------------------------- pipeline


@pytest.fixture(scope="module")
def case():
    cfg = RunConfig(category="skirt", resolution=1, seed=4,
                    synth=SynthConfig(n_style=12, n_components=8, n_detail=2, n_deform=2))
    cfg.reconstruct.field_resolution = 64
    assets = build_assets(cfg)
    return cfg, oracle_inputs(assets, cfg, 0)


def test_reconstruct_improves_on_posed_coarse(case):
    cfg, (synth, inputs) = case
    res = reconstruct(inputs, cfg.reconstruct)
    check_topology(res.mesh, synth.coarse)
    assert len(boundary_loops(res.mesh)) == len(inputs.descriptor.boundary_labels)
    gt = synth.fine
    assert surface_chamfer(res.mesh, gt, 20_000, 0) < surface_chamfer(res.posed, gt, 20_000, 0)
    assert set(res.diagnostics["stages"]) == {"pose", "implicit", "boundary", "fit", "landmarks",
                                              "registration"}
    again = reconstruct(inputs, cfg.reconstruct)
    assert np.array_equal(again.mesh.vertices, res.mesh.vertices)


def test_reconstruct_tags_failures(case):
    cfg, (_, inputs) = case
    from dataclasses import replace
    missing = replace(inputs, tubes={k: v for k, v in inputs.tubes.items() if k != "hem"})
    with pytest.raises(StageError) as exc:
        reconstruct(missing, cfg.reconstruct)
    assert exc.value.stage == "boundary-stage"
    wrong = replace(inputs, coarse=make_garment("dress", None, 1))
    with pytest.raises(StageError) as exc:
        reconstruct(wrong, cfg.reconstruct)
    assert exc.value.stage == "pose-stage"


def test_reconstruct_config_round_trip():
    cfg = ReconstructConfig(field_resolution=40, samples_per_loop=12)
    back = ReconstructConfig.from_dict(cfg.to_dict())
    assert back == cfg
