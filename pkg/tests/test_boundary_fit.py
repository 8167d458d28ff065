import csv

import numpy as np
import pytest
from conftest import tube
from oracles import central_difference

from lodgarment.boundary_fit import (BoundaryStrip, DivergenceError, FitConfig, Regularizers,
                                     boundary_loss, chamfer_term, descend, extract_strip,
                                     fit_boundary_strip)
from lodgarment.garments import make_garment, template_descriptor
from lodgarment.mesh import boundary_loops

REG_ONLY = dict(lambda_c=1.0, lambda_lap=0.0, lambda_edge=0.0, lambda_normal=0.0)


def tube_strip(n=16, rings=4, radius=0.1):
    m = tube(n, rings, radius=radius, height=0.1)
    return m, extract_strip(m, boundary_loops(m)[0].vertices, "bottom")


def jittered_strip(rng, scale=0.01):
    m, s = tube_strip(int(rng.integers(8, 20)))
    return s.with_vertices(s.vertices + rng.normal(scale=scale, size=s.vertices.shape))


def test_extract_strip_contents():
    m, s = tube_strip(12, 4)
    loop = boundary_loops(m)[0].vertices
    assert np.array_equal(s.parent_index[s.loop_local], loop)
    assert len(np.unique(s.parent_index)) == len(s.parent_index)
    # one ring: the loop plus the next ring up
    assert len(s.vertices) == 24
    moved = s.with_vertices(s.vertices + 1.0).apply_to(m)
    changed = np.flatnonzero(np.any(moved.vertices != m.vertices, axis=1))
    assert np.array_equal(np.sort(changed), np.sort(s.parent_index))


def test_strip_rejects_non_injective_map():
    m, s = tube_strip(8, 3)
    bad = s.parent_index.copy()
    bad[1] = bad[0]
    with pytest.raises(ValueError):
        BoundaryStrip(s.vertices, s.faces, bad, s.loop_local, "x")


def test_coincident_target_leaves_only_regularizers():
    _, s = tube_strip()
    cfg = FitConfig()
    total, _, terms = boundary_loss(s, s.loop_positions, cfg)
    assert terms["chamfer"] == 0.0
    reg = cfg.lambda_lap * terms["laplacian"] + cfg.lambda_edge * terms["edge"] \
        + cfg.lambda_normal * terms["normal"]
    assert total == pytest.approx(reg, rel=1e-14)
    assert all(v >= 0 for v in terms.values())


def test_two_point_chamfer_by_hand():
    loop = np.array([[0.0, 0, 0], [1.0, 0, 0]])
    target = np.array([[0.0, 0.5, 0], [3.0, 0, 0]])
    # loop->target: 0.25, 1.25 ; target->loop: 0.25, 4
    val, _ = chamfer_term(loop, target)
    assert val == pytest.approx((0.25 + 1.25) / 2 + (0.25 + 4.0) / 2)
    # the same through boundary_loss on a one-triangle strip
    s = BoundaryStrip(np.array([[0.0, 0, 0], [1.0, 0, 0], [0.5, 1, 0]]), np.array([[0, 1, 2]]),
                      np.array([0, 1, 2]), np.array([0, 1]), "toy")
    total, _, _ = boundary_loss(s, target, FitConfig(**REG_ONLY))
    assert total == pytest.approx(2.875)


@pytest.mark.parametrize("term", ["chamfer", "laplacian", "edge", "normal"])
def test_gradient_matches_finite_differences(term, rng):
    weights = {"chamfer": "lambda_c", "laplacian": "lambda_lap", "edge": "lambda_edge",
               "normal": "lambda_normal"}
    for _ in range(5):
        s = jittered_strip(rng)
        target = s.loop_positions + rng.normal(scale=0.02, size=s.loop_positions.shape)
        if term == "chamfer":
            cfg = FitConfig(**REG_ONLY)
        else:
            kw = dict(lambda_c=1e-300, lambda_lap=0.0, lambda_edge=0.0, lambda_normal=0.0)
            kw[weights[term]] = 1.0
            cfg = FitConfig(**kw)
        X = s.vertices.copy()

        def f(x):
            _, _, t = boundary_loss(s, target, cfg, x)
            return t[term]

        _, grad, _ = boundary_loss(s, target, cfg, X)
        if term != "chamfer":
            grad = grad - cfg.lambda_c * _chamfer_grad(s, target, X)
        fd = central_difference(f, X.copy(), 1e-5)
        assert np.abs(grad - fd).max() / np.abs(fd).max() < 1e-4


def _chamfer_grad(s, target, X):
    g = np.zeros_like(X)
    g[s.loop_local] = chamfer_term(X[s.loop_local], target)[1]
    return g


def test_regularizer_terms_are_scale_aware():
    _, s = tube_strip()
    regs = Regularizers(s.faces, len(s.vertices))
    assert regs.edge(s.vertices)[0] == pytest.approx(regs.edge(s.vertices + 5.0)[0])
    assert regs.normal(s.vertices * 3.0)[0] == pytest.approx(regs.normal(s.vertices)[0])


def test_target_equal_loop_is_a_fixed_point():
    # with the regularizers off the loop is already optimal, so nothing moves
    _, s = tube_strip()
    res = descend(s, s.loop_positions, FitConfig(**REG_ONLY))
    assert np.array_equal(res.strip.vertices, s.vertices)
    assert {row[1] for row in res.trace} == {0.0}


def test_translation_recovery():
    # squared nearest-point Chamfer only sees the shift inside its basin, so
    # the displacement stays below half the loop vertex spacing
    _, s = tube_strip(16, 4, radius=0.1)
    spacing = 2 * np.pi * 0.1 / 16
    u = np.array([2.0, -1.0, 1.5])
    d = 0.4 * spacing * u / np.linalg.norm(u)
    target = s.loop_positions + d
    cfg = FitConfig(lambda_c=1.0, lambda_lap=1e-6, lambda_edge=1e-6, lambda_normal=1e-6,
                    steps=500)
    res = descend(s, target, cfg)
    # the target is an unordered point set, so compare as sets (Hausdorff)
    D = np.linalg.norm(res.strip.loop_positions[:, None] - target[None], axis=-1)
    err = max(D.min(1).max(), D.min(0).max())
    assert err < 1e-3 * np.linalg.norm(d)
    assert len(res.trace) - 1 <= 500


def test_trace_non_increasing_and_csv(tmp_path, rng):
    g = make_garment("skirt", None, 1)
    desc = template_descriptor("skirt", 1)
    loop = desc.loop(g, "hem")
    hem = g.vertices[np.asarray(loop.vertices)]
    target = hem * [1.1, 1.0, 1.1] + rng.normal(scale=0.005, size=hem.shape)
    res = fit_boundary_strip(g, desc, "hem", target, FitConfig(steps=200))
    losses = [row[1] for row in res.trace]
    assert np.all(np.diff(losses) <= 0)
    assert res.final_loss == losses[-1] < losses[0]
    res.write_trace_csv(tmp_path / "trace.csv")
    rows = list(csv.reader(open(tmp_path / "trace.csv")))
    assert rows[0] == ["step", "loss", "step_size"] and len(rows) == len(res.trace) + 1


def test_divergence_reported():
    _, s = tube_strip()
    target = s.loop_positions + 0.05
    with pytest.raises(DivergenceError):
        descend(s, target, FitConfig(step_size=1e8), max_backtracks=1)


def test_fit_config_validation_and_io(tmp_path):
    with pytest.raises(ValueError):
        FitConfig(lambda_c=0.0)
    with pytest.raises(ValueError):
        FitConfig(lambda_lap=-1.0)
    with pytest.raises(ValueError):
        FitConfig(steps=0)
    cfg = FitConfig(lambda_edge=0.3, steps=50)
    (tmp_path / "f.json").write_text(__import__("json").dumps(cfg.to_dict()))
    assert FitConfig.load(tmp_path / "f.json") == cfg


def test_unknown_label():
    g = make_garment("skirt", None, 1)
    with pytest.raises(KeyError):
        fit_boundary_strip(g, template_descriptor("skirt", 1), "left_cuff", np.zeros((4, 3)))
