import dataclasses

import numpy as np
import pytest
from oracles import brute_knn
from scipy.spatial.transform import Rotation

from lodgarment.body import N_JOINTS, BodyParams, joints, rodrigues, shape_displacements
from lodgarment.garments import make_garment
from lodgarment.mesh import Mesh
from lodgarment.skinning import (GarmentWeightMap, blend_garment_tpose, garment_weights,
                                 pose_garment)


@pytest.fixture(scope="module")
def skirt():
    return make_garment("skirt", None, 1)


def params(betas=None, pose=None, transl=None):
    return BodyParams(np.zeros(10) if betas is None else betas,
                      np.zeros((N_JOINTS, 3)) if pose is None else pose,
                      np.zeros(3) if transl is None else transl)


def test_coincident_vertex_is_one_hot(body):
    g = Mesh(body.template.vertices[[5, 17, 40]], [[0, 1, 2]])
    w = garment_weights(g, body.template, 4)
    assert np.array_equal(w.indices[:, 0], [5, 17, 40])
    assert np.array_equal(w.values, np.eye(4)[[0, 0, 0]])


def test_k1_is_nearest_one_hot(body, skirt):
    w = garment_weights(skirt, body.template, 1)
    bi, _ = brute_knn(skirt.vertices, body.template.vertices, 1)
    assert np.array_equal(w.indices, bi)
    assert np.all(w.values == 1.0)


def test_k4_rows_match_exhaustive_knn(body, rng):
    pts = rng.uniform(body.template.vertices.min(0), body.template.vertices.max(0), size=(200, 3))
    g = Mesh(pts, np.arange(198).reshape(-1, 3))
    w = garment_weights(g, body.template, 4)
    bi, _ = brute_knn(pts, body.template.vertices, 4)
    assert np.array_equal(np.sort(w.indices, 1), np.sort(bi, 1))
    assert np.allclose(w.values.sum(1), 1.0, atol=1e-6)
    assert (w.values >= 0).all()
    assert np.allclose(w.skinning_weights(body).sum(1), 1.0, atol=1e-5)
    assert np.allclose(w.matrix.toarray().sum(1), 1.0)


def test_far_vertex_stays_finite(body):
    g = Mesh(np.array([[50.0, 0, 0], [50.0, 1, 0], [50.0, 0, 1]]), [[0, 1, 2]])
    w = garment_weights(g, body.template, 4)
    assert np.isfinite(w.values).all() and np.allclose(w.values.sum(1), 1)


def test_k_too_large(body, skirt):
    with pytest.raises(ValueError):
        garment_weights(skirt, Mesh(np.eye(3), [[0, 1, 2]]), 4)


def test_locality_far_body_vertex(body, skirt):
    w = garment_weights(skirt, body.template, 4, bandwidth=0.02)
    used = set(w.indices.ravel())
    far = max(set(range(body.n_vertices)) - used,
              key=lambda i: np.linalg.norm(skirt.vertices - body.template.vertices[i], axis=1).min())
    v = body.template.vertices.copy()
    v[far] += (v[far] - skirt.vertices.mean(0)) * 0.5   # push it further out
    w2 = garment_weights(skirt, body.template.with_vertices(v), 4, bandwidth=0.02)
    assert np.array_equal(w.indices, w2.indices) and np.array_equal(w.values, w2.values)


def test_weight_map_round_trip(body, skirt, tmp_path):
    w = garment_weights(skirt, body.template)
    w.save(tmp_path / "w.json")
    back = GarmentWeightMap.load(tmp_path / "w.json")
    assert np.array_equal(back.indices, w.indices) and np.array_equal(back.values, w.values)
    assert back.k == w.k and back.bandwidth == w.bandwidth


def test_blend_rest_is_identity(body, skirt):
    w = garment_weights(skirt, body.template)
    assert np.array_equal(blend_garment_tpose(skirt, w, body, params()).vertices, skirt.vertices)


def test_blend_on_body_subset_follows_body(body, rng):
    # limb tubes meet at joints, so skip template points shared by two vertices
    _, inv, cnt = np.unique(body.template.vertices, axis=0, return_inverse=True,
                            return_counts=True)
    sub = np.flatnonzero(cnt[inv.ravel()] == 1)[::7][:60]
    g = Mesh(body.template.vertices[sub], np.arange(60).reshape(-1, 3))
    w = garment_weights(g, body.template, 1)
    b = rng.normal(size=10)
    out = blend_garment_tpose(g, w, body, params(b))
    assert np.allclose(out.vertices - g.vertices, shape_displacements(body, b)[sub])


def test_blend_linear_in_beta(body, skirt, rng):
    w = garment_weights(skirt, body.template)
    b = rng.normal(size=10)
    base = blend_garment_tpose(skirt, w, body, params()).vertices
    one = blend_garment_tpose(skirt, w, body, params(b)).vertices
    three = blend_garment_tpose(skirt, w, body, params(3 * b)).vertices
    assert np.allclose(three - base, 3 * (one - base))


def test_pose_rest_equals_blend(body, skirt, rng):
    w = garment_weights(skirt, body.template)
    # blended rest rotations are I up to the rounding of the weight sums
    assert np.allclose(pose_garment(skirt, w, body, params()).vertices, skirt.vertices, atol=1e-14)
    p = params(rng.normal(size=10))
    assert np.allclose(pose_garment(skirt, w, body, p).vertices,
                       blend_garment_tpose(skirt, w, body, p).vertices, atol=1e-14)


def test_root_rotation_is_rigid(body, skirt):
    w = garment_weights(skirt, body.template)
    pose = np.zeros((N_JOINTS, 3))
    pose[0] = [0.1, 0.9, -0.2]
    R = Rotation.from_rotvec(pose[0]).as_matrix()
    J0 = joints(body, np.zeros(10))[0]
    out = pose_garment(skirt, w, body, params(pose=pose)).vertices
    assert np.allclose(out, (skirt.vertices - J0) @ R.T + J0, atol=1e-12)


def test_one_bone_rotation(body):
    # bind every body vertex to the left elbow, then pose only that joint
    W = np.zeros_like(body.weights)
    W[:, 18] = 1.0
    b2 = dataclasses.replace(body, weights=W)
    g = Mesh(body.template.vertices[:30] + 0.01, np.arange(30).reshape(-1, 3))
    w = garment_weights(g, b2.template, 4)
    pose = np.zeros((N_JOINTS, 3))
    pose[18] = [0.0, 0.7, 0.2]
    out = pose_garment(g, w, b2, params(pose=pose)).vertices
    J = joints(b2, np.zeros(10))[18]
    R = rodrigues(pose[18])
    assert np.allclose(out, (g.vertices - J) @ R.T + J, atol=1e-12)


def test_mismatched_map_rejected(body, skirt):
    w = garment_weights(skirt, body.template)
    with pytest.raises(ValueError):
        blend_garment_tpose(Mesh(np.eye(3), [[0, 1, 2]]), w, body, params())
