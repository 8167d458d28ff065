"""Procedural articulated body: template, blendshapes, joints, linear blend skinning.

The body mirrors the structural contract of SMPL (24-joint tree, shape and
pose-corrective bases, joint regressor, per-vertex skinning weights) but is
generated procedurally from capsule-like limb tubes.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import sparse

from . import tensorio
from .mesh import Mesh

JOINT_NAMES = (
    "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee",
    "spine2", "left_ankle", "right_ankle", "spine3", "left_foot", "right_foot",
    "neck", "left_collar", "right_collar", "head", "left_shoulder",
    "right_shoulder", "left_elbow", "right_elbow", "left_wrist", "right_wrist",
    "left_hand", "right_hand",
)
PARENTS = np.array(
    [-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21]
)
N_JOINTS = 24
N_BETAS = 10
N_POSE_FEATURES = 9 * (N_JOINTS - 1)

# T-pose rest joints in metres: y up, x towards the body's left, z forward.
_REST_JOINTS = np.array([
    [0.00, 0.95, 0.00],   # pelvis
    [0.09, 0.87, 0.00], [-0.09, 0.87, 0.00],
    [0.00, 1.05, 0.00],
    [0.10, 0.50, 0.00], [-0.10, 0.50, 0.00],
    [0.00, 1.18, 0.00],
    [0.10, 0.09, 0.00], [-0.10, 0.09, 0.00],
    [0.00, 1.30, 0.00],
    [0.10, 0.03, 0.12], [-0.10, 0.03, 0.12],
    [0.00, 1.50, 0.00],
    [0.07, 1.43, 0.00], [-0.07, 1.43, 0.00],
    [0.00, 1.62, 0.00],
    [0.18, 1.45, 0.00], [-0.18, 1.45, 0.00],
    [0.45, 1.45, 0.00], [-0.45, 1.45, 0.00],
    [0.70, 1.45, 0.00], [-0.70, 1.45, 0.00],
    [0.78, 1.45, 0.00], [-0.78, 1.45, 0.00],
])
# terminal segments hung off leaf joints: joint -> offset of the tube end
_LEAF_TIPS = {10: (0.0, 0.0, 0.08), 11: (0.0, 0.0, 0.08), 15: (0.0, 0.20, 0.0),
              22: (0.08, 0.0, 0.0), 23: (-0.08, 0.0, 0.0)}
_RADIUS = {
    # keyed by owner joint (and child where it matters)
    (0, 1): 0.08, (0, 2): 0.08, (0, 3): 0.14, (3, 6): 0.14, (6, 9): 0.14,
    (9, 12): 0.06, (9, 13): 0.06, (9, 14): 0.06, (12, 15): 0.05,
    (13, 16): 0.06, (14, 17): 0.06, (16, 18): 0.045, (17, 19): 0.045,
    (18, 20): 0.038, (19, 21): 0.038, (20, 22): 0.03, (21, 23): 0.03,
    (1, 4): 0.075, (2, 5): 0.075, (4, 7): 0.05, (5, 8): 0.05,
    (7, 10): 0.04, (8, 11): 0.04,
    (10, -1): 0.035, (11, -1): 0.035, (15, -1): 0.10, (22, -1): 0.028, (23, -1): 0.028,
}
TORSO_SEGMENTS = ((0, 1), (0, 2), (0, 3), (3, 6), (6, 9))  # trunk incl. pelvis-hip tubes


def _segments():
    """(owner, child) pairs; child -1 marks a leaf tip."""
    segs = [(int(PARENTS[c]), c) for c in range(1, N_JOINTS)]
    segs += [(j, -1) for j in sorted(_LEAF_TIPS)]
    return segs


SEGMENTS = _segments()


def rodrigues(rotvecs) -> np.ndarray:
    """Axis-angle (..., 3) to rotation matrices (..., 3, 3)."""
    r = np.asarray(rotvecs, dtype=np.float64)
    shape = r.shape[:-1]
    r = r.reshape(-1, 3)
    theta = np.linalg.norm(r, axis=1)
    small = theta < 1e-8
    K = np.zeros((len(r), 3, 3))
    K[:, 0, 1], K[:, 0, 2] = -r[:, 2], r[:, 1]
    K[:, 1, 0], K[:, 1, 2] = r[:, 2], -r[:, 0]
    K[:, 2, 0], K[:, 2, 1] = -r[:, 1], r[:, 0]
    t2 = theta ** 2
    safe = np.where(small, 1.0, theta)
    # sin(t)/t and (1-cos t)/t^2 with their series below 1e-8
    a = np.where(small, 1.0 - t2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - t2 / 24.0, (1.0 - np.cos(safe)) / safe ** 2)
    R = np.eye(3) + a[:, None, None] * K + b[:, None, None] * (K @ K)
    return R.reshape(*shape, 3, 3)


@dataclass(frozen=True)
class BodyParams:
    betas: np.ndarray
    pose: np.ndarray          # (24, 3) axis-angle, radians
    transl: np.ndarray

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64).ravel()
        pose = np.asarray(self.pose, dtype=np.float64).reshape(-1, 3)
        transl = np.asarray(self.transl, dtype=np.float64).ravel()
        if transl.shape != (3,):
            raise ValueError("translation must have 3 entries")
        if np.any(np.linalg.norm(pose, axis=1) > np.pi + 1e-12):
            raise ValueError("joint rotation angle exceeds pi")
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "pose", pose)
        object.__setattr__(self, "transl", transl)

    @classmethod
    def zeros(cls, n_betas=N_BETAS):
        return cls(np.zeros(n_betas), np.zeros((N_JOINTS, 3)), np.zeros(3))

    def to_dict(self):
        return {"betas": self.betas.tolist(), "pose": self.pose.tolist(), "transl": self.transl.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["betas"], d["pose"], d["transl"])

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True, eq=False)
class BodyModel:
    template: Mesh
    shape_basis: np.ndarray       # (N_B, 3, n_betas)
    pose_basis: np.ndarray        # (N_B, 3, 207)
    regressor: sparse.csr_matrix  # (24, N_B)
    parents: np.ndarray
    weights: np.ndarray           # (N_B, 24)
    segment_of_vertex: np.ndarray  # index into SEGMENTS, for diagnostics

    @property
    def n_vertices(self):
        return self.template.n_vertices

    @property
    def n_betas(self):
        return self.shape_basis.shape[2]

    def save(self, path):
        reg = self.regressor.tocoo()
        tensorio.save(
            path,
            {"kind": "body_model", "n_joints": N_JOINTS, "joint_names": list(JOINT_NAMES)},
            {
                "template_vertices": self.template.vertices,
                "template_faces": self.template.faces,
                "shape_basis": self.shape_basis,
                "pose_basis": self.pose_basis,
                "regressor_rows": reg.row.astype(np.int64),
                "regressor_cols": reg.col.astype(np.int64),
                "regressor_vals": reg.data,
                "parents": self.parents,
                "weights": self.weights,
                "segment_of_vertex": self.segment_of_vertex,
            },
        )

    @classmethod
    def load(cls, path):
        header, t = tensorio.load(path)
        if header.get("kind") != "body_model":
            raise ValueError(f"{path} is not a body model file")
        nb = len(t["template_vertices"])
        reg = sparse.csr_matrix(
            (t["regressor_vals"], (t["regressor_rows"], t["regressor_cols"])), shape=(N_JOINTS, nb)
        )
        return cls(Mesh(t["template_vertices"], t["template_faces"]), t["shape_basis"],
                   t["pose_basis"], reg, t["parents"], t["weights"], t["segment_of_vertex"])


# ---------------------------------------------------------------- construction


def _frame(axis):
    ref = np.array([0.0, 0.0, 1.0]) if abs(axis[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(axis, ref)
    u /= np.linalg.norm(u)
    return u, np.cross(axis, u)


def _segment_ends(joints):
    out = []
    for owner, child in SEGMENTS:
        a = joints[owner]
        b = joints[child] if child >= 0 else joints[owner] + np.array(_LEAF_TIPS[owner])
        out.append((a, b))
    return out


def _body_vertices(joints, radii, n_around, n_rings):
    """Tube vertices for every segment; topology depends only on counts."""
    phi = 2 * np.pi * np.arange(n_around) / n_around
    ts = np.linspace(0.0, 1.0, n_rings)
    verts = []
    for (a, b), r in zip(_segment_ends(joints), radii):
        axis = (b - a) / np.linalg.norm(b - a)
        u, v = _frame(axis)
        circle = r * (np.cos(phi)[:, None] * u + np.sin(phi)[:, None] * v)
        for t in ts:
            verts.append(a + t * (b - a) + circle)
    return np.concatenate(verts)


def _body_faces(n_seg, n_around, n_rings):
    faces = []
    per_seg = n_around * n_rings
    k = np.arange(n_around)
    k1 = (k + 1) % n_around
    for s in range(n_seg):
        base = s * per_seg
        for i in range(n_rings - 1):
            r0 = base + i * n_around
            r1 = r0 + n_around
            # outward normals for a right-handed (u, v, axis) frame
            faces.append(np.stack([r0 + k, r0 + k1, r1 + k1], 1))
            faces.append(np.stack([r0 + k, r1 + k1, r1 + k], 1))
    return np.concatenate(faces)


def _segment_distance(points, a, b):
    ab = b - a
    t = np.clip(((points - a) @ ab) / (ab @ ab), 0.0, 1.0)
    return np.linalg.norm(points - (a + t[:, None] * ab), axis=1)


def _skinning_weights(verts, joints, temperature):
    d = np.full((len(verts), N_JOINTS), np.inf)
    for (owner, _), (a, b) in zip(SEGMENTS, _segment_ends(joints)):
        d[:, owner] = np.minimum(d[:, owner], _segment_distance(verts, a, b))
    logits = -(d - d.min(1, keepdims=True)) / temperature
    w = np.exp(logits)
    w[w < 1e-8] = 0.0
    return w / w.sum(1, keepdims=True)


def _regressor(n_around, n_rings):
    rows, cols = [], []
    per_seg = n_around * n_rings
    for s, (owner, child) in enumerate(SEGMENTS):
        start = s * per_seg
        rows += [owner] * n_around
        cols += list(range(start, start + n_around))
        if child >= 0:
            end = start + (n_rings - 1) * n_around
            rows += [child] * n_around
            cols += list(range(end, end + n_around))
    rows = np.array(rows)
    cols = np.array(cols)
    counts = np.bincount(rows, minlength=N_JOINTS)
    vals = 1.0 / counts[rows]
    n = len(SEGMENTS) * per_seg
    return sparse.csr_matrix((vals, (rows, cols)), shape=(N_JOINTS, n))


def _pca_modes(samples, n_modes):
    """Mean, whitened modes (n_modes, D) with deterministic signs."""
    mean = samples.mean(0)
    X = samples - mean
    _, s, vt = np.linalg.svd(X, full_matrices=False)
    vt = vt[:n_modes]
    s = s[:n_modes]
    signs = np.sign(vt[np.arange(len(vt)), np.argmax(np.abs(vt), axis=1)])
    signs[signs == 0] = 1.0
    vt = vt * signs[:, None]
    scale = s / np.sqrt(max(len(samples) - 1, 1))
    return mean, vt * scale[:, None]


def build_procedural_body(resolution: int = 1, seed: int = 0, n_shape_samples: int = 48,
                          temperature: float = 0.025) -> BodyModel:
    """Deterministic capsule-limb humanoid with an SMPL-style 24-joint tree."""
    if resolution < 1:
        raise ValueError("resolution must be >= 1")
    rng = np.random.default_rng(seed)
    n_around = 8 * resolution
    n_rings = 2 + 2 * resolution
    base_radii = np.array([_RADIUS[s] for s in SEGMENTS])
    template_v = _body_vertices(_REST_JOINTS, base_radii, n_around, n_rings)
    faces = _body_faces(len(SEGMENTS), n_around, n_rings)

    samples = []
    for _ in range(n_shape_samples):
        height = rng.normal(1.0, 0.04)
        width = rng.normal(1.0, 0.05)
        joints = _REST_JOINTS * np.array([width, height, 1.0])
        radii = base_radii * rng.normal(1.0, 0.08, size=len(base_radii)) * width
        samples.append(_body_vertices(joints, radii, n_around, n_rings).ravel())
    samples = np.array(samples)
    mean, modes = _pca_modes(samples, N_BETAS)
    # Template is the un-jittered body; modes come from the jitter population.
    shape_basis = modes.T.reshape(-1, 3, N_BETAS)

    weights = _skinning_weights(template_v, _REST_JOINTS, temperature)
    seg_of_vertex = np.repeat(np.arange(len(SEGMENTS)), n_around * n_rings)
    return BodyModel(
        template=Mesh(template_v, faces),
        shape_basis=shape_basis,
        pose_basis=np.zeros((len(template_v), 3, N_POSE_FEATURES)),
        regressor=_regressor(n_around, n_rings),
        parents=PARENTS.copy(),
        weights=weights,
        segment_of_vertex=seg_of_vertex,
    )


def torso_vertex_mask(model: BodyModel) -> np.ndarray:
    torso = [SEGMENTS.index(s) for s in TORSO_SEGMENTS]
    return np.isin(model.segment_of_vertex, torso)


# ---------------------------------------------------------------- evaluation


def _check_params(model: BodyModel, params: BodyParams):
    if params.betas.shape != (model.n_betas,):
        raise ValueError(f"expected {model.n_betas} shape coefficients, got {params.betas.size}")
    if params.pose.shape != (N_JOINTS, 3):
        raise ValueError(f"expected pose of shape (24, 3), got {params.pose.shape}")


def shape_displacements(model: BodyModel, betas) -> np.ndarray:
    betas = np.asarray(betas, dtype=np.float64)
    if betas.shape != (model.n_betas,):
        raise ValueError(f"expected {model.n_betas} shape coefficients, got {betas.size}")
    return model.shape_basis @ betas


def pose_features(pose) -> np.ndarray:
    R = rodrigues(np.asarray(pose).reshape(N_JOINTS, 3))
    return (R[1:] - np.eye(3)).ravel()


def pose_displacements(model: BodyModel, pose) -> np.ndarray:
    return model.pose_basis @ pose_features(pose)


def t_pose_body(model: BodyModel, params: BodyParams) -> Mesh:
    _check_params(model, params)
    v = model.template.vertices + shape_displacements(model, params.betas) \
        + pose_displacements(model, params.pose)
    return model.template.with_vertices(v)


def joints(model: BodyModel, betas) -> np.ndarray:
    v = model.template.vertices + shape_displacements(model, betas)
    return np.asarray(model.regressor @ v)


def joint_transforms(model: BodyModel, params: BodyParams):
    """World rotations (24,3,3) and translations (24,3) relative to rest pose."""
    _check_params(model, params)
    J = joints(model, params.betas)
    R = rodrigues(params.pose)
    Rg = np.empty_like(R)
    tg = np.empty_like(J)
    for j in range(N_JOINTS):
        p = model.parents[j]
        if p < 0:
            Rg[j] = R[j]
            tg[j] = J[j]
        else:
            Rg[j] = Rg[p] @ R[j]
            tg[j] = Rg[p] @ (J[j] - J[p]) + tg[p]
    # remove rest-pose joint location: x -> Rg (x - J) + tg
    t = tg - np.einsum("jab,jb->ja", Rg, J) + params.transl
    return Rg, t


def _check_weights(weights, n):
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (n, N_JOINTS):
        raise ValueError(f"weights must have shape ({n}, {N_JOINTS}), got {weights.shape}")
    dev = np.abs(weights.sum(1) - 1.0)
    if np.any(dev > 1e-4):
        raise ValueError(f"skinning weight row {int(np.argmax(dev))} does not sum to 1")
    return weights


def blended_transforms(model, params, weights):
    Rg, t = joint_transforms(model, params)
    M = np.einsum("nj,jab->nab", weights, Rg)
    tb = weights @ t
    return M, tb


def forward_lbs(rest: Mesh, model: BodyModel, params: BodyParams, weights) -> Mesh:
    weights = _check_weights(weights, rest.n_vertices)
    M, tb = blended_transforms(model, params, weights)
    return rest.with_vertices(np.einsum("nab,nb->na", M, rest.vertices) + tb)


class SingularSkinningError(ValueError):
    pass


def inverse_lbs(posed: Mesh, model: BodyModel, params: BodyParams, weights) -> Mesh:
    weights = _check_weights(weights, posed.n_vertices)
    M, tb = blended_transforms(model, params, weights)
    det = np.linalg.det(M)
    bad = np.flatnonzero(np.abs(det) < 1e-9)
    if len(bad):
        raise SingularSkinningError(
            f"blended skinning transform of vertex {int(bad[0])} is singular (det={det[bad[0]]:.3g})"
        )
    x = np.linalg.solve(M, (posed.vertices - tb)[..., None])[..., 0]
    return posed.with_vertices(x)
