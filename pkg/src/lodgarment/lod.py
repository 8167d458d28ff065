"""Levels-of-detail garment composition.

Local detail transfer (coarse + fine - coarse'), deformation offsets through
inverse skinning, and re-posing through forward skinning, plus the procedural
detail and deformation banks that stand in for hand-made databases.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import garments, pca
from .body import N_JOINTS, BodyModel, BodyParams, forward_lbs, inverse_lbs
from .mesh import Mesh, check_topology, vertex_normals
from .skinning import GarmentWeightMap, blend_garment_tpose, garment_weights


@dataclass(frozen=True)
class DetailPair:
    coarse: Mesh
    fine: Mesh

    def __post_init__(self):
        check_topology(self.coarse, self.fine)


@dataclass(frozen=True)
class DeformationPair:
    tpose: Mesh
    deformed: Mesh
    params: BodyParams

    def __post_init__(self):
        check_topology(self.tpose, self.deformed)


def transfer_detail(base: Mesh, pair: DetailPair) -> Mesh:
    check_topology(base, pair.coarse, pair.fine)
    return base.with_vertices(base.vertices + (pair.fine.vertices - pair.coarse.vertices))


def deformation_weights(pair: DeformationPair, body: BodyModel, k=4) -> GarmentWeightMap:
    """KNN weights of the T-pose garment against the mean-shape T-pose body."""
    return garment_weights(pair.tpose, body.template, k)


def deformation_offsets(pair: DeformationPair, body: BodyModel, garment_skinning) -> np.ndarray:
    """Rest-space offsets T = LBS^-1(deformed) - tpose."""
    unposed = inverse_lbs(pair.deformed, body, pair.params, garment_skinning)
    return unposed.vertices - pair.tpose.vertices


def apply_deformation(detailed: Mesh, offsets, body: BodyModel, params: BodyParams,
                      garment_skinning) -> Mesh:
    offsets = np.asarray(offsets, dtype=np.float64)
    if offsets.shape != detailed.vertices.shape:
        raise ValueError(f"offsets shape {offsets.shape} != {detailed.vertices.shape}")
    return forward_lbs(detailed.with_vertices(detailed.vertices + offsets), body, params,
                       garment_skinning)


# ---------------------------------------------------------------- banks


def wrinkle_field(mesh: Mesh, rng: np.random.Generator, amplitude=0.006, n_waves=3) -> np.ndarray:
    """Sum of sinusoids along the vertex normals. Waves run along height
    (ridges parallel to hems and cuffs) and around the body axis."""
    v = mesh.vertices
    n = vertex_normals(mesh)
    theta = np.arctan2(v[:, 2], v[:, 0])
    h = np.zeros(len(v))
    for _ in range(n_waves):
        f_y = rng.uniform(15.0, 40.0)
        f_t = rng.integers(4, 12)
        ph = rng.uniform(0, 2 * np.pi, size=2)
        mix = rng.uniform(0.3, 1.0)
        h += mix * np.sin(f_y * v[:, 1] + ph[0]) + (1 - mix) * np.sin(f_t * theta + ph[1])
    h *= amplitude / n_waves
    return h[:, None] * n


def make_detail_bank(category, n, seed, resolution=1, amplitude=0.006):
    rng = np.random.default_rng(seed)
    bank = []
    for _ in range(n):
        coarse = garments.make_garment(category, garments.random_style(category, rng), resolution)
        fine = coarse.with_vertices(coarse.vertices + wrinkle_field(coarse, rng, amplitude))
        bank.append(DetailPair(coarse, fine))
    return bank


def random_pose(rng: np.random.Generator, scale=1.0) -> np.ndarray:
    """Mild, garment-friendly pose: arms lowered, light leg and spine motion."""
    pose = np.zeros((N_JOINTS, 3))
    pose[0] = [0.0, rng.uniform(-0.3, 0.3), 0.0]
    down = rng.uniform(0.3, 0.9, size=2) * scale
    pose[16] = [0.0, 0.0, -down[0]]      # left shoulder, about z
    pose[17] = [0.0, 0.0, down[1]]
    pose[18] = [0.0, rng.uniform(-0.4, 0.0) * scale, 0.0]
    pose[19] = [0.0, rng.uniform(0.0, 0.4) * scale, 0.0]
    pose[1] = [rng.uniform(-0.25, 0.15) * scale, 0.0, rng.uniform(0.0, 0.08) * scale]
    pose[2] = [rng.uniform(-0.25, 0.15) * scale, 0.0, -rng.uniform(0.0, 0.08) * scale]
    pose[4] = [rng.uniform(0.0, 0.3) * scale, 0.0, 0.0]
    pose[5] = [rng.uniform(0.0, 0.3) * scale, 0.0, 0.0]
    for j in (3, 6, 9):
        pose[j] = rng.normal(scale=0.05 * scale, size=3)
    return pose


def swing_field(mesh: Mesh, rng: np.random.Generator, amplitude=0.05) -> np.ndarray:
    """Smooth low-frequency offsets growing with distance below the top:
    a horizontal sway plus a gentle flare."""
    v = mesh.vertices
    top, bot = v[:, 1].max(), v[:, 1].min()
    t = (top - v[:, 1]) / max(top - bot, 1e-9)
    ang = rng.uniform(0, 2 * np.pi)
    sway = np.array([np.cos(ang), 0.0, np.sin(ang)]) * rng.uniform(0.5, 1.0)
    radial = np.stack([v[:, 0], np.zeros(len(v)), v[:, 2]], 1)
    radial /= np.maximum(np.linalg.norm(radial, axis=1, keepdims=True), 1e-9)
    flare = rng.uniform(0.0, 0.5)
    wave = np.sin(2 * np.arctan2(v[:, 2], v[:, 0]) + rng.uniform(0, 2 * np.pi))
    return amplitude * (t ** 2)[:, None] * (sway + flare * radial * (1 + 0.3 * wave)[:, None])


def make_deformation_bank(category, body: BodyModel, n, seed, resolution=1, amplitude=0.05,
                          beta_scale=0.5):
    rng = np.random.default_rng(seed)
    bank = []
    for _ in range(n):
        style = garments.random_style(category, rng)
        g = garments.make_garment(category, style, resolution)
        betas = rng.normal(scale=beta_scale, size=body.n_betas)
        params = BodyParams(betas, random_pose(rng), np.zeros(3))
        wmap = garment_weights(g, body.template)
        rest = BodyParams(betas, np.zeros((N_JOINTS, 3)), np.zeros(3))
        tpose = blend_garment_tpose(g, wmap, body, rest)
        swung = tpose.with_vertices(tpose.vertices + swing_field(tpose, rng, amplitude))
        pair_w = garment_weights(tpose, body.template).skinning_weights(body)
        deformed = forward_lbs(swung, body, params, pair_w)
        bank.append(DeformationPair(tpose, deformed, params))
    return bank


# ---------------------------------------------------------------- synthesis


@dataclass
class SynthResult:
    coarse: Mesh      # M_C
    detailed: Mesh    # M_L
    fine: Mesh        # M_D
    provenance: dict


def compose(style: pca.GarmentBlendshapeModel, detail_bank, deform_bank, body: BodyModel,
            alpha, detail_index: int, deform_index: int, k: int = 4) -> SynthResult:
    coarse = pca.evaluate(style, alpha)
    detail = detail_bank[detail_index]
    deform = deform_bank[deform_index]
    detailed = transfer_detail(coarse, detail)
    skin = deformation_weights(deform, body, k).skinning_weights(body)
    offsets = deformation_offsets(deform, body, skin)
    fine = apply_deformation(detailed, offsets, body, deform.params, skin)
    prov = {
        "alpha": [float(a) for a in alpha],
        "detail_index": int(detail_index),
        "deform_index": int(deform_index),
        "body_params": deform.params.to_dict(),
        "k": int(k),
    }
    return SynthResult(coarse, detailed, fine, prov)


def synth_sample(style: pca.GarmentBlendshapeModel, detail_bank, deform_bank,
                 body: BodyModel, seed: int, k: int = 4) -> SynthResult:
    """Sample a style from the unit ball, one detail pair and one deformation
    pair, and compose them. All intermediate meshes are kept."""
    if not detail_bank or not deform_bank:
        raise ValueError("detail and deformation banks must be non-empty")
    rng = np.random.default_rng(seed)
    alpha = pca.sample_prior(style, rng)
    di = int(rng.integers(len(detail_bank)))
    fi = int(rng.integers(len(deform_bank)))
    res = compose(style, detail_bank, deform_bank, body, alpha, di, fi, k)
    res.provenance["seed"] = int(seed)
    return res


def synth_fine_garment(style, detail_bank, deform_bank, body, seed: int, k: int = 4):
    res = synth_sample(style, detail_bank, deform_bank, body, seed, k)
    return res.fine, res.provenance


def replay(provenance: dict, style, detail_bank, deform_bank, body) -> SynthResult:
    return compose(style, detail_bank, deform_bank, body, np.array(provenance["alpha"]),
                   provenance["detail_index"], provenance["deform_index"], provenance["k"])
