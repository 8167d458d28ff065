"""Transfer of body blendshapes and skinning weights to a garment via KNN."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

from . import tensorio
from .body import BodyModel, BodyParams, forward_lbs, pose_displacements, shape_displacements
from .mesh import Mesh, knn_vertices

DEFAULT_K = 4


@dataclass(frozen=True, eq=False)
class GarmentWeightMap:
    """Row-stochastic garment-to-body weights with ``k`` entries per row."""

    indices: np.ndarray   # (N_G, k) body vertex ids
    values: np.ndarray    # (N_G, k)
    n_body: int
    k: int
    bandwidth: float

    @property
    def matrix(self) -> sparse.csr_matrix:
        n, k = self.indices.shape
        rows = np.repeat(np.arange(n), k)
        return sparse.csr_matrix((self.values.ravel(), (rows, self.indices.ravel())),
                                 shape=(n, self.n_body))

    def apply(self, per_body_vertex) -> np.ndarray:
        """w @ X for a per-body-vertex array X of shape (N_B, ...)."""
        x = np.asarray(per_body_vertex)
        return np.einsum("nk,nk...->n...", self.values, x[self.indices])

    def skinning_weights(self, body: BodyModel) -> np.ndarray:
        return self.apply(body.weights)

    def save(self, path):
        n, k = self.indices.shape
        tensorio.save(path, {"kind": "garment_weight_map", "n_body": self.n_body, "k": self.k,
                             "bandwidth": self.bandwidth, "n_garment": n},
                      {"rows": np.repeat(np.arange(n), k), "cols": self.indices.ravel(),
                       "vals": self.values.ravel()})

    @classmethod
    def load(cls, path):
        h, t = tensorio.load(path)
        if h.get("kind") != "garment_weight_map":
            raise ValueError(f"{path} is not a weight map file")
        n, k = h["n_garment"], h["k"]
        return cls(t["cols"].reshape(n, k), t["vals"].reshape(n, k), h["n_body"], k, h["bandwidth"])


def mean_nn_spacing(points) -> float:
    d, _ = cKDTree(points).query(points, k=2)
    return float(d[:, 1].mean())


def garment_weights(garment: Mesh, body: Mesh, k: int = DEFAULT_K,
                    bandwidth: float | None = None) -> GarmentWeightMap:
    """Gaussian-weighted k nearest body vertices per garment vertex; a
    garment vertex that coincides with a body vertex binds to it alone."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > body.n_vertices:
        raise ValueError(f"k={k} exceeds body vertex count {body.n_vertices}")
    if bandwidth is None:
        bandwidth = mean_nn_spacing(body.vertices)
    idx, dist = knn_vertices(garment.vertices, body.vertices, k)
    # subtracting the nearest distance keeps far garment vertices finite;
    # the shift cancels in the normalisation
    d0 = dist[:, :1]
    w = np.exp(-(dist ** 2 - d0 ** 2) / bandwidth ** 2)
    coincident = dist[:, 0] <= 1e-12
    w[coincident] = 0.0
    w[coincident, 0] = 1.0
    w /= w.sum(1, keepdims=True)
    return GarmentWeightMap(idx, w, body.n_vertices, k, float(bandwidth))


def _check(garment: Mesh, wmap: GarmentWeightMap, body: BodyModel):
    if wmap.indices.shape[0] != garment.n_vertices:
        raise ValueError("weight map rows do not match garment vertex count")
    if wmap.n_body != body.n_vertices:
        raise ValueError("weight map columns do not match body vertex count")


def blend_garment_tpose(garment: Mesh, wmap: GarmentWeightMap, body: BodyModel,
                        params: BodyParams) -> Mesh:
    _check(garment, wmap, body)
    disp = shape_displacements(body, params.betas) + pose_displacements(body, params.pose)
    return garment.with_vertices(garment.vertices + wmap.apply(disp))


def pose_garment(garment: Mesh, wmap: GarmentWeightMap, body: BodyModel,
                 params: BodyParams) -> Mesh:
    tpose = blend_garment_tpose(garment, wmap, body, params)
    return forward_lbs(tpose, body, params, wmap.skinning_weights(body))
