"""Statistical garment model: PCA over a topologically consistent corpus."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorio
from .mesh import Mesh, TemplateDescriptor, TopologyMismatch, check_topology

MAX_COMPONENTS = 32


@dataclass(frozen=True, eq=False)
class GarmentBlendshapeModel:
    """Mean garment plus orthonormal displacement modes.

    Coefficients are whitened: mode i enters scaled by
    ``singular_values[i] / sqrt(n_samples - 1)``, i.e. one unit of a
    coefficient is one standard deviation of the training corpus along that
    mode.
    """

    descriptor: TemplateDescriptor | None
    mean: np.ndarray             # (N, 3)
    basis: np.ndarray            # (3N, K), orthonormal columns
    singular_values: np.ndarray  # (K,)
    n_samples: int
    faces: np.ndarray

    @property
    def n_components(self):
        return self.basis.shape[1]

    @property
    def null_modes(self) -> np.ndarray:
        """Modes carrying no corpus variance (beyond the corpus rank)."""
        sv = self.singular_values
        return sv <= 1e-10 * max(sv.max(initial=0.0), 1e-12)

    @property
    def scales(self):
        """Per-mode whitening scale. Numerically null modes keep unit scale so
        that fitting remains an exact orthogonal projection."""
        s = self.singular_values / np.sqrt(max(self.n_samples - 1, 1))
        return np.where(self.null_modes, 1.0, s)

    def mean_mesh(self) -> Mesh:
        return Mesh(self.mean, self.faces)

    def save(self, path):
        d = self.descriptor
        desc = None if d is None else {"category": d.category, "vertex_count": d.vertex_count,
                                       "face_hash": d.face_hash, "boundary_labels": d.boundary_labels}
        tensorio.save(
            path,
            {"kind": "garment_pca", "n_samples": self.n_samples, "descriptor": desc},
            {"mean": self.mean, "basis": self.basis, "singular_values": self.singular_values,
             "faces": self.faces},
        )

    @classmethod
    def load(cls, path):
        header, t = tensorio.load(path)
        if header.get("kind") != "garment_pca":
            raise ValueError(f"{path} is not a garment model file")
        d = header["descriptor"]
        desc = None if d is None else TemplateDescriptor(
            d["category"], d["vertex_count"], d["face_hash"],
            {k: int(v) for k, v in d["boundary_labels"].items()})
        return cls(desc, t["mean"], t["basis"], t["singular_values"], int(header["n_samples"]),
                   t["faces"])


def build_pca(corpus, n_components: int = MAX_COMPONENTS,
              descriptor: TemplateDescriptor | None = None) -> GarmentBlendshapeModel:
    if not 1 <= n_components <= MAX_COMPONENTS:
        raise ValueError(f"n_components must be in [1, {MAX_COMPONENTS}]")
    corpus = list(corpus)
    if len(corpus) < n_components + 1:
        raise ValueError(
            f"rank deficient: {len(corpus)} meshes support at most {len(corpus) - 1} components"
        )
    check_topology(*corpus)
    if descriptor is not None:
        for m in corpus:
            descriptor.check(m)
    X = np.stack([m.vertices.ravel() for m in corpus])
    mean = X.mean(0)
    _, s, vt = np.linalg.svd(X - mean, full_matrices=False)
    vt = vt[:n_components]
    s = s[:n_components]
    # sign convention: largest-magnitude entry of each mode is positive
    pivot = vt[np.arange(n_components), np.argmax(np.abs(vt), axis=1)]
    vt = vt * np.where(pivot < 0, -1.0, 1.0)[:, None]
    return GarmentBlendshapeModel(descriptor, mean.reshape(-1, 3), vt.T.copy(), s,
                                  len(corpus), corpus[0].faces)


def _check_alpha(model, alpha):
    alpha = np.asarray(alpha, dtype=np.float64).ravel()
    if alpha.shape != (model.n_components,):
        raise ValueError(f"expected {model.n_components} coefficients, got {alpha.size}")
    return alpha


def evaluate(model: GarmentBlendshapeModel, alpha) -> Mesh:
    alpha = _check_alpha(model, alpha)
    offset = model.basis @ (alpha * model.scales)
    return Mesh(model.mean + offset.reshape(-1, 3), model.faces)


def fit_coefficients(model: GarmentBlendshapeModel, target: Mesh) -> np.ndarray:
    """Least-squares whitened coefficients of ``target - mean``."""
    if target.vertices.shape != model.mean.shape or not np.array_equal(target.faces, model.faces):
        raise TopologyMismatch("target does not match the garment template")
    proj = model.basis.T @ (target.vertices - model.mean).ravel()
    return proj / model.scales


def residual(model: GarmentBlendshapeModel, target: Mesh) -> np.ndarray:
    return target.vertices - evaluate(model, fit_coefficients(model, target)).vertices


def interpolate(a: Mesh, b: Mesh, t: float) -> Mesh:
    check_topology(a, b)
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    if t == 0.0:
        return a
    if t == 1.0:
        return b
    return a.with_vertices((1.0 - t) * a.vertices + t * b.vertices)


def sample_prior(model: GarmentBlendshapeModel, rng: np.random.Generator) -> np.ndarray:
    """Uniform sample of the whitened unit ball; null modes stay at zero."""
    alpha = sample_unit_ball(model.n_components, rng)
    alpha[model.null_modes] = 0.0
    return alpha


def sample_unit_ball(dim: int, rng: np.random.Generator) -> np.ndarray:
    d = rng.standard_normal(dim)
    d /= np.linalg.norm(d)
    return d * rng.random() ** (1.0 / dim)
