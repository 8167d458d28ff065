"""Fitting garment boundary strips to target curves.

The objective is a weighted sum of a squared Chamfer term between the strip's
boundary-loop vertices and the target points, plus Laplacian, edge-length and
normal-consistency regularisers on the strip sub-mesh. All gradients are
analytic.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

from .mesh import Mesh, TemplateDescriptor

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


@dataclass
class FitConfig:
    lambda_c: float = 1.0
    lambda_lap: float = 0.5
    lambda_edge: float = 0.2
    lambda_normal: float = 0.05
    steps: int = 500
    step_size: float = 1.0
    tol: float = 1e-10

    def __post_init__(self):
        if not self.lambda_c > 0:
            raise ValueError("lambda_c must be positive")
        if min(self.lambda_lap, self.lambda_edge, self.lambda_normal) < 0:
            raise ValueError("regulariser weights must be non-negative")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self):
        return asdict(self)


class Regularizers:
    """Laplacian, edge-length and normal-consistency terms for a fixed
    triangle topology, with analytic gradients w.r.t. vertex positions."""

    def __init__(self, faces, n_vertices):
        faces = np.asarray(faces, dtype=np.int64)
        self.faces = faces
        self.n = n_vertices
        he = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
        key = np.sort(he, axis=1)
        uniq, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
        inv = inv.ravel()
        self.edges = uniq
        face_of_he = np.tile(np.arange(len(faces)), 3)
        order = np.argsort(inv, kind="stable")
        starts = np.searchsorted(inv[order], np.arange(len(uniq)))
        interior = np.flatnonzero(counts == 2)
        self.face_pairs = np.stack([face_of_he[order[starts[interior]]],
                                    face_of_he[order[starts[interior] + 1]]], 1)
        A = sparse.csr_matrix((np.ones(2 * len(uniq)),
                               (np.r_[uniq[:, 0], uniq[:, 1]], np.r_[uniq[:, 1], uniq[:, 0]])),
                              shape=(n_vertices, n_vertices))
        deg = np.asarray(A.sum(1)).ravel()
        deg[deg == 0] = 1.0
        self.L = (sparse.diags(1.0 / deg) @ A - sparse.identity(n_vertices)).tocsr()
        self.LtL = (self.L.T @ self.L).tocsr()

    def laplacian(self, X):
        LX = self.L @ X
        val = float((LX ** 2).sum() / self.n)
        return val, (2.0 / self.n) * (self.LtL @ X)

    def edge(self, X):
        """Variance of edge lengths: mean over edges of (|e| - mean|e|)^2."""
        e = self.edges
        d = X[e[:, 0]] - X[e[:, 1]]
        ln = np.linalg.norm(d, axis=1)
        dev = ln - ln.mean()
        m = len(e)
        val = float((dev ** 2).sum() / m)
        # the mean's own derivative cancels because sum(dev) == 0
        g_e = (2.0 / m) * (dev / np.maximum(ln, 1e-300))[:, None] * d
        grad = np.zeros_like(X)
        np.add.at(grad, e[:, 0], g_e)
        np.add.at(grad, e[:, 1], -g_e)
        return val, grad

    def normal(self, X):
        """1 - mean cosine between normals of faces sharing an edge."""
        if len(self.face_pairs) == 0:
            return 0.0, np.zeros_like(X)
        f = self.faces
        x0, x1, x2 = X[f[:, 0]], X[f[:, 1]], X[f[:, 2]]
        e1, e2 = x1 - x0, x2 - x0
        c = np.cross(e1, e2)
        cn = np.maximum(np.linalg.norm(c, axis=1), 1e-300)
        nh = c / cn[:, None]
        fa, fb = self.face_pairs[:, 0], self.face_pairs[:, 1]
        cos = np.einsum("ij,ij->i", nh[fa], nh[fb])
        m = len(cos)
        val = float(1.0 - cos.mean())
        # d(val)/d(nh_a) = -nb / m ; chain through nh = c/|c|
        g_nh = np.zeros_like(c)
        np.add.at(g_nh, fa, -nh[fb] / m)
        np.add.at(g_nh, fb, -nh[fa] / m)
        g_c = (g_nh - np.einsum("ij,ij->i", g_nh, nh)[:, None] * nh) / cn[:, None]
        g1 = np.cross(e2, g_c)
        g2 = np.cross(g_c, e1)
        grad = np.zeros_like(X)
        np.add.at(grad, f[:, 1], g1)
        np.add.at(grad, f[:, 2], g2)
        np.add.at(grad, f[:, 0], -(g1 + g2))
        return val, grad


@dataclass
class BoundaryStrip:
    """Boundary loop plus its one-ring, as a sub-mesh of a parent garment.

    ``parent_index[i]`` is the parent vertex of local vertex ``i``; the loop
    occupies local indices ``loop_local`` in boundary order.
    """

    vertices: np.ndarray
    faces: np.ndarray
    parent_index: np.ndarray
    loop_local: np.ndarray
    label: str = ""
    regs: Regularizers = field(init=False, repr=False)

    def __post_init__(self):
        if len(np.unique(self.parent_index)) != len(self.parent_index):
            raise ValueError("strip index map is not injective")
        self.regs = Regularizers(self.faces, len(self.vertices))

    @property
    def loop_positions(self):
        return self.vertices[self.loop_local]

    def with_vertices(self, X):
        return BoundaryStrip(np.asarray(X, dtype=np.float64), self.faces, self.parent_index,
                             self.loop_local, self.label)

    def apply_to(self, mesh: Mesh) -> Mesh:
        v = mesh.vertices.copy()
        v[self.parent_index] = self.vertices
        return mesh.with_vertices(v)


def extract_strip(mesh: Mesh, loop_vertices, label="") -> BoundaryStrip:
    loop = np.asarray(loop_vertices, dtype=np.int64)
    on_loop = np.zeros(mesh.n_vertices, dtype=bool)
    on_loop[loop] = True
    fmask = on_loop[mesh.faces].any(1)
    sub = mesh.faces[fmask]
    others = np.setdiff1d(np.unique(sub), loop)
    parent = np.concatenate([loop, others])
    local = -np.ones(mesh.n_vertices, dtype=np.int64)
    local[parent] = np.arange(len(parent))
    return BoundaryStrip(mesh.vertices[parent].copy(), local[sub], parent,
                         np.arange(len(loop)), label)


def chamfer_term(loop_pts, target):
    """Symmetric squared Chamfer (sum of the two directional means) and its
    gradient w.r.t. the loop points."""
    d_lt, i_lt = cKDTree(target).query(loop_pts)
    d_tl, i_tl = cKDTree(loop_pts).query(target)
    val = float(np.mean(d_lt ** 2) + np.mean(d_tl ** 2))
    grad = 2.0 * (loop_pts - target[i_lt]) / len(loop_pts)
    np.add.at(grad, i_tl, 2.0 * (loop_pts[i_tl] - target) / len(target))
    return val, grad


def boundary_loss(strip: BoundaryStrip, target, cfg: FitConfig, X=None):
    """Return (total, gradient (n, 3), per-term values)."""
    X = strip.vertices if X is None else X
    target = np.atleast_2d(np.asarray(target, dtype=np.float64))
    if len(target) == 0:
        raise ValueError("target is empty")
    grad = np.zeros_like(X)
    terms = {}
    c_val, c_grad = chamfer_term(X[strip.loop_local], target)
    terms["chamfer"] = c_val
    grad[strip.loop_local] += cfg.lambda_c * c_grad
    total = cfg.lambda_c * c_val
    for name, lam, fn in (("laplacian", cfg.lambda_lap, strip.regs.laplacian),
                          ("edge", cfg.lambda_edge, strip.regs.edge),
                          ("normal", cfg.lambda_normal, strip.regs.normal)):
        val, g = fn(X)
        terms[name] = val
        if lam:
            total += lam * val
            grad += lam * g
    return total, grad, terms


@dataclass
class FitResult:
    strip: BoundaryStrip
    trace: list
    final_loss: float
    converged: bool

    def write_trace_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss", "step_size"])
            for row in self.trace:
                w.writerow(row)


def descend(strip: BoundaryStrip, target, cfg: FitConfig, shrink=0.5, max_backtracks=40,
            armijo=1e-4) -> FitResult:
    """Gradient descent with Armijo backtracking on all strip vertices."""
    X = strip.vertices.copy()
    loss, grad, _ = boundary_loss(strip, target, cfg, X)
    step = cfg.step_size
    trace = [(0, loss, 0.0)]
    converged = False
    for it in range(1, cfg.steps + 1):
        g2 = float((grad ** 2).sum())
        if g2 == 0.0:
            converged = True
            break
        for _ in range(max_backtracks):
            Xn = X - step * grad
            ln, gn, _ = boundary_loss(strip, target, cfg, Xn)
            if ln <= loss - armijo * step * g2:
                break
            step *= shrink
        else:
            if it == 1 and loss > cfg.tol:
                raise DivergenceError(f"no descent step found (loss {loss:.4g})")
            converged = True
            break
        done = (loss - ln) <= cfg.tol * max(loss, 1e-300)
        X, loss, grad = Xn, ln, gn
        trace.append((it, loss, step))
        step *= 2.0
        if done:
            converged = True
            break
    return FitResult(strip.with_vertices(X), trace, loss, converged)


def fit_boundary_strip(garment: Mesh, descriptor: TemplateDescriptor, label: str, target,
                       cfg: FitConfig | None = None) -> FitResult:
    cfg = cfg or FitConfig()
    loop = descriptor.loop(garment, label)
    strip = extract_strip(garment, loop.vertices, label)
    return descend(strip, np.asarray(target, dtype=np.float64), cfg)
