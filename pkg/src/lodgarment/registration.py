"""Boundary-guided non-rigid ICP and the reconstruction pipeline.

Registration follows the optimal-step scheme: every source vertex carries a
3x4 affine transform (stored as a 4x3 block of ``X``), and each inner
iteration solves one sparse linear least-squares problem mixing a data term
(closest points on the target), a landmark term (boundary correspondences)
and a stiffness term on transform differences across mesh edges. A smoothing
step on the Laplacian/edge/normal regularisers follows each solve.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from . import boundary_fit
from .body import BodyModel, BodyParams
from .boundary_fit import FitConfig, Regularizers
from .fields import (CurveTube, ScalarField, TubeField, boundary_tube_field, extract_isosurface,
                     tube_field_to_curve_samples)
from .mesh import BoundaryLoop, Mesh, SurfaceLocator, TemplateDescriptor, edges, vertex_normals
from .skinning import garment_weights, pose_garment

log = logging.getLogger(__name__)


class SingularSystemError(RuntimeError):
    def __init__(self, level, stiffness):
        super().__init__(f"singular normal equations at stiffness level {level} "
                         f"(stiffness {stiffness:g})")
        self.level = level


class EmptyCorrespondenceError(RuntimeError):
    pass


class StageError(RuntimeError):
    """Pipeline failure tagged with the stage that raised it."""

    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


# ---------------------------------------------------------------- landmarks


@dataclass(frozen=True)
class LoopLandmarks:
    indices: np.ndarray   # source vertex ids on the loop
    points: np.ndarray    # matched target positions
    params: np.ndarray    # normalised arc length of each source vertex
    shift: int            # target vertex taken as the arc-length origin
    flipped: bool


@dataclass(frozen=True)
class LandmarkSet:
    loops: dict  # label -> LoopLandmarks

    MIN_PAIRS = 8

    def __post_init__(self):
        for label, lm in self.loops.items():
            if len(lm.indices) < self.MIN_PAIRS:
                raise ValueError(f"loop {label!r} has {len(lm.indices)} landmarks (< 8)")
            if np.any(np.diff(lm.params) <= 0):
                raise ValueError(f"loop {label!r} arc-length parameters not increasing")

    @classmethod
    def from_pairs(cls, loops: dict, pairs: dict):
        """Known correspondences: ``pairs`` maps label -> target points, one
        per vertex of ``loops[label]`` in loop order."""
        out = {}
        for label, loop in loops.items():
            pts = np.asarray(pairs[label], dtype=np.float64)
            if pts.shape != (len(loop), 3):
                raise ValueError(f"loop {label!r}: expected {len(loop)} target points")
            s, _, _ = _arc_params(loop.positions())
            out[label] = LoopLandmarks(np.asarray(loop.vertices, dtype=np.int64), pts, s, 0, False)
        return cls(out)

    @property
    def indices(self):
        return np.concatenate([self.loops[k].indices for k in sorted(self.loops)]) \
            if self.loops else np.zeros(0, dtype=np.int64)

    @property
    def points(self):
        return np.concatenate([self.loops[k].points for k in sorted(self.loops)]) \
            if self.loops else np.zeros((0, 3))

    def __len__(self):
        return sum(len(lm.indices) for lm in self.loops.values())


def _arc_params(points, closed=True):
    nxt = np.roll(points, -1, axis=0) if closed else points[1:]
    seg = np.linalg.norm(nxt - points[:len(nxt)], axis=1)
    total = seg.sum()
    if total <= 0:
        raise ValueError("degenerate curve")
    return np.concatenate([[0.0], np.cumsum(seg)[:-1]]) / total, seg, total


def _curve_at(points, t):
    """Points at normalised arc-length ``t`` (mod 1) along a closed polyline."""
    s, seg, total = _arc_params(points)
    closed = np.concatenate([points, points[:1]])
    knots = np.concatenate([s, [1.0]])
    t = np.mod(t, 1.0)
    return np.stack([np.interp(t, knots, closed[:, i]) for i in range(3)], 1)


def _select_uniform(params, n):
    """Indices of the loop vertices nearest to n uniform arc-length stations."""
    q = np.arange(n) / n
    d = np.abs(params[None, :] - q[:, None])
    d = np.minimum(d, 1.0 - d)
    sel = np.argmin(d, axis=1)
    if len(np.unique(sel)) != n:
        raise ValueError(f"loop of {len(params)} vertices cannot carry {n} distinct landmarks")
    return np.sort(sel)


def _target_curve(fitted):
    if isinstance(fitted, boundary_fit.BoundaryStrip):
        return fitted.loop_positions
    if isinstance(fitted, boundary_fit.FitResult):
        return fitted.strip.loop_positions
    return np.asarray(fitted, dtype=np.float64)


def align_loop(source_pts, target_pts, samples=None) -> tuple:
    """Pair source loop vertices with points on a target closed curve.

    Both curves are parametrised by normalised arc length; the target origin
    is searched over all target vertices and both orientations, minimising
    the summed pair distance. Returns (selected vertex positions in the
    source loop, matched points, params, shift, flipped).
    """
    src = np.asarray(source_pts, dtype=np.float64)
    tgt = np.asarray(target_pts, dtype=np.float64)
    s_src, _, _ = _arc_params(src)
    sel = np.arange(len(src)) if samples is None else _select_uniform(s_src, samples)
    ps = src[sel]
    best = None
    for flipped in (False, True):
        curve = tgt[::-1] if flipped else tgt
        if flipped:
            curve = np.roll(curve, 1, axis=0)   # keep vertex 0 first after reversal
        s_t, _, _ = _arc_params(curve)
        for shift in range(len(curve)):
            pts = _curve_at(curve, s_src[sel] + s_t[shift])
            cost = np.linalg.norm(pts - ps, axis=1).sum()
            if best is None or cost < best[0] - 1e-12:
                best = (cost, pts, shift, flipped)
    _, pts, shift, flipped = best
    return sel, pts, s_src[sel], shift, flipped


def build_landmarks(coarse_loops: dict, fitted: dict, samples_per_loop=None) -> LandmarkSet:
    """``coarse_loops`` maps label -> BoundaryLoop; ``fitted`` maps label ->
    fitted strip (or its loop points)."""
    if set(coarse_loops) != set(fitted):
        raise ValueError(f"label mismatch: {sorted(coarse_loops)} vs {sorted(fitted)}")
    out = {}
    for label in sorted(coarse_loops):
        loop: BoundaryLoop = coarse_loops[label]
        sel, pts, params, shift, flipped = align_loop(loop.positions(), _target_curve(fitted[label]),
                                                      samples_per_loop)
        idx = np.asarray(loop.vertices, dtype=np.int64)[sel]
        out[label] = LoopLandmarks(idx, pts, params, shift, flipped)
    return LandmarkSet(out)


# ---------------------------------------------------------------- NICP


@dataclass
class NicpConfig:
    stiffness: list = field(default_factory=lambda: list(np.geomspace(100.0, 1.0, 8)))
    lambda_d: float = 1.0
    lambda_b: float = 10.0
    lambda_reg: float = 1.0
    w_lap: float = 0.5
    w_edge: float = 0.2
    w_normal: float = 0.05
    reg_step: float = 1e-3
    gamma: float = 1.0
    reject_distance: float = 0.05   # fraction of the source bbox diagonal
    normal_angle: float = 60.0      # degrees
    max_inner: int = 20
    tol: float = 1e-6

    def __post_init__(self):
        s = np.asarray(self.stiffness, dtype=np.float64)
        if len(s) == 0 or np.any(s <= 0) or np.any(np.diff(s) >= 0):
            raise ValueError("stiffness schedule must be positive and strictly decreasing")
        self.stiffness = [float(x) for x in s]
        if min(self.lambda_d, self.lambda_b, self.lambda_reg, self.reg_step) < 0:
            raise ValueError("weights must be non-negative")
        if not 0 < self.normal_angle <= 180:
            raise ValueError("normal_angle must lie in (0, 180]")

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})

    def to_dict(self):
        return asdict(self)


@dataclass
class NicpState:
    """Mutable solver state: per-vertex affine blocks, active correspondences
    and the configuration they were produced under."""

    X: np.ndarray           # (4n, 3)
    targets: np.ndarray     # (n, 3) correspondence points
    valid: np.ndarray       # (n,) bool
    config: NicpConfig

    @classmethod
    def initial(cls, n, config: NicpConfig | None = None):
        X = np.tile(np.vstack([np.eye(3), np.zeros((1, 3))]), (n, 1))
        return cls(X, np.zeros((n, 3)), np.zeros(n, dtype=bool), config or NicpConfig())


class NicpProblem:
    """Sparse operators of the affine registration problem for one source
    mesh, in coordinates normalised to unit bbox diagonal."""

    def __init__(self, source: Mesh, landmarks: LandmarkSet | None = None, gamma=1.0):
        self.source = source
        lo, hi = source.bbox()
        self.centre = 0.5 * (lo + hi)
        self.scale = float(np.linalg.norm(hi - lo)) or 1.0
        self.V = (source.vertices - self.centre) / self.scale
        n = len(self.V)
        self.n = n
        Vh = np.hstack([self.V, np.ones((n, 1))])
        rows = np.repeat(np.arange(n), 4)
        cols = np.arange(4 * n)
        self.D = sparse.csr_matrix((Vh.ravel(), (rows, cols)), shape=(n, 4 * n))
        e = edges(source)
        m = len(e)
        g = np.array([1.0, 1.0, 1.0, gamma])
        r = np.arange(4 * m)
        ca = (4 * e[:, :1] + np.arange(4)).ravel()
        cb = (4 * e[:, 1:] + np.arange(4)).ravel()
        gg = np.tile(g, m)
        self.MG = sparse.csr_matrix((np.r_[gg, -gg], (np.r_[r, r], np.r_[ca, cb])),
                                    shape=(4 * m, 4 * n))
        self.MtM = (self.MG.T @ self.MG).tocsc()
        self.regs = Regularizers(source.faces, n)
        if landmarks is not None and len(landmarks):
            self.lm_idx = landmarks.indices
            self.lm_pts = self.normalize(landmarks.points)
        else:
            self.lm_idx = np.zeros(0, dtype=np.int64)
            self.lm_pts = np.zeros((0, 3))
        self.DL = self.D[self.lm_idx]
        self.DLtDL = (self.DL.T @ self.DL).tocsc()

    def normalize(self, p):
        return (np.asarray(p, dtype=np.float64) - self.centre) / self.scale

    def denormalize(self, p):
        return p * self.scale + self.centre

    def positions(self, X):
        return self.D @ X

    def terms(self, X, weights, targets):
        """(L_d, L_b, L_s) for weights (n,) on correspondence targets."""
        r = self.D @ X - targets
        ld = float((weights * (r ** 2).sum(1)).sum())
        lb = float(((self.DL @ X - self.lm_pts) ** 2).sum()) if len(self.lm_idx) else 0.0
        ls = float(((self.MG @ X) ** 2).sum())
        return ld, lb, ls

    def objective(self, X, weights, targets, stiffness, cfg: NicpConfig):
        ld, lb, ls = self.terms(X, weights, targets)
        return cfg.lambda_d * ld + cfg.lambda_b * lb + stiffness * ls

    def solve(self, weights, targets, stiffness, cfg: NicpConfig, level=0):
        W = sparse.diags(cfg.lambda_d * weights)
        A = (self.D.T @ W @ self.D).tocsc() + stiffness * self.MtM + cfg.lambda_b * self.DLtDL
        B = self.D.T @ (W @ targets)
        if len(self.lm_idx):
            B = B + cfg.lambda_b * (self.DL.T @ self.lm_pts)
        try:
            X = splu(A.tocsc()).solve(np.asarray(B))
        except RuntimeError as exc:
            raise SingularSystemError(level, stiffness) from exc
        if not np.all(np.isfinite(X)):
            raise SingularSystemError(level, stiffness)
        return X

    def reg_value_grad(self, V, cfg: NicpConfig):
        total, grad = 0.0, np.zeros_like(V)
        for w, fn in ((cfg.w_lap, self.regs.laplacian), (cfg.w_edge, self.regs.edge),
                      (cfg.w_normal, self.regs.normal)):
            if w:
                val, g = fn(V)
                total += w * val
                grad += w * g
        return total, grad


def _correspond(locator, V, faces, mask, prev, cfg):
    """Closest points for masked vertices, dropping any that leave the
    distance/normal limits. A previous target is kept when it is closer."""
    cp, dist, _, fn = locator.query(V)
    if prev is not None:
        dprev = np.linalg.norm(V - prev, axis=1)
        keep = dprev < dist
        cp = np.where(keep[:, None], prev, cp)
        dist = np.where(keep, dprev, dist)
    vn = vertex_normals(Mesh(V, faces))
    ok = (dist < cfg.reject_distance) & \
        (np.einsum("ij,ij->i", vn, fn) >= np.cos(np.radians(cfg.normal_angle)))
    # exact hits carry no direction information; accept them
    ok |= dist < 1e-12
    return cp, mask & ok


def nonrigid_icp(source: Mesh, target: Mesh, landmarks: LandmarkSet | None = None,
                 state: NicpState | None = None):
    """Register ``source`` onto ``target``; returns (registered mesh, diagnostics)."""
    state = state or NicpState.initial(source.n_vertices)
    cfg = state.config
    if target.n_faces == 0:
        raise EmptyCorrespondenceError("target mesh is empty")
    prob = NicpProblem(source, landmarks, cfg.gamma)
    tgt = Mesh(prob.normalize(target.vertices), target.faces)
    locator = SurfaceLocator(tgt)
    faces = source.faces
    X = state.X.copy()
    levels = []
    for li, stiff in enumerate(cfg.stiffness):
        V = prob.positions(X)
        targets, mask = _correspond(locator, V, faces, np.ones(prob.n, dtype=bool), None, cfg)
        if not mask.any():
            raise EmptyCorrespondenceError(f"no valid correspondences at stiffness level {li}")
        E = prob.objective(X, mask.astype(float), targets, stiff, cfg)
        trace = [E]
        stop = "cap"
        reg_used = 0
        for _ in range(cfg.max_inner):
            Xs = prob.solve(mask.astype(float), targets, stiff, cfg, li)
            cands = []
            if cfg.lambda_reg and cfg.reg_step:
                Vs = prob.positions(Xs)
                _, g = prob.reg_value_grad(Vs, cfg)
                Xr = Xs.copy()
                Xr[3::4] -= cfg.reg_step * cfg.lambda_reg * g
                cands.append((Xr, True))
            cands.append((Xs, False))
            accepted = None
            for Xc, is_reg in cands:
                Vc = prob.positions(Xc)
                tc, mc = _correspond(locator, Vc, faces, mask, targets, cfg)
                Ec = prob.objective(Xc, mc.astype(float), tc, stiff, cfg)
                if Ec <= E:
                    accepted = (Xc, tc, mc, Ec, is_reg)
                    break
            if accepted is None:
                stop = "guard"
                break
            Xc, targets, mask, E, is_reg = accepted
            reg_used += int(is_reg)
            dX = float(np.linalg.norm(Xc - X))
            X = Xc
            trace.append(E)
            if dX < cfg.tol:
                stop = "tol"
                break
        levels.append({"stiffness": stiff, "trace": trace, "n_valid": int(mask.sum()),
                       "iterations": len(trace) - 1, "reg_steps": reg_used, "stop": stop})
        log.debug("nicp level %d stiffness %.3g: %d iterations, E=%.6g (%s)",
                  li, stiff, len(trace) - 1, trace[-1], stop)
    state.X = X
    state.targets = targets
    state.valid = mask
    out = source.with_vertices(prob.denormalize(prob.positions(X)))
    return out, {"levels": levels, "n_landmarks": len(prob.lm_idx)}


# ---------------------------------------------------------------- pipeline


@dataclass
class ReconstructConfig:
    field_resolution: int = 96
    field_pad: float = 0.1           # bbox padding, fraction of the posed-garment diagonal
    tube_voxel: float = 0.5          # tube grid spacing, in tube radii
    tube_pad: float = 0.08           # fraction of the posed-garment diagonal
    samples_per_loop: int | None = None
    fit: FitConfig = field(default_factory=FitConfig)
    nicp: NicpConfig = field(default_factory=NicpConfig)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        fit = FitConfig.from_dict(d.pop("fit", {}))
        nicp = NicpConfig.from_dict(d.pop("nicp", {}))
        return cls(fit=fit, nicp=nicp, **{k: d[k] for k in cls.__dataclass_fields__ if k in d})

    def to_dict(self):
        return asdict(self)


@dataclass
class ReconstructInputs:
    coarse: Mesh                     # T-pose coarse garment M_C
    descriptor: TemplateDescriptor
    body: BodyModel
    params: BodyParams
    fine: ScalarField | Mesh         # occupancy field or an already extracted M_I
    tubes: dict                      # label -> ScalarField or CurveTube


@dataclass
class ReconstructResult:
    mesh: Mesh       # M_F
    posed: Mesh      # M_P
    implicit: Mesh   # M_I
    diagnostics: dict


def _tube_bbox(field_, loop_pts, pad, tube_radius):
    if isinstance(field_, TubeField):
        return field_.tube.bbox(pad=2 * tube_radius)
    return loop_pts.min(0) - pad, loop_pts.max(0) + pad


def reconstruct(inputs: ReconstructInputs, config: ReconstructConfig | None = None
                ) -> ReconstructResult:
    cfg = config or ReconstructConfig()
    diag = {"stages": {}}

    try:
        inputs.descriptor.check(inputs.coarse)
        wmap = garment_weights(inputs.coarse, inputs.body.template)
        posed = pose_garment(inputs.coarse, wmap, inputs.body, inputs.params)
    except Exception as exc:
        raise StageError("pose-stage", exc) from exc
    pdiag = posed.bbox_diagonal()
    diag["stages"]["pose"] = {"vertices": posed.n_vertices, "bbox_diagonal": pdiag}

    try:
        if isinstance(inputs.fine, Mesh):
            implicit = inputs.fine
        else:
            lo, hi = posed.bbox()
            pad = cfg.field_pad * pdiag
            implicit = extract_isosurface(inputs.fine, (lo - pad, hi + pad), cfg.field_resolution)
    except Exception as exc:
        raise StageError("implicit-stage", exc) from exc
    diag["stages"]["implicit"] = {"vertices": implicit.n_vertices, "faces": implicit.n_faces}

    labels = sorted(inputs.descriptor.boundary_labels)
    try:
        loops = inputs.descriptor.loops(posed)
        if set(inputs.tubes) != set(labels):
            missing = sorted(set(labels) - set(inputs.tubes))
            extra = sorted(set(inputs.tubes) - set(labels))
            raise KeyError(f"boundary fields missing {missing}, unexpected {extra}")
        curves = {}
        for label in labels:
            f = inputs.tubes[label]
            if isinstance(f, CurveTube):
                f = boundary_tube_field(f)
            radius = f.tube.radius if isinstance(f, TubeField) else 0.015 * pdiag
            lo, hi = _tube_bbox(f, loops[label].positions(), cfg.tube_pad * pdiag, radius)
            res = np.maximum(np.ceil((hi - lo) / (cfg.tube_voxel * radius)).astype(int) + 1, 8)
            curves[label] = tube_field_to_curve_samples(f, (lo, hi), res)
    except Exception as exc:
        raise StageError("boundary-stage", exc) from exc
    diag["stages"]["boundary"] = {k: {"samples": len(v)} for k, v in curves.items()}

    try:
        fits = {}
        for label in labels:
            strip = boundary_fit.extract_strip(posed, loops[label].vertices, label)
            fits[label] = boundary_fit.descend(strip, curves[label], cfg.fit)
    except Exception as exc:
        raise StageError("fit-stage", exc) from exc
    diag["stages"]["fit"] = {k: {"final_loss": r.final_loss, "steps": len(r.trace) - 1,
                                 "converged": r.converged} for k, r in fits.items()}

    try:
        landmarks = build_landmarks(loops, {k: r.strip for k, r in fits.items()},
                                    cfg.samples_per_loop)
    except Exception as exc:
        raise StageError("landmark-stage", exc) from exc
    diag["stages"]["landmarks"] = {"pairs": len(landmarks)}

    try:
        state = NicpState.initial(posed.n_vertices, cfg.nicp)
        out, ndiag = nonrigid_icp(posed, implicit, landmarks, state)
    except Exception as exc:
        raise StageError("registration-stage", exc) from exc
    diag["stages"]["registration"] = ndiag
    return ReconstructResult(out, posed, implicit, diag)


def write_diagnostics(diag: dict, path):
    Path(path).write_text(json.dumps(diag, indent=2, sort_keys=True, default=float))
