"""Occupancy-valued scalar fields over 3D points.

Ground-truth occupancy of closed meshes, boundary tube fields, grid fields,
training-point sampling, isosurface extraction and tube centreline recovery.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree
from skimage import measure, morphology

from . import tensorio
from .mesh import Mesh, MeshError, boundary_loops, sample_surface, signed_volume

# Three skewed ray directions; none is parallel to a coordinate axis or
# plane, so axis-aligned geometry never meets a ray edge-on.
RAY_DIRECTIONS = np.array([
    [0.5773, 0.3116, 0.7548],
    [-0.4187, 0.8329, 0.3621],
    [0.2391, -0.6012, 0.7624],
])
RAY_DIRECTIONS /= np.linalg.norm(RAY_DIRECTIONS, axis=1, keepdims=True)


class EmptyLevelSet(ValueError):
    pass


class TubeExtractionError(ValueError):
    pass


def _ray_frame(d):
    ref = np.array([1.0, 0.0, 0.0]) if abs(d[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(d, ref)
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(d, e1)


def ray_crossings(mesh: Mesh, points, direction, chunk=100_000) -> np.ndarray:
    """Number of triangles hit by the ray ``p + t * direction`` (t > 0)."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    e1, e2 = _ray_frame(d)
    tri = mesh.vertices[mesh.faces]               # (F, 3, 3)
    tu, tv, th = tri @ e1, tri @ e2, tri @ d      # (F, 3)
    pu, pv, ph = points @ e1, points @ e2, points @ d

    # bucket triangles on a uniform 2D grid in the ray-orthogonal plane
    lo_u, hi_u = tu.min(), tu.max()
    lo_v, hi_v = tv.min(), tv.max()
    g = max(1, int(np.sqrt(len(tri))))
    su = (hi_u - lo_u) / g or 1.0
    sv = (hi_v - lo_v) / g or 1.0
    cu0 = np.clip(((tu.min(1) - lo_u) / su).astype(int), 0, g - 1)
    cu1 = np.clip(((tu.max(1) - lo_u) / su).astype(int), 0, g - 1)
    cv0 = np.clip(((tv.min(1) - lo_v) / sv).astype(int), 0, g - 1)
    cv1 = np.clip(((tv.max(1) - lo_v) / sv).astype(int), 0, g - 1)
    nu = cu1 - cu0 + 1
    nv = cv1 - cv0 + 1
    ncell = nu * nv
    tri_id = np.repeat(np.arange(len(tri)), ncell)
    local = np.arange(ncell.sum()) - np.repeat(np.cumsum(ncell) - ncell, ncell)
    cell_u = cu0[tri_id] + local // nv[tri_id]
    cell_v = cv0[tri_id] + local % nv[tri_id]
    cell = cell_u * g + cell_v
    order = np.argsort(cell, kind="stable")
    cell_tris = tri_id[order]
    start = np.searchsorted(cell[order], np.arange(g * g + 1))

    counts = np.zeros(len(points), dtype=np.int64)
    inside_box = (pu >= lo_u) & (pu <= hi_u) & (pv >= lo_v) & (pv <= hi_v)
    cand_pts = np.flatnonzero(inside_box)
    pc = (np.clip(((pu[cand_pts] - lo_u) / su).astype(int), 0, g - 1) * g
          + np.clip(((pv[cand_pts] - lo_v) / sv).astype(int), 0, g - 1))
    for s in range(0, len(cand_pts), chunk):
        pts = cand_pts[s:s + chunk]
        c = pc[s:s + chunk]
        k = start[c + 1] - start[c]
        pid = np.repeat(pts, k)
        off = np.arange(k.sum()) - np.repeat(np.cumsum(k) - k, k)
        fid = cell_tris[np.repeat(start[c], k) + off]
        x, y = pu[pid], pv[pid]
        ax, ay = tu[fid, 0], tv[fid, 0]
        bx, by = tu[fid, 1], tv[fid, 1]
        cx, cy = tu[fid, 2], tv[fid, 2]
        w0 = (bx - x) * (cy - y) - (by - y) * (cx - x)
        w1 = (cx - x) * (ay - y) - (cy - y) * (ax - x)
        w2 = (ax - x) * (by - y) - (ay - y) * (bx - x)
        hit = ((w0 > 0) & (w1 > 0) & (w2 > 0)) | ((w0 < 0) & (w1 < 0) & (w2 < 0))
        area = w0 + w1 + w2
        with np.errstate(divide="ignore", invalid="ignore"):
            h = (w0 * th[fid, 0] + w1 * th[fid, 1] + w2 * th[fid, 2]) / area
        hit &= h > ph[pid]
        counts += np.bincount(pid[hit], minlength=len(points))
    return counts


def inside_mesh(mesh: Mesh, points) -> np.ndarray:
    """Boolean inside test: majority vote of three ray-parity casts."""
    votes = sum((ray_crossings(mesh, points, d) % 2) for d in RAY_DIRECTIONS)
    return votes >= 2


# ---------------------------------------------------------------- fields


class ScalarField:
    """Maps (n, 3) points to values in [0, 1]."""

    def __call__(self, points) -> np.ndarray:
        raise NotImplementedError

    def evaluate(self, points) -> np.ndarray:
        return self(np.atleast_2d(np.asarray(points, dtype=np.float64)))


class FunctionField(ScalarField):
    def __init__(self, fn):
        self.fn = fn

    def __call__(self, points):
        return np.clip(np.asarray(self.fn(np.atleast_2d(points)), dtype=np.float64), 0.0, 1.0)


class MeshOccupancyField(ScalarField):
    def __init__(self, mesh: Mesh):
        if boundary_loops(mesh):
            raise MeshError("occupancy needs a watertight mesh (apply close_holes first)")
        self.mesh = mesh

    def __call__(self, points):
        return inside_mesh(self.mesh, points).astype(np.float64)


def mesh_occupancy_field(mesh: Mesh) -> MeshOccupancyField:
    return MeshOccupancyField(mesh)


@dataclass(frozen=True)
class CurveTube:
    """Closed polyline with a radius."""

    points: np.ndarray
    radius: float
    label: str = ""

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if len(pts) < 3:
            raise ValueError("tube polyline needs at least 3 points")
        if not self.radius > 0:
            raise ValueError("tube radius must be positive")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def segments(self):
        return self.points, np.roll(self.points, -1, axis=0)

    def distance(self, points, chunk=4096):
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        a, b = self.segments()
        ab = b - a
        ll = np.einsum("ij,ij->i", ab, ab)
        out = np.empty(len(points))
        for s in range(0, len(points), chunk):
            p = points[s:s + chunk, None, :]
            t = np.clip(np.einsum("nsj,sj->ns", p - a, ab) / ll, 0.0, 1.0)
            d2 = ((p - (a + t[..., None] * ab)) ** 2).sum(-1)
            out[s:s + chunk] = np.sqrt(d2.min(1))
        return out

    def bbox(self, pad=0.0):
        return self.points.min(0) - self.radius - pad, self.points.max(0) + self.radius + pad

    def to_dict(self):
        return {"label": self.label, "radius": float(self.radius), "points": self.points.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["points"]), float(d["radius"]), d.get("label", ""))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


class TubeField(ScalarField):
    def __init__(self, tube: CurveTube):
        self.tube = tube

    def __call__(self, points):
        return (self.tube.distance(points) <= self.tube.radius).astype(np.float64)


def boundary_tube_field(tube: CurveTube) -> TubeField:
    return TubeField(tube)


def default_tube_radius(mesh: Mesh) -> float:
    return 0.015 * mesh.bbox_diagonal()


@dataclass(frozen=True, eq=False)
class GridField(ScalarField):
    """Dense values on the nodes of an axis-aligned grid, trilinearly
    interpolated; zero outside the box."""

    lo: np.ndarray
    hi: np.ndarray
    values: np.ndarray   # (nx, ny, nz)

    def __post_init__(self):
        object.__setattr__(self, "lo", np.asarray(self.lo, dtype=np.float64))
        object.__setattr__(self, "hi", np.asarray(self.hi, dtype=np.float64))
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))
        if self.values.ndim != 3:
            raise ValueError("grid values must be 3D")

    @property
    def resolution(self):
        return self.values.shape

    @classmethod
    def sample(cls, field: ScalarField, lo, hi, resolution):
        pts, shape = grid_points(lo, hi, resolution)
        return cls(lo, hi, field.evaluate(pts).reshape(shape))

    def __call__(self, points):
        points = np.atleast_2d(points)
        shape = np.array(self.values.shape)
        coords = (points - self.lo) / (self.hi - self.lo) * (shape - 1)
        out = ndimage.map_coordinates(self.values, coords.T, order=1, mode="constant", cval=0.0)
        return np.clip(out, 0.0, 1.0)

    def save(self, path):
        tensorio.save(path, {"kind": "grid_field"},
                      {"lo": self.lo, "hi": self.hi, "values": self.values})

    @classmethod
    def load(cls, path):
        header, t = tensorio.load(path)
        if header.get("kind") != "grid_field":
            raise ValueError(f"{path} is not a grid field file")
        return cls(t["lo"], t["hi"], t["values"])


def grid_points(lo, hi, resolution):
    res = np.broadcast_to(np.asarray(resolution, dtype=int), (3,))
    axes = [np.linspace(lo[i], hi[i], res[i]) for i in range(3)]
    X, Y, Z = np.meshgrid(*axes, indexing="ij")
    return np.stack([X.ravel(), Y.ravel(), Z.ravel()], 1), tuple(res)


# ---------------------------------------------------------------- sampling


def sample_training_points(mesh: Mesh, counts: dict, sigma: float, seed: int, pad=0.05):
    """Near-surface Gaussian samples plus uniform box samples, labelled by
    occupancy. With ``sigma == 0`` the near samples lie on the surface and
    are labelled inside by convention."""
    field = MeshOccupancyField(mesh)
    rng = np.random.default_rng(seed)
    n_near = int(counts.get("surface_near", 0))
    n_uni = int(counts.get("uniform", 0))
    lo, hi = mesh.bbox()
    ext = hi - lo
    lo, hi = lo - pad * ext, hi + pad * ext
    near, _, _ = sample_surface(mesh, n_near, rng) if n_near else (np.zeros((0, 3)), None, None)
    if sigma > 0:
        near = near + rng.normal(scale=sigma, size=near.shape)
    uni = lo + rng.random((n_uni, 3)) * (hi - lo)
    pts = np.concatenate([near, uni])
    labels = field(pts).astype(np.uint8)
    if sigma == 0:
        labels[:n_near] = 1
    return pts, labels


def write_point_records(path, points, labels):
    """Binary records: 3 x little-endian float64, then one uint8 label."""
    rec = np.zeros(len(points), dtype=[("p", "<f8", 3), ("label", "u1")])
    rec["p"] = points
    rec["label"] = labels
    Path(path).write_bytes(rec.tobytes())


def read_point_records(path):
    rec = np.frombuffer(Path(path).read_bytes(), dtype=[("p", "<f8", 3), ("label", "u1")])
    return rec["p"].copy(), rec["label"].copy()


# ---------------------------------------------------------------- extraction


def extract_isosurface(field: ScalarField, bbox, resolution, level: float = 0.5) -> Mesh:
    """Marching-cubes surface of ``field == level`` on a node grid over
    ``bbox``; the grid is padded with zeros so the surface always closes."""
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bbox)
    res = np.broadcast_to(np.asarray(resolution, dtype=int), (3,))
    if np.any(res < 8):
        raise ValueError("resolution must be at least 8 per axis")
    if isinstance(field, GridField) and field.values.shape == tuple(res) \
            and np.allclose(field.lo, lo) and np.allclose(field.hi, hi):
        vals = field.values
    else:
        pts, shape = grid_points(lo, hi, res)
        vals = field.evaluate(pts).reshape(shape)
    if vals.max() <= level:
        raise EmptyLevelSet("empty level set")
    padded = np.pad(vals, 1, mode="constant", constant_values=0.0)
    spacing = (hi - lo) / (res - 1)
    verts, faces, _, _ = measure.marching_cubes(padded, level=level, spacing=tuple(spacing),
                                                allow_degenerate=False)
    verts = verts - spacing + lo
    faces = faces[(faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2])
                  & (faces[:, 0] != faces[:, 2])]
    mesh = Mesh(verts, faces)
    if signed_volume(mesh) < 0:
        mesh = Mesh(verts, faces[:, [0, 2, 1]])
    return mesh


def tube_field_to_curve_samples(field: ScalarField, bbox, resolution, smooth_iters=2):
    """Recover an ordered closed centreline from a tube-shaped field."""
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bbox)
    pts, shape = grid_points(lo, hi, resolution)
    occ = field.evaluate(pts).reshape(shape) >= 0.5
    voxel = float(np.max((hi - lo) / (np.array(shape) - 1)))
    labels, n_comp = ndimage.label(occ, structure=np.ones((3, 3, 3)))
    if n_comp == 0:
        raise TubeExtractionError("empty level set")
    if n_comp > 1:
        raise TubeExtractionError(f"multiple components ({n_comp})")
    # topology-preserving thinning leaves the centreline of a tube
    skel = _prune_spurs(morphology.skeletonize(occ))
    thin = pts[skel.ravel()]
    if len(thin) < 3:
        raise TubeExtractionError("tube too thin to carry a centreline")
    thickness = _tube_thickness(occ, voxel)
    order = _nn_chain(thin)
    chain = thin[order]
    gaps = np.linalg.norm(np.roll(chain, -1, axis=0) - chain, axis=1)
    if gaps.max() > max(4.0 * voxel, 2.0 * thickness):
        raise TubeExtractionError(f"open chain (gap {gaps.max():.4g} > tolerance)")
    for _ in range(smooth_iters):
        chain = 0.25 * (np.roll(chain, 1, axis=0) + 2.0 * chain + np.roll(chain, -1, axis=0))
    return _resample_closed(chain, spacing=voxel)


def _prune_spurs(skel):
    # a closed centreline has no endpoints, so peel them until none are left
    kernel = np.ones((3, 3, 3), dtype=np.int32)
    skel = skel.copy()
    while True:
        nb = ndimage.convolve(skel.astype(np.int32), kernel, mode="constant") - 1
        ends = skel & (nb <= 1)
        if not ends.any():
            return skel
        skel &= ~ends


def _tube_thickness(occ, voxel):
    # distance transform peak approximates the tube radius
    return float(ndimage.distance_transform_edt(occ).max()) * voxel


def _nn_chain(points):
    tree = cKDTree(points)
    n = len(points)
    visited = np.zeros(n, dtype=bool)
    order = [int(np.argmin(points[:, 0] + 1e-3 * points[:, 1]))]
    visited[order[0]] = True
    for _ in range(n - 1):
        cur = points[order[-1]]
        k = 8
        while True:
            d, idx = tree.query(cur, k=min(k, n))
            idx = np.atleast_1d(idx)
            free = [i for i in idx if not visited[i]]
            if free:
                nxt = free[0]
                break
            if k >= n:
                nxt = int(np.flatnonzero(~visited)[0])
                break
            k *= 4
        visited[nxt] = True
        order.append(int(nxt))
    return np.array(order)


def _resample_closed(chain, spacing):
    seg = np.linalg.norm(np.roll(chain, -1, axis=0) - chain, axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    total = s[-1]
    n = max(8, int(np.ceil(total / spacing)))
    t = np.arange(n) * total / n
    closed = np.concatenate([chain, chain[:1]])
    return np.stack([np.interp(t, s, closed[:, i]) for i in range(3)], 1)
