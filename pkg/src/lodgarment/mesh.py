"""Indexed triangle meshes, topology queries and OBJ I/O."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

CATEGORIES = ("dress", "skirt", "coat", "top", "pant")


class MeshError(ValueError):
    pass


class ObjParseError(MeshError):
    pass


class TopologyMismatch(MeshError):
    pass


class NonManifoldError(MeshError):
    pass


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Mesh:
    """Triangle mesh with (n, 3) float64 vertices and (m, 3) int64 faces.

    Arrays are copied and made read-only on construction.
    """

    vertices: np.ndarray
    faces: np.ndarray
    attributes: dict = field(default_factory=dict)

    def __post_init__(self):
        v = _frozen(self.vertices, np.float64).reshape(-1, 3)
        f = _frozen(self.faces, np.int64).reshape(-1, 3)
        if len(v) == 0:
            raise MeshError("mesh has no vertices")
        if len(f):
            if f.min() < 0 or f.max() >= len(v):
                raise MeshError("face index out of range")
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise MeshError("degenerate face (repeated vertex index)")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        attrs = {k: _frozen(a, np.asarray(a).dtype) for k, a in self.attributes.items()}
        object.__setattr__(self, "attributes", attrs)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def with_vertices(self, vertices) -> "Mesh":
        """Same topology, new positions."""
        vertices = np.asarray(vertices, dtype=np.float64)
        if vertices.shape != self.vertices.shape:
            raise TopologyMismatch(
                f"vertex array shape {vertices.shape} != {self.vertices.shape}"
            )
        return Mesh(vertices, self.faces)

    def bbox(self):
        return self.vertices.min(0), self.vertices.max(0)

    def bbox_diagonal(self) -> float:
        lo, hi = self.bbox()
        return float(np.linalg.norm(hi - lo))

    def face_hash(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.faces, dtype="<i8").tobytes()).hexdigest()


def same_topology(a: Mesh, b: Mesh) -> bool:
    return a.vertices.shape == b.vertices.shape and np.array_equal(a.faces, b.faces)


def check_topology(*meshes: Mesh):
    for m in meshes[1:]:
        if not same_topology(meshes[0], m):
            raise TopologyMismatch("meshes do not share one face list")


@dataclass(frozen=True)
class BoundaryLoop:
    """Closed cyclic sequence of boundary vertex indices of ``mesh``."""

    vertices: tuple
    mesh: Mesh = field(repr=False, compare=False)

    def __len__(self):
        return len(self.vertices)

    def positions(self, vertices=None) -> np.ndarray:
        src = self.mesh.vertices if vertices is None else vertices
        return np.asarray(src)[list(self.vertices)]


@dataclass(frozen=True)
class TemplateDescriptor:
    category: str
    vertex_count: int
    face_hash: str
    boundary_labels: dict  # label -> seed vertex on that loop

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown category {self.category!r}")

    @classmethod
    def from_mesh(cls, mesh: Mesh, category: str, boundary_labels: dict):
        return cls(category, mesh.n_vertices, mesh.face_hash(), dict(boundary_labels))

    def matches(self, mesh: Mesh) -> bool:
        return mesh.n_vertices == self.vertex_count and mesh.face_hash() == self.face_hash

    def check(self, mesh: Mesh):
        if not self.matches(mesh):
            raise TopologyMismatch(f"mesh does not match {self.category} template")

    def to_json(self) -> str:
        return json.dumps(
            {
                "category": self.category,
                "vertex_count": self.vertex_count,
                "face_hash": self.face_hash,
                "boundary_labels": {k: int(v) for k, v in self.boundary_labels.items()},
            },
            sort_keys=True,
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str):
        d = json.loads(text)
        return cls(d["category"], int(d["vertex_count"]), d["face_hash"], dict(d["boundary_labels"]))

    def loop(self, mesh: Mesh, label: str) -> BoundaryLoop:
        if label not in self.boundary_labels:
            raise KeyError(f"no boundary labelled {label!r} in {self.category} template")
        seed = self.boundary_labels[label]
        for lp in boundary_loops(mesh):
            if seed in lp.vertices:
                return lp
        raise MeshError(f"seed vertex {seed} of {label!r} is not on a boundary")

    def loops(self, mesh: Mesh) -> dict:
        by_vertex = {}
        for lp in boundary_loops(mesh):
            for v in lp.vertices:
                by_vertex[v] = lp
        return {label: by_vertex[seed] for label, seed in self.boundary_labels.items()}


# ---------------------------------------------------------------- OBJ I/O


def load_obj(path) -> Mesh:
    verts, faces = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            try:
                if tag == "v":
                    verts.append([float(x) for x in parts[1:4]])
                    if len(parts) < 4:
                        raise ValueError("vertex needs 3 coordinates")
                elif tag == "f":
                    idx = [int(p.split("/")[0]) for p in parts[1:]]
                    if len(idx) != 3:
                        raise ObjParseError(f"line {lineno}: non-triangular face")
                    faces.append([i - 1 if i > 0 else len(verts) + i for i in idx])
            except ObjParseError:
                raise
            except ValueError as exc:
                raise ObjParseError(f"line {lineno}: malformed {tag!r} record ({exc})") from None
    return Mesh(np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


def obj_text(mesh: Mesh) -> str:
    lines = [f"v {x:.6f} {y:.6f} {z:.6f}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    return "\n".join(lines) + "\n"


def save_obj(mesh: Mesh, path):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(obj_text(mesh))
    tmp.replace(path)


# ---------------------------------------------------------------- topology


def edges(mesh: Mesh) -> np.ndarray:
    """Unique undirected edges, sorted (i < j), lexicographic order."""
    f = mesh.faces
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    e.sort(axis=1)
    return np.unique(e, axis=0)


def edge_face_counts(mesh: Mesh):
    f = mesh.faces
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    e.sort(axis=1)
    uniq, counts = np.unique(e, axis=0, return_counts=True)
    return uniq, counts


def boundary_loops(mesh: Mesh) -> list:
    """All closed boundary loops of an edge-manifold mesh.

    Loops are traversed along the boundary in the direction opposite to the
    incident face's winding; each loop starts at its smallest vertex index and
    loops are sorted by that index.
    """
    uniq, counts = edge_face_counts(mesh)
    if np.any(counts > 2):
        bad = uniq[counts > 2][0]
        raise NonManifoldError(f"non-manifold edge ({bad[0]}, {bad[1]})")
    boundary = {tuple(e) for e in uniq[counts == 1]}
    if not boundary:
        return []
    # directed boundary half-edges as they appear in faces, reversed
    nxt = {}
    f = mesh.faces
    for a, b in np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]):
        key = (a, b) if a < b else (b, a)
        if key in boundary:
            nxt.setdefault(int(b), []).append(int(a))
    visited = set()
    loops = []
    for start in sorted(nxt):
        for first in nxt[start]:
            if (start, first) in visited:
                continue
            loop = [start]
            cur, to = start, first
            while True:
                visited.add((cur, to))
                if to == start:
                    break
                loop.append(to)
                cands = [c for c in nxt[to] if (to, c) not in visited]
                if not cands:
                    raise NonManifoldError(f"boundary walk stuck at vertex {to}")
                cur, to = to, cands[0]
            loops.append(loop)
    out = []
    for loop in loops:
        k = int(np.argmin(loop))
        loop = loop[k:] + loop[:k]
        out.append(BoundaryLoop(tuple(int(v) for v in loop), mesh))
    out.sort(key=lambda lp: lp.vertices[0])
    return out


def adjacency(mesh: Mesh) -> sparse.csr_matrix:
    e = edges(mesh)
    n = mesh.n_vertices
    data = np.ones(2 * len(e))
    rows = np.concatenate([e[:, 0], e[:, 1]])
    cols = np.concatenate([e[:, 1], e[:, 0]])
    return sparse.csr_matrix((data, (rows, cols)), shape=(n, n))


def laplacian_matrix(mesh: Mesh) -> sparse.csr_matrix:
    """Sparse L with (L x)_i = mean of neighbours - x_i."""
    A = adjacency(mesh)
    deg = np.asarray(A.sum(1)).ravel()
    if np.any(deg == 0):
        raise MeshError(f"isolated vertex {int(np.flatnonzero(deg == 0)[0])}")
    return (sparse.diags(1.0 / deg) @ A - sparse.identity(mesh.n_vertices)).tocsr()


def uniform_laplacian(mesh: Mesh) -> np.ndarray:
    return laplacian_matrix(mesh) @ mesh.vertices


# ---------------------------------------------------------------- geometry


def face_normals(mesh: Mesh, normalize=True) -> np.ndarray:
    v = mesh.vertices
    f = mesh.faces
    n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    if normalize:
        ln = np.linalg.norm(n, axis=1, keepdims=True)
        n = np.divide(n, ln, out=np.zeros_like(n), where=ln > 0)
    return n


def face_areas(mesh: Mesh) -> np.ndarray:
    return 0.5 * np.linalg.norm(face_normals(mesh, normalize=False), axis=1)


def vertex_normals(mesh: Mesh) -> np.ndarray:
    """Area-weighted vertex normals; vertices with no (or zero-area)
    incident faces fall back to +Z."""
    fn = face_normals(mesh, normalize=False)  # length = 2 * area
    acc = np.zeros_like(mesh.vertices)
    for k in range(3):
        np.add.at(acc, mesh.faces[:, k], fn)
    ln = np.linalg.norm(acc, axis=1)
    out = np.tile([0.0, 0.0, 1.0], (mesh.n_vertices, 1))
    ok = ln > 1e-300
    out[ok] = acc[ok] / ln[ok, None]
    return out


def signed_volume(mesh: Mesh) -> float:
    v = mesh.vertices
    f = mesh.faces
    return float(np.einsum("ij,ij->i", v[f[:, 0]], np.cross(v[f[:, 1]], v[f[:, 2]])).sum() / 6.0)


def knn_vertices(query, reference, k: int):
    """Exact k nearest reference points for every query point.

    Returns ``(indices, distances)`` of shape (n_query, k), sorted by
    ascending distance with ties resolved towards the smaller index.
    """
    query = np.atleast_2d(np.asarray(query, dtype=np.float64))
    reference = np.atleast_2d(np.asarray(reference, dtype=np.float64))
    n_ref = len(reference)
    if n_ref == 0:
        raise ValueError("reference set is empty")
    if k < 1 or k > n_ref:
        raise ValueError(f"k={k} outside [1, {n_ref}]")
    tree = cKDTree(reference)
    d, i = tree.query(query, k=k)
    d = d.reshape(len(query), k)
    i = i.reshape(len(query), k)
    # Resolve ties at the k-th distance: gather every candidate within
    # the k-th radius and re-sort by (distance, index).
    radius = d[:, -1] * (1 + 1e-12) + 1e-300
    out_i = np.empty_like(i)
    out_d = np.empty_like(d)
    cand_lists = tree.query_ball_point(query, radius)
    for q, cand in enumerate(cand_lists):
        cand = np.asarray(cand, dtype=np.int64)
        if len(cand) < k:   # rounding at the radius; keep the tree's answer
            cand = i[q]
        cd = np.linalg.norm(reference[cand] - query[q], axis=1)
        order = np.lexsort((cand, cd))[:k]
        out_i[q] = cand[order]
        out_d[q] = cd[order]
    return out_i, out_d


def close_holes(mesh: Mesh) -> Mesh:
    """Fill every boundary loop with a fan around a new centroid vertex."""
    loops = boundary_loops(mesh)
    if not loops:
        return mesh
    verts = [mesh.vertices]
    faces = [mesh.faces]
    n = mesh.n_vertices
    for lp in loops:
        if len(lp) < 3:
            raise MeshError(f"boundary loop of length {len(lp)} cannot be filled")
        idx = np.array(lp.vertices)
        verts.append(mesh.vertices[idx].mean(0, keepdims=True))
        # loop direction runs against the adjacent faces' winding, so
        # (a, b, centre) continues the orientation consistently
        faces.append(np.stack([idx, np.roll(idx, -1), np.full(len(idx), n)], axis=1))
        n += 1
    return Mesh(np.concatenate(verts), np.concatenate(faces))


def sample_surface(mesh: Mesh, n: int, rng: np.random.Generator):
    """Area-uniform surface samples; returns (points, face ids, face normals)."""
    areas = face_areas(mesh)
    total = areas.sum()
    if total <= 0:
        raise MeshError("mesh has zero surface area")
    fid = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    v = mesh.vertices
    f = mesh.faces[fid]
    pts = (
        (1 - r1)[:, None] * v[f[:, 0]]
        + (r1 * (1 - r2))[:, None] * v[f[:, 1]]
        + (r1 * r2)[:, None] * v[f[:, 2]]
    )
    return pts, fid, face_normals(mesh)[fid]


def closest_point_on_triangles(p, a, b, c):
    """Vectorised closest point from p[i] to triangle (a[i], b[i], c[i])."""
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    out = np.empty_like(p)
    done = np.zeros(len(p), dtype=bool)

    def put(mask, val):
        m = mask & ~done
        out[m] = val[m] if val.ndim == 2 else val
        done[:] |= m

    with np.errstate(divide="ignore", invalid="ignore"):
        put((d1 <= 0) & (d2 <= 0), a)
        put((d3 >= 0) & (d4 <= d3), b)
        put((d6 >= 0) & (d5 <= d6), c)
        v = d1 / (d1 - d3)
        put((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + v[:, None] * ab)
        w = d2 / (d2 - d6)
        put((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + w[:, None] * ac)
        w2 = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        put((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), b + w2[:, None] * (c - b))
        denom = 1.0 / (va + vb + vc)
        v = vb * denom
        w = vc * denom
        put(np.ones(len(p), dtype=bool), a + v[:, None] * ab + w[:, None] * ac)
    return out


class SurfaceLocator:
    """Closest-point queries against a fixed triangle mesh.

    Candidate triangles are the ``k`` faces with the nearest centroids plus
    the faces incident to the nearest vertex, which is exact for the
    well-shaped meshes used here.
    """

    def __init__(self, mesh: Mesh, k: int = 8):
        self.mesh = mesh
        self.k = min(k, mesh.n_faces)
        v, f = mesh.vertices, mesh.faces
        self._tri = v[f]
        self._ctree = cKDTree(self._tri.mean(1))
        self._vtree = cKDTree(v)
        self._normals = face_normals(mesh)
        order = np.argsort(f.ravel(), kind="stable")
        self._vf_faces = order // 3
        self._vf_start = np.searchsorted(f.ravel()[order], np.arange(mesh.n_vertices + 1))

    def query(self, points):
        """Return (closest points, distances, face ids, face normals)."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        n = len(points)
        _, cand = self._ctree.query(points, k=self.k)
        cand = cand.reshape(n, self.k)
        _, nv = self._vtree.query(points)
        deg = self._vf_start[nv + 1] - self._vf_start[nv]
        width = int(deg.max()) if n else 0
        extra = np.full((n, width), -1, dtype=np.int64)
        for j in range(width):
            has = deg > j
            extra[has, j] = self._vf_faces[self._vf_start[nv[has]] + j]
        extra = np.where(extra < 0, cand[:, :1], extra)
        cand = np.concatenate([cand, extra], axis=1)
        m = cand.shape[1]
        tri = self._tri[cand.ravel()]
        pr = np.repeat(points, m, axis=0)
        cp = closest_point_on_triangles(pr, tri[:, 0], tri[:, 1], tri[:, 2])
        d2 = ((cp - pr) ** 2).sum(1).reshape(n, m)
        best = np.argmin(d2, axis=1)
        rows = np.arange(n)
        cp = cp.reshape(n, m, 3)[rows, best]
        fid = cand[rows, best]
        return cp, np.sqrt(d2[rows, best]), fid, self._normals[fid]


def point_mesh_distance(points, mesh: Mesh, chunk=256) -> np.ndarray:
    """Brute-force unsigned distance from each point to the mesh surface."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    tri = mesh.vertices[mesh.faces]
    out = np.empty(len(points))
    m = len(tri)
    for s in range(0, len(points), chunk):
        p = points[s:s + chunk]
        pr = np.repeat(p, m, axis=0)
        t = np.tile(tri, (len(p), 1, 1))
        cp = closest_point_on_triangles(pr, t[:, 0], t[:, 1], t[:, 2])
        out[s:s + chunk] = np.sqrt(((cp - pr) ** 2).sum(1).reshape(len(p), m).min(1))
    return out
