"""Procedural garment templates with category-wide fixed topology.

Every garment of a category and resolution is produced by one builder whose
face list depends only on (category, resolution); continuous style
parameters move vertices only. This gives the topologically-consistent
corpora needed for vertex-wise arithmetic and PCA.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .mesh import CATEGORIES, Mesh, TemplateDescriptor, boundary_loops, close_holes, signed_volume

LABELS = {
    "skirt": ("waist", "hem"),
    "dress": ("neck", "left_armhole", "right_armhole", "hem"),
    "top": ("neck", "left_cuff", "right_cuff", "hem"),
    "coat": ("neck", "left_cuff", "right_cuff", "hem"),
    "pant": ("waist", "left_cuff", "right_cuff"),
}

# nominal style parameters and their jitter scales
_STYLE = {
    "skirt": dict(top_y=(1.02, 0.02), bottom_y=(0.55, 0.08), top_r=(0.165, 0.01),
                  bottom_r=(0.27, 0.05), depth=(0.8, 0.05)),
    "dress": dict(top_y=(1.47, 0.01), bottom_y=(0.45, 0.08), top_r=(0.19, 0.01),
                  mid_r=(0.175, 0.01), bottom_r=(0.30, 0.05), neck_r=(0.085, 0.008),
                  depth=(0.78, 0.04)),
    "top": dict(top_y=(1.47, 0.01), bottom_y=(0.90, 0.05), top_r=(0.19, 0.01),
                mid_r=(0.18, 0.01), bottom_r=(0.20, 0.02), neck_r=(0.085, 0.008),
                depth=(0.78, 0.04), sleeve_len=(0.22, 0.05), sleeve_r=(0.07, 0.006)),
    "coat": dict(top_y=(1.48, 0.01), bottom_y=(0.70, 0.06), top_r=(0.205, 0.01),
                 mid_r=(0.20, 0.01), bottom_r=(0.25, 0.03), neck_r=(0.095, 0.008),
                 depth=(0.80, 0.04), sleeve_len=(0.42, 0.06), sleeve_r=(0.075, 0.006)),
    "pant": dict(top_y=(1.02, 0.02), crotch_y=(0.80, 0.02), top_r=(0.175, 0.01),
                 leg_r=(0.09, 0.008), cuff_y=(0.15, 0.08), cuff_r=(0.075, 0.01),
                 depth=(0.8, 0.04)),
}


def nominal_style(category):
    return {k: v[0] for k, v in _STYLE[category].items()}


def random_style(category, rng: np.random.Generator, scale=1.0):
    return {k: m + scale * s * rng.standard_normal() for k, (m, s) in _STYLE[category].items()}


@dataclass(frozen=True)
class _Counts:
    n_around: int
    n_body: int      # torso rings
    n_cap: int       # shoulder rings above the torso rings
    hole_a: int      # quads removed around each side
    hole_b: int      # quad rows removed
    n_sleeve: int
    n_leg: int


def _counts(category, resolution):
    n = 16 * resolution
    return _Counts(
        n_around=n,
        n_body=6 * resolution + 4 if category in ("dress", "coat", "skirt") else 5 * resolution + 3,
        n_cap=2 if category in ("dress", "top", "coat") else 0,
        hole_a=2 * resolution,
        hole_b=max(2, 1 + resolution),
        n_sleeve=3 * resolution + (2 if category == "coat" else 0),
        n_leg=6 * resolution + 2,
    )


def _extrude(faces, loop, new):
    """Faces joining ``loop`` (boundary order) to ring ``new``."""
    loop = np.asarray(loop)
    new = np.asarray(new)
    l1 = np.roll(loop, -1)
    n1 = np.roll(new, -1)
    faces.append(np.stack([loop, l1, n1], 1))
    faces.append(np.stack([loop, n1, new], 1))


def _ring(center, rx, rz, n):
    phi = 2 * np.pi * np.arange(n) / n
    return np.stack([center[0] + rx * np.cos(phi), np.full(n, center[1]),
                     center[2] + rz * np.sin(phi)], 1)


def _torso_profile(style, ys):
    top_y, bot_y = style["top_y"], style["bottom_y"]
    t = (ys - bot_y) / (top_y - bot_y)
    if "mid_r" in style:
        r = np.where(t < 0.55, style["bottom_r"] + (style["mid_r"] - style["bottom_r"]) * (t / 0.55),
                     style["mid_r"] + (style["top_r"] - style["mid_r"]) * ((t - 0.55) / 0.45))
    else:
        r = style["bottom_r"] + (style["top_r"] - style["bottom_r"]) * t ** 1.3
    return r


def _build(category, resolution, style):
    c = _counts(category, resolution)
    n = c.n_around
    depth = style["depth"]
    pieces = []     # vertex blocks
    faces = []

    if category == "pant":
        ys = np.linspace(style["crotch_y"], style["top_y"], c.n_body)
    else:
        ys = np.linspace(style["bottom_y"], style["top_y"] - 0.04 * (c.n_cap > 0), c.n_body)
    radii = _torso_profile(style, ys) if category != "pant" else np.full(len(ys), style["top_r"])
    if category == "pant":
        # hips widen towards the crotch
        radii = style["top_r"] * (1.0 + 0.12 * (1 - (ys - ys[0]) / (ys[-1] - ys[0])))
    for y, r in zip(ys, radii):
        pieces.append(_ring((0.0, y, 0.0), r, r * depth, n))
    if c.n_cap:
        for i in range(1, c.n_cap + 1):
            t = i / c.n_cap
            r = radii[-1] + (style["neck_r"] - radii[-1]) * t
            pieces.append(_ring((0.0, ys[-1] + 0.04 * t, -0.01 * t), r, r * (depth + (1 - depth) * t), n))
    V = np.concatenate(pieces)
    n_rings = len(pieces)
    grid = np.arange(n_rings * n).reshape(n_rings, n)
    quads = np.ones((n_rings - 1, n), dtype=bool)

    has_holes = category in ("dress", "top", "coat")
    if has_holes:
        top_row = c.n_body - 2   # last torso quad row
        rows = slice(top_row - c.hole_b + 1, top_row + 1)
        half = c.hole_a // 2
        left = np.r_[n - half:n, 0:half]
        right = np.arange(n // 2 - half, n // 2 + half)
        for cols in (left, right):
            for r in range(rows.start, rows.stop):
                quads[r, cols] = False
    for i in range(n_rings - 1):
        for k in range(n):
            if not quads[i, k]:
                continue
            k1 = (k + 1) % n
            a, b, cc, d = grid[i, k], grid[i, k1], grid[i + 1, k1], grid[i + 1, k]
            faces.append(np.array([[a, b, cc], [a, cc, d]]))

    # drop vertices interior to removed patches
    used = np.zeros(len(V), dtype=bool)
    F = np.concatenate(faces) if faces else np.zeros((0, 3), int)
    used[F.ravel()] = True
    remap = -np.ones(len(V), dtype=np.int64)
    remap[used] = np.arange(used.sum())
    V = V[used]
    faces = [remap[F]]

    def loops_now():
        return boundary_loops(Mesh(V, np.concatenate(faces)))

    labels = {}
    if category in ("top", "coat", "dress"):
        loops = loops_now()
        side = [lp for lp in loops if abs(V[list(lp.vertices)].mean(0)[0]) > 0.05]
        side.sort(key=lambda lp: -V[list(lp.vertices)].mean(0)[0])
        for name, lp, sgn in zip(("left", "right"), side, (1.0, -1.0)):
            idx = np.array(lp.vertices)
            if category == "dress":
                labels[f"{name}_armhole"] = int(idx.min())
                continue
            cen = V[idx].mean(0)
            # spread ring angles by arc length, keeping the loop's winding
            phi = np.unwrap(np.arctan2(V[idx, 2] - cen[2], V[idx, 1] - cen[1]))
            sgn_w = 1.0 if phi[-1] > phi[0] else -1.0
            seg = np.linalg.norm(np.roll(V[idx], -1, axis=0) - V[idx], axis=1)
            s = np.concatenate([[0.0], np.cumsum(seg)[:-1]]) / seg.sum()
            psi = phi[0] + sgn_w * 2.0 * np.pi * s
            x0 = np.abs(V[idx, 0]).max()
            prev = idx
            for m in range(1, c.n_sleeve + 1):
                t = m / c.n_sleeve
                r = style["sleeve_r"] * (1.0 - 0.15 * t)
                ring = np.stack([np.full(len(idx), sgn * (x0 + 0.02 + style["sleeve_len"] * t)),
                                 1.45 + r * np.cos(psi), r * np.sin(psi)], 1)
                new = np.arange(len(V), len(V) + len(idx))
                V = np.concatenate([V, ring])
                _extrude(faces, prev, new)
                prev = new
            labels[f"{name}_cuff"] = int(prev.min())

    if category == "pant":
        bottom = [lp for lp in loops_now() if V[lp.vertices[0], 1] < ys[0] + 1e-9][0]
        order = list(bottom.vertices)
        front = int(np.argmax(V[order, 2]))
        back = int(np.argmin(V[order, 2]))
        order = order[front:] + order[:front]
        back = (back - front) % len(order)
        halves = (order[:back + 1], order[back:] + order[:1])
        for half in halves:
            idx = np.array(half)
            sgn = 1.0 if V[idx, 0].mean() > 0 else -1.0
            cx = sgn * (style["leg_r"] + 0.015)
            cen = np.array([cx, ys[0], 0.0])
            psi = np.arctan2(V[idx, 2] - cen[2], V[idx, 0] - cen[0])
            prev = idx
            for m in range(1, c.n_leg + 1):
                t = m / c.n_leg
                y = ys[0] + (style["cuff_y"] - ys[0]) * t
                r = style["leg_r"] + (style["cuff_r"] - style["leg_r"]) * t
                ring = np.stack([cx + r * np.cos(psi), np.full(len(idx), y),
                                 r * depth * np.sin(psi) + 0.0], 1)
                new = np.arange(len(V), len(V) + len(idx))
                V = np.concatenate([V, ring])
                _extrude(faces, prev, new)
                prev = new
            labels["left_cuff" if sgn > 0 else "right_cuff"] = int(prev.min())

    F = np.concatenate(faces)
    mesh = Mesh(V, F)
    loops = boundary_loops(mesh)
    ys_of = {lp.vertices[0]: V[list(lp.vertices), 1].mean() for lp in loops}
    rest = [lp for lp in loops if not any(s in lp.vertices for s in labels.values())]
    rest.sort(key=lambda lp: ys_of[lp.vertices[0]])
    top_name = {"skirt": "waist", "pant": "waist"}.get(category, "neck")
    if category == "pant":
        labels["waist"] = rest[-1].vertices[0]
    else:
        labels["hem"] = rest[0].vertices[0]
        labels[top_name] = rest[-1].vertices[0]
    if signed_volume(close_holes(mesh)) < 0:
        F = F[:, [0, 2, 1]]
        mesh = Mesh(V, F)
    return mesh, {k: int(v) for k, v in labels.items()}


@lru_cache(maxsize=None)
def _topology(category, resolution):
    mesh, labels = _build(category, resolution, nominal_style(category))
    return mesh.faces, labels


def make_garment(category: str, style: dict | None = None, resolution: int = 1) -> Mesh:
    if category not in CATEGORIES:
        raise ValueError(f"unknown category {category!r}")
    style = nominal_style(category) if style is None else style
    mesh, _ = _build(category, resolution, style)
    faces, _ = _topology(category, resolution)
    if not np.array_equal(np.sort(mesh.faces, 1), np.sort(faces, 1)):
        raise RuntimeError("style parameters changed the template topology")
    return Mesh(mesh.vertices, faces)


def template_descriptor(category: str, resolution: int = 1) -> TemplateDescriptor:
    faces, labels = _topology(category, resolution)
    mesh = make_garment(category, None, resolution)
    return TemplateDescriptor.from_mesh(mesh, category, labels)


def style_corpus(category, n, seed, resolution=1, scale=1.0):
    rng = np.random.default_rng(seed)
    return [make_garment(category, random_style(category, rng, scale), resolution) for _ in range(n)]
