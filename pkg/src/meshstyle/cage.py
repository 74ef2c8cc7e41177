"""Oriented bounding-box cages and the coarse cage-consistency loss.

Each mesh part gets a PCA-aligned box; points are expressed in normalized box
coordinates through trilinear corner coefficients. The coarse stage moves
parts by similarity transforms of their boxes and penalizes the mismatch
between the rest coefficients and the coefficients of the deformed vertices
in the transformed boxes.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .mesh import Mesh

# Corner j uses sign bits (j>>2)&1, (j>>1)&1, j&1 for axes 0, 1, 2; bit set
# means the + side. Corner 0 is the all-minus corner.
_CORNER_SIGNS = np.array(
    [[1.0 if (j >> (2 - k)) & 1 else -1.0 for k in range(3)] for j in range(8)]
)


class PartLabelError(Exception):
    """Raised for malformed part-label files or selections."""


def pca_axes(points: np.ndarray) -> np.ndarray:
    """Principal axes of a point set, rows sorted by descending variance.

    Deterministic sign convention: the first two axes are flipped so their
    dot with (1, 1, 1) is positive (exact zero falls back to the sign of the
    first nonzero component); the third is their cross product, making the
    frame right-handed.
    """
    pts = np.asarray(points, dtype=np.float64)
    centered = pts - pts.mean(axis=0)
    cov = centered.T @ centered / max(len(pts), 1)
    _, vecs = np.linalg.eigh(cov)  # ascending eigenvalues
    axes = vecs.T[::-1].copy()     # rows, descending variance
    for k in range(2):
        s = axes[k].sum()
        if s == 0.0:
            nz = axes[k][axes[k] != 0.0]
            s = nz[0] if nz.size else 1.0
        if s < 0.0:
            axes[k] = -axes[k]
    axes[2] = np.cross(axes[0], axes[1])
    return axes


@dataclass
class OBBCage:
    """Oriented box: center, unit axis rows (right-handed), half-extents."""

    center: np.ndarray   # (3,)
    axes: np.ndarray     # (3, 3) rows
    extents: np.ndarray  # (3,) positive

    def corners(self) -> np.ndarray:
        """The 8 corners ordered by sign bits (see _CORNER_SIGNS)."""
        offs = _CORNER_SIGNS * self.extents[None, :]  # (8, 3) axis coords
        return self.center[None, :] + offs @ self.axes

    def transformed(self, scale: float, rotation: np.ndarray, translation: np.ndarray) -> "OBBCage":
        """Similarity-transformed copy: x -> scale * R x + t."""
        rot = np.asarray(rotation, dtype=np.float64)
        return OBBCage(
            center=scale * rot @ self.center + np.asarray(translation, dtype=np.float64),
            axes=self.axes @ rot.T,
            extents=scale * self.extents,
        )


def fit_obb(points: np.ndarray, extent_floor_scale: float = 1e-4) -> OBBCage:
    """PCA-aligned oriented bounding box of a point set.

    Half-extents are floored at extent_floor_scale times the axis-aligned
    bounding-box diagonal so flat or thin parts still span a proper box.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) == 0:
        raise ValueError(f"points must be nonempty (N, 3), got {pts.shape}")
    axes = pca_axes(pts)
    proj = (pts - pts.mean(axis=0)) @ axes.T
    lo = proj.min(axis=0)
    hi = proj.max(axis=0)
    diag = float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))
    floor = max(extent_floor_scale * diag, 1e-12)
    extents = np.maximum((hi - lo) / 2.0, floor)
    center = pts.mean(axis=0) + ((lo + hi) / 2.0) @ axes
    return OBBCage(center=center, axes=axes, extents=extents)


def trilinear_coeffs(points: np.ndarray, cage: OBBCage) -> np.ndarray:
    """Trilinear corner coefficients of points in a box, (N, 8).

    With u_k the normalized coordinate along axis k measured from the
    all-minus corner (u in [0,1] inside the box), the coefficient of corner j
    is the product over axes of u_k or (1 - u_k) according to the corner's
    sign bit. Rows always sum to 1 and reproduce the point as a combination
    of the corners, also outside the box.
    """
    pts = np.asarray(points, dtype=np.float64)
    u = _box_coords(pts, cage)
    g = np.stack([1.0 - u, u], axis=0)  # g[bit, :, k]
    w = np.empty((len(pts), 8))
    for j in range(8):
        b0, b1, b2 = (j >> 2) & 1, (j >> 1) & 1, j & 1
        w[:, j] = g[b0, :, 0] * g[b1, :, 1] * g[b2, :, 2]
    return w


def _box_coords(points: np.ndarray, cage: OBBCage) -> np.ndarray:
    corner_min = cage.center - cage.extents @ cage.axes
    return ((points - corner_min) @ cage.axes.T) / (2.0 * cage.extents)[None, :]


def _coeff_point_jacobian(points: np.ndarray, cage: OBBCage) -> tuple[np.ndarray, np.ndarray]:
    """Coefficients and their derivative w.r.t. the point.

    Returns (w (N, 8), dw_du (N, 8, 3)); chain through u with rows
    a_k / (2 h_k) to get dw/dp.
    """
    pts = np.asarray(points, dtype=np.float64)
    u = _box_coords(pts, cage)
    g = np.stack([1.0 - u, u], axis=0)
    w = np.empty((len(pts), 8))
    dw_du = np.empty((len(pts), 8, 3))
    for j in range(8):
        bits = ((j >> 2) & 1, (j >> 1) & 1, j & 1)
        f0, f1, f2 = g[bits[0], :, 0], g[bits[1], :, 1], g[bits[2], :, 2]
        w[:, j] = f0 * f1 * f2
        s = [1.0 if b else -1.0 for b in bits]
        dw_du[:, j, 0] = s[0] * f1 * f2
        dw_du[:, j, 1] = s[1] * f0 * f2
        dw_du[:, j, 2] = s[2] * f0 * f1
    return w, dw_du


def cage_loss(
    parts: "PartSet",
    rest_coeffs: list[np.ndarray],
    boxes: list[OBBCage],
    vertices: np.ndarray,
) -> tuple[float, np.ndarray]:
    """Coefficient-consistency loss between rest and transformed boxes.

    loss = mean over parts of mean over part vertices of
    ||coeffs(vertex, transformed box) - rest coeffs||^2. Returns the loss and
    its analytic gradient w.r.t. vertices, (V, 3).
    """
    verts = np.asarray(vertices, dtype=np.float64)
    nparts = parts.num_parts
    if len(rest_coeffs) != nparts or len(boxes) != nparts:
        raise ValueError("rest_coeffs and boxes must have one entry per part")
    loss = 0.0
    grad = np.zeros_like(verts)
    for l in range(nparts):
        idx = parts.part_indices[l]
        box = boxes[l]
        w, dw_du = _coeff_point_jacobian(verts[idx], box)
        r = w - rest_coeffs[l]
        n = len(idx)
        loss += float(np.sum(r * r)) / n
        # du/dp has rows axes_k / (2 h_k)
        du_dp = box.axes / (2.0 * box.extents)[:, None]
        gu = np.einsum("nj,njk->nk", r, dw_du)
        grad[idx] += (2.0 / (nparts * n)) * gu @ du_dp
    return loss / nparts, grad


@dataclass
class PartSet:
    """Vertex partition into parts labeled 1..L."""

    labels: np.ndarray               # (V,) int64 in 1..L
    part_indices: list[np.ndarray]   # per part, sorted vertex indices

    @property
    def num_parts(self) -> int:
        return len(self.part_indices)

    @classmethod
    def from_labels(cls, raw: np.ndarray) -> "PartSet":
        """Compact arbitrary integer labels to 1..L by first appearance."""
        raw = np.asarray(raw, dtype=np.int64)
        if raw.ndim != 1 or raw.size == 0:
            raise PartLabelError("labels must be a nonempty 1-D integer array")
        mapping: dict[int, int] = {}
        labels = np.empty_like(raw)
        for i, val in enumerate(raw):
            key = int(val)
            if key not in mapping:
                mapping[key] = len(mapping) + 1
            labels[i] = mapping[key]
        parts = [np.flatnonzero(labels == l + 1) for l in range(len(mapping))]
        return cls(labels=labels, part_indices=parts)


def ingest_part_labels(path: str | os.PathLike, num_vertices: int) -> PartSet:
    """Read a per-vertex part-label file.

    One non-negative integer per line in vertex order; '#' comment lines and
    blank lines are skipped. Exactly num_vertices data lines are required.
    """
    values = []
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise PartLabelError(f"cannot open {path}: {exc}") from None
    with fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            try:
                val = int(line)
            except ValueError:
                raise PartLabelError(f"line {lineno}: not an integer: {line!r}") from None
            if val < 0:
                raise PartLabelError(f"line {lineno}: negative label {val}")
            values.append(val)
    if len(values) != num_vertices:
        raise PartLabelError(
            f"{path}: {len(values)} labels for {num_vertices} vertices"
        )
    return PartSet.from_labels(np.asarray(values, dtype=np.int64))


def fallback_segment(mesh: Mesh, num_parts: int, seed: int = 0) -> PartSet:
    """Euclidean k-means vertex segmentation (deterministic under seed).

    Lloyd iterations with argmin ties going to the lowest cluster id; an
    emptied cluster is reseeded at the point farthest from its assigned
    center.
    """
    verts = mesh.vertices
    n = len(verts)
    if not 1 <= num_parts <= n:
        raise ValueError(f"num_parts must be in [1, {n}]")
    rng = np.random.default_rng(seed)
    centers = verts[rng.choice(n, size=num_parts, replace=False)].copy()
    assign = np.full(n, -1, dtype=np.int64)
    for _ in range(200):
        d2 = ((verts[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_assign = np.argmin(d2, axis=1)
        for c in range(num_parts):
            if not np.any(new_assign == c):
                far = int(np.argmax(d2[np.arange(n), new_assign]))
                new_assign[far] = c
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for c in range(num_parts):
            centers[c] = verts[assign == c].mean(axis=0)
    return PartSet.from_labels(assign + 1)
