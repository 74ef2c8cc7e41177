"""Reflective-symmetry detection and the symmetry regularizer.

Candidate mirror planes are the principal planes through the vertex
centroid. A plane is kept when mirroring every vertex lands near an original
vertex, both pointwise and in aggregate. During optimization the accepted
vertex pairs stay fixed while the actual mirror plane is refit each call
from the pair midpoints; the loss pulls midpoints onto that plane and pair
directions onto its normal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .cage import pca_axes


@dataclass
class SymmetryPlane:
    """An accepted mirror plane tied to a fixed set of vertex pairs."""

    axis_index: int       # which principal axis generated it
    axis: np.ndarray      # (3,) unit normal used for detection / sign fixing
    point: np.ndarray     # (3,) detection-time centroid
    pairs: np.ndarray     # (P, 2) int64, each row sorted, unique
    max_residual: float
    sum_residual: float


@dataclass
class MidplaneFit:
    """Least-squares plane through current pair midpoints."""

    normal: np.ndarray  # (3,) unit, sign-aligned with the detection axis
    point: np.ndarray   # (3,) midpoint centroid


def _nearest_with_low_index_ties(tree: cKDTree, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-neighbor indices with exact-distance ties going to the lowest index."""
    k = min(4, tree.n)
    dist, idx = tree.query(queries, k=k)
    if k == 1:
        return np.atleast_1d(dist), np.atleast_1d(idx)
    best = dist[:, :1]
    tied = dist == best
    # among tied candidates pick the smallest vertex index
    masked = np.where(tied, idx, tree.n)
    return best[:, 0], masked.min(axis=1)


def detect_symmetry_planes(
    vertices: np.ndarray,
    tau_point: float | None = None,
    tau_total: float | None = None,
) -> list[SymmetryPlane]:
    """Detect reflective symmetries about the principal planes.

    Mirrors every vertex across each principal plane through the centroid and
    matches it to its nearest original vertex. The plane is accepted when the
    largest match distance stays below tau_point and the summed distance
    below tau_total. Defaults scale with the bounding-box diagonal:
    tau_point = 0.02 * diag, tau_total = 0.002 * V * diag.
    """
    verts = np.asarray(vertices, dtype=np.float64)
    if verts.ndim != 2 or verts.shape[1] != 3 or len(verts) < 3:
        raise ValueError(f"vertices must be (V>=3, 3), got {verts.shape}")
    diag = float(np.linalg.norm(verts.max(axis=0) - verts.min(axis=0)))
    if tau_point is None:
        tau_point = 0.02 * diag
    if tau_total is None:
        tau_total = 0.002 * len(verts) * diag
    centroid = verts.mean(axis=0)
    axes = pca_axes(verts)
    tree = cKDTree(verts)
    planes: list[SymmetryPlane] = []
    for k in range(3):
        normal = axes[k]
        signed = (verts - centroid) @ normal
        mirrored = verts - 2.0 * signed[:, None] * normal[None, :]
        dist, nearest = _nearest_with_low_index_ties(tree, mirrored)
        resid = np.linalg.norm(mirrored - verts[nearest], axis=1)
        max_res = float(resid.max())
        sum_res = float(resid.sum())
        if max_res < tau_point and sum_res < tau_total:
            pairs = np.sort(
                np.stack([np.arange(len(verts)), nearest], axis=1), axis=1
            )
            pairs = np.unique(pairs, axis=0)
            planes.append(
                SymmetryPlane(
                    axis_index=k,
                    axis=normal.copy(),
                    point=centroid.copy(),
                    pairs=pairs.astype(np.int64),
                    max_residual=max_res,
                    sum_residual=sum_res,
                )
            )
    return planes


def fit_midpoint_plane(vertices: np.ndarray, plane: SymmetryPlane) -> MidplaneFit:
    """Fit the current mirror plane from the pair midpoints.

    The normal is the least-variance direction of the midpoint cloud,
    sign-aligned with the detection axis. When the midpoints do not span a
    plane (fewer than 3, or second singular value below 1e-9 of the first)
    the detection axis is used instead.
    """
    verts = np.asarray(vertices, dtype=np.float64)
    mids = 0.5 * (verts[plane.pairs[:, 0]] + verts[plane.pairs[:, 1]])
    center = mids.mean(axis=0)
    normal = None
    if len(mids) >= 3:
        centered = mids - center
        # singular values of the centered cloud; smallest right-singular
        # vector is the best-fit plane normal
        _, svals, vt = np.linalg.svd(centered, full_matrices=True)
        if len(svals) == 3 and svals[0] > 0.0 and svals[1] > 1e-9 * svals[0]:
            normal = vt[2]
    if normal is None:
        normal = plane.axis.copy()
    if float(normal @ plane.axis) < 0.0:
        normal = -normal
    return MidplaneFit(normal=normal, point=center)


def symmetry_loss(
    vertices: np.ndarray,
    planes: list[SymmetryPlane],
    fits: list[MidplaneFit] | None = None,
) -> tuple[float, np.ndarray]:
    """Symmetry regularizer and its gradient w.r.t. vertices.

    Per plane, with the refit midplane normal n (treated as constant) and the
    global vertex centroid vbar:

      midpoint term   mean over pairs of (n . (midpoint - vbar))^2
      direction term  mean over pairs of 1 - |n . normalized(vi - vj)|

    Pairs closer than 1e-9 apart contribute zero to the direction term.
    Normals are refit from the current vertices unless explicit fits are
    passed (the gradient treats them as constants either way). Returns
    (sum over planes of both terms, gradient (V, 3)).
    """
    verts = np.asarray(vertices, dtype=np.float64)
    nverts = len(verts)
    grad = np.zeros_like(verts)
    total = 0.0
    if fits is not None and len(fits) != len(planes):
        raise ValueError("fits must match planes")
    for pidx, plane in enumerate(planes):
        npairs = len(plane.pairs)
        if npairs == 0:
            continue
        fit = fits[pidx] if fits is not None else fit_midpoint_plane(verts, plane)
        n = fit.normal
        i = plane.pairs[:, 0]
        j = plane.pairs[:, 1]
        vbar = verts.mean(axis=0)
        mids = 0.5 * (verts[i] + verts[j])
        e = (mids - vbar) @ n
        total += float(e @ e) / npairs
        # d/dm = (2/N) e n, split half to each endpoint; vbar spreads -sum
        ge = (e[:, None] * n[None, :]) / npairs
        np.add.at(grad, i, ge)
        np.add.at(grad, j, ge)
        grad -= (2.0 / (npairs * nverts)) * e.sum() * n[None, :]

        d = verts[i] - verts[j]
        dn = np.linalg.norm(d, axis=1)
        ok = dn >= 1e-9
        dhat = np.zeros_like(d)
        dhat[ok] = d[ok] / dn[ok, None]
        c = dhat @ n
        total += float(np.sum(1.0 - np.abs(c[ok]))) / npairs
        gd = np.zeros_like(d)
        gd[ok] = (
            -np.sign(c[ok])[:, None]
            * (n[None, :] - c[ok, None] * dhat[ok])
            / dn[ok, None]
            / npairs
        )
        np.add.at(grad, i, gd)
        np.add.at(grad, j, -gd)
    return total, grad
