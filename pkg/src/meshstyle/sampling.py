"""Point sampling and auxiliary sphere-mesh construction."""

from __future__ import annotations

import numpy as np

from .mesh import Mesh

# Icosahedron with vertices on the unit sphere.
_PHI = (1.0 + np.sqrt(5.0)) / 2.0
_ICO_VERTS = np.array(
    [
        (-1, _PHI, 0), (1, _PHI, 0), (-1, -_PHI, 0), (1, -_PHI, 0),
        (0, -1, _PHI), (0, 1, _PHI), (0, -1, -_PHI), (0, 1, -_PHI),
        (_PHI, 0, -1), (_PHI, 0, 1), (-_PHI, 0, -1), (-_PHI, 0, 1),
    ],
    dtype=np.float64,
)
_ICO_VERTS /= np.linalg.norm(_ICO_VERTS, axis=1, keepdims=True)
_ICO_FACES = np.array(
    [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ],
    dtype=np.int64,
)


def farthest_point_sample(points: np.ndarray, count: int, seed_index: int = 0) -> np.ndarray:
    """Greedy farthest-point subset of a point set.

    Starts at ``seed_index`` and repeatedly adds the point maximizing the
    distance to the current set (ties resolved to the lowest index by argmax).
    Returns the selected indices in selection order, (count,).
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if not 1 <= count <= n:
        raise ValueError(f"count must be in [1, {n}], got {count}")
    if not 0 <= seed_index < n:
        raise ValueError(f"seed_index out of range: {seed_index}")
    chosen = np.empty(count, dtype=np.int64)
    chosen[0] = seed_index
    dist = np.linalg.norm(points - points[seed_index], axis=1)
    for k in range(1, count):
        idx = int(np.argmax(dist))
        chosen[k] = idx
        np.minimum(dist, np.linalg.norm(points - points[idx], axis=1), out=dist)
    return chosen


def icosphere(subdivisions: int = 1, radius: float = 1.0) -> Mesh:
    """Icosahedron subdivided ``subdivisions`` times, vertices on the sphere.

    Yields 20 * 4**subdivisions faces.
    """
    if subdivisions < 0:
        raise ValueError("subdivisions must be >= 0")
    verts = [tuple(v) for v in _ICO_VERTS]
    faces = [tuple(f) for f in _ICO_FACES]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}
        new_faces = []

        def midpoint(a: int, b: int) -> int:
            key = (a, b) if a < b else (b, a)
            if key in cache:
                return cache[key]
            m = np.asarray(verts[a]) + np.asarray(verts[b])
            m /= np.linalg.norm(m)
            verts.append(tuple(m))
            cache[key] = len(verts) - 1
            return cache[key]

        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca)]
        faces = new_faces
    v = np.asarray(verts, dtype=np.float64) * radius
    return Mesh(v, np.asarray(faces, dtype=np.int64))


def median_nn_distance(points: np.ndarray) -> float:
    """Median nearest-neighbor distance of a point set (brute force)."""
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if n < 2:
        raise ValueError("need at least two points")
    d2 = np.sum((points[:, None, :] - points[None, :, :]) ** 2, axis=2)
    np.fill_diagonal(d2, np.inf)
    return float(np.median(np.sqrt(d2.min(axis=1))))


def build_sphere_aux_mesh(
    centers: np.ndarray,
    radius: float | None = None,
    subdivisions: int = 1,
) -> tuple[Mesh, np.ndarray]:
    """Union of identical icospheres, one per center.

    radius defaults to half the median nearest-neighbor distance between
    centers. Returns the combined mesh and a per-vertex owner array mapping
    each vertex to its center index.
    """
    centers = np.asarray(centers, dtype=np.float64)
    if centers.ndim != 2 or centers.shape[1] != 3:
        raise ValueError(f"centers must be (K, 3), got {centers.shape}")
    if radius is None:
        radius = 0.5 * median_nn_distance(centers)
    if radius <= 0:
        raise ValueError("sphere radius must be positive")
    proto = icosphere(subdivisions, radius)
    k = centers.shape[0]
    nv = proto.num_vertices
    verts = (proto.vertices[None, :, :] + centers[:, None, :]).reshape(-1, 3)
    offs = (np.arange(k) * nv)[:, None, None]
    faces = (proto.faces[None, :, :] + offs).reshape(-1, 3)
    owner = np.repeat(np.arange(k, dtype=np.int64), nv)
    return Mesh(verts, faces), owner
