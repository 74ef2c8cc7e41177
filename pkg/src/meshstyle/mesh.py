"""Triangle mesh container, OBJ I/O and the per-face gradient operator."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components


class MeshError(Exception):
    """Raised for malformed mesh files or invalid mesh data."""


@dataclass
class Mesh:
    """Indexed triangle mesh.

    Attributes
    ----------
    vertices : (V, 3) float64 array
    faces : (F, 3) int64 array
        Vertex indices, counter-clockwise as stored.
    """

    vertices: np.ndarray
    faces: np.ndarray
    _areas: np.ndarray | None = field(default=None, repr=False, compare=False)
    _normals: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise MeshError(f"vertex array must be (V, 3), got {self.vertices.shape}")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise MeshError(f"face array must be (F, 3), got {self.faces.shape}")

    @property
    def num_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def num_faces(self) -> int:
        return self.faces.shape[0]

    def face_corner_vectors(self):
        """Return (v0, v1, v2) corner position arrays, each (F, 3)."""
        v = self.vertices
        f = self.faces
        return v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]

    def face_areas(self) -> np.ndarray:
        """Per-face areas, (F,). Cached; invalidate via replace_vertices."""
        if self._areas is None:
            v0, v1, v2 = self.face_corner_vectors()
            cr = np.cross(v1 - v0, v2 - v0)
            self._areas = 0.5 * np.linalg.norm(cr, axis=1)
        return self._areas

    def face_normals(self) -> np.ndarray:
        """Unit face normals from the stored winding, (F, 3)."""
        if self._normals is None:
            v0, v1, v2 = self.face_corner_vectors()
            cr = np.cross(v1 - v0, v2 - v0)
            nrm = np.linalg.norm(cr, axis=1, keepdims=True)
            if np.any(nrm == 0.0):
                bad = np.flatnonzero(nrm[:, 0] == 0.0)
                raise MeshError(f"zero-area faces: {bad.tolist()[:16]}")
            self._normals = cr / nrm
        return self._normals

    def replace_vertices(self, vertices: np.ndarray) -> "Mesh":
        """New mesh with the same faces and different vertex positions."""
        return Mesh(np.asarray(vertices, dtype=np.float64), self.faces)

    def bbox_diagonal(self) -> float:
        lo = self.vertices.min(axis=0)
        hi = self.vertices.max(axis=0)
        return float(np.linalg.norm(hi - lo))

    def centroid(self) -> np.ndarray:
        return self.vertices.mean(axis=0)

    def validate(self) -> None:
        """Check finiteness, index ranges and non-degenerate faces.

        Raises MeshError listing (a prefix of) the offending faces.
        """
        if not np.isfinite(self.vertices).all():
            bad = np.flatnonzero(~np.isfinite(self.vertices).all(axis=1))
            raise MeshError(f"non-finite vertex coordinates at {bad.tolist()[:16]}")
        if self.num_faces:
            if self.faces.min() < 0 or self.faces.max() >= self.num_vertices:
                bad = np.flatnonzero(
                    (self.faces < 0).any(axis=1)
                    | (self.faces >= self.num_vertices).any(axis=1)
                )
                raise MeshError(f"faces with out-of-range indices: {bad.tolist()[:16]}")
            rep = (
                (self.faces[:, 0] == self.faces[:, 1])
                | (self.faces[:, 1] == self.faces[:, 2])
                | (self.faces[:, 0] == self.faces[:, 2])
            )
            if rep.any():
                raise MeshError(
                    f"degenerate faces (repeated vertex): {np.flatnonzero(rep).tolist()[:16]}"
                )
            # Relative floor: collapsing a face to a segment yields exactly 0,
            # near-collapsed faces make the gradient operator blow up.
            areas = self.face_areas()
            floor = 1e-14 * max(self.bbox_diagonal() ** 2, 1e-300)
            small = areas <= floor
            if small.any():
                raise MeshError(
                    f"zero-area faces: {np.flatnonzero(small).tolist()[:16]}"
                )

    def vertex_connected_components(self) -> np.ndarray:
        """Component label per vertex from face connectivity, (V,)."""
        f = self.faces
        rows = np.concatenate([f[:, 0], f[:, 1], f[:, 2]])
        cols = np.concatenate([f[:, 1], f[:, 2], f[:, 0]])
        data = np.ones(rows.shape[0], dtype=np.int8)
        adj = sp.coo_matrix((data, (rows, cols)), shape=(self.num_vertices,) * 2)
        _, labels = connected_components(adj, directed=False)
        return labels


def _parse_face_token(token: str, num_vertices: int, lineno: int) -> int:
    # "v", "v/vt", "v//vn", "v/vt/vn" forms; negative indices are relative.
    head = token.split("/", 1)[0]
    try:
        idx = int(head)
    except ValueError:
        raise MeshError(f"line {lineno}: bad face index {token!r}") from None
    if idx < 0:
        idx = num_vertices + idx
    else:
        idx = idx - 1
    if idx < 0 or idx >= num_vertices:
        raise MeshError(f"line {lineno}: face index {token!r} out of range")
    return idx


def load_mesh(path: str | os.PathLike) -> Mesh:
    """Load an ASCII OBJ file.

    Only ``v`` and ``f`` records are interpreted; texture/normal records are
    skipped. Polygonal faces are fan-triangulated around their first vertex.
    The loaded mesh is validated (finite vertices, in-range indices, no
    degenerate or zero-area faces).
    """
    vertices: list[list[float]] = []
    faces: list[tuple[int, int, int]] = []
    try:
        fh = open(path, "r", encoding="utf-8", errors="replace")
    except OSError as exc:
        raise MeshError(f"cannot open {path}: {exc}") from None
    with fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            tag = parts[0]
            if tag == "v":
                if len(parts) < 4:
                    raise MeshError(f"line {lineno}: vertex needs 3 coordinates")
                try:
                    vertices.append([float(parts[1]), float(parts[2]), float(parts[3])])
                except ValueError:
                    raise MeshError(f"line {lineno}: bad vertex coordinate") from None
            elif tag == "f":
                if len(parts) < 4:
                    raise MeshError(f"line {lineno}: face needs at least 3 vertices")
                idx = [_parse_face_token(t, len(vertices), lineno) for t in parts[1:]]
                for k in range(1, len(idx) - 1):
                    faces.append((idx[0], idx[k], idx[k + 1]))
            # vt, vn, vp, usemtl, o, g, s, mtllib: ignored
    if not vertices:
        raise MeshError(f"{path}: no vertices")
    mesh = Mesh(np.asarray(vertices, dtype=np.float64), np.asarray(faces, dtype=np.int64).reshape(-1, 3))
    mesh.validate()
    return mesh


def save_obj(path: str | os.PathLike, mesh: Mesh) -> None:
    """Write an ASCII OBJ with 9 significant digits per coordinate."""
    lines = []
    for x, y, z in mesh.vertices:
        lines.append(f"v {x:.9g} {y:.9g} {z:.9g}")
    for a, b, c in mesh.faces:
        lines.append(f"f {a + 1} {b + 1} {c + 1}")
    lines.append("")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines))


def face_gradient_operator(mesh: Mesh) -> sp.csr_matrix:
    """Sparse (3F, V) operator taking per-vertex scalars to per-face gradients.

    Rows ``3i..3i+2`` hold the xyz components of the gradient of the linear
    interpolant over face ``i``: the hat-function gradient of corner ``k`` is
    ``cross(n, opposite_edge) / (2 * area)``.

    Raises MeshError on zero-area faces (singular gradient).
    """
    areas = mesh.face_areas()
    if np.any(areas == 0.0):
        bad = np.flatnonzero(areas == 0.0)
        raise MeshError(f"zero-area faces: {bad.tolist()[:16]}")
    v0, v1, v2 = mesh.face_corner_vectors()
    normals = mesh.face_normals()
    inv2a = 1.0 / (2.0 * areas)[:, None]
    grads = np.stack(
        [
            np.cross(normals, v2 - v1) * inv2a,
            np.cross(normals, v0 - v2) * inv2a,
            np.cross(normals, v1 - v0) * inv2a,
        ],
        axis=1,
    )  # (F, 3 corners, 3 xyz)

    F = mesh.num_faces
    rows = (3 * np.arange(F)[:, None, None] + np.arange(3)[None, None, :])  # (F,1,3)
    rows = np.broadcast_to(rows, (F, 3, 3))
    cols = np.broadcast_to(mesh.faces[:, :, None], (F, 3, 3))
    data = grads  # grads[i, k, r] multiplies vertex faces[i, k] into row 3i+r
    mat = sp.coo_matrix(
        (data.ravel(), (rows.ravel(), cols.ravel())),
        shape=(3 * F, mesh.num_vertices),
    )
    return mat.tocsr()


def apply_gradient(op: sp.csr_matrix, values: np.ndarray) -> np.ndarray:
    """Apply the gradient operator to per-vertex values.

    values may be (V,) or (V, C); returns (F, 3) or (F, 3, C).
    """
    out = op @ values
    if values.ndim == 1:
        return out.reshape(-1, 3)
    return out.reshape(-1, 3, values.shape[1])
