"""Per-face linear maps and their recovery into vertices via a Poisson solve.

The deformation state at the fine scale is one 3x3 matrix per face. Vertex
positions are the least-squares solution of

    min_phi  sum_i area_i * || grad_i phi - J_i ||_F^2

whose normal equations use the area-weighted face-gradient operator. The
system is singular up to one translation per connected component; we ground
one vertex per component for the factorization and afterwards translate each
component so its centroid matches the rest centroid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .mesh import Mesh, face_gradient_operator

# Incremented once per factorization; lets callers assert factorization reuse.
FACTORIZE_COUNT = 0


@dataclass
class PoissonFactorization:
    """Prefactored normal equations for one mesh's rest geometry."""

    grad_op: sp.csr_matrix         # (3F, V)
    area_weights: np.ndarray       # (3F,) face areas repeated per row
    keep: np.ndarray               # indices of un-grounded vertices
    lu: object                     # SuperLU of the reduced system
    component_labels: np.ndarray   # (V,)
    rest_component_centroids: np.ndarray  # (num_components, 3)
    num_vertices: int
    num_faces: int

    def _component_recenter(self, x: np.ndarray) -> np.ndarray:
        """Translate each component so its centroid matches rest."""
        out = x.copy()
        for c in range(self.rest_component_centroids.shape[0]):
            m = self.component_labels == c
            out[m] += self.rest_component_centroids[c] - x[m].mean(axis=0)
        return out

    def remove_component_means(self, x: np.ndarray) -> np.ndarray:
        """Project out per-component constant modes (rows of x)."""
        out = x.copy()
        for c in range(self.rest_component_centroids.shape[0]):
            m = self.component_labels == c
            out[m] -= x[m].mean(axis=0)
        return out


def factorize_poisson(mesh: Mesh) -> PoissonFactorization:
    """Build and factor the area-weighted Poisson normal equations.

    Cost is dominated by one sparse LU of the grounded SPD system; solves and
    adjoints reuse it.
    """
    global FACTORIZE_COUNT
    FACTORIZE_COUNT += 1

    grad_op = face_gradient_operator(mesh)
    areas = mesh.face_areas()
    w = np.repeat(areas, 3)
    lap = (grad_op.T @ sp.diags(w) @ grad_op).tocsc()

    labels = mesh.vertex_connected_components()
    ncomp = int(labels.max()) + 1
    grounded = np.array(
        [np.flatnonzero(labels == c)[0] for c in range(ncomp)], dtype=np.int64
    )
    keep = np.setdiff1d(np.arange(mesh.num_vertices), grounded)
    reduced = lap[keep][:, keep].tocsc()
    lu = splu(reduced)

    centroids = np.stack(
        [mesh.vertices[labels == c].mean(axis=0) for c in range(ncomp)]
    )
    return PoissonFactorization(
        grad_op=grad_op,
        area_weights=w,
        keep=keep,
        lu=lu,
        component_labels=labels,
        rest_component_centroids=centroids,
        num_vertices=mesh.num_vertices,
        num_faces=mesh.num_faces,
    )


def _check_jacobians(fact: PoissonFactorization, jacobians: np.ndarray) -> np.ndarray:
    j = np.asarray(jacobians, dtype=np.float64)
    if j.shape != (fact.num_faces, 3, 3):
        raise ValueError(
            f"jacobians must be ({fact.num_faces}, 3, 3), got {j.shape}"
        )
    if not np.isfinite(j).all():
        raise ValueError("non-finite jacobian entries")
    return j


def solve_poisson(fact: PoissonFactorization, jacobians: np.ndarray) -> np.ndarray:
    """Vertex positions whose per-face gradients best match the given maps.

    jacobians is (F, 3, 3), row c of J_i being the target gradient of
    coordinate c over face i. Returns (V, 3).
    """
    j = _check_jacobians(fact, jacobians)
    # Stack so column c of rows 3i..3i+2 is the target gradient of phi_c.
    s = j.transpose(0, 2, 1).reshape(-1, 3)
    b = fact.grad_op.T @ (fact.area_weights[:, None] * s)
    x = np.zeros((fact.num_vertices, 3))
    x[fact.keep] = fact.lu.solve(b[fact.keep])
    return fact._component_recenter(x)


def poisson_adjoint(fact: PoissonFactorization, dl_dvertices: np.ndarray) -> np.ndarray:
    """Pull a vertex-position gradient back to the per-face maps.

    Exact adjoint of solve_poisson (one extra backsolve): the centroid pinning
    projects out per-component means, then the solve and the weighted gradient
    operator are applied in transpose order. Returns (F, 3, 3).
    """
    g = np.asarray(dl_dvertices, dtype=np.float64)
    if g.shape != (fact.num_vertices, 3):
        raise ValueError(f"expected ({fact.num_vertices}, 3), got {g.shape}")
    g = fact.remove_component_means(g)
    y = np.zeros((fact.num_vertices, 3))
    y[fact.keep] = fact.lu.solve(g[fact.keep])
    q = fact.area_weights[:, None] * (fact.grad_op @ y)  # (3F, 3)
    return q.reshape(fact.num_faces, 3, 3).transpose(0, 2, 1)


def identity_reg(jacobians: np.ndarray, areas: np.ndarray) -> tuple[float, np.ndarray]:
    """Area-weighted deviation from the identity map.

    loss = sum_i a_i ||J_i - I||_F^2 / sum_i a_i; returns (loss, dloss/dJ).
    """
    j = np.asarray(jacobians, dtype=np.float64)
    a = np.asarray(areas, dtype=np.float64)
    if j.ndim != 3 or j.shape[1:] != (3, 3) or a.shape != (j.shape[0],):
        raise ValueError("shape mismatch between jacobians and areas")
    total = a.sum()
    if total <= 0:
        raise ValueError("areas must have positive sum")
    d = j - np.eye(3)
    w = a / total
    loss = float(np.einsum("i,ijk,ijk->", w, d, d))
    grad = 2.0 * w[:, None, None] * d
    return loss, grad
