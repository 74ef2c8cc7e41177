"""Adam updates and similarity-transform parameterization for the coarse stage.

Rotations are stored as unnormalized quaternions; the rotation matrix uses
the normalized quaternion and gradients chain through the normalization map,
so optimizer steps never need an explicit manifold projection (we still
renormalize after each step to keep the parameterization well-scaled).
"""

from __future__ import annotations

import numpy as np


class Adam:
    """Minimal Adam with bias correction; one moment pair per named slot."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t: dict[str, int] = {}

    def step(self, name: str, value: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
        """Return the updated value; moments are tracked under `name`."""
        g = np.asarray(grad, dtype=np.float64)
        if name not in self._m:
            self._m[name] = np.zeros_like(g)
            self._v[name] = np.zeros_like(g)
            self._t[name] = 0
        self._t[name] += 1
        t = self._t[name]
        m = self._m[name] = self.beta1 * self._m[name] + (1.0 - self.beta1) * g
        v = self._v[name] = self.beta2 * self._v[name] + (1.0 - self.beta2) * g * g
        m_hat = m / (1.0 - self.beta1**t)
        v_hat = v / (1.0 - self.beta2**t)
        return np.asarray(value, dtype=np.float64) - lr * m_hat / (np.sqrt(v_hat) + self.eps)


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n < 1e-12:
        raise ValueError("degenerate quaternion")
    return q / n


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a quaternion (w, x, y, z); normalizes internally."""
    w, x, y, z = quat_normalize(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def _matrix_quat_partials(qh: np.ndarray) -> np.ndarray:
    """dR/dq_hat as a (4, 3, 3) array at a unit quaternion."""
    w, x, y, z = qh
    dw = 2.0 * np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]], dtype=np.float64)
    dx = 2.0 * np.array([[0, y, z], [y, -2 * x, -w], [z, w, -2 * x]], dtype=np.float64)
    dy = 2.0 * np.array([[-2 * y, x, w], [x, 0, z], [-w, z, -2 * y]], dtype=np.float64)
    dz = 2.0 * np.array([[-2 * z, -w, x], [w, -2 * z, y], [x, y, 0]], dtype=np.float64)
    return np.stack([dw, dx, dy, dz])


def quat_rotation_gradient(q: np.ndarray, dl_dmat: np.ndarray) -> np.ndarray:
    """Pull dL/dR back to the raw (unnormalized) quaternion, (4,)."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    qh = q / n
    partials = _matrix_quat_partials(qh)
    dl_dqh = np.einsum("cij,ij->c", partials, np.asarray(dl_dmat, dtype=np.float64))
    # chain through normalization: dqh/dq = (I - qh qh^T) / |q|
    return (dl_dqh - qh * (qh @ dl_dqh)) / n


def transform_points(scale: float, q: np.ndarray, translation: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Apply x -> scale * R(q) x + t to rows of points."""
    rot = quat_to_matrix(q)
    return scale * np.asarray(points, dtype=np.float64) @ rot.T + np.asarray(
        translation, dtype=np.float64
    )


def transform_gradients(
    scale: float,
    q: np.ndarray,
    points: np.ndarray,
    dl_dout: np.ndarray,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Gradients of sum_i <dl_dout_i, s R p_i + t> w.r.t. (s, q, t)."""
    pts = np.asarray(points, dtype=np.float64)
    g = np.asarray(dl_dout, dtype=np.float64)
    rot = quat_to_matrix(q)
    dl_ds = float(np.sum(g * (pts @ rot.T)))
    dl_dmat = scale * (g.T @ pts)
    dl_dq = quat_rotation_gradient(q, dl_dmat)
    dl_dt = g.sum(axis=0)
    return dl_ds, dl_dq, dl_dt
