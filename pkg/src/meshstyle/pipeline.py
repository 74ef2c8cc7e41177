"""Interleaved coarse-to-fine mesh optimization.

Each coarse iteration nudges per-part similarity transforms of an auxiliary
sphere mesh (guidance + symmetry on the sphere centers), then a target
iteration updates the per-face maps (guidance + identity regularizer +
symmetry + a cage-consistency term that pulls the fine geometry toward the
coarse transforms, with a weight that decays linearly over the coarse
phase). The fine phase afterwards is exactly the target step with the cage
weight pinned to zero.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .cage import OBBCage, PartSet, cage_loss, fit_obb, trilinear_coeffs
from .encoder import EncoderMap, encode_approx, encode_backward
from .jacobian import (
    PoissonFactorization,
    factorize_poisson,
    identity_reg,
    poisson_adjoint,
    solve_poisson,
)
from .mesh import Mesh, save_obj
from .optim import (
    Adam,
    quat_normalize,
    quat_to_matrix,
    transform_gradients,
    transform_points,
)
from .render import RenderConfig, render_soft, render_backward, sample_camera
from .sampling import build_sphere_aux_mesh, farthest_point_sample
from .symmetry import SymmetryPlane, detect_symmetry_planes, symmetry_loss


class PipelineError(Exception):
    """Raised when an optimization step cannot proceed."""


@dataclass
class ScheduleConfig:
    """Stage lengths, loss weights and learning rates.

    Defaults are desk-scale (300 + 300 iterations); production-quality runs
    use n_coarse=1800, n_total=3600 with the same weights.
    """

    n_coarse: int = 300
    n_total: int = 600
    lambda_guidance_coarse: float = 1.0
    lambda_sym_coarse: float = 50.0
    lambda_guidance_fine: float = 1.0
    lambda_identity: float = 0.5
    lambda_sym_fine: float = 50.0
    lambda_cage: float = 1000.0
    lr_jacobian: float = 1e-3
    lr_translation: float = 1e-2
    lr_scale: float = 5e-3
    lr_rotation: float = 5e-3
    aux_centers: int = 256
    aux_subdivisions: int = 1
    aux_radius_scale: float = 0.5
    checkpoint_interval: int = 100
    seed: int = 0
    deterministic: bool = False
    symmetry: str = "auto"  # "auto" | "off"
    parts_select: tuple[int, ...] | None = None

    def validate(self) -> None:
        if self.n_total < self.n_coarse or self.n_coarse < 0:
            raise ValueError(
                f"need 0 <= n_coarse <= n_total, got {self.n_coarse}, {self.n_total}"
            )
        if self.symmetry not in ("auto", "off"):
            raise ValueError(f"symmetry must be 'auto' or 'off', got {self.symmetry!r}")


def lambda6_schedule(t: int, n_coarse: int, lam_cage: float) -> float:
    """Linearly decayed cage weight: lam * (1 - 0.99 t / N1).

    Computed as an exact rational so the endpoints are bitwise lam_cage and
    0.01 * lam_cage.
    """
    if n_coarse <= 0:
        raise ValueError("n_coarse must be positive")
    if not 0 <= t <= n_coarse:
        raise ValueError(f"t={t} outside [0, {n_coarse}]")
    return lam_cage * ((100.0 * n_coarse - 99.0 * t) / (100.0 * n_coarse))


@dataclass
class PartTransform:
    """Similarity transform (scale, quaternion, translation) of one part."""

    scale: float = 1.0
    quat: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def as_dict(self) -> dict:
        return {
            "scale": self.scale,
            "quat": [float(x) for x in self.quat],
            "translation": [float(x) for x in self.translation],
        }


@dataclass
class StepTelemetry:
    iteration: int
    phase: str
    guidance: float
    symmetry: float
    identity: float
    cage: float
    lambda6: float
    total: float

    def row(self) -> list:
        return [
            self.iteration,
            self.phase,
            repr(self.guidance),
            repr(self.symmetry),
            repr(self.identity),
            repr(self.cage),
            repr(self.lambda6),
            repr(self.total),
        ]


REPORT_HEADER = [
    "iteration",
    "phase",
    "loss_guidance",
    "loss_symmetry",
    "loss_identity",
    "loss_cage",
    "lambda6",
    "total",
]


@dataclass
class OptimState:
    """Everything one optimization run mutates."""

    mesh: Mesh
    parts: PartSet
    face_parts: np.ndarray
    fact: PoissonFactorization
    jacobians: np.ndarray
    aux_mesh: Mesh
    aux_owner: np.ndarray
    aux_centers: np.ndarray
    center_parts: np.ndarray
    transforms: list[PartTransform]
    boxes_rest: list[OBBCage]
    rest_coeffs: list[np.ndarray]
    target_planes: list[SymmetryPlane]
    aux_planes: list[SymmetryPlane]
    schedule: ScheduleConfig
    render_config: RenderConfig
    provider: object
    encoder_map: EncoderMap | None
    adam: Adam
    rng: np.random.Generator


def majority_face_parts(faces: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Part id per face: majority vote of vertex labels, ties to the lowest id."""
    l = np.sort(labels[faces], axis=1)
    out = np.where(l[:, 1] == l[:, 2], l[:, 1], l[:, 0])
    return np.where(l[:, 0] == l[:, 1], l[:, 0], out)


def mask_gradients(
    dj: np.ndarray, face_parts: np.ndarray, selection: tuple[int, ...] | None
) -> np.ndarray:
    """Zero the per-face gradient outside the selected parts."""
    if selection is None:
        return dj
    if len(selection) == 0:
        raise ValueError("part selection must be nonempty")
    known = set(np.unique(face_parts).tolist())
    bad = [s for s in selection if s not in known]
    if bad:
        raise ValueError(f"unknown part ids in selection: {bad}")
    keep = np.isin(face_parts, list(selection))
    out = dj.copy()
    out[~keep] = 0.0
    return out


def setup_state(
    mesh: Mesh,
    schedule: ScheduleConfig,
    render_config: RenderConfig,
    provider,
    parts: PartSet | None = None,
    encoder_map: EncoderMap | None = None,
) -> OptimState:
    """Prepare factorizations, cages, the aux mesh and symmetry pairs."""
    schedule.validate()
    mesh.validate()
    if parts is None:
        parts = PartSet.from_labels(np.ones(mesh.num_vertices, dtype=np.int64))
    if len(parts.labels) != mesh.num_vertices:
        raise ValueError("part labels do not match the mesh")
    if getattr(provider, "latent_space", False):
        if encoder_map is None:
            raise ValueError("latent-space providers need an encoder map")
        res = (render_config.resolution, render_config.resolution)
        if tuple(encoder_map.source_resolution) != res:
            raise ValueError(
                f"encoder map source {encoder_map.source_resolution} != render {res}"
            )
    if schedule.parts_select is not None:
        valid = set(range(1, parts.num_parts + 1))
        bad = [s for s in schedule.parts_select if s not in valid]
        if len(schedule.parts_select) == 0 or bad:
            raise ValueError(f"invalid part selection: {schedule.parts_select}")

    fact = factorize_poisson(mesh)
    jac = np.broadcast_to(np.eye(3), (mesh.num_faces, 3, 3)).copy()

    k = min(schedule.aux_centers, mesh.num_vertices)
    center_idx = farthest_point_sample(mesh.vertices, k)
    centers = mesh.vertices[center_idx].copy()
    center_parts = parts.labels[center_idx].copy()
    radius = None
    if k >= 2:
        from .sampling import median_nn_distance

        radius = schedule.aux_radius_scale * median_nn_distance(centers)
    else:
        radius = schedule.aux_radius_scale * mesh.bbox_diagonal()
    aux_mesh, aux_owner = build_sphere_aux_mesh(
        centers, radius=radius, subdivisions=schedule.aux_subdivisions
    )

    boxes = []
    coeffs = []
    for l in range(parts.num_parts):
        pts = mesh.vertices[parts.part_indices[l]]
        box = fit_obb(pts)
        boxes.append(box)
        coeffs.append(trilinear_coeffs(pts, box))

    target_planes: list[SymmetryPlane] = []
    aux_planes: list[SymmetryPlane] = []
    if schedule.symmetry == "auto":
        target_planes = detect_symmetry_planes(mesh.vertices)
        if len(centers) >= 3:
            aux_planes = detect_symmetry_planes(centers)

    return OptimState(
        mesh=mesh,
        parts=parts,
        face_parts=majority_face_parts(mesh.faces, parts.labels),
        fact=fact,
        jacobians=jac,
        aux_mesh=aux_mesh,
        aux_owner=aux_owner,
        aux_centers=centers,
        center_parts=center_parts,
        transforms=[PartTransform() for _ in range(parts.num_parts)],
        boxes_rest=boxes,
        rest_coeffs=coeffs,
        target_planes=target_planes,
        aux_planes=aux_planes,
        schedule=schedule,
        render_config=render_config,
        provider=provider,
        encoder_map=encoder_map,
        adam=Adam(),
        rng=np.random.Generator(np.random.PCG64(schedule.seed)),
    )


def current_centers(state: OptimState) -> np.ndarray:
    """Aux centers under the current per-part transforms, (K, 3)."""
    out = state.aux_centers.copy()
    for l, tr in enumerate(state.transforms):
        m = state.center_parts == l + 1
        out[m] = transform_points(tr.scale, tr.quat, tr.translation, state.aux_centers[m])
    return out


def current_aux_vertices(state: OptimState) -> np.ndarray:
    """Aux sphere vertices: each sphere rides rigidly on its center."""
    moved = current_centers(state)
    shift = moved - state.aux_centers
    return state.aux_mesh.vertices + shift[state.aux_owner]


def current_boxes(state: OptimState) -> list[OBBCage]:
    return [
        box.transformed(tr.scale, quat_to_matrix(tr.quat), tr.translation)
        for box, tr in zip(state.boxes_rest, state.transforms)
    ]


def _guidance_gradient(
    state: OptimState, vertices: np.ndarray, faces: np.ndarray
) -> tuple[float, np.ndarray]:
    """Batch of views -> (telemetry scalar, dL/dvertices averaged over views)."""
    cfg = state.render_config
    nviews = cfg.batch_size
    cams = [sample_camera(state.rng, cfg) for _ in range(nviews)]
    renders = [render_soft(vertices, faces, cam, cfg) for cam in cams]
    grad = np.zeros_like(vertices, dtype=np.float64)
    if getattr(state.provider, "latent_space", False):
        emap = state.encoder_map
        latents = np.stack([encode_approx(emap, r.rgb) for r in renders])
        seed = int(state.rng.integers(0, 2**31 - 1))
        value, latent_grads = state.provider.latent_gradient(latents, seed)
        for b, render in enumerate(renders):
            dl_drgb = encode_backward(emap, np.asarray(latent_grads[b], dtype=np.float64))
            grad += render_backward(render, dl_drgb=dl_drgb)
    else:
        value = 0.0
        for render in renders:
            loss, dl_drgb, dl_dalpha = state.provider.pixel_gradient(render)
            value += loss / nviews
            grad += render_backward(render, dl_drgb=dl_drgb, dl_dalpha=dl_dalpha)
    return value, grad / nviews


def _check_finite(name: str, *arrays) -> None:
    for arr in arrays:
        if not np.isfinite(arr).all():
            raise PipelineError(f"non-finite values in {name}")


def coarse_step(state: OptimState, t: int) -> StepTelemetry:
    """One update of the per-part similarity transforms."""
    sch = state.schedule
    cams_consumed_guidance = sch.lambda_guidance_coarse != 0.0
    if cams_consumed_guidance:
        aux_verts = current_aux_vertices(state)
        g_value, dl_dverts = _guidance_gradient(state, aux_verts, state.aux_mesh.faces)
        dl_dverts *= sch.lambda_guidance_coarse
    else:
        # keep the camera stream aligned with guidance-bearing configs
        for _ in range(state.render_config.batch_size):
            sample_camera(state.rng, state.render_config)
        g_value = 0.0
        dl_dverts = np.zeros_like(state.aux_mesh.vertices)

    s_value = 0.0
    dl_dcenters = np.zeros_like(state.aux_centers)
    if sch.lambda_sym_coarse != 0.0 and state.aux_planes:
        s_value, dl_dcenters = symmetry_loss(current_centers(state), state.aux_planes)
        dl_dcenters = sch.lambda_sym_coarse * dl_dcenters
    _check_finite("coarse gradients", dl_dverts, dl_dcenters)

    for l, tr in enumerate(state.transforms):
        vmask = state.center_parts[state.aux_owner] == l + 1
        cmask = state.center_parts == l + 1
        # sphere vertices ride on their center, so their transform gradient
        # uses the owner center as the base point
        pts = np.concatenate(
            [state.aux_centers[state.aux_owner[vmask]], state.aux_centers[cmask]]
        )
        gs = np.concatenate([dl_dverts[vmask], dl_dcenters[cmask]])
        dl_ds, dl_dq, dl_dt = transform_gradients(tr.scale, tr.quat, pts, gs)
        new_s = state.adam.step(f"scale_{l}", np.float64(tr.scale), dl_ds, sch.lr_scale)
        new_q = state.adam.step(f"quat_{l}", tr.quat, dl_dq, sch.lr_rotation)
        new_t = state.adam.step(f"trans_{l}", tr.translation, dl_dt, sch.lr_translation)
        tr.scale = float(max(new_s, 1e-4))
        tr.quat = quat_normalize(new_q)
        tr.translation = np.asarray(new_t, dtype=np.float64)

    lam6 = lambda6_schedule(min(t, sch.n_coarse), sch.n_coarse, sch.lambda_cage)
    guidance = sch.lambda_guidance_coarse * g_value
    symmetry = sch.lambda_sym_coarse * s_value
    return StepTelemetry(
        iteration=t,
        phase="coarse",
        guidance=guidance,
        symmetry=symmetry,
        identity=0.0,
        cage=0.0,
        lambda6=lam6,
        total=guidance + symmetry,
    )


def target_step(state: OptimState, t: int, lam6: float) -> StepTelemetry:
    """One update of the per-face maps through the Poisson adjoint."""
    sch = state.schedule
    vertices = solve_poisson(state.fact, state.jacobians)

    if sch.lambda_guidance_fine != 0.0:
        g_value, dl_dverts = _guidance_gradient(state, vertices, state.mesh.faces)
        dl_dverts = sch.lambda_guidance_fine * dl_dverts
    else:
        for _ in range(state.render_config.batch_size):
            sample_camera(state.rng, state.render_config)
        g_value = 0.0
        dl_dverts = np.zeros_like(vertices)

    s_value = 0.0
    if sch.lambda_sym_fine != 0.0 and state.target_planes:
        s_value, ds = symmetry_loss(vertices, state.target_planes)
        dl_dverts += sch.lambda_sym_fine * ds

    c_value = 0.0
    if lam6 != 0.0:
        c_value, dc = cage_loss(
            state.parts, state.rest_coeffs, current_boxes(state), vertices
        )
        dl_dverts += lam6 * dc

    i_value, dj_identity = identity_reg(state.jacobians, state.mesh.face_areas())

    _check_finite("target gradients", dl_dverts, dj_identity)
    dj = poisson_adjoint(state.fact, dl_dverts) + sch.lambda_identity * dj_identity
    dj = mask_gradients(dj, state.face_parts, sch.parts_select)
    state.jacobians = state.adam.step("jacobians", state.jacobians, dj, sch.lr_jacobian)

    guidance = sch.lambda_guidance_fine * g_value
    symmetry = sch.lambda_sym_fine * s_value
    identity = sch.lambda_identity * i_value
    cage = lam6 * c_value
    return StepTelemetry(
        iteration=t,
        phase="target" if lam6 != 0.0 else "fine",
        guidance=guidance,
        symmetry=symmetry,
        identity=identity,
        cage=cage,
        lambda6=lam6,
        total=guidance + symmetry + identity + cage,
    )


def fine_step(state: OptimState, t: int) -> StepTelemetry:
    """Fine-phase update: exactly the target step with zero cage weight."""
    return target_step(state, t, 0.0)


def _write_checkpoint(state: OptimState, out_dir: str, t: int, telemetry: StepTelemetry | None) -> None:
    vertices = solve_poisson(state.fact, state.jacobians)
    mesh = state.mesh.replace_vertices(vertices)
    save_obj(os.path.join(out_dir, f"ckpt_{t:06d}.obj"), mesh)
    sidecar = {
        "iteration": t,
        "transforms": [tr.as_dict() for tr in state.transforms],
        "telemetry": telemetry.__dict__ if telemetry else None,
    }
    with open(os.path.join(out_dir, f"ckpt_{t:06d}.json"), "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=1, sort_keys=True)


def write_symmetry_report(path, target_planes, aux_planes) -> None:
    lines = [f"target_planes {len(target_planes)}"]
    for p in target_planes:
        n = p.axis
        lines.append(
            f"plane axis={p.axis_index} normal={n[0]:.9g},{n[1]:.9g},{n[2]:.9g} "
            f"pairs={len(p.pairs)} max_residual={p.max_residual:.9g} "
            f"sum_residual={p.sum_residual:.9g}"
        )
    lines.append(f"aux_planes {len(aux_planes)}")
    for p in aux_planes:
        n = p.axis
        lines.append(
            f"plane axis={p.axis_index} normal={n[0]:.9g},{n[1]:.9g},{n[2]:.9g} "
            f"pairs={len(p.pairs)} max_residual={p.max_residual:.9g} "
            f"sum_residual={p.sum_residual:.9g}"
        )
    lines.append("")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines))


def run(state: OptimState, out_dir: str) -> dict:
    """Run the schedule to completion, writing telemetry and checkpoints.

    Returns a summary dict. Any error mid-run still flushes a checkpoint of
    the latest state before propagating.
    """
    sch = state.schedule
    os.makedirs(out_dir, exist_ok=True)
    if sch.deterministic:
        import torch

        torch.set_num_threads(1)
    write_symmetry_report(
        os.path.join(out_dir, "symmetry.txt"), state.target_planes, state.aux_planes
    )
    report_path = os.path.join(out_dir, "report.csv")
    t = 0
    last_telemetry: StepTelemetry | None = None
    with open(report_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_HEADER)
        try:
            for t in range(1, sch.n_total + 1):
                if t <= sch.n_coarse:
                    tele = coarse_step(state, t)
                    writer.writerow(tele.row())
                    lam6 = lambda6_schedule(t, sch.n_coarse, sch.lambda_cage)
                    tele = target_step(state, t, lam6)
                else:
                    tele = fine_step(state, t)
                writer.writerow(tele.row())
                last_telemetry = tele
                if sch.checkpoint_interval and t % sch.checkpoint_interval == 0:
                    _write_checkpoint(state, out_dir, t, tele)
        except Exception:
            _write_checkpoint(state, out_dir, t, last_telemetry)
            raise

    vertices = solve_poisson(state.fact, state.jacobians)
    final = state.mesh.replace_vertices(vertices)
    save_obj(os.path.join(out_dir, "final.obj"), final)
    summary = {
        "iterations": sch.n_total,
        "final": last_telemetry.__dict__ if last_telemetry else None,
        "transforms": [tr.as_dict() for tr in state.transforms],
    }
    with open(os.path.join(out_dir, "final.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
    return summary
