import numpy as np
import pytest

from meshstyle.sampling import (
    build_sphere_aux_mesh,
    farthest_point_sample,
    icosphere,
    median_nn_distance,
)


def test_fps_greedy_optimality(rng):
    # At every step the chosen point maximizes the min-distance to the set.
    pts = rng.normal(size=(60, 3))
    idx = farthest_point_sample(pts, 12)
    assert idx[0] == 0
    for k in range(1, 12):
        current = pts[idx[:k]]
        dmin = np.linalg.norm(pts[:, None, :] - current[None, :, :], axis=2).min(axis=1)
        assert dmin[idx[k]] == dmin.max()


def test_fps_seed_and_full_selection(rng):
    pts = rng.normal(size=(15, 3))
    idx = farthest_point_sample(pts, 15, seed_index=3)
    assert idx[0] == 3
    assert sorted(idx) == list(range(15))
    again = farthest_point_sample(pts, 15, seed_index=3)
    assert np.array_equal(idx, again)


def test_fps_argument_validation(rng):
    pts = rng.normal(size=(5, 3))
    with pytest.raises(ValueError):
        farthest_point_sample(pts, 0)
    with pytest.raises(ValueError):
        farthest_point_sample(pts, 6)
    with pytest.raises(ValueError):
        farthest_point_sample(pts, 2, seed_index=5)


@pytest.mark.parametrize("subdivisions", [0, 1, 2, 3])
def test_icosphere_counts_and_radius(subdivisions):
    mesh = icosphere(subdivisions, radius=2.5)
    assert mesh.num_faces == 20 * 4**subdivisions
    r = np.linalg.norm(mesh.vertices, axis=1)
    assert np.max(np.abs(r - 2.5)) < 1e-12
    mesh.validate()
    # closed surface: V - E + F = 2 with E = 3F/2
    assert mesh.num_vertices - 3 * mesh.num_faces // 2 + mesh.num_faces == 2


def test_icosphere_outward_winding():
    mesh = icosphere(1)
    centers = mesh.vertices[mesh.faces].mean(axis=1)
    assert np.all(np.sum(mesh.face_normals() * centers, axis=1) > 0)


def test_median_nn_distance_brute():
    pts = np.array([[0.0, 0, 0], [1, 0, 0], [3, 0, 0], [3.5, 0, 0]])
    # nearest-neighbor distances: 1, 1, 0.5, 0.5 -> median 0.75
    assert median_nn_distance(pts) == pytest.approx(0.75)
    with pytest.raises(ValueError):
        median_nn_distance(pts[:1])


def test_aux_mesh_structure(rng):
    centers = rng.normal(size=(7, 3)) * 3
    mesh, owner = build_sphere_aux_mesh(centers, subdivisions=1)
    proto = icosphere(1)
    assert mesh.num_vertices == 7 * proto.num_vertices
    assert mesh.num_faces == 7 * proto.num_faces
    assert np.array_equal(owner, np.repeat(np.arange(7), proto.num_vertices))
    labels = mesh.vertex_connected_components()
    assert len(np.unique(labels)) == 7
    # every sphere is the prototype translated to its center
    r_default = 0.5 * median_nn_distance(centers)
    for k in range(7):
        sub = mesh.vertices[owner == k] - centers[k]
        assert np.max(np.abs(np.linalg.norm(sub, axis=1) - r_default)) < 1e-12
    mesh.validate()


def test_aux_mesh_explicit_radius(rng):
    centers = rng.normal(size=(4, 3))
    mesh, owner = build_sphere_aux_mesh(centers, radius=0.125, subdivisions=0)
    sub = mesh.vertices[owner == 2] - centers[2]
    assert np.max(np.abs(np.linalg.norm(sub, axis=1) - 0.125)) < 1e-12
    with pytest.raises(ValueError):
        build_sphere_aux_mesh(centers, radius=0.0)
    with pytest.raises(ValueError):
        build_sphere_aux_mesh(centers[:, :2])
