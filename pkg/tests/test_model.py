import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from headfit.errors import ConfigError, ModelFileError
from headfit.model import (HEAD_SEMI_AXES, N_ANCHORS, N_LANDMARKS, MorphableModel,
                           anchor_points, build_topology, generate_procedural_model, icosphere,
                           instantiate, landmark_points, load_model, model_from_bytes,
                           model_to_bytes, save_model)


@pytest.mark.parametrize("n", [0, 1, 2, 3])
def test_icosphere_counts(n):
    v, f = icosphere(n)
    assert len(v) == 10 * 4 ** n + 2
    assert len(f) == 20 * 4 ** n
    assert np.allclose(np.linalg.norm(v, axis=1), 1.0, atol=1e-12)


def test_icosphere_faces_outward():
    v, f = icosphere(2)
    a, b, c = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
    n = np.cross(b - a, c - a)
    assert np.all(np.einsum("ij,ij->i", n, (a + b + c) / 3) > 0)


def test_small_model_counts(small_model):
    assert small_model.n_vertices == 642
    assert len(small_model.topology.faces) == 1280
    assert small_model.n_components == 10


def test_generation_deterministic():
    a = generate_procedural_model(2, 5, seed=3)
    b = generate_procedural_model(2, 5, seed=3)
    c = generate_procedural_model(2, 5, seed=4)
    assert model_to_bytes(a) == model_to_bytes(b)
    assert model_to_bytes(a) != model_to_bytes(c)


def test_basis_orthonormal(medium_model):
    G = medium_model.basis.T @ medium_model.basis
    assert np.abs(G - np.eye(medium_model.n_components)).max() < 1e-9


def test_basis_free_of_rigid_motion(small_model):
    # infinitesimal translations and rotations of the mean are orthogonal to the basis
    X = small_model.mean_vertices
    fields = []
    for k in range(3):
        e = np.zeros(3)
        e[k] = 1
        fields.append(np.tile(e, len(X)))
        fields.append(np.cross(e, X).ravel())
    F = np.stack(fields, axis=1)
    F /= np.linalg.norm(F, axis=0)
    assert np.abs(F.T @ small_model.basis).max() < 1e-9


def test_singular_values(small_model):
    k = np.arange(1, 11)
    assert np.allclose(small_model.singular_values, 25.0 * k ** -0.8, rtol=1e-12)


def test_mean_shape_extent(small_model):
    ext = small_model.mean_vertices.max(axis=0)
    assert np.allclose(ext, HEAD_SEMI_AXES, rtol=1e-9)


def test_topology_closed_manifold(small_model):
    topo = small_model.topology
    edges = topo.edges
    V, E, F = topo.n_vertices, len(edges), len(topo.faces)
    assert V - E + F == 2
    assert np.all(topo.ring_closed)
    # each consecutive ring pair forms a face around its centre
    faces = {tuple(np.roll(f, -int(np.argmin(f)))) for f in topo.faces.tolist()}
    for i in [0, 5, 100, 641]:
        ring = topo.ring(i)
        for a, b in zip(ring, np.roll(ring, -1)):
            tri = [i, int(a), int(b)]
            k = int(np.argmin(tri))
            assert tuple(tri[k:] + tri[:k]) in faces


def test_build_topology_rejects_bad_faces():
    v, f = icosphere(1)
    with pytest.raises(ConfigError):
        build_topology(f, len(v) - 1)
    with pytest.raises(ConfigError):
        build_topology(np.array([[0, 0, 1]]), 3)


def test_landmarks_and_anchors(small_model):
    lm, an = small_model.landmark_indices, small_model.eval_anchor_indices
    assert len(lm) == N_LANDMARKS and len(np.unique(lm)) == N_LANDMARKS
    assert len(an) == N_ANCHORS and set(an) <= set(lm)
    # landmarks sit on the face side (-z) of the head
    assert np.all(small_model.mean_vertices[lm, 2] < 0)
    # tip of the face is the first landmark
    assert lm[0] == np.argmin(small_model.mean_vertices[:, 2])


def test_instantiate_zero_is_mean(small_model):
    m = instantiate(small_model, np.zeros(10))
    assert np.array_equal(m.vertices, small_model.mean_vertices)


def test_instantiate_unit_component(small_model):
    y = np.zeros(10)
    y[0] = 1.0
    d = instantiate(small_model, y).vertices - small_model.mean_vertices
    assert np.allclose(d.ravel(), small_model.basis[:, 0], atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=10, max_size=10),
       st.lists(st.floats(-50, 50), min_size=10, max_size=10),
       st.floats(-3, 3))
def test_instantiate_affine(small_model, y1, y2, s):
    y1, y2 = np.array(y1), np.array(y2)
    X0 = small_model.mean_vertices
    lhs = instantiate(small_model, y1 + s * y2).vertices - X0
    rhs = (instantiate(small_model, y1).vertices - X0) + s * (instantiate(small_model, y2).vertices - X0)
    assert np.allclose(lhs, rhs, atol=1e-9)


def test_instantiate_shape_errors(small_model):
    with pytest.raises(ConfigError):
        instantiate(small_model, np.zeros(9))
    with pytest.raises(ConfigError):
        instantiate(small_model, np.full(10, np.nan))


def test_landmark_gather_translation(small_model, small_subject):
    _, mesh = small_subject
    p = landmark_points(mesh, small_model)
    assert np.array_equal(p, mesh.vertices[small_model.landmark_indices])
    t = np.array([3.0, -7.0, 11.0])
    moved = mesh.transformed(np.eye(3), t)
    assert np.allclose(landmark_points(moved, small_model), p + t, atol=1e-12)
    assert anchor_points(mesh, small_model).shape == (N_ANCHORS, 3)
    d = np.linalg.norm(p[:, None] - p[None], axis=2) + np.eye(len(p))
    assert d.min() > 0


def test_model_validation(small_model):
    with pytest.raises(ConfigError):
        MorphableModel(small_model.mean_vertices, small_model.basis,
                       small_model.singular_values[::-1].copy(), small_model.topology,
                       small_model.landmark_indices, small_model.eval_anchor_indices)
    bad = small_model.landmark_indices.copy()
    bad[1] = bad[0]
    with pytest.raises(ConfigError):
        MorphableModel(small_model.mean_vertices, small_model.basis, small_model.singular_values,
                       small_model.topology, bad, small_model.eval_anchor_indices)


@pytest.mark.parametrize("args", [(-1, 5), (2, 0), (2, 10 ** 6)])
def test_generation_validation(args):
    with pytest.raises(ConfigError):
        generate_procedural_model(*args)


def test_file_round_trip(tmp_path, small_model):
    path = tmp_path / "m.mmhead"
    save_model(small_model, path)
    m = load_model(path)
    assert model_to_bytes(m) == model_to_bytes(small_model)
    assert np.array_equal(m.basis, small_model.basis)
    assert np.array_equal(m.topology.ring_indices, small_model.topology.ring_indices)


def test_truncated_file(tiny_model):
    data = model_to_bytes(tiny_model)
    with pytest.raises(ModelFileError, match="corrupt model file"):
        model_from_bytes(data[:-17])
    with pytest.raises(ModelFileError, match="corrupt model file"):
        model_from_bytes(data[:5])


def test_inconsistent_header(tiny_model):
    data = model_to_bytes(tiny_model)
    (hlen,) = struct.unpack_from("<I", data, 8)
    h = json.loads(data[12:12 + hlen])
    h["n_components"] -= 1
    hb = json.dumps(h, sort_keys=True).encode()
    forged = data[:8] + struct.pack("<I", len(hb)) + hb + data[12 + hlen:]
    with pytest.raises(ModelFileError, match="inconsistent"):
        model_from_bytes(forged)
    with pytest.raises(ModelFileError, match="magic"):
        model_from_bytes(b"XXXXXXXX" + data[8:])
