import numpy as np
import pytest

from conftest import finite_difference
from headfit.errors import EmptyResidualError
from headfit.fit.energy import (energy_landmarks, energy_normals, energy_prior,
                                facing_vertices, select_visible)
from headfit.geometry import CameraPose, Intrinsics, vertex_normals
from headfit.model import instantiate
from headfit.raster import Detection, LandmarkMap, NormalMap, render_views


@pytest.fixture(scope="module")
def scene(small_model, small_subject):
    y, mesh = small_subject
    pose = CameraPose.looking_at((0.05, -0.1, 0.3), 450)
    K = Intrinsics.prior(128, 128)
    nmap, lmk = render_views(mesh, small_model, pose, K, 128, 128)
    return y, mesh, pose, K, nmap, lmk


def test_normal_self_consistency(scene):
    y, mesh, pose, K, nmap, _ = scene
    n = vertex_normals(mesh)
    blk = energy_normals(mesh, n, pose, K, nmap)
    assert len(blk.ids) > 50
    assert blk.energy / len(blk.ids) < 1e-3


def test_all_invalid_mask(scene, small_model):
    _, mesh, pose, K, nmap, _ = scene
    empty = NormalMap(np.zeros_like(nmap.normals), np.zeros_like(nmap.mask),
                      np.full(nmap.mask.shape, np.inf))
    blk = energy_normals(mesh, vertex_normals(mesh), pose, K, empty, small_model, jacobian=True)
    assert blk.energy == 0.0
    assert blk.jac_shape.shape == (0, small_model.n_components)
    assert blk.jac_view.shape == (0, 9)


def test_no_facing_vertex_raises(scene):
    _, mesh, pose, K, nmap, _ = scene
    # camera inside the head: every outward normal points away
    inside = CameraPose((0.0, 0.0, 0.0), (0.0, 0.0, 0.0))
    assert len(facing_vertices(mesh, vertex_normals(mesh), inside)) == 0
    with pytest.raises(EmptyResidualError):
        select_visible(mesh, vertex_normals(mesh), inside, K, nmap)


def _pack(y, pose, K):
    return np.concatenate([y, pose.as_vector(), K.as_vector()])


def _unpack(x, ny):
    return x[:ny], CameraPose.from_vector(x[ny:ny + 6]), Intrinsics.from_vector(x[ny + 6:])


def test_normal_jacobian_fd(scene, small_model):
    y, mesh, pose, K, nmap, _ = scene
    ny = small_model.n_components
    rng = np.random.default_rng(11)
    y1 = y + rng.normal(0, 2, ny)
    pose1 = CameraPose.from_vector(pose.as_vector() + rng.normal(0, [0.02] * 3 + [2.0] * 3))
    K1 = Intrinsics(K.f * 1.02, K.u0 + 0.7, K.v0 - 0.4)
    m1 = instantiate(small_model, y1)
    vis = select_visible(m1, vertex_normals(m1), pose1, K1, nmap)
    blk = energy_normals(m1, vertex_normals(m1), pose1, K1, nmap, small_model, vis, jacobian=True)
    J = np.concatenate([blk.jac_shape, blk.jac_view], axis=1)

    def f(x):
        yy, pp, kk = _unpack(x, ny)
        m = instantiate(small_model, yy)
        return energy_normals(m, vertex_normals(m), pp, kk, nmap, visible=vis).residuals

    fd = finite_difference(f, _pack(y1, pose1, K1), 1e-6)
    assert np.linalg.norm(J - fd) / np.linalg.norm(fd) < 1e-4


def test_landmarks_exact_at_true_pose(scene, small_model):
    _, mesh, pose, K, _, lmk = scene
    assert energy_landmarks(mesh, small_model, pose, K, lmk).energy < 1e-6


def test_landmark_offset_energy(scene, small_model):
    _, mesh, pose, K, _, lmk = scene
    d0 = lmk.visible()[0]
    dets = [Detection(d0.channel, d0.u + 3.0, d0.v + 4.0, True)]
    single = LandmarkMap(lmk.width, lmk.height, tuple(dets))
    assert energy_landmarks(mesh, small_model, pose, K, single).energy == pytest.approx(12.5, abs=1e-9)


def test_landmark_jacobian_fd(scene, small_model):
    y, _, pose, K, _, lmk = scene
    ny = small_model.n_components
    blk = energy_landmarks(instantiate(small_model, y), small_model, pose, K, lmk, jacobian=True)
    J = np.concatenate([blk.jac_shape, blk.jac_view], axis=1)

    def f(x):
        yy, pp, kk = _unpack(x, ny)
        return energy_landmarks(instantiate(small_model, yy), small_model, pp, kk, lmk).residuals

    fd = finite_difference(f, _pack(y, pose, K), 1e-5)
    assert np.linalg.norm(J - fd) / np.linalg.norm(fd) < 1e-5


def test_no_visible_landmarks(scene, small_model):
    _, mesh, pose, K, _, _ = scene
    with pytest.raises(EmptyResidualError):
        energy_landmarks(mesh, small_model, pose, K, LandmarkMap(128, 128, ()))


def test_prior_examples(small_model):
    ny = small_model.n_components
    assert energy_prior(np.zeros(ny), small_model).energy == 0.0
    e1 = np.zeros(ny)
    e1[0] = small_model.singular_values[0]
    assert energy_prior(e1, small_model).energy == pytest.approx(0.5, abs=1e-15)


def test_prior_matches_explicit_quadratic(small_model):
    rng = np.random.default_rng(5)
    Cinv = np.diag(1.0 / small_model.singular_values ** 2)
    for _ in range(20):
        y = rng.normal(0, 30, small_model.n_components)
        explicit = 0.5 * y @ Cinv @ y
        assert abs(energy_prior(y, small_model).energy - explicit) <= 1e-12 * max(1.0, explicit)
    blk = energy_prior(y, small_model, jacobian=True)
    assert np.allclose(blk.jac_shape, np.sqrt(Cinv))
