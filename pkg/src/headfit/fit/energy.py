"""Residual blocks for the normal, landmark and shape-prior energy terms.

Each block holds residuals ``r`` with energy ``0.5 * r @ r`` and, on request,
Jacobians with respect to the shape vector and to the 9 per-view camera
parameters ordered (roll, pitch, yaw, tx, ty, tz, f, u0, v0).
"""

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, EmptyResidualError
from ..geometry import projection_jacobians, to_camera, vertex_normal_jacobian
from ..model import check_shape_params
from .sampling import sample_normals

N_VIEW_PARAMS = 9


@dataclass
class ResidualBlock:
    residuals: np.ndarray
    jac_shape: np.ndarray = None
    jac_view: np.ndarray = None
    ids: np.ndarray = None  # vertex or landmark channel of each residual group

    @property
    def energy(self):
        return 0.5 * float(self.residuals @ self.residuals)

    def __len__(self):
        return len(self.residuals)


def _empty_block(ny, jacobian):
    if not jacobian:
        return ResidualBlock(np.zeros(0), ids=np.zeros(0, dtype=np.int64))
    return ResidualBlock(np.zeros(0), np.zeros((0, ny)), np.zeros((0, N_VIEW_PARAMS)),
                         np.zeros(0, dtype=np.int64))


def facing_vertices(mesh, normals, pose):
    """Indices of vertices whose normal points towards the camera."""
    X = to_camera(mesh.vertices, pose)
    n_cam = normals @ pose.rotation.T
    return np.flatnonzero((np.einsum("ij,ij->i", n_cam, X) < 0) & (X[:, 2] > 0))


def select_visible(mesh, normals, pose, K, nmap):
    """Camera-facing vertices whose projection has a non-zero map weight.

    Raises :class:`EmptyResidualError` when no vertex faces the camera.
    """
    idx = facing_vertices(mesh, normals, pose)
    if len(idx) == 0:
        raise EmptyResidualError("no vertex faces the camera")
    a = projection_jacobians(mesh.vertices[idx], pose, K)[0]
    _, wt = sample_normals(nmap, a)
    return idx[wt > 0]


def energy_normals(mesh, normals, pose, K, nmap, model=None, visible=None, jacobian=False):
    """Normal-map term: ``w_i (N(a_i) - n_i)`` for each visible vertex.

    ``visible`` freezes the vertex set; when omitted it is chosen by
    :func:`select_visible`.  Jacobians need ``model`` for the shape basis.
    """
    ny = model.n_components if model is not None else 0
    if visible is None:
        visible = select_visible(mesh, normals, pose, K, nmap)
    visible = np.asarray(visible, dtype=np.int64)
    if len(visible) == 0:
        return _empty_block(ny, jacobian)

    P = mesh.vertices[visible]
    a, da_dp, da_dpose, da_dK = projection_jacobians(P, pose, K)
    if not jacobian:
        N, wt = sample_normals(nmap, a)
        n = normals[visible]
        r = wt[:, None] * (N - n)
        return ResidualBlock(r.ravel(), ids=visible)

    if model is None:
        raise ConfigError("normal-term Jacobians need the morphable model")
    N, wt, dN, dw = sample_normals(nmap, a, derivatives=True)
    n, dn_dy = vertex_normal_jacobian(mesh.vertices, mesh.topology, model.basis_per_vertex, visible)
    r = wt[:, None] * (N - n)
    # d r / d a, (k, 3, 2)
    G = wt[:, None, None] * dN + (N - n)[:, :, None] * dw[:, None, :]
    jv = np.concatenate([G @ da_dpose, G @ da_dK], axis=2)
    B = model.basis_per_vertex[visible]
    jy = G @ da_dp @ B - wt[:, None, None] * dn_dy
    k = len(visible)
    return ResidualBlock(r.ravel(), jy.reshape(3 * k, ny), jv.reshape(3 * k, N_VIEW_PARAMS), visible)


def energy_landmarks(mesh, model, pose, K, landmarks, jacobian=False):
    """Landmark term: ``z_j - b_j`` in pixels for every visible detection."""
    ch, z = landmarks.arrays()
    if len(ch) == 0:
        raise EmptyResidualError("no visible landmarks")
    vid = model.landmark_indices[ch]
    a, da_dp, da_dpose, da_dK = projection_jacobians(mesh.vertices[vid], pose, K)
    r = (z - a).ravel()
    if not jacobian:
        return ResidualBlock(r, ids=ch)
    k = len(ch)
    jy = -(da_dp @ model.basis_per_vertex[vid]).reshape(2 * k, model.n_components)
    jv = -np.concatenate([da_dpose, da_dK], axis=2).reshape(2 * k, N_VIEW_PARAMS)
    return ResidualBlock(r, jy, jv, ch)


def energy_prior(y, model, jacobian=False):
    """Shape prior: residuals ``y_k / sigma_k`` (Mahalanobis under diag sigma^2)."""
    y = check_shape_params(model, y)
    r = y / model.singular_values
    if not jacobian:
        return ResidualBlock(r)
    return ResidualBlock(r, np.diag(1.0 / model.singular_values), np.zeros((len(r), 0)))
