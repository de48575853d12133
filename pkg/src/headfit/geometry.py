"""Vertex normals, Euler rotations and pinhole projection with derivatives.

Camera convention: right-handed, the camera looks down +z, image u grows to
the right and v downwards.  A model point ``p`` maps to the camera frame as
``R (p + t)`` and projects to ``(f x / z + u0, f y / z + v0)``.
"""

from dataclasses import dataclass

import numpy as np

from .errors import BehindCameraError, ConfigError, DegenerateMeshError

Z_MIN = 1.0  # mm
DEGENERATE_NORM = 1e-12


@dataclass(frozen=True)
class CameraPose:
    """Rotation angles (roll, pitch, yaw) in radians and translation in mm."""

    r: tuple
    t: tuple

    def __post_init__(self):
        r = tuple(float(a) for a in self.r)
        t = tuple(float(a) for a in self.t)
        if len(r) != 3 or len(t) != 3:
            raise ConfigError("pose needs 3 angles and 3 translation components")
        if not all(np.isfinite(r + t)):
            raise ConfigError("pose must be finite")
        if any(abs(a) > np.pi for a in r):
            raise ConfigError("pose angles must lie in [-pi, pi]")
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "t", t)

    @classmethod
    def from_vector(cls, v):
        """Build from ``[roll, pitch, yaw, tx, ty, tz]``, wrapping angles."""
        v = np.asarray(v, dtype=np.float64)
        return cls(tuple(wrap_angle(v[:3])), tuple(v[3:6]))

    @classmethod
    def looking_at(cls, r, distance, center=(0.0, 0.0, 0.0)):
        """Pose with rotation ``r`` placing model point ``center`` on the optical axis at ``distance``."""
        R = rotation_from_euler(r)
        t = R.T @ np.array([0.0, 0.0, float(distance)]) - np.asarray(center, dtype=np.float64)
        return cls(tuple(r), tuple(t))

    def as_vector(self):
        return np.array(self.r + self.t)

    @property
    def rotation(self):
        return rotation_from_euler(self.r)

    @property
    def translation(self):
        return np.array(self.t)


@dataclass(frozen=True)
class Intrinsics:
    """Focal length and principal point, all in pixels."""

    f: float
    u0: float
    v0: float

    def __post_init__(self):
        for name in ("f", "u0", "v0"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not (np.isfinite(self.f) and self.f > 0):
            raise ConfigError("focal length must be positive")
        if not (np.isfinite(self.u0) and np.isfinite(self.v0)):
            raise ConfigError("principal point must be finite")

    def check_image(self, width, height):
        """Sanity bound: principal point within 4x the image extent."""
        if abs(self.u0) > 4 * width or abs(self.v0) > 4 * height:
            raise ConfigError("principal point far outside the image")
        return self

    @classmethod
    def prior(cls, width, height):
        """Generic portrait prior: ``f = 1.2 max(w, h)``, centred principal point."""
        return cls(1.2 * max(width, height), width / 2.0, height / 2.0)

    def as_vector(self):
        return np.array([self.f, self.u0, self.v0])

    @classmethod
    def from_vector(cls, v):
        return cls(*(float(x) for x in v))


def wrap_angle(a):
    """Map angles into ``(-pi, pi]``."""
    a = np.asarray(a, dtype=np.float64)
    w = np.mod(a + np.pi, 2 * np.pi) - np.pi
    return np.where(w == -np.pi, np.pi, w)


# ---------------------------------------------------------------------------
# rotations

def _rx(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _ry(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rz(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _drx(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[0.0, 0.0, 0.0], [0.0, -s, -c], [0.0, c, -s]])


def _dry(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[-s, 0.0, c], [0.0, 0.0, 0.0], [-c, 0.0, -s]])


def _drz(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]])


def rotation_from_euler(r):
    """``R = Rz(roll) @ Ry(yaw) @ Rx(pitch)`` for ``r = (roll, pitch, yaw)``."""
    roll, pitch, yaw = r
    return _rz(roll) @ _ry(yaw) @ _rx(pitch)


def rotation_derivatives(r):
    """``dR/droll, dR/dpitch, dR/dyaw`` stacked as (3, 3, 3)."""
    roll, pitch, yaw = r
    z, y, x = _rz(roll), _ry(yaw), _rx(pitch)
    return np.stack([
        _drz(roll) @ y @ x,
        z @ y @ _drx(pitch),
        z @ _dry(yaw) @ x,
    ])


def euler_from_rotation(R):
    """Inverse of :func:`rotation_from_euler` away from ``|yaw| = pi/2``."""
    R = np.asarray(R)
    yaw = -np.arcsin(np.clip(R[2, 0], -1.0, 1.0))
    pitch = np.arctan2(R[2, 1], R[2, 2])
    roll = np.arctan2(R[1, 0], R[0, 0])
    return np.array([roll, pitch, yaw])


def rotation_angle_between(R1, R2):
    """Geodesic distance in radians between two rotations."""
    M = np.asarray(R1).T @ np.asarray(R2)
    # atan2 keeps full precision for small angles, unlike arccos of the trace
    s = 0.5 * np.linalg.norm([M[2, 1] - M[1, 2], M[0, 2] - M[2, 0], M[1, 0] - M[0, 1]])
    c = (np.trace(M) - 1.0) / 2.0
    return float(np.arctan2(s, c))


def skew(v):
    """Cross-product matrices for a (..., 3) array."""
    v = np.asarray(v)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


# ---------------------------------------------------------------------------
# vertex normals

def _pair_terms(vertices, topology, pair_sel=None):
    c, a, b = topology.pair_center, topology.pair_a, topology.pair_b
    if pair_sel is not None:
        c, a, b = c[pair_sel], a[pair_sel], b[pair_sel]
    ea = vertices[a] - vertices[c]
    eb = vertices[b] - vertices[c]
    cr = np.cross(ea, eb)
    ln = np.linalg.norm(cr, axis=1)
    safe = np.where(ln > 0, ln, 1.0)
    unit = np.where((ln > 0)[:, None], cr / safe[:, None], 0.0)
    return c, a, b, ea, eb, unit, ln


def unnormalized_normals(vertices, topology):
    """Sum over each one-ring of unit cross products of consecutive edges."""
    vertices = np.asarray(vertices, dtype=np.float64)
    c, _, _, _, _, unit, _ = _pair_terms(vertices, topology)
    n = topology.n_vertices
    return np.stack([np.bincount(c, weights=unit[:, k], minlength=n) for k in range(3)], axis=1)


def vertex_normals(mesh, vertices=None):
    """Unit vertex normals of ``mesh`` (or of ``vertices`` on its topology).

    Raises :class:`DegenerateMeshError` listing every vertex whose summed
    ring normal vanishes.
    """
    v = mesh.vertices if vertices is None else np.asarray(vertices, dtype=np.float64)
    nt = unnormalized_normals(v, mesh.topology)
    ln = np.linalg.norm(nt, axis=1)
    bad = np.flatnonzero(ln < DEGENERATE_NORM)
    if len(bad):
        raise DegenerateMeshError(bad)
    return nt / ln[:, None]


def vertex_normal_jacobian(vertices, topology, basis_per_vertex, indices):
    """Normals at ``indices`` and their derivative w.r.t. shape parameters.

    ``basis_per_vertex`` is the (N, 3, N_y) displacement basis.  Returns
    ``normals`` (k, 3) and ``dn_dy`` (k, 3, N_y).
    """
    vertices = np.asarray(vertices, dtype=np.float64)
    indices = np.asarray(indices, dtype=np.int64)
    ny = basis_per_vertex.shape[2]
    if len(indices) == 0:
        return np.zeros((0, 3)), np.zeros((0, 3, ny))
    sel = np.zeros(topology.n_vertices, dtype=bool)
    sel[indices] = True
    pair_sel = np.flatnonzero(sel[topology.pair_center])
    c, a, b, ea, eb, unit, ln = _pair_terms(vertices, topology, pair_sel)

    # d(unit)/d(cross) = (I - u u^T) / |cross|
    safe = np.where(ln > 0, ln, np.inf)
    P = (np.eye(3) - unit[:, :, None] * unit[:, None, :]) / safe[:, None, None]
    da = -P @ skew(eb)   # w.r.t. q_a
    db = P @ skew(ea)    # w.r.t. q_b
    dc = -(da + db)      # w.r.t. the centre vertex
    g = (np.einsum("pij,pjk->pik", da, basis_per_vertex[a])
         + np.einsum("pij,pjk->pik", db, basis_per_vertex[b])
         + np.einsum("pij,pjk->pik", dc, basis_per_vertex[c]))

    # pairs are sorted by centre, so each selected vertex owns a contiguous run
    starts = np.flatnonzero(np.r_[True, c[1:] != c[:-1]])
    centers = c[starts]
    nt = np.add.reduceat(unit, starts, axis=0)
    gsum = np.add.reduceat(g, starts, axis=0)
    lnt = np.linalg.norm(nt, axis=1)
    bad = centers[lnt < DEGENERATE_NORM]
    if len(bad):
        raise DegenerateMeshError(bad)
    n = nt / lnt[:, None]
    Q = (np.eye(3) - n[:, :, None] * n[:, None, :]) / lnt[:, None, None]
    dn = Q @ gsum

    # reorder from sorted centres to the requested order
    pos = np.searchsorted(centers, indices)
    return n[pos], dn[pos]


# ---------------------------------------------------------------------------
# projection

def to_camera(points, pose):
    """Camera-frame coordinates ``R (p + t)`` of (M, 3) points."""
    R = rotation_from_euler(pose.r)
    return (np.asarray(points, dtype=np.float64) + np.array(pose.t)) @ R.T


def project(p, pose, K, z_min=Z_MIN):
    """Project one point (3,) or many (M, 3) to pixel coordinates."""
    p = np.asarray(p, dtype=np.float64)
    single = p.ndim == 1
    X = to_camera(np.atleast_2d(p), pose)
    z = X[:, 2]
    if np.any(z <= z_min):
        raise BehindCameraError(f"{int(np.sum(z <= z_min))} point(s) at or behind z = {z_min} mm")
    a = np.stack([K.f * X[:, 0] / z + K.u0, K.f * X[:, 1] / z + K.v0], axis=1)
    return a[0] if single else a


def projection_jacobians(p, pose, K, z_min=Z_MIN):
    """Projected points and their analytic derivatives.

    Returns ``(a, da_dp, da_dpose, da_dK)`` with shapes (M, 2), (M, 2, 3),
    (M, 2, 6) ordered (roll, pitch, yaw, tx, ty, tz), and (M, 2, 3) ordered
    (f, u0, v0).  A single (3,) point drops the leading axis.
    """
    p = np.asarray(p, dtype=np.float64)
    single = p.ndim == 1
    P = np.atleast_2d(p)
    R = rotation_from_euler(pose.r)
    dR = rotation_derivatives(pose.r)
    pt = P + np.array(pose.t)
    X = pt @ R.T
    x, y, z = X[:, 0], X[:, 1], X[:, 2]
    if np.any(z <= z_min):
        raise BehindCameraError(f"{int(np.sum(z <= z_min))} point(s) at or behind z = {z_min} mm")
    f = K.f
    a = np.stack([f * x / z + K.u0, f * y / z + K.v0], axis=1)

    m = len(P)
    dadX = np.zeros((m, 2, 3))
    dadX[:, 0, 0] = f / z
    dadX[:, 1, 1] = f / z
    dadX[:, 0, 2] = -f * x / z ** 2
    dadX[:, 1, 2] = -f * y / z ** 2

    da_dp = dadX @ R
    dX_dr = np.einsum("kij,mj->mik", dR, pt)  # (M, 3, 3): column k is dX/dr_k
    da_dpose = np.concatenate([dadX @ dX_dr, da_dp], axis=2)
    da_dK = np.zeros((m, 2, 3))
    da_dK[:, 0, 0] = x / z
    da_dK[:, 1, 0] = y / z
    da_dK[:, 0, 1] = 1.0
    da_dK[:, 1, 2] = 1.0
    if single:
        return a[0], da_dp[0], da_dpose[0], da_dK[0]
    return a, da_dp, da_dpose, da_dK
