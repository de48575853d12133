"""Mesh comparison: anchor alignment, point-to-plane ICP and error statistics."""

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .errors import AlignmentError, ConfigError, DegenerateConfigurationError
from .geometry import vertex_normals
from .model import HeadMesh


@dataclass(frozen=True, eq=False)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if R.shape != (3, 3) or t.shape != (3,):
            raise ConfigError("rigid transform needs a 3x3 rotation and a 3-vector")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1) > 1e-9:
            raise ConfigError("rotation is not a proper orthonormal matrix")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points):
        return np.asarray(points) @ self.rotation.T + self.translation

    def apply_mesh(self, mesh):
        return HeadMesh(self.apply(mesh.vertices), mesh.topology)

    def compose(self, other):
        """``self`` after ``other``."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def inverse(self):
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)

    def to_dict(self):
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist()}


# ---------------------------------------------------------------------------
# coarse alignment

def procrustes(source, target):
    """Least-squares rigid motion taking ``source`` points onto ``target``."""
    src = np.asarray(source, dtype=np.float64)
    dst = np.asarray(target, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ConfigError("point sets must both be (k, 3)")
    if len(src) < 3:
        raise DegenerateConfigurationError("need at least 3 point pairs")
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    a, b = src - cs, dst - cd
    for pts in (a, b):
        s = np.linalg.svd(pts, compute_uv=False)
        if s[1] <= 1e-9 * max(s[0], 1e-300):
            raise DegenerateConfigurationError("anchor points are collinear or coincident")
    U, _, Vt = np.linalg.svd(a.T @ b)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return RigidTransform(R, cd - R @ cs)


def coarse_align(reference_mesh, recon_mesh, reference_anchors, recon_anchors=None):
    """Rigid transform mapping the reconstruction's anchor vertices onto the reference's."""
    recon_anchors = reference_anchors if recon_anchors is None else recon_anchors
    p = reference_mesh.vertices[np.asarray(reference_anchors)]
    q = recon_mesh.vertices[np.asarray(recon_anchors)]
    return procrustes(q, p)


# ---------------------------------------------------------------------------
# ICP

@dataclass(frozen=True)
class ICPConfig:
    max_iterations: int = 50
    min_improvement: float = 1e-6   # mm
    trim_percentile: float = 90.0
    gating_radius: float = 100.0    # mm
    failure_distance: float = 10.0  # mm


@dataclass
class ICPResult:
    transform: RigidTransform
    iterations: int
    rmse_log: list
    mean_distance: float
    failed: bool


def _small_rotation(omega):
    return Rotation.from_rotvec(omega).as_matrix()


def icp_refine(reference_mesh, recon_mesh, init=None, config=ICPConfig()):
    """Point-to-plane ICP moving the reconstruction onto the reference.

    Each reference vertex is paired with its nearest transformed
    reconstruction vertex; pairs beyond the gating radius are dropped and the
    rest trimmed at ``trim_percentile`` of their distances.  A step that would
    raise the trimmed RMSE is not taken.
    """
    T = RigidTransform.identity() if init is None else init
    P = reference_mesh.vertices
    Nr = vertex_normals(reference_mesh)
    tree = cKDTree(recon_mesh.vertices)
    Q = recon_mesh.vertices

    def pairs(T):
        # query in the reconstruction's own frame; distances are rigid-invariant
        d, j = tree.query(T.inverse().apply(P))
        keep = np.flatnonzero(d <= config.gating_radius)
        if len(keep) == 0:
            raise AlignmentError("no correspondences within the gating radius")
        cut = np.percentile(d[keep], config.trim_percentile)
        keep = keep[d[keep] <= cut]
        q = T.apply(Q[j[keep]])
        e = np.einsum("ij,ij->i", q - P[keep], Nr[keep])
        return keep, q, e, float(np.sqrt(np.mean(e ** 2)))

    keep, q, e, rmse = pairs(T)
    log = [rmse]
    it = 0
    while it < config.max_iterations:
        it += 1
        n = Nr[keep]
        A = np.concatenate([np.cross(q, n), n], axis=1)
        sol, *_ = np.linalg.lstsq(A, -e, rcond=None)
        if np.linalg.norm(sol) < 1e-12:
            break
        Rw = _small_rotation(sol[:3])
        T_new = RigidTransform(Rw @ T.rotation, Rw @ T.translation + sol[3:])
        keep_n, q_n, e_n, rmse_n = pairs(T_new)
        if rmse_n > rmse:
            break
        T, keep, q, e = T_new, keep_n, q_n, e_n
        improvement = rmse - rmse_n
        rmse = rmse_n
        log.append(rmse)
        if improvement < config.min_improvement:
            break

    d, _ = tree.query(T.inverse().apply(P))
    mean_d = float(d.mean())
    return ICPResult(T, it, log, mean_d, mean_d > config.failure_distance)


# ---------------------------------------------------------------------------
# metrics

def nearest_vertices(reference_mesh, recon_mesh):
    """Index of the nearest reconstruction vertex for every reference vertex."""
    return nearest_points(reference_mesh.vertices, recon_mesh.vertices)


def nearest_points(P, Q):
    if len(P) == 0 or len(Q) == 0:
        raise ConfigError("empty mesh")
    _, j = cKDTree(Q).query(P)
    return j


def point_to_plane_errors(P, Q, normals):
    """Signed ``(p_i - q_i) . n_i`` with ``q_i`` the nearest point of ``Q`` to ``p_i``."""
    j = nearest_points(P, Q)
    return np.einsum("ij,ij->i", P - Q[j], normals)


def point_to_plane_rmse(reference_mesh, recon_mesh, reference_normals=None):
    """Root mean square of ``(p_i - q_i) . n_i`` over all reference vertices."""
    n = vertex_normals(reference_mesh) if reference_normals is None else reference_normals
    d = point_to_plane_errors(reference_mesh.vertices, recon_mesh.vertices, n)
    return float(np.sqrt(np.sum(d ** 2) / len(d)))


def upper_tail_mean(errors, fraction=0.1):
    """Mean of the largest ``fraction`` of the errors (at least one).

    This is the reading used for the delta-90% statistic; swapping in the
    mean of the largest 90% only means changing ``fraction``.
    """
    e = np.sort(np.asarray(errors, dtype=np.float64))
    k = max(1, int(math.ceil(fraction * len(e))))
    return float(e[-k:].mean())


def summarize_errors(errors):
    """``(mean, std, median, delta90)`` of absolute errors; std is the population value."""
    e = np.asarray(errors, dtype=np.float64)
    if len(e) == 0:
        raise ConfigError("empty mesh")
    return (float(e.mean()), float(e.std()), float(np.median(e)), upper_tail_mean(e))


def depth_error_stats(reference_mesh, recon_mesh, axis=2):
    """Statistics of absolute depth differences to the nearest reconstructed vertex (mm)."""
    j = nearest_vertices(reference_mesh, recon_mesh)
    err = np.abs(reference_mesh.vertices[:, axis] - recon_mesh.vertices[j, axis])
    return summarize_errors(err)


@dataclass
class EvalReport:
    rmse: float
    mean: float
    std: float
    median: float
    delta90: float
    n_vertices: int
    icp_iterations: int = 0
    transform: RigidTransform = None
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "rmse": self.rmse, "mu": self.mean, "sigma": self.std, "median": self.median,
            "delta90": self.delta90, "n_vertices": self.n_vertices,
            "icp_iterations": self.icp_iterations,
            "transform": None if self.transform is None else self.transform.to_dict(),
            "diagnostics": self.diagnostics,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def table(self, label="Recon"):
        rows = [("RMSE", self.rmse), ("mu", self.mean), ("sigma", self.std),
                ("median", self.median), ("delta90%", self.delta90)]
        width = max(len(label), 10)
        lines = [f"{'Metric':<10} | {label:>{width}}", "-" * (13 + width)]
        lines += [f"{name:<10} | {value:>{width}.4f}" for name, value in rows]
        return "\n".join(lines) + "\n"


def evaluate(reference_mesh, recon_mesh, reference_anchors=None, recon_anchors=None,
             icp_config=ICPConfig()):
    """Coarse anchor alignment (when anchors are given), ICP, then the metrics.

    Raises :class:`AlignmentError` when ICP fails.
    """
    if reference_anchors is not None:
        init = coarse_align(reference_mesh, recon_mesh, reference_anchors, recon_anchors)
    else:
        init = RigidTransform.identity()
    icp = icp_refine(reference_mesh, recon_mesh, init, icp_config)
    if icp.failed:
        raise AlignmentError(f"alignment failed: mean distance {icp.mean_distance:.3f} mm")
    aligned = icp.transform.apply_mesh(recon_mesh)
    mu, sd, med, d90 = depth_error_stats(reference_mesh, aligned)
    return EvalReport(
        rmse=point_to_plane_rmse(reference_mesh, aligned),
        mean=mu, std=sd, median=med, delta90=d90,
        n_vertices=len(reference_mesh.vertices),
        icp_iterations=icp.iterations,
        transform=icp.transform,
        diagnostics={"icp_rmse_log": icp.rmse_log, "mean_distance": icp.mean_distance},
    )
