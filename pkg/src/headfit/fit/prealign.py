"""Landmark-only pose initialisation on the mean head."""

import logging
from dataclasses import dataclass

import numpy as np

from ..errors import BehindCameraError, PrealignmentError, SolverError
from ..geometry import CameraPose, project, projection_jacobians, rotation_from_euler, wrap_angle
from .solver import SolverConfig, levenberg_marquardt

log = logging.getLogger(__name__)

MIN_LANDMARKS = 4
YAW_SEEDS = (0.0, np.pi / 2, -np.pi / 2, np.pi)
MAX_RMS_PX = 10.0


@dataclass(frozen=True)
class PrealignResult:
    pose: CameraPose
    rms: float      # pixels
    energy: float   # 0.5 * sum of squared pixel residuals
    seed_yaw: float


def _initial_pose(points, uv, K, r):
    """Translation placing the landmark cloud in front of the camera at a plausible depth."""
    R = rotation_from_euler(r)
    centroid = points.mean(axis=0)
    cam = (points - centroid) @ R.T
    spread3 = np.sqrt(np.mean(np.sum(cam[:, :2] ** 2, axis=1)))
    spread2 = np.sqrt(np.mean(np.sum((uv - uv.mean(axis=0)) ** 2, axis=1)))
    depth = K.f * spread3 / max(spread2, 1e-6)
    mu, mv = uv.mean(axis=0)
    target = np.array([(mu - K.u0) * depth / K.f, (mv - K.v0) * depth / K.f, depth])
    # the centroid's own depth offset is ignored: ``depth`` is measured to the cloud centre
    t = R.T @ target - centroid
    return np.concatenate([r, t])


def prealign(model, landmarks, K0, config=SolverConfig(), yaw_seeds=YAW_SEEDS, max_rms=MAX_RMS_PX):
    """Fit pose to landmark detections with ``y = 0`` and fixed intrinsics ``K0``.

    Runs Levenberg-Marquardt from each yaw seed and keeps the lowest energy.
    """
    ch, uv = landmarks.arrays()
    if len(ch) < MIN_LANDMARKS:
        raise PrealignmentError(
            f"under-constrained: {len(ch)} visible landmarks, need at least {MIN_LANDMARKS}")
    points = model.mean_vertices[model.landmark_indices[ch]]

    def fun(x, jac):
        pose = CameraPose.from_vector(x)
        if not jac:
            return (uv - project(points, pose, K0)).ravel(), None
        a, _, da_dpose, _ = projection_jacobians(points, pose, K0)
        return (uv - a).ravel(), -da_dpose.reshape(-1, 6)

    def normalize(x):
        x = x.copy()
        x[:3] = wrap_angle(x[:3])
        return x

    best = None
    for yaw in yaw_seeds:
        x0 = _initial_pose(points, uv, K0, np.array([0.0, 0.0, yaw]))
        try:
            res = levenberg_marquardt(fun, x0, config, normalize=normalize)
        except (SolverError, BehindCameraError) as exc:
            log.debug("prealign seed yaw=%.3f failed: %s", yaw, exc)
            continue
        if best is None or res.energy < best[0].energy:
            best = (res, yaw)
    if best is None:
        raise PrealignmentError("pre-alignment failed from every seed")
    res, yaw = best
    rms = float(np.sqrt(2.0 * res.energy / len(ch)))
    if not np.isfinite(rms) or rms > max_rms:
        raise PrealignmentError(f"pre-alignment diverged: RMS reprojection {rms:.3g} px")
    return PrealignResult(CameraPose.from_vector(res.x), rms, res.energy, float(yaw))
