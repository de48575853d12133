"""Joint fitting of a shared shape vector and per-view cameras."""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError
from ..geometry import CameraPose, Intrinsics, vertex_normals, wrap_angle
from ..model import instantiate
from .energy import (N_VIEW_PARAMS, energy_landmarks, energy_normals, energy_prior,
                     select_visible)
from .prealign import prealign
from .solver import SolverConfig, levenberg_marquardt

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class ViewObservation:
    normal_map: object
    landmarks: object
    K0: Intrinsics = None

    def __post_init__(self):
        if not self.normal_map.mask.any():
            raise ConfigError("normal map has no valid pixels")
        if (self.normal_map.width, self.normal_map.height) != (self.landmarks.width, self.landmarks.height):
            raise ConfigError("normal map and landmark map sizes differ")
        if self.K0 is None:
            object.__setattr__(self, "K0", Intrinsics.prior(self.normal_map.width, self.normal_map.height))


@dataclass(frozen=True)
class FitWeights:
    normals: float = 1.0
    landmarks: float = 0.8
    prior: float = 0.4

    def __post_init__(self):
        w = (self.normals, self.landmarks, self.prior)
        if not all(np.isfinite(w)) or min(w) < 0:
            raise ConfigError("weights must be finite and non-negative")
        if max(w) == 0:
            raise ConfigError("at least one weight must be positive")


@dataclass
class FitResult:
    y: np.ndarray
    poses: list
    intrinsics: list
    energy: float
    terms: dict
    iterations: int
    converged: bool
    status: str
    history: list = field(default_factory=list)
    prealign_rms: list = field(default_factory=list)

    def energy_history(self):
        """Total energy at the start and after every accepted step."""
        if not self.history:
            return [self.energy]
        return [self.history[0]["energy_before"]] + [h["energy_after"] for h in self.history]

    def to_dict(self):
        return {
            "y": [float(v) for v in self.y],
            "views": [
                {"pose": {"roll": p.r[0], "pitch": p.r[1], "yaw": p.r[2],
                          "tx": p.t[0], "ty": p.t[1], "tz": p.t[2]},
                 "intrinsics": {"f": k.f, "u0": k.u0, "v0": k.v0}}
                for p, k in zip(self.poses, self.intrinsics)
            ],
            "energy": self.energy,
            "terms": self.terms,
            "iterations": self.iterations,
            "converged": self.converged,
            "status": self.status,
            "prealign_rms_px": self.prealign_rms,
            "history": self.history,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        poses = [CameraPose((v["pose"]["roll"], v["pose"]["pitch"], v["pose"]["yaw"]),
                            (v["pose"]["tx"], v["pose"]["ty"], v["pose"]["tz"])) for v in d["views"]]
        ks = [Intrinsics(v["intrinsics"]["f"], v["intrinsics"]["u0"], v["intrinsics"]["v0"])
              for v in d["views"]]
        return cls(np.array(d["y"]), poses, ks, d["energy"], d["terms"], d["iterations"],
                   d["converged"], d["status"], d.get("history", []), d.get("prealign_rms_px", []))


class FitProblem:
    """Residual assembly over views with frozen per-view visibility sets."""

    def __init__(self, model, views, weights, threads=1):
        self.model = model
        self.views = views
        self.weights = weights
        self.ny = model.n_components
        self.visible = [None] * len(views)
        self.threads = max(1, int(threads))
        self.sqrt_w = {k: np.sqrt(getattr(weights, k)) for k in ("normals", "landmarks", "prior")}

    @property
    def n_params(self):
        return self.ny + N_VIEW_PARAMS * len(self.views)

    def unpack(self, x):
        y = x[:self.ny]
        cams = []
        for i in range(len(self.views)):
            v = x[self.ny + N_VIEW_PARAMS * i: self.ny + N_VIEW_PARAMS * (i + 1)]
            cams.append((CameraPose.from_vector(v[:6]), Intrinsics.from_vector(v[6:])))
        return y, cams

    def normalize(self, x):
        x = x.copy()
        for i in range(len(self.views)):
            s = self.ny + N_VIEW_PARAMS * i
            x[s:s + 3] = wrap_angle(x[s:s + 3])
        return x

    def refresh(self, x):
        y, cams = self.unpack(x)
        mesh = instantiate(self.model, y)
        normals = vertex_normals(mesh)
        for i, (view, (pose, K)) in enumerate(zip(self.views, cams)):
            if self.weights.normals > 0:
                self.visible[i] = select_visible(mesh, normals, pose, K, view.normal_map)
            else:
                self.visible[i] = np.zeros(0, dtype=np.int64)

    def _view_blocks(self, i, mesh, normals, cam, jac):
        view = self.views[i]
        pose, K = cam
        bn = energy_normals(mesh, normals, pose, K, view.normal_map, self.model,
                            visible=self.visible[i], jacobian=jac)
        if self.weights.landmarks > 0:
            bz = energy_landmarks(mesh, self.model, pose, K, view.landmarks, jacobian=jac)
        else:
            bz = None
        return bn, bz

    def blocks(self, x, jac):
        y, cams = self.unpack(x)
        mesh = instantiate(self.model, y)
        normals = vertex_normals(mesh)
        args = [(i, mesh, normals, cams[i], jac) for i in range(len(self.views))]
        if self.threads > 1 and len(self.views) > 1:
            with ThreadPoolExecutor(self.threads) as pool:
                per_view = list(pool.map(lambda a: self._view_blocks(*a), args))
        else:
            per_view = [self._view_blocks(*a) for a in args]
        prior = energy_prior(y, self.model, jacobian=jac) if self.weights.prior > 0 else None
        return per_view, prior

    def residuals(self, x, jac):
        per_view, prior = self.blocks(x, jac)
        rows, jrows = [], []
        nv = len(self.views)
        for i, (bn, bz) in enumerate(per_view):
            for blk, w in ((bn, self.sqrt_w["normals"]), (bz, self.sqrt_w["landmarks"])):
                if blk is None or len(blk) == 0:
                    continue
                rows.append(w * blk.residuals)
                if jac:
                    J = np.zeros((len(blk), self.n_params))
                    J[:, :self.ny] = w * blk.jac_shape
                    s = self.ny + N_VIEW_PARAMS * i
                    J[:, s:s + N_VIEW_PARAMS] = w * blk.jac_view
                    jrows.append(J)
        if prior is not None:
            w = self.sqrt_w["prior"]
            rows.append(w * prior.residuals)
            if jac:
                J = np.zeros((self.ny, self.ny + N_VIEW_PARAMS * nv))
                J[:, :self.ny] = w * prior.jac_shape
                jrows.append(J)
        r = np.concatenate(rows) if rows else np.zeros(0)
        J = np.vstack(jrows) if jac and jrows else (np.zeros((0, self.n_params)) if jac else None)
        return r, J

    def terms(self, x):
        per_view, prior = self.blocks(x, False)
        en = sum(bn.energy for bn, _ in per_view)
        ez = sum(bz.energy for _, bz in per_view if bz is not None)
        ep = prior.energy if prior is not None else energy_prior(x[:self.ny], self.model).energy
        w = self.weights
        return {"normals": en, "landmarks": ez, "prior": ep,
                "total": w.normals * en + w.landmarks * ez + w.prior * ep}


def fit(model, views, weights=FitWeights(), config=SolverConfig(), threads=1, initial_poses=None):
    """Fit one shape vector and per-view pose and intrinsics to the observations.

    Each view is first pre-aligned from its landmarks (unless
    ``initial_poses`` is given), then all parameters are refined jointly.
    """
    views = list(views)
    if not views:
        raise ConfigError("need at least one view")
    problem = FitProblem(model, views, weights, threads)

    rms = []
    x0 = [np.zeros(model.n_components)]
    for i, view in enumerate(views):
        if initial_poses is not None:
            pose0 = initial_poses[i]
        else:
            pre = prealign(model, view.landmarks, view.K0, config)
            pose0 = pre.pose
            rms.append(pre.rms)
            log.info("view %d pre-aligned, RMS %.3f px", i, pre.rms)
        x0.append(pose0.as_vector())
        x0.append(view.K0.as_vector())
    x0 = np.concatenate(x0)

    res = levenberg_marquardt(problem.residuals, x0, config,
                              refresh=problem.refresh, normalize=problem.normalize)
    y, cams = problem.unpack(res.x)
    terms = problem.terms(res.x)
    return FitResult(
        y=y.copy(),
        poses=[c[0] for c in cams],
        intrinsics=[c[1] for c in cams],
        energy=terms["total"],
        terms=terms,
        iterations=res.iterations,
        converged=res.converged,
        status=res.status,
        history=res.history,
        prealign_rms=rms,
    )
