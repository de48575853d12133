"""Levenberg-Marquardt for dense nonlinear least squares."""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from ..errors import BehindCameraError, ConfigError, DegenerateMeshError, SolverError

log = logging.getLogger(__name__)

MIN_DAMPING = 1e-12
MAX_DAMPING = 1e12


@dataclass(frozen=True)
class SolverConfig:
    max_iterations: int = 200
    gradient_tolerance: float = 1e-8
    parameter_tolerance: float = 1e-10
    function_tolerance: float = 1e-8  # relative energy decrease of one accepted step
    initial_damping: float = 1e-3
    damping_up: float = 10.0
    damping_down: float = 0.1
    refresh_interval: int = 5

    def __post_init__(self):
        for name in ("max_iterations", "gradient_tolerance", "parameter_tolerance",
                     "function_tolerance", "initial_damping", "damping_up", "damping_down", "refresh_interval"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"solver setting {name} must be positive")
        if self.damping_up <= 1 or self.damping_down >= 1:
            raise ConfigError("damping factors must satisfy up > 1 > down")


@dataclass
class LMResult:
    x: np.ndarray
    energy: float
    iterations: int
    converged: bool
    status: str
    history: list = field(default_factory=list)
    evaluations: int = 0


# trial points that leave the valid domain are rejected like uphill steps
_INFEASIBLE = (BehindCameraError, DegenerateMeshError, FloatingPointError)


def levenberg_marquardt(fun, x0, config=SolverConfig(), refresh=None, normalize=None):
    """Minimise ``0.5 |r(x)|^2``.

    ``fun(x, jacobian)`` returns ``(r, J)`` (``J`` is None when not asked
    for).  ``refresh(x)``, if given, is called before the first iteration and
    every ``config.refresh_interval`` iterations; the residual definition may
    change only there.  ``normalize(x)`` maps an accepted point to its
    canonical form (e.g. wrapped angles).

    Damping uses Marquardt scaling, ``(J^T J + lam diag(J^T J)) dx = -J^T r``.
    Stops when the gradient, the step or the relative energy decrease of an
    accepted step falls below its tolerance.  Every accepted step strictly
    lowers the energy; ``history`` records the energies on both sides of
    each step.
    """
    x = np.array(x0, dtype=np.float64)
    n_eval = 0

    def evaluate(x, jac):
        nonlocal n_eval
        n_eval += 1
        r, J = fun(x, jac)
        return np.asarray(r, dtype=np.float64), J

    if refresh is not None:
        refresh(x)
    try:
        r, J = evaluate(x, True)
    except _INFEASIBLE as exc:
        raise SolverError(f"initial point is infeasible: {exc}") from exc
    if not np.all(np.isfinite(r)) or not np.all(np.isfinite(J)):
        raise SolverError("non-finite residuals at the initial point")
    energy = 0.5 * float(r @ r)
    lam = config.initial_damping
    history = []
    status = "max-iterations"
    converged = False
    it = 0

    while it < config.max_iterations:
        it += 1
        if refresh is not None and it > 1 and (it - 1) % config.refresh_interval == 0:
            refresh(x)
            r, J = evaluate(x, True)
            energy = 0.5 * float(r @ r)

        g = J.T @ r
        if np.max(np.abs(g), initial=0.0) < config.gradient_tolerance:
            status, converged = "gradient-tolerance", True
            break

        A = J.T @ J
        d = np.diag(A).copy()
        d = np.maximum(d, 1e-12 * max(float(d.max(initial=0.0)), 1e-300))
        accepted = False
        while not accepted:
            try:
                c = cho_factor(A + lam * np.diag(d), lower=True, check_finite=True)
                dx = -cho_solve(c, g)
            except (LinAlgError, ValueError):
                lam *= config.damping_up
                if lam > MAX_DAMPING:
                    raise SolverError(
                        "Cholesky factorisation failed at maximum damping",
                        {"iteration": it, "energy": energy, "damping": lam},
                    ) from None
                continue

            step = float(np.linalg.norm(dx))
            if step <= config.parameter_tolerance * (float(np.linalg.norm(x)) + config.parameter_tolerance):
                status, converged = "parameter-tolerance", True
                break

            x_new = x + dx
            try:
                r_new, _ = evaluate(x_new, False)
                e_new = 0.5 * float(r_new @ r_new)
                if not np.isfinite(e_new):
                    e_new = np.inf
            except _INFEASIBLE:
                e_new = np.inf

            if e_new < energy:
                if normalize is not None:
                    x_new = normalize(x_new)
                history.append({"iteration": it, "energy_before": energy, "energy_after": e_new,
                                "damping": lam, "step_norm": step})
                x, energy = x_new, e_new
                lam = max(lam * config.damping_down, MIN_DAMPING)
                r, J = evaluate(x, True)
                energy = 0.5 * float(r @ r)
                accepted = True
                if history[-1]["energy_before"] - e_new <= config.function_tolerance * history[-1]["energy_before"]:
                    status, converged = "function-tolerance", True
            else:
                lam *= config.damping_up
                if lam > MAX_DAMPING:
                    status, converged = "stalled", True
                    break
        if not accepted or converged:
            break

    log.debug("LM finished: %s after %d iterations, energy %.6g", status, it, energy)
    return LMResult(x, energy, it, converged, status, history, n_eval)
