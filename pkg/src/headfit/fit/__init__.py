"""Energy terms, Levenberg-Marquardt solver and multi-view model fitting."""

from .energy import (ResidualBlock, energy_landmarks, energy_normals, energy_prior,
                     facing_vertices, select_visible)
from .fitting import FitProblem, FitResult, FitWeights, ViewObservation, fit
from .prealign import PrealignResult, prealign
from .sampling import sample_normal_bicubic, sample_normals
from .solver import LMResult, SolverConfig, levenberg_marquardt

__all__ = [
    "FitProblem", "FitResult", "FitWeights", "LMResult", "PrealignResult", "ResidualBlock", "SolverConfig",
    "ViewObservation", "energy_landmarks", "energy_normals", "energy_prior", "facing_vertices",
    "fit", "levenberg_marquardt", "prealign", "sample_normal_bicubic", "sample_normals",
    "select_visible",
]
