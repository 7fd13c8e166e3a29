"""Black-box calibration of simulation models.

Search a gridded parameter box for the vector whose simulated output best
matches a target time-series panel, using pluggable samplers (quasi-random,
surrogate-guided, evolutionary) scheduled either naively or by an
epsilon-greedy bandit that learns on the fly which sampler is paying off.
"""

from calibkit.core import (
    CalibrationState,
    EvaluationRecord,
    ParameterDim,
    ParameterSpace,
    best_loss,
    checkpoint_load,
    checkpoint_save,
    derive_seed,
    snap_to_grid,
)

__version__ = "0.1.0"

__all__ = [
    "CalibrationState",
    "EvaluationRecord",
    "ParameterDim",
    "ParameterSpace",
    "best_loss",
    "checkpoint_load",
    "checkpoint_save",
    "derive_seed",
    "snap_to_grid",
    "__version__",
]
