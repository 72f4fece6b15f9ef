"""Sequential detection of low-magnitude structured signals observed
through a linear system against nuisance baselines, with provable
false-alarm and power levels."""

from .calibration import CalibrationTable, SolverFailure, calibrate_affine
from .config import ConfigError, RunConfig, load_config
from .model import (
    ObservationModel,
    double_integrator,
    rust_field,
    third_order,
)
from .quadratic import calibrate_quadratic
from .runtime import DecisionTrace, SequentialTest, Verdict, run_stream
from .simharness import MonteCarloResult, Scenario, monte_carlo

__version__ = "0.1.0"

__all__ = [
    "CalibrationTable",
    "ConfigError",
    "DecisionTrace",
    "MonteCarloResult",
    "ObservationModel",
    "RunConfig",
    "Scenario",
    "SequentialTest",
    "SolverFailure",
    "Verdict",
    "__version__",
    "calibrate_affine",
    "calibrate_quadratic",
    "double_integrator",
    "load_config",
    "monte_carlo",
    "run_stream",
    "rust_field",
    "third_order",
]
