"""Single-track laser DED thermo-mechanical simulator with a latent-ODE surrogate."""

from .errors import (ArtifactError, ConfigError, ConvergenceRegimeError,
                     DedromError, DegenerateDataError, MaterialDataError,
                     StepFailureError)
from .grid import StructuredGrid
from .material import MaterialModel, PropertyTable, inconel718, load_material_file
from .mech import MechConfig, MechSolver, run_mechanical
from .metrics import (benchmark_inference, latent_sweep, nrmse_at_time,
                      nrmse_per_time, nrmse_total, richardson_error)
from .surrogate import (FieldSample, SurrogateModel, TrainConfig,
                        chain_predict, load_bundle, save_bundle, train)
from .thermal import ThermalConfig, ThermalSolver, goldak_flux, simulate_thermal
from .trajectory import FieldTrajectory

__version__ = "0.1.0"

__all__ = [
    "ArtifactError", "ConfigError", "ConvergenceRegimeError", "DedromError",
    "DegenerateDataError", "MaterialDataError", "StepFailureError",
    "StructuredGrid", "MaterialModel", "PropertyTable", "inconel718",
    "load_material_file", "MechConfig", "MechSolver", "run_mechanical",
    "benchmark_inference", "latent_sweep", "nrmse_at_time", "nrmse_per_time",
    "nrmse_total", "richardson_error", "FieldSample", "SurrogateModel",
    "TrainConfig", "chain_predict", "load_bundle", "save_bundle", "train",
    "ThermalConfig", "ThermalSolver", "goldak_flux", "simulate_thermal",
    "FieldTrajectory", "__version__",
]
