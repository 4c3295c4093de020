"""Simulation and post-processing toolkit for entanglement-based QKD with a quantum-dot pair source."""
from ._kernels import BACKEND
from .polarization import fidelity, model_state, qber_from_rho, sifted_error_rate
from .scenario import ScenarioConfig, expected_rates, load_config, run_scenario, save_config

__all__ = ["BACKEND", "ScenarioConfig", "expected_rates", "fidelity", "load_config", "model_state",
           "qber_from_rho", "run_scenario", "save_config", "sifted_error_rate"]
__version__ = "0.1.0"
