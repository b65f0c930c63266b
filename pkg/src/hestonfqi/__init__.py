"""Heston calibration, path simulation and fitted-Q trading agents."""

from ._kernels import BACKEND
from .heston import HestonParams, PricePath, SimConfig, log_returns, simulate_batch, simulate_heston

__all__ = [
    "BACKEND",
    "HestonParams",
    "PricePath",
    "SimConfig",
    "log_returns",
    "simulate_batch",
    "simulate_heston",
]

__version__ = "0.1.0"
