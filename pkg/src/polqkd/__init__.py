"""Simulator and post-processing stack for a three-state, one-decoy BB84 link.

Submodules: :mod:`config`, :mod:`photonics`, :mod:`sift`, :mod:`cascade`,
:mod:`finitekey`, :mod:`privamp`, :mod:`polfeedback` and :mod:`link`.
"""

from .config import Config, ConfigError, from_dict, load_config
from .finitekey import FiniteKeyBounds, IntensityTallies, compute_bounds, expected_rate_model, optimize_params

__version__ = "0.1.0"

__all__ = [
    "Config",
    "ConfigError",
    "FiniteKeyBounds",
    "IntensityTallies",
    "compute_bounds",
    "expected_rate_model",
    "from_dict",
    "load_config",
    "optimize_params",
]
