"""Sparse Ising/Boltzmann-machine sampling, mean-field estimation and hybrid CD training."""

import warnings

from numba.core.errors import NumbaWarning

# numba falls back to its workqueue layer when TBB is too old; the warning is noise
warnings.filterwarnings("ignore", category=NumbaWarning, message=".*TBB.*")

__version__ = "0.1.0"
