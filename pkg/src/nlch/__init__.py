"""Nonlocal Cahn-Hilliard type equations on periodic grids and their local limit."""
from .grid import Grid, make_grid
from .kernels import make_kernel, sample_kernel
from .solver import InitialDataSpec, SchemeParams, SolverState, init_state, run, step

__all__ = ["Grid", "InitialDataSpec", "SchemeParams", "SolverState", "init_state", "make_grid", "make_kernel",
           "run", "sample_kernel", "step"]
__version__ = "0.1.0"
