"""Depth-map super-resolution with a CNN and an unrolled TGV primal-dual solver."""

__version__ = "0.1.0"

from . import bench, cnn, grid, raycast, tgv, unrolled  # noqa: E402,F401
from .tgv import SolverParams, solve  # noqa: E402,F401
