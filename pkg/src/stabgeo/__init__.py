"""Simulation and estimation of strongly stabilizing functionals of Poisson and binomial processes."""

__version__ = "0.1.0"

from .functionals import Components, Count, Euler, KnnLength, evaluate, parse_functional  # noqa: E402
from .point_process import Cubic, PointCloud, ProcessKey, Stretched, poisson_window  # noqa: E402

__all__ = [
    "Components",
    "Count",
    "Cubic",
    "Euler",
    "KnnLength",
    "PointCloud",
    "ProcessKey",
    "Stretched",
    "evaluate",
    "parse_functional",
    "poisson_window",
]
