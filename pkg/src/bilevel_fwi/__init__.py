"""Bilevel learning of sensor positions and Tikhonov weights for frequency-domain FWI."""
from .grid_fem import Grid, build_grid
from .helmholtz import COUNTER, Operators, factorize, solve_count
from .restriction import SensorSet, build_stencil
from .acquisition import DataSet, SyntheticRecording, add_noise, generate_data
from .fwi_lower import FWIProblem, LBFGSOptions, lbfgs_minimize

__version__ = "0.1.0"

__all__ = [
    "COUNTER",
    "DataSet",
    "FWIProblem",
    "Grid",
    "LBFGSOptions",
    "Operators",
    "SensorSet",
    "SyntheticRecording",
    "add_noise",
    "build_grid",
    "build_stencil",
    "factorize",
    "generate_data",
    "lbfgs_minimize",
    "solve_count",
]
