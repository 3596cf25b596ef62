"""Diffuse-interface two-phase flow: convected Cahn-Hilliard coupled to a
variable-density power-law Navier-Stokes system on a 2D MAC grid."""
from .config import RunConfig, parse_config, preset
from .constitutive import FluidParams
from .coupled import State, StepConfig, run, step
from .grid import EllipticSolverConfig, Grid

__all__ = ["EllipticSolverConfig", "FluidParams", "Grid", "RunConfig", "State", "StepConfig", "parse_config",
           "preset", "run", "step"]
__version__ = "0.1.0"
