"""Hybrid-velocity, hybrid-pressure finite elements for the 2D unsteady
incompressible Navier-Stokes equations.

The element velocity lives in a Raviart-Thomas-Nedelec space, so discrete
velocities are exactly divergence-free and the scheme is pressure-robust.
"""
from .kernels import BACKEND
from .mesh import Mesh, MeshError, build_structured_mesh, read_mesh, write_mesh
from .mms import ConvergenceReport, ManufacturedSolution, eoc, eoc_study, interpolation_study
from .solver import (Discretization, NewtonError, SchemeConfig, StepFailure, TimeStepper,
                     check_divergence_free, run_transient)
from .spaces import HybridPressure, HybridSpaces, HybridVelocity

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "ConvergenceReport", "Discretization", "HybridPressure", "HybridSpaces",
    "HybridVelocity", "ManufacturedSolution", "Mesh", "MeshError", "NewtonError",
    "SchemeConfig", "StepFailure", "TimeStepper", "build_structured_mesh",
    "check_divergence_free", "eoc", "eoc_study", "interpolation_study", "read_mesh",
    "run_transient", "write_mesh",
]
