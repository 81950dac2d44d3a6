"""SUPG-stabilized optimal control of advection-dominated problems with POD reduced models."""

from .assembly import graetz_problem, square_problem
from .mesh import DomainId, build_structured_mesh
from .ocp_spacetime import SpaceTimeKKT, solve_spacetime
from .ocp_steady import Stabilization, SteadyKKT, solve_steady
from .pod_rom import RomMode, build_bases, build_reduced_model, solve_reduced

__version__ = "0.1.0"

__all__ = [
    "DomainId", "RomMode", "SpaceTimeKKT", "Stabilization", "SteadyKKT",
    "build_bases", "build_reduced_model", "build_structured_mesh",
    "graetz_problem", "solve_reduced", "solve_spacetime", "solve_steady",
    "square_problem",
]
