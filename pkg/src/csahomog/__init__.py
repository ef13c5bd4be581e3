"""Two-scale homogenization of periodic neo-Hookean structures.

Macroscopic Newton iterations draw homogenized tangents and stresses from
interchangeable backends: direct micro solves per quadrature point
(``FE2Backend``), clustering with sensitivity-based extrapolation
(``CSABackend``) and Galerkin projection on a snapshot basis (``PODBackend``).
"""
from .backends import CoefficientField, FE2Backend
from .csa import CSABackend
from .macro import LoadCase, MacroProblem, MacroState, newton_solve
from .material import MaterialParams
from .mesh import Mesh, PeriodicCell, load_mesh, match_periodic
from .micro import MicroProblem, micro_step
from .pod import PODBackend, build_basis, generate_snapshots

__version__ = "0.1.0"

__all__ = [
    "CoefficientField", "FE2Backend", "CSABackend", "PODBackend", "LoadCase", "MacroProblem",
    "MacroState", "newton_solve", "MaterialParams", "Mesh", "PeriodicCell", "load_mesh",
    "match_periodic", "MicroProblem", "micro_step", "build_basis", "generate_snapshots",
]
