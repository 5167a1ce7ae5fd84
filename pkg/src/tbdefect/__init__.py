"""Finite-temperature tight-binding models of crystalline defects.

Two-centre Hamiltonians with an on-site density term, Fermi-Dirac
thermodynamics, Hellmann-Feynman forces, canonical and grand-canonical
relaxation of point defects and screw dislocations, and the convergence
studies that probe the thermodynamic limit.
"""

from .model import ModelParams, QoIKind
from .lattice import BravaisLattice, DefectConfiguration, DefectKind
from .observables import ElectronicState, fermi_level_bloch, fermi_level_supercell, solve_mu
from .equilibrium import EquilibriumProblem, SolverOptions, solve_canonical, solve_grand_canonical

__version__ = "0.1.0"

__all__ = [
    "BravaisLattice",
    "DefectConfiguration",
    "DefectKind",
    "ElectronicState",
    "EquilibriumProblem",
    "ModelParams",
    "QoIKind",
    "SolverOptions",
    "fermi_level_bloch",
    "fermi_level_supercell",
    "solve_canonical",
    "solve_grand_canonical",
    "solve_mu",
]
