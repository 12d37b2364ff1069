"""Numerical workbench for prescribing scalar curvature within a conformal class.

The package realizes a constructive pipeline: local Yamabe-type Dirichlet
solves with an energy gate, a perturbation continuation, sub/super-solution
construction, monotone iteration to a positive conformal factor, and
sphere obstruction checking.
"""

from .constants import DimensionConstants

__all__ = ["DimensionConstants"]
__version__ = "0.1.0"
