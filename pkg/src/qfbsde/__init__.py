"""Numerical tools for quadratic forward-backward SDE systems and diagonal games."""

from __future__ import annotations

__version__ = "0.1.0"

from .model import CoefficientSet, StructuralDecl, assemble_F, from_expressions, truncate_z  # noqa: E402
from .pde import DecouplingField, GridSpec, solve_backward  # noqa: E402

__all__ = [
    "__version__",
    "CoefficientSet",
    "StructuralDecl",
    "assemble_F",
    "from_expressions",
    "truncate_z",
    "DecouplingField",
    "GridSpec",
    "solve_backward",
]
