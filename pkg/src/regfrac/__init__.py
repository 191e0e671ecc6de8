"""Grid discretizations of regional fractional Dirichlet forms.

The package builds lumped finite-difference style quadratic forms for
the regional fractional kernel on axis-aligned grids, solves for
principal eigenpairs, and layers diagnostics on top: Hardy-type lower
bounds through a directional pseudo-distance, symmetric-decreasing
rearrangement comparisons, and measure-constrained shape optimization.
"""
from __future__ import annotations

__version__ = "0.1.0"
