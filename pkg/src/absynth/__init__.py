"""Certified neural abstractions of nonlinear dynamical systems.

Pipeline: fit a template network to a concrete vector field, certify a
per-dimension error bound by interval branch-and-bound, cast the result
to a linear hybrid automaton (piecewise templates) or a disturbed neural
ODE (sigmoidal template), and over-approximate flowpipes to decide safety.
"""

__version__ = "0.1.0"
