"""Minimizing-movements solver for doubly nonlinear parabolic systems on
nondecreasing space-time domains, with an a-posteriori verification harness."""

__version__ = "0.1.0"
