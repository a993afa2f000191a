"""Space-time solvers for boundary control of Keller-Segel chemotaxis.

The package provides a uniform Q1/implicit-Euler discretization (`fem`),
the nonlinear model and its linearization blocks (`model`), all-at-once
KKT systems (`kkt`), the block-triangular Schur-complement preconditioner
(`precond`) with GMRES (`krylov`), the outer Gauss-Newton driver
(`newton`), a quantized tensor-train engine with an ALS solver (`tt`),
and a benchmark harness with a CLI (`harness`, `cli`).
"""

from ksopt import fem, io, model  # noqa: F401

__version__ = "0.1.0"
