"""Right-preconditioned restarted GMRES with full diagnostics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["KrylovReport", "gmres"]


@dataclass
class KrylovReport:
    iterations: int = 0
    residual_history: list = field(default_factory=list)
    converged: bool = False
    breakdown: str | None = None

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("iteration,relative_residual\n")
            for i, r in enumerate(self.residual_history):
                fh.write(f"{i},{r:.17g}\n")


def _mgs(basis, w):
    """Modified Gram-Schmidt with one reorthogonalization pass."""
    coeffs = np.zeros(len(basis))
    for _ in range(2):
        for i, v in enumerate(basis):
            hij = np.dot(v, w)
            coeffs[i] += hij
            w = w - hij * v
    return coeffs, w


def gmres(apply_a, b, apply_p_inv=None, tol=1e-6, max_iter=None, restart=None, x0=None):
    """Solve A x = b with right preconditioning: A P^{-1} y = b, x = P^{-1} y.

    apply_a and apply_p_inv are callables on vectors; residual_history holds
    true relative residual norms ||b - A x|| / ||b|| (exact for the
    non-restarted method by the Arnoldi recurrence).  Returns (x, report).
    Convergence inside the Arnoldi recurrence (happy breakdown) counts as a
    converged solve.
    """
    b = np.asarray(b, dtype=float)
    n = b.size
    if apply_p_inv is None:
        apply_p_inv = lambda v: v
    if max_iter is None:
        max_iter = n
    if tol <= 0:
        raise ValueError("gmres tolerance must be positive")
    cycle = min(n, max_iter) if restart is None else int(restart)

    report = KrylovReport()
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        report.converged = True
        report.residual_history = [0.0]
        return np.zeros(n), report

    x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float).copy()
    if x0 is None:
        r = b.copy()
    else:
        r = b - apply_a(x)
    report.residual_history.append(float(np.linalg.norm(r)) / bnorm)

    total = 0
    while total < max_iter:
        beta = float(np.linalg.norm(r))
        if beta / bnorm <= tol:
            report.converged = True
            break
        basis = [r / beta]
        hess = np.zeros((cycle + 1, cycle))
        givens = []
        g = np.zeros(cycle + 1)
        g[0] = beta
        k = 0
        happy = False
        while k < cycle and total < max_iter:
            w = apply_a(apply_p_inv(basis[k]))
            coeffs, w = _mgs(basis, w)
            hess[: k + 1, k] = coeffs
            hnorm = float(np.linalg.norm(w))
            hess[k + 1, k] = hnorm
            if hnorm > 1e-14 * max(1.0, abs(coeffs).max()):
                basis.append(w / hnorm)
            else:
                happy = True
            # apply stored rotations, then the new one
            for i, (cs, sn) in enumerate(givens):
                t = cs * hess[i, k] + sn * hess[i + 1, k]
                hess[i + 1, k] = -sn * hess[i, k] + cs * hess[i + 1, k]
                hess[i, k] = t
            denom = np.hypot(hess[k, k], hess[k + 1, k])
            cs, sn = (1.0, 0.0) if denom == 0.0 else (hess[k, k] / denom, hess[k + 1, k] / denom)
            givens.append((cs, sn))
            hess[k, k] = cs * hess[k, k] + sn * hess[k + 1, k]
            hess[k + 1, k] = 0.0
            g[k + 1] = -sn * g[k]
            g[k] = cs * g[k]
            k += 1
            total += 1
            report.residual_history.append(abs(g[k]) / bnorm)
            if happy or abs(g[k]) / bnorm <= tol:
                break
        # solve the small triangular system and update x
        if k > 0:
            y = np.linalg.solve(np.triu(hess[:k, :k]), g[:k])
            update = np.zeros(n)
            for i in range(k):
                update += y[i] * basis[i]
            x = x + apply_p_inv(update)
        r = b - apply_a(x)
        true_rel = float(np.linalg.norm(r)) / bnorm
        report.residual_history[-1] = true_rel
        if happy:
            report.breakdown = "happy"
        if true_rel <= tol:
            report.converged = True
            break
        if happy:
            # invariant subspace exhausted without reaching tol
            break
    report.iterations = total
    if not report.converged and report.breakdown is None:
        report.breakdown = "max_iter"
    return x, report
