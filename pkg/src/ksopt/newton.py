"""Outer Gauss-Newton/Newton driver with Moreau-Yosida continuation.

Each outer iteration assembles the chosen KKT variant at the current
iterate, solves it with preconditioned GMRES (or a sparse direct solve for
oracle runs), applies a safeguarded step (halving until the optimality
residual decreases, at most a fixed number of times) and, in constrained
mode, advances the penalty parameter one decade per iteration until its
floor.  Convergence is declared on the Euclidean norm of the first-order
optimality residual.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, asdict

import numpy as np
import scipy.sparse.linalg as spla

from ksopt import fem, kkt, krylov, model, precond

__all__ = ["NewtonConfig", "continuation_step", "solve_optimal_control"]


@dataclass
class NewtonConfig:
    tol: float = 1e-4                      # relative to the entry residual
    tol_floor: float = 1e-12               # absolute fallback near stationarity
    max_outer: int = 30
    variant: str = "gauss-newton"          # or "newton"
    constrained: bool = False
    eps_schedule: tuple = (1e-1, 1e-2, 1e-3, 1e-4)
    gmres_tol: float = 1e-6
    gmres_maxit: int = 400
    gmres_restart: int | None = None
    damping_max_halvings: int = 5
    damping: str = "safeguard"             # "safeguard" | "monotone" | "off"
    damping_growth_factor: float = 1e3     # safeguard trips beyond this growth
    bounds: tuple = (0.0, 0.2)
    eta_mode: str = "diag"
    alt_annihilate: bool = False
    linear_solver: str = "gmres"           # or "direct" (oracle, small grids)
    forward_tol: float = 1e-10

    def __post_init__(self):
        eps = tuple(self.eps_schedule)
        if self.constrained:
            if len(eps) == 0 or any(b >= a for a, b in zip(eps, eps[1:])):
                raise ValueError("eps_schedule must be strictly decreasing")
        self.eps_schedule = eps


def continuation_step(current_eps: float, eps_schedule) -> float:
    """Next penalty parameter: one schedule entry per outer iteration, then hold."""
    schedule = tuple(eps_schedule)
    for i, value in enumerate(schedule):
        if np.isclose(current_eps, value, rtol=1e-12):
            return schedule[min(i + 1, len(schedule) - 1)]
    return schedule[-1]


def _direct_solve(sys):
    return spla.splu(sys.to_sparse().tocsc()).solve(sys.rhs)


def solve_optimal_control(grid, params, scenario, config: NewtonConfig,
                          targets=None, diagnostics=None):
    """Outer solve from the standard initial guess.

    The initial guess runs the forward model with zero control (so the
    state initial conditions hold exactly) and starts the adjoints and the
    control at zero (so the virtual final-time adjoint values hold).
    Returns (SolutionFields, stats dict).
    """
    t_start = time.perf_counter()
    z0 = model.make_initial_density(grid, scenario)
    c0 = np.zeros(grid.num_nodes)
    if targets is None:
        targets = model.make_desired_state(grid, scenario)

    fields = model.SolutionFields.zeros(grid, z0=z0, c0=c0)
    fields.z, fields.c = model.forward_solve(grid, params, z0, c0, tol=config.forward_tol)

    stats = {
        "n": grid.n, "nt": grid.nt, "m0": scenario.m0, "seed": scenario.rng_seed,
        "constrained": config.constrained, "variant": config.variant,
        "outer_iterations": 0, "converged": False,
        "gmres_iterations": [], "eta": [], "residual_norms": [],
        "active_set_sizes": [], "eps_path": [],
        "assembly_seconds": 0.0, "factor_seconds": 0.0, "gmres_seconds": 0.0,
    }

    eps = config.eps_schedule[0] if config.constrained else None

    def grad_norm(f, eps_now):
        my = None
        if config.constrained:
            my = kkt.detect_active_sets(f.u, config.bounds, eps_now)
        comps = kkt.first_order_residual(grid, params, f, targets, my=my)
        return kkt.residual_norm(comps)

    res = grad_norm(fields, eps)
    res_entry = res
    stats["entry_residual"] = res_entry
    tol_eff = max(config.tol * res_entry, config.tol_floor)
    stats["tol_effective"] = tol_eff
    for outer in range(1, config.max_outer + 1):
        stats["residual_norms"].append(res)
        at_floor = (not config.constrained) or np.isclose(eps, config.eps_schedule[-1], rtol=1e-12)
        if res <= tol_eff and at_floor:
            stats["converged"] = True
            break

        t0 = time.perf_counter()
        if config.constrained:
            active = kkt.detect_active_sets(fields.u, config.bounds, eps)
            stats["active_set_sizes"].append(active.size)
            sys = kkt.assemble_moreau_yosida(grid, params, fields, targets, active)
        elif config.variant == "newton":
            sys = kkt.assemble_newton(grid, params, fields, targets)
        else:
            sys = kkt.assemble_gauss_newton(grid, params, fields, targets)
        stats["assembly_seconds"] += time.perf_counter() - t0

        t0 = time.perf_counter()
        if config.linear_solver == "direct":
            step = _direct_solve(sys)
            stats["gmres_iterations"].append(0)
            stats["eta"].append(float("nan"))
        else:
            pc = precond.UzawaPreconditioner(
                sys, eta_mode=config.eta_mode,
                alt_annihilate=config.alt_annihilate, diagnostics=diagnostics,
            )
            stats["factor_seconds"] += pc.setup_seconds
            stats["eta"].append(pc.eta)
            step, report = krylov.gmres(
                sys.matvec, sys.rhs, apply_p_inv=pc.apply,
                tol=config.gmres_tol, max_iter=config.gmres_maxit,
                restart=config.gmres_restart,
            )
            stats["gmres_iterations"].append(report.iterations)
            if not report.converged:
                stats["gmres_failure_at_step"] = outer
        stats["gmres_seconds"] += time.perf_counter() - t0

        dz, dc, du, dp, dq = sys.unpack(step)

        def take(scale):
            trial = fields.copy()
            trial.z = fields.z + scale * dz
            trial.c = fields.c + scale * dc
            trial.u = fields.u + scale * du
            trial.p = fields.p + scale * dp
            trial.q = fields.q + scale * dq
            return trial, grad_norm(trial, eps)

        if config.damping == "off":
            fields, res = take(1.0)
        else:
            # full-step overshoot is normal while the active set settles, so
            # the safeguard only trips on outright divergence; "monotone"
            # enforces a strict residual decrease instead
            growth = 1.0 if config.damping == "monotone" else config.damping_growth_factor
            scale = 1.0
            best = None
            for _ in range(config.damping_max_halvings + 1):
                trial, trial_res = take(scale)
                if best is None or trial_res < best[1]:
                    best = (trial, trial_res)
                if np.isfinite(trial_res) and trial_res < growth * max(res, tol_eff):
                    best = (trial, trial_res)
                    break
                scale *= 0.5
            fields, res = best

        stats["outer_iterations"] = outer
        if config.constrained:
            stats["eps_path"].append(eps)
            eps = continuation_step(eps, config.eps_schedule)
            res = grad_norm(fields, eps)
    else:
        stats["residual_norms"].append(res)

    if not config.constrained:
        # exact stationarity of the control row (diagonal elimination)
        ws = model.workspace(grid)
        wdiag = grid.tau * ws.btrace_lumped
        fields.u = (grid.tau * params.beta) * (ws.bcouple.T.dot(fields.q.T)).T / (
            params.gamma_u * wdiag
        )
        res = grad_norm(fields, eps)

    stats["final_residual"] = res
    stats["mean_gmres"] = float(np.mean(stats["gmres_iterations"])) if stats["gmres_iterations"] else 0.0
    drift, leak = model.conservation_defects(grid, params, fields)
    stats["conservation_defect_conservative"] = drift
    stats["conservation_defect_diffusive_only"] = leak
    ws = model.workspace(grid)
    mis = fields.z[-1] - targets.zhat
    stats["final_misfit_norm"] = float(np.sqrt(mis.dot(ws.mass.dot(mis))))
    stats["wall_seconds"] = time.perf_counter() - t_start
    return fields, stats


def dump_stats(stats, path):
    with open(path, "w") as fh:
        json.dump(stats, fh, indent=1, sort_keys=True, default=float)
        fh.write("\n")
