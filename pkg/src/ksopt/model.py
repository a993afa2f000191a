"""Chemotaxis model: parameters, scenarios, residuals and linearizations.

State system on Omega x (0,T] (cell density z, attractant concentration c,
boundary control u):

    dz/dt - D_z lap z - alpha div( (grad c / (1+c)^2) z ) = 0
    dc/dt - lap c + rho c - w z^2/(1+z^2) = 0
    total normal flux of z on the boundary = 0
    dc/dn + beta c = beta u on the boundary

Implicit Euler in time; each step's weak residual is scaled by tau so that
all-at-once operators are built from per-step sparse blocks plus a -M
coupling to the previous slice.  The z equation keeps its conservative weak
form (no boundary terms at all), which conserves 1^T M z exactly.

Adjoint and Hessian blocks are the exact discrete derivatives of the
Lagrangian of this discretization, so adjoint blocks are literally the
transposes of the forward blocks.  Adjoint values are stored as the
multipliers of time steps 1..nt; the value at the final time itself is the
imposed zero that closes the backward recursion.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from ksopt import fem

__all__ = [
    "ModelParams",
    "ScenarioSpec",
    "Targets",
    "SolutionFields",
    "ForwardSolveError",
    "make_scenario",
    "density_formula",
    "make_initial_density",
    "make_desired_state",
    "state_residual",
    "forward_solve",
    "adjoint_solve",
    "objective",
    "assemble_state_jacobian",
    "assemble_adjoint_blocks",
    "assemble_second_order_blocks",
    "boundary_chemotactic_flux",
    "conservation_defects",
]

GAUSSIAN_SHARPNESS = 2560.0


@dataclass(frozen=True)
class ModelParams:
    """Positive model and objective parameters."""

    D_z: float = 0.1
    alpha: float = 1.0
    rho: float = 1.0
    w: float = 1.0
    beta: float = 1.0
    gamma_c: float = 0.5
    gamma_u: float = 1e-3
    T: float = 1.0

    def __post_init__(self):
        for name in ("D_z", "alpha", "rho", "w", "beta", "gamma_c", "gamma_u", "T"):
            if not getattr(self, name) > 0:
                raise ValueError(f"model parameter {name} must be positive")


@dataclass(frozen=True)
class ScenarioSpec:
    """Initial-density recipe: m0 Gaussian peaks at seeded random centers."""

    m0: int
    centers: tuple
    rng_seed: int

    @property
    def center_array(self) -> np.ndarray:
        return np.asarray(self.centers, dtype=float).reshape(self.m0, 2)


def make_scenario(m0: int, rng_seed: int = 0) -> ScenarioSpec:
    rng = np.random.default_rng(rng_seed)
    centers = rng.random((int(m0), 2))
    return ScenarioSpec(m0=int(m0), centers=tuple(map(tuple, centers)), rng_seed=int(rng_seed))


@dataclass
class Targets:
    zhat: np.ndarray
    chat: np.ndarray


@dataclass
class SolutionFields:
    """All unknowns plus the initial data they are anchored to.

    z, c, p, q have shape (nt, n^2) (slices at t_1..t_nt); u has shape
    (nt, 4(n-1)).  z0, c0 are the initial slices at t=0 (data, not
    unknowns).  In a converged solution the virtual adjoint values at the
    final time are zero by construction.
    """

    z0: np.ndarray
    c0: np.ndarray
    z: np.ndarray
    c: np.ndarray
    p: np.ndarray
    q: np.ndarray
    u: np.ndarray

    @classmethod
    def zeros(cls, grid: fem.Grid, z0=None, c0=None) -> "SolutionFields":
        nn, nb, nt = grid.num_nodes, grid.num_boundary, grid.nt
        z0 = np.zeros(nn) if z0 is None else np.asarray(z0, dtype=float).ravel()
        c0 = np.zeros(nn) if c0 is None else np.asarray(c0, dtype=float).ravel()
        return cls(
            z0=z0,
            c0=c0,
            z=np.zeros((nt, nn)),
            c=np.zeros((nt, nn)),
            p=np.zeros((nt, nn)),
            q=np.zeros((nt, nn)),
            u=np.zeros((nt, nb)),
        )

    def copy(self) -> "SolutionFields":
        return SolutionFields(
            self.z0.copy(), self.c0.copy(), self.z.copy(), self.c.copy(),
            self.p.copy(), self.q.copy(), self.u.copy(),
        )


class ForwardSolveError(RuntimeError):
    def __init__(self, step: int, residual: float):
        self.step = step
        self.residual = residual
        super().__init__(
            f"inner Newton iteration failed to converge at time step {step} "
            f"(residual {residual:.3e})"
        )


def density_formula(scenario: ScenarioSpec):
    """Callable (x, y) -> initial density, a sum of sharp Gaussian peaks."""
    centers = scenario.center_array

    def z0(x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        total = np.zeros(np.broadcast(x, y).shape)
        for cx, cy in centers:
            total += np.exp(-GAUSSIAN_SHARPNESS * ((x - cx) ** 2 + (y - cy) ** 2))
        return total

    return z0


def make_initial_density(grid: fem.Grid, scenario: ScenarioSpec) -> np.ndarray:
    coords = fem.node_coords(grid)
    return density_formula(scenario)(coords[:, 0], coords[:, 1])


def make_desired_state(grid: fem.Grid, scenario: ScenarioSpec) -> Targets:
    """Linear-ramp density target normalized by the initial mass; zero for c."""
    z0 = make_initial_density(grid, scenario)
    mass0 = fem.integrate(grid, z0)
    coords = fem.node_coords(grid)
    zhat = mass0 * (coords[:, 0] + coords[:, 1])
    return Targets(zhat=zhat, chat=np.zeros(grid.num_nodes))


# nonlinearities and their derivatives (applied nodally)
def _sigma(c):
    return 1.0 / (1.0 + c)


def _sigma_c_weight(c):
    # derivative weight of sigma: d/dc [1/(1+c)] = -1/(1+c)^2
    return 1.0 / (1.0 + c) ** 2


def _source(z):
    return z * z / (1.0 + z * z)


def _source_d1(z):
    return 2.0 * z / (1.0 + z * z) ** 2


def _source_d2(z):
    return 2.0 * (1.0 - 3.0 * z * z) / (1.0 + z * z) ** 3


class _Workspace:
    """Constant matrices shared by every operation on one grid."""

    def __init__(self, grid: fem.Grid):
        self.mass = fem.assemble_mass(grid)
        self.mass_lumped_diag = np.asarray(self.mass.sum(axis=1)).ravel()
        self.stiff = fem.assemble_stiffness(grid)
        self.bmass_full = fem.boundary_mass_full(grid)
        self.bcouple = fem.boundary_coupling(grid)
        self.btrace_lumped = np.asarray(fem.assemble_boundary_mass(grid).sum(axis=1)).ravel()


_workspaces: dict = {}


def workspace(grid: fem.Grid) -> _Workspace:
    key = (grid.n, grid.nt, grid.T)
    ws = _workspaces.get(key)
    if ws is None:
        ws = _workspaces[key] = _Workspace(grid)
    return ws


def _step_operator_c(grid: fem.Grid, params: ModelParams) -> sp.csr_matrix:
    """Per-step operator of the (linear) c equation: M + tau(K + rho M + beta N)."""
    ws = workspace(grid)
    tau = grid.tau
    return (ws.mass + tau * (ws.stiff + params.rho * ws.mass + params.beta * ws.bmass_full)).tocsr()


def _step_operator_z(grid: fem.Grid, params: ModelParams, c_slice) -> sp.csr_matrix:
    """Per-step operator of the z equation linearized at c: M + tau(D_z K - alpha G)."""
    ws = workspace(grid)
    conv = fem.assemble_weighted_form(grid, _sigma(c_slice), 1, 0)
    return (ws.mass + grid.tau * (params.D_z * ws.stiff - params.alpha * conv)).tocsr()


def state_residual(grid: fem.Grid, params: ModelParams, fields: SolutionFields):
    """Implicit-Euler weak residuals (r_z, r_c), each of shape (nt, n^2)."""
    ws = workspace(grid)
    tau = grid.tau
    nt = grid.nt
    r_z = np.empty_like(fields.z)
    r_c = np.empty_like(fields.c)
    c_prev = fields.c0
    z_prev = fields.z0
    for k in range(nt):
        zk, ck, uk = fields.z[k], fields.c[k], fields.u[k]
        conv = fem.assemble_weighted_form(grid, _sigma(ck), 1, 0)
        r_z[k] = ws.mass.dot(zk - z_prev) + tau * (
            params.D_z * ws.stiff.dot(zk) - params.alpha * conv.dot(zk)
        )
        r_c[k] = ws.mass.dot(ck - c_prev) + tau * (
            ws.stiff.dot(ck)
            + params.rho * ws.mass.dot(ck)
            + params.beta * (ws.bmass_full.dot(ck) - ws.bcouple.dot(uk))
            - params.w * ws.mass.dot(_source(zk))
        )
        z_prev, c_prev = zk, ck
    return r_z, r_c


def assemble_state_jacobian(grid: fem.Grid, params: ModelParams, fields: SolutionFields, k: int):
    """2x2 forward linearization at one time step (k counted 1..nt).

    Returns {"pz": L_pz, "pc": L_pc, "qz": L_qz, "qc": L_qc}; the key names
    the multiplier row and the differentiated variable.
    """
    if not 1 <= k <= grid.nt:
        raise ValueError(f"time step {k} outside 1..{grid.nt}")
    ws = workspace(grid)
    tau = grid.tau
    zk, ck = fields.z[k - 1], fields.c[k - 1]
    l_pz = _step_operator_z(grid, params, ck)
    wz = fem.assemble_weighted_form(grid, zk, 1, 1)
    l_pc = (tau * params.alpha) * wz.dot(sp.diags(_sigma_c_weight(ck)))
    l_qz = (-tau * params.w) * ws.mass.dot(sp.diags(_source_d1(zk)))
    l_qc = _step_operator_c(grid, params)
    return {"pz": l_pz.tocsr(), "pc": l_pc.tocsr(), "qz": l_qz.tocsr(), "qc": l_qc}


def assemble_adjoint_blocks(grid: fem.Grid, params: ModelParams, fields: SolutionFields, k: int):
    """Adjoint blocks at step k: exact transposes of the forward blocks."""
    fwd = assemble_state_jacobian(grid, params, fields, k)
    return {
        "zp": fwd["pz"].T.tocsr(),
        "zq": fwd["qz"].T.tocsr(),
        "cp": fwd["pc"].T.tocsr(),
        "cq": fwd["qc"].T.tocsr(),
    }


def assemble_second_order_blocks(grid: fem.Grid, params: ModelParams, fields: SolutionFields, k: int):
    """Hessian blocks of the Lagrangian at one time step (k counted 1..nt).

    Includes the final-time misfit restriction, so at p=q=0 the blocks
    reduce to the Gauss-Newton (1,1)-block diag(chi_T, gamma_c chi_T).
    """
    if not 1 <= k <= grid.nt:
        raise ValueError(f"time step {k} outside 1..{grid.nt}")
    ws = workspace(grid)
    tau = grid.tau
    zk, ck = fields.z[k - 1], fields.c[k - 1]
    pk, qk = fields.p[k - 1], fields.q[k - 1]
    mass_q = ws.mass.dot(qk)
    l_zz = sp.diags(-tau * params.w * _source_d2(zk) * mass_q)
    conv_p = fem.assemble_weighted_form(grid, pk, 1, 0)
    l_zc = (tau * params.alpha) * conv_p.T.dot(sp.diags(_sigma_c_weight(ck)))
    wz_p = fem.assemble_weighted_form(grid, zk, 1, 1).dot(pk)
    l_cc = sp.diags(-2.0 * tau * params.alpha * wz_p / (1.0 + ck) ** 3)
    if k == grid.nt:
        l_zz = l_zz + ws.mass
        l_cc = l_cc + params.gamma_c * ws.mass
    return {
        "zz": l_zz.tocsr(),
        "zc": l_zc.tocsr(),
        "cz": l_zc.T.tocsr(),
        "cc": l_cc.tocsr(),
    }


def _coupled_step_solve(grid, params, ws, z_prev, c_prev, uk, z_guess, c_guess,
                        tol=1e-10, max_iter=50):
    """Damped Newton for one implicit-Euler step of the coupled (z, c) system."""
    tau = grid.tau
    nn = grid.num_nodes
    zk = z_guess.copy()
    ck = c_guess.copy()
    bu = tau * params.beta * ws.bcouple.dot(uk)
    l_qc = _step_operator_c(grid, params)

    def residual(zv, cv):
        conv = fem.assemble_weighted_form(grid, _sigma(cv), 1, 0)
        rz = ws.mass.dot(zv - z_prev) + tau * (
            params.D_z * ws.stiff.dot(zv) - params.alpha * conv.dot(zv)
        )
        rc = l_qc.dot(cv) - ws.mass.dot(c_prev) - tau * params.w * ws.mass.dot(_source(zv)) - bu
        return rz, rc

    rz, rc = residual(zk, ck)
    res = np.sqrt(rz.dot(rz) + rc.dot(rc))
    for it in range(max_iter):
        if res <= tol:
            # one polishing step so conservation holds near machine precision
            if it > 0:
                break
        l_pz = _step_operator_z(grid, params, ck)
        wz = fem.assemble_weighted_form(grid, zk, 1, 1)
        l_pc = (tau * params.alpha) * wz.dot(sp.diags(_sigma_c_weight(ck)))
        l_qz = (-tau * params.w) * ws.mass.dot(sp.diags(_source_d1(zk)))
        jac = sp.bmat([[l_pz, l_pc], [l_qz, l_qc]], format="csc")
        step = spla.splu(jac).solve(np.concatenate([rz, rc]))
        dz, dc = step[:nn], step[nn:]
        scale = 1.0
        for _ in range(12):
            z_try = zk - scale * dz
            c_try = ck - scale * dc
            rz_t, rc_t = residual(z_try, c_try)
            res_t = np.sqrt(rz_t.dot(rz_t) + rc_t.dot(rc_t))
            if res_t < res or res <= tol:
                break
            scale *= 0.5
        zk, ck, rz, rc, res = z_try, c_try, rz_t, rc_t, res_t
    else:
        if res > tol:
            raise ForwardSolveError(step=-1, residual=res)
    return zk, ck


def forward_solve(grid: fem.Grid, params: ModelParams, z0, c0, u=None, tol=1e-10):
    """Sequential implicit-Euler solve of the state system.

    Returns (z, c) trajectories of shape (nt, n^2).  Raises
    ForwardSolveError with the failing time index if an inner Newton
    iteration does not converge.
    """
    ws = workspace(grid)
    nt, nn = grid.nt, grid.num_nodes
    z0 = np.asarray(z0, dtype=float).ravel()
    c0 = np.asarray(c0, dtype=float).ravel()
    if u is None:
        u = np.zeros((nt, grid.num_boundary))
    else:
        u = np.asarray(u, dtype=float).reshape(nt, grid.num_boundary)
    z = np.empty((nt, nn))
    c = np.empty((nt, nn))
    z_prev, c_prev = z0, c0
    for k in range(nt):
        try:
            zk, ck = _coupled_step_solve(grid, params, ws, z_prev, c_prev, u[k], z_prev, c_prev, tol=tol)
        except ForwardSolveError as err:
            raise ForwardSolveError(step=k + 1, residual=err.residual) from None
        z[k], c[k] = zk, ck
        z_prev, c_prev = zk, ck
    return z, c


def adjoint_solve(grid: fem.Grid, params: ModelParams, fields: SolutionFields, targets: Targets):
    """Backward-in-time solve of the discrete adjoint equations.

    Stationarity of the Lagrangian with respect to z and c determines the
    multipliers (p, q); the system couples both at each step through the
    transposed forward blocks.
    """
    ws = workspace(grid)
    nt, nn = grid.nt, grid.num_nodes
    p = np.zeros((nt, nn))
    q = np.zeros((nt, nn))
    p_next = np.zeros(nn)
    q_next = np.zeros(nn)
    for k in range(nt, 0, -1):
        blocks = assemble_state_jacobian(grid, params, fields, k)
        rhs_z = ws.mass.dot(p_next)
        rhs_c = ws.mass.dot(q_next)
        if k == nt:
            rhs_z = rhs_z - ws.mass.dot(fields.z[nt - 1] - targets.zhat)
            rhs_c = rhs_c - params.gamma_c * ws.mass.dot(fields.c[nt - 1] - targets.chat)
        jac_t = sp.bmat(
            [[blocks["pz"].T, blocks["qz"].T], [blocks["pc"].T, blocks["qc"].T]],
            format="csc",
        )
        sol = spla.splu(jac_t).solve(np.concatenate([rhs_z, rhs_c]))
        p[k - 1], q[k - 1] = sol[:nn], sol[nn:]
        p_next, q_next = p[k - 1], q[k - 1]
    return p, q


def objective(grid: fem.Grid, params: ModelParams, fields: SolutionFields, targets: Targets,
              my_eps=None, bounds=None) -> float:
    """Discrete cost; optionally with the box-constraint penalty added."""
    ws = workspace(grid)
    dz = fields.z[-1] - targets.zhat
    dc = fields.c[-1] - targets.chat
    val = 0.5 * dz.dot(ws.mass.dot(dz)) + 0.5 * params.gamma_c * dc.dot(ws.mass.dot(dc))
    wdiag = grid.tau * ws.btrace_lumped
    val += 0.5 * params.gamma_u * float(np.sum(wdiag * fields.u * fields.u))
    if my_eps is not None:
        lo, hi = bounds
        over = np.maximum(0.0, fields.u - hi)
        under = np.minimum(0.0, fields.u - lo)
        val += 0.5 / my_eps * float(np.sum(wdiag * (over * over + under * under)))
    return val


def boundary_chemotactic_flux(grid: fem.Grid, params: ModelParams, z_slice, c_slice) -> float:
    """Outward chemotactic boundary flux -alpha * int_dOmega (grad s . n) z.

    Here s is the nodal interpolant of 1/(1+c).  This is the mass-leak rate
    a formulation with only the diffusive flux zeroed on the boundary would
    have; the conservative form re-absorbs it exactly.
    """
    n, h = grid.n, grid.h
    s = _sigma(np.asarray(c_slice, dtype=float)).reshape(n, n)
    z = np.asarray(z_slice, dtype=float).reshape(n, n)

    def edge_total(dn_vals, z_vals):
        # exact integral of a product of two piecewise linears per face
        a0, a1 = dn_vals[:-1], dn_vals[1:]
        b0, b1 = z_vals[:-1], z_vals[1:]
        return float(np.sum(h * (2 * a0 * b0 + a0 * b1 + a1 * b0 + 2 * a1 * b1) / 6.0))

    total = 0.0
    # rows index y, columns index x; outward normal derivative of s per edge
    total += edge_total((s[0, :] - s[1, :]) / h, z[0, :])      # y = 0
    total += edge_total((s[-1, :] - s[-2, :]) / h, z[-1, :])   # y = 1
    total += edge_total((s[:, 0] - s[:, 1]) / h, z[:, 0])      # x = 0
    total += edge_total((s[:, -1] - s[:, -2]) / h, z[:, -1])   # x = 1
    return -params.alpha * total


def conservation_defects(grid: fem.Grid, params: ModelParams, fields: SolutionFields):
    """Relative mass drift per formulation for a computed trajectory.

    Returns (defect_conservative, defect_diffusive_only): the first is the
    actual drift of 1^T M z over the trajectory; the second adds the
    boundary chemotactic flux a non-conservative formulation would leak.
    """
    ws = workspace(grid)
    m0 = float(ws.mass.dot(fields.z0).sum())
    scale = max(abs(m0), 1e-300)
    drift = 0.0
    leak = 0.0
    for k in range(grid.nt):
        mk = float(ws.mass.dot(fields.z[k]).sum())
        drift = max(drift, abs(mk - m0) / scale)
        leak += grid.tau * abs(boundary_chemotactic_flux(grid, params, fields.z[k], fields.c[k]))
    return drift, leak / scale
