"""All-at-once space-time KKT systems for the chemotaxis control problem.

The 5x5 block system couples (z, c, u, p, q) increments:

    [ A_s   0    B_s^T ] [ s_zc ]   [ b_zc ]
    [ 0     A_u  B_u^T ] [ s_u  ] = [ b_u  ]
    [ B_s   B_u  0     ] [ s_pq ]   [ b_pq ]

A_s is the final-time misfit block (Gauss-Newton) or the full Hessian
(Newton); A_u the lumped boundary mass scaled by gamma_u, augmented by the
Moreau-Yosida active-set penalty when box constraints are present; B_s the
block lower-bidiagonal space-time forward operator; B_u the Robin control
coupling.  The right-hand side is the negated gradient of the (penalized)
Lagrangian, so it vanishes exactly at a KKT point.

Operators are held as per-time-step sparse blocks plus stacked
block-diagonal copies for fast whole-vector application; nothing here ever
forms the monolithic matrix except `to_sparse`, which exists for small
validation problems and direct-solve oracles.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from ksopt import fem, io, model

__all__ = [
    "ActiveSet",
    "BlockKKT",
    "detect_active_sets",
    "first_order_residual",
    "residual_norm",
    "assemble_gauss_newton",
    "assemble_newton",
    "assemble_moreau_yosida",
    "eliminate_control",
    "recover_control",
]


@dataclass
class ActiveSet:
    """Strict-violation index masks over boundary-space-time control nodes."""

    plus: np.ndarray
    minus: np.ndarray
    epsilon: float
    u_minus: np.ndarray
    u_plus: np.ndarray

    @property
    def indicator(self) -> np.ndarray:
        return (self.plus | self.minus).astype(float)

    @property
    def size(self) -> int:
        return int(self.plus.sum() + self.minus.sum())


def detect_active_sets(u, bounds, epsilon=1e-4) -> ActiveSet:
    """Active sets by strict inequality: u > upper or u < lower."""
    u = np.asarray(u, dtype=float)
    lower = np.broadcast_to(np.asarray(bounds[0], dtype=float), u.shape)
    upper = np.broadcast_to(np.asarray(bounds[1], dtype=float), u.shape)
    if np.any(lower > upper):
        raise ValueError("inconsistent control bounds: lower exceeds upper somewhere")
    return ActiveSet(
        plus=u > upper,
        minus=u < lower,
        epsilon=float(epsilon),
        u_minus=np.array(lower, dtype=float),
        u_plus=np.array(upper, dtype=float),
    )


def _penalty_gradient(grid, active: ActiveSet, u) -> np.ndarray:
    """Gradient of the box penalty (1/eps weighting, lumped boundary mass)."""
    wdiag = grid.tau * model.workspace(grid).btrace_lumped
    over = np.maximum(0.0, u - active.u_plus)
    under = np.minimum(0.0, u - active.u_minus)
    return (wdiag / active.epsilon) * (over + under)


def first_order_residual(grid, params, fields, targets, my: ActiveSet | None = None):
    """Gradient of the (optionally penalized) Lagrangian, as five components.

    Components have shapes ((nt,n^2), (nt,n^2), (nt,nb), (nt,n^2), (nt,n^2))
    and are ordered (z, c, u, p, q).  The KKT right-hand side is their
    negation.
    """
    ws = model.workspace(grid)
    nt = grid.nt
    tau = grid.tau
    g_p, g_q = model.state_residual(grid, params, fields)
    g_z = np.zeros_like(fields.z)
    g_c = np.zeros_like(fields.c)
    for k in range(1, nt + 1):
        blocks = model.assemble_state_jacobian(grid, params, fields, k)
        pk, qk = fields.p[k - 1], fields.q[k - 1]
        g_z[k - 1] = blocks["pz"].T.dot(pk) + blocks["qz"].T.dot(qk)
        g_c[k - 1] = blocks["pc"].T.dot(pk) + blocks["qc"].T.dot(qk)
        if k < nt:
            g_z[k - 1] -= ws.mass.dot(fields.p[k])
            g_c[k - 1] -= ws.mass.dot(fields.q[k])
    g_z[nt - 1] += ws.mass.dot(fields.z[nt - 1] - targets.zhat)
    g_c[nt - 1] += params.gamma_c * ws.mass.dot(fields.c[nt - 1] - targets.chat)
    wdiag = tau * ws.btrace_lumped
    g_u = params.gamma_u * wdiag * fields.u - tau * params.beta * (ws.bcouple.T.dot(fields.q.T)).T
    if my is not None:
        g_u = g_u + _penalty_gradient(grid, my, fields.u)
    return g_z, g_c, g_u, g_p, g_q


def residual_norm(components) -> float:
    return float(np.sqrt(sum(np.vdot(g, g).real for g in components)))


class BlockKKT:
    """Assembled per-step blocks of one Newton-type system.

    variant is one of 'gauss-newton', 'newton', 'gauss-newton-MY',
    'reduced-4'.  Vectors are packed [z, c, u, p, q] (or [z, c, p, q] for
    the reduced variant), each component time-major.
    """

    def __init__(self, grid, params, variant, lpz, lpc, lqz, lqc, au_diag, rhs,
                 second=None, active=None, bt=None, rhs_u_saved=None):
        self.grid = grid
        self.params = params
        self.variant = variant
        self.lpz = lpz          # list of nt per-step matrices
        self.lpc = lpc
        self.lqz = lqz
        self.lqc = lqc          # single (time-invariant) matrix
        self.au_diag = au_diag  # (nt, nb) positive diagonal, None when reduced
        self.rhs = rhs
        self.second = second    # {'zz': [..], 'zc': [..], 'cc': [..]} for Newton
        self.active = active
        self.bt = bt            # reduced variant: per-step boundary Schur term
        self.rhs_u_saved = rhs_u_saved  # reduced variant: original control rhs
        ws = model.workspace(grid)
        self.mass = ws.mass
        self.bcouple = ws.bcouple
        self._bd_pz = sp.block_diag(lpz, format="csr")
        self._bd_pc = sp.block_diag(lpc, format="csr")
        self._bd_qz = sp.block_diag(lqz, format="csr")
        if second is not None:
            self._bd_zz = sp.block_diag(second["zz"], format="csr")
            self._bd_zc = sp.block_diag(second["zc"], format="csr")
            self._bd_cc = sp.block_diag(second["cc"], format="csr")

    # --- layout helpers -------------------------------------------------
    @property
    def is_reduced(self) -> bool:
        return self.variant == "reduced-4"

    @property
    def nvars(self) -> int:
        grid = self.grid
        nstate = grid.nt * grid.num_nodes
        nctrl = 0 if self.is_reduced else grid.nt * grid.num_boundary
        return 4 * nstate + nctrl

    def pack(self, z, c, u, p, q):
        parts = [np.ravel(z), np.ravel(c)]
        if not self.is_reduced:
            parts.append(np.ravel(u))
        parts += [np.ravel(p), np.ravel(q)]
        return np.concatenate(parts)

    def unpack(self, x):
        grid = self.grid
        nt, nn, nb = grid.nt, grid.num_nodes, grid.num_boundary
        ns = nt * nn
        z = x[:ns].reshape(nt, nn)
        c = x[ns : 2 * ns].reshape(nt, nn)
        if self.is_reduced:
            p = x[2 * ns : 3 * ns].reshape(nt, nn)
            q = x[3 * ns : 4 * ns].reshape(nt, nn)
            return z, c, None, p, q
        nc = nt * nb
        u = x[2 * ns : 2 * ns + nc].reshape(nt, nb)
        p = x[2 * ns + nc : 3 * ns + nc].reshape(nt, nn)
        q = x[3 * ns + nc :].reshape(nt, nn)
        return z, c, u, p, q

    # --- application ----------------------------------------------------
    def _apply_bs(self, z, c):
        """Forward operator: rows of the state equations."""
        nt = self.grid.nt
        out_p = self._bd_pz.dot(z.ravel()).reshape(nt, -1) + self._bd_pc.dot(c.ravel()).reshape(nt, -1)
        out_q = self._bd_qz.dot(z.ravel()).reshape(nt, -1) + self.lqc.dot(c.T).T
        if nt > 1:
            out_p[1:] -= self.mass.dot(z[:-1].T).T
            out_q[1:] -= self.mass.dot(c[:-1].T).T
        return out_p, out_q

    def _apply_bs_t(self, p, q):
        """Adjoint operator: transposes of the forward blocks."""
        nt = self.grid.nt
        out_z = self._bd_pz.T.dot(p.ravel()).reshape(nt, -1) + self._bd_qz.T.dot(q.ravel()).reshape(nt, -1)
        out_c = self._bd_pc.T.dot(p.ravel()).reshape(nt, -1) + self.lqc.T.dot(q.T).T
        if nt > 1:
            out_z[:-1] -= self.mass.dot(p[1:].T).T
            out_c[:-1] -= self.mass.dot(q[1:].T).T
        return out_z, out_c

    def _apply_as(self, z, c):
        gamma_c = self.params.gamma_c
        out_z = np.zeros_like(z)
        out_c = np.zeros_like(c)
        if self.second is None:
            out_z[-1] = self.mass.dot(z[-1])
            out_c[-1] = gamma_c * self.mass.dot(c[-1])
        else:
            nt = self.grid.nt
            out_z = (self._bd_zz.dot(z.ravel()) + self._bd_zc.dot(c.ravel())).reshape(nt, -1)
            out_c = (self._bd_zc.T.dot(z.ravel()) + self._bd_cc.dot(c.ravel())).reshape(nt, -1)
        return out_z, out_c

    def apply_bt(self, q):
        """Boundary Schur term of the reduced system: B_u A_u^{-1} B_u^T q."""
        out = np.empty_like(q)
        for k in range(self.grid.nt):
            out[k] = self.bt[k].dot(q[k])
        return out

    def matvec(self, x):
        z, c, u, p, q = self.unpack(x)
        az, ac = self._apply_as(z, c)
        bz, bc = self._apply_bs_t(p, q)
        out_z = az + bz
        out_c = ac + bc
        out_p, out_q = self._apply_bs(z, c)
        tau_beta = self.grid.tau * self.params.beta
        if self.is_reduced:
            out_q = out_q - self.apply_bt(q)
            return self.pack(out_z, out_c, out_p, out_q)
        out_u = self.au_diag * u - tau_beta * self.bcouple.T.dot(q.T).T
        out_q = out_q - tau_beta * self.bcouple.dot(u.T).T
        return self.pack(out_z, out_c, out_u, out_p, out_q)

    # --- dense/sparse materialization (validation scale) ----------------
    def bs_sparse(self):
        grid = self.grid
        sub = sp.kron(sp.diags(np.ones(grid.nt - 1), -1), self.mass)
        bqc = sp.kron(sp.eye(grid.nt), self.lqc) - sub
        return sp.bmat(
            [[self._bd_pz - sub, self._bd_pc], [self._bd_qz, bqc]], format="csr"
        )

    def as_sparse(self):
        grid = self.grid
        if self.second is None:
            chi = fem.assemble_final_time_restriction(grid)
            return sp.bmat([[chi, None], [None, self.params.gamma_c * chi]], format="csr")
        return sp.bmat(
            [[self._bd_zz, self._bd_zc], [self._bd_zc.T, self._bd_cc]], format="csr"
        )

    def bu_sparse(self):
        grid = self.grid
        qpart = sp.kron(sp.eye(grid.nt), -grid.tau * self.params.beta * self.bcouple)
        zero = sp.csr_matrix((grid.nt * grid.num_nodes, grid.nt * grid.num_boundary))
        return sp.vstack([zero, qpart], format="csr")

    def to_sparse(self):
        a_s = self.as_sparse()
        b_s = self.bs_sparse()
        if self.is_reduced:
            bt = -sp.block_diag(self.bt, format="csr")
            n = b_s.shape[0] // 2
            zero = sp.csr_matrix((n, n))
            lower = sp.bmat([[zero, zero], [zero, bt]], format="csr")
            return sp.bmat([[a_s, b_s.T], [b_s, lower]], format="csr")
        a_u = sp.diags(self.au_diag.ravel())
        b_u = self.bu_sparse()
        return sp.bmat(
            [[a_s, None, b_s.T], [None, a_u, b_u.T], [b_s, b_u, None]], format="csr"
        )

    def export_block(self, name, path):
        """Dump one named block in coordinate text format for cross-checking."""
        blocks = {
            "A_s": self.as_sparse,
            "B_s": self.bs_sparse,
            "B_u": self.bu_sparse,
            "A_u": lambda: sp.diags(self.au_diag.ravel()).tocsr(),
            "full": self.to_sparse,
        }
        if name not in blocks:
            raise KeyError(f"unknown block {name!r}; available: {sorted(blocks)}")
        io.export_coo(blocks[name](), path)


def _state_blocks(grid, params, fields):
    lpz, lpc, lqz = [], [], []
    for k in range(1, grid.nt + 1):
        blocks = model.assemble_state_jacobian(grid, params, fields, k)
        lpz.append(blocks["pz"])
        lpc.append(blocks["pc"])
        lqz.append(blocks["qz"])
    lqc = model.assemble_state_jacobian(grid, params, fields, 1)["qc"]
    return lpz, lpc, lqz, lqc


def _control_diag(grid, params):
    wdiag = grid.tau * model.workspace(grid).btrace_lumped
    return params.gamma_u * np.tile(wdiag, (grid.nt, 1))


def assemble_gauss_newton(grid, params, fields, targets) -> BlockKKT:
    """Gauss-Newton system: misfit-only (1,1)-block, exact state linearization."""
    lpz, lpc, lqz, lqc = _state_blocks(grid, params, fields)
    g = first_order_residual(grid, params, fields, targets)
    rhs = -np.concatenate([comp.ravel() for comp in g])
    return BlockKKT(grid, params, "gauss-newton", lpz, lpc, lqz, lqc,
                    _control_diag(grid, params), rhs)


def assemble_newton(grid, params, fields, targets) -> BlockKKT:
    """Full Newton system: adds the adjoint-weighted Hessian blocks."""
    lpz, lpc, lqz, lqc = _state_blocks(grid, params, fields)
    second = {"zz": [], "zc": [], "cc": []}
    for k in range(1, grid.nt + 1):
        blocks = model.assemble_second_order_blocks(grid, params, fields, k)
        second["zz"].append(blocks["zz"])
        second["zc"].append(blocks["zc"])
        second["cc"].append(blocks["cc"])
    g = first_order_residual(grid, params, fields, targets)
    rhs = -np.concatenate([comp.ravel() for comp in g])
    return BlockKKT(grid, params, "newton", lpz, lpc, lqz, lqc,
                    _control_diag(grid, params), rhs, second=second)


def assemble_moreau_yosida(grid, params, fields, targets, active: ActiveSet) -> BlockKKT:
    """Penalized Gauss-Newton system for box-constrained control.

    A_u gains (1/eps) G_Lambda weighted by the lumped boundary mass and the
    control row of the right-hand side carries the penalty gradient.
    """
    if active.epsilon <= 0:
        raise ValueError("Moreau-Yosida parameter must be positive")
    lpz, lpc, lqz, lqc = _state_blocks(grid, params, fields)
    wdiag = grid.tau * model.workspace(grid).btrace_lumped
    au = _control_diag(grid, params) + (wdiag / active.epsilon) * active.indicator
    g = first_order_residual(grid, params, fields, targets, my=active)
    rhs = -np.concatenate([comp.ravel() for comp in g])
    return BlockKKT(grid, params, "gauss-newton-MY", lpz, lpc, lqz, lqc,
                    au, rhs, active=active)


def eliminate_control(sys: BlockKKT) -> BlockKKT:
    """Reduced 4x4 system in (z, c, p, q) with the control eliminated.

    Requires a diagonal A_u.  The q-row acquires -B_u A_u^{-1} B_u^T and the
    right-hand side the matching correction; `recover_control` restores u.
    """
    if sys.is_reduced:
        raise ValueError("system is already reduced")
    if sys.au_diag is None:
        raise ValueError("control block is not diagonal; cannot eliminate")
    grid = sys.grid
    nt, nn, nb = grid.nt, grid.num_nodes, grid.num_boundary
    ns = nt * nn
    tau_beta = grid.tau * sys.params.beta
    bt = []
    for k in range(nt):
        scaled = sys.bcouple.multiply(1.0 / sys.au_diag[k][None, :])
        bt.append((tau_beta ** 2) * scaled.dot(sys.bcouple.T).tocsr())
    b_z = sys.rhs[:ns]
    b_c = sys.rhs[ns : 2 * ns]
    b_u = sys.rhs[2 * ns : 2 * ns + nt * nb].reshape(nt, nb)
    b_p = sys.rhs[2 * ns + nt * nb : 3 * ns + nt * nb]
    b_q = sys.rhs[3 * ns + nt * nb :].reshape(nt, nn)
    b_q_adj = b_q + tau_beta * sys.bcouple.dot((b_u / sys.au_diag).T).T
    rhs = np.concatenate([b_z, b_c, b_p, b_q_adj.ravel()])
    red = BlockKKT(grid, sys.params, "reduced-4", sys.lpz, sys.lpc, sys.lqz,
                   sys.lqc, None, rhs, second=sys.second, active=sys.active,
                   bt=bt, rhs_u_saved=(b_u.copy(), sys.au_diag.copy()))
    return red


def recover_control(reduced: BlockKKT, s_q) -> np.ndarray:
    """Companion of `eliminate_control`: u = A_u^{-1}(b_u + tau beta N^T s_q)."""
    if not reduced.is_reduced:
        raise ValueError("recover_control expects a reduced system")
    b_u, au = reduced.rhs_u_saved
    tau_beta = reduced.grid.tau * reduced.params.beta
    s_q = np.asarray(s_q).reshape(reduced.grid.nt, reduced.grid.num_nodes)
    return (b_u + tau_beta * reduced.bcouple.T.dot(s_q.T).T) / au
