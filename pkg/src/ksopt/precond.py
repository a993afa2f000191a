"""Block-triangular preconditioning of the space-time KKT systems.

The saddle system [[A, B^T], [B, 0]] with A = diag(A_s, A_u) has a singular
(1,1)-block (the misfit acts on the final slice only), so the classical
Schur complement does not exist.  Re-ordering so that the invertible
forward operator B_s becomes the pivot factorizes the matrix as

    [[A_s, 0, B_s^T], [0, A_u, B_u^T], [B_s, B_u, 0]]
        = T * [[0, 0, S], [0, A_u, B_u^T], [B_s, B_u, 0]],

with the pivoted Schur complement S = B_s^T + A_s B_s^{-1} B_u A_u^{-1} B_u^T
and T unipotent with (T - I)^2 = 0, so the exactly preconditioned system
has all eigenvalues 1 and GMRES converges in at most two iterations.

The practical preconditioner approximates S by the matching product

    S ~ (B_s^T + (1/eta) A_s) B_s^{-1} (B_s + eta B_u A_u^{-1} B_u^T),

whose factors reproduce both terms of S, with eta balancing the two, and
replaces every 2x2 space-time block by an inexact Uzawa (block-triangular)
splitting so only one diagonal sub-block is inverted at a time.  Diagonal
sub-blocks are lower (or upper) bidiagonal in time and are solved by one
sparse direct factorization per time step, swept forward (or backward).
"""

from __future__ import annotations

import time

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from ksopt import kkt

__all__ = [
    "compute_eta",
    "UzawaPreconditioner",
    "ExactBsSolver",
    "compute_pivoted_schur",
    "exact_pivoted_preconditioner",
    "ideal_preconditioners",
]


def _boundary_schur_terms(sys: kkt.BlockKKT):
    """Per-step B_u A_u^{-1} B_u^T blocks (n^2 x n^2, boundary-supported)."""
    if sys.is_reduced:
        return sys.bt
    grid = sys.grid
    tau_beta = grid.tau * sys.params.beta
    terms = []
    prev_key = None
    prev_val = None
    for k in range(grid.nt):
        key = sys.au_diag[k].tobytes()
        if key == prev_key:
            terms.append(prev_val)
            continue
        scaled = sys.bcouple.multiply(1.0 / sys.au_diag[k][None, :])
        prev_val = (tau_beta ** 2) * scaled.dot(sys.bcouple.T).tocsr()
        prev_key = key
        terms.append(prev_val)
    return terms


def compute_eta(sys: kkt.BlockKKT, mode: str = "diag", power_iters: int = 20) -> float:
    """Balancing constant eta = sqrt(|A_s| / |B_u A_u^{-1} B_u^T|).

    mode 'diag' compares the largest diagonal entries, mode 'norm' spectral
    norms estimated by a fixed number of power iterations (deterministic
    start vector).
    """
    grid = sys.grid
    mass_diag = sys.mass.diagonal()
    bt_terms = _boundary_schur_terms(sys)
    if mode == "diag":
        num = max(1.0, sys.params.gamma_c) * float(mass_diag.max())
        den = 0.0
        seen = set()
        for term in bt_terms:
            if id(term) in seen:
                continue
            seen.add(id(term))
            den = max(den, float(term.diagonal().max()))
    elif mode == "norm":
        def spectral_norm(mat):
            v = np.ones(mat.shape[0]) / np.sqrt(mat.shape[0])
            lam = 0.0
            for _ in range(power_iters):
                w = mat.dot(v)
                lam = float(np.linalg.norm(w))
                if lam == 0.0:
                    return 0.0
                v = w / lam
            return lam

        num = max(1.0, sys.params.gamma_c) * spectral_norm(sys.mass)
        den = 0.0
        seen = set()
        for term in bt_terms:
            if id(term) in seen:
                continue
            seen.add(id(term))
            den = max(den, spectral_norm(term))
    else:
        raise ValueError(f"unknown eta mode {mode!r}")
    if den <= 0.0:
        raise ValueError("degenerate control coupling: |B_u A_u^{-1} B_u^T| vanishes")
    return float(np.sqrt(num / den))


def _splu(mat, label, step):
    try:
        lu = spla.splu(mat.tocsc())
    except RuntimeError as err:
        raise RuntimeError(f"singular {label} block at time step {step}: {err}") from None
    return lu


class ExactBsSolver:
    """Exact forward-operator solves: coupled 2x2 per-step factorizations."""

    def __init__(self, sys: kkt.BlockKKT):
        self.sys = sys
        self.grid = sys.grid
        self._facts = [
            _splu(sp.bmat([[sys.lpz[k], sys.lpc[k]], [sys.lqz[k], sys.lqc]]), "forward", k + 1)
            for k in range(sys.grid.nt)
        ]

    def solve(self, r_z, r_c):
        nn = self.grid.num_nodes
        z = np.empty_like(r_z)
        c = np.empty_like(r_c)
        for k in range(self.grid.nt):
            rhs_z = r_z[k] + (self.sys.mass.dot(z[k - 1]) if k > 0 else 0.0)
            rhs_c = r_c[k] + (self.sys.mass.dot(c[k - 1]) if k > 0 else 0.0)
            sol = self._facts[k].solve(np.concatenate([rhs_z, rhs_c]))
            z[k], c[k] = sol[:nn], sol[nn:]
        return z, c

    def solve_transposed(self, r_z, r_c):
        nn = self.grid.num_nodes
        nt = self.grid.nt
        z = np.empty_like(r_z)
        c = np.empty_like(r_c)
        for k in range(nt - 1, -1, -1):
            rhs_z = r_z[k] + (self.sys.mass.dot(z[k + 1]) if k < nt - 1 else 0.0)
            rhs_c = r_c[k] + (self.sys.mass.dot(c[k + 1]) if k < nt - 1 else 0.0)
            sol = self._facts[k].solve(np.concatenate([rhs_z, rhs_c]), trans="T")
            z[k], c[k] = sol[:nn], sol[nn:]
        return z, c


class _PivotedSchur:
    """Applicable pivoted Schur complement B_s^T + A_s B_s^{-1} B_u A_u^{-1} B_u^T."""

    def __init__(self, sys: kkt.BlockKKT):
        self.sys = sys
        self._bs = ExactBsSolver(sys)
        self._bt = _boundary_schur_terms(sys)

    def dot(self, v):
        sys = self.sys
        nt, nn = sys.grid.nt, sys.grid.num_nodes
        v = np.asarray(v)
        p = v[: nt * nn].reshape(nt, nn)
        q = v[nt * nn :].reshape(nt, nn)
        out_z, out_c = sys._apply_bs_t(p, q)
        coup = np.zeros_like(q)
        for k in range(nt):
            coup[k] = self._bt[k].dot(q[k])
        sol_z, sol_c = self._bs.solve(np.zeros_like(p), coup)
        az, ac = sys._apply_as(sol_z, sol_c)
        return np.concatenate([(out_z + az).ravel(), (out_c + ac).ravel()])

    def dense(self):
        n = 2 * self.sys.grid.nt * self.sys.grid.num_nodes
        eye = np.eye(n)
        return np.column_stack([self.dot(eye[:, j]) for j in range(n)])


def compute_pivoted_schur(sys: kkt.BlockKKT) -> _PivotedSchur:
    return _PivotedSchur(sys)


class UzawaPreconditioner:
    """The practical preconditioner: pivoted ordering, matching Schur factor
    approximation, inexact Uzawa splittings, per-step sparse direct solves.

    With alt_annihilate=False the splittings drop the lower-left block of
    B_s (and mirrored choices in the two Schur factors); alt_annihilate=True
    drops the other off-diagonal block instead.  exact_blocks=True replaces
    the Uzawa splittings by exact coupled 2x2 solves (validation oracle).
    """

    def __init__(self, sys: kkt.BlockKKT, eta=None, eta_mode="diag",
                 alt_annihilate=False, exact_blocks=False, diagnostics=None):
        self.sys = sys
        self.grid = sys.grid
        self.diagnostics = diagnostics
        self.alt_annihilate = bool(alt_annihilate)
        self.exact_blocks = bool(exact_blocks)
        self.eta = float(eta) if eta is not None else compute_eta(sys, eta_mode)
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        t0 = time.perf_counter()
        grid, params = sys.grid, sys.params
        gamma_c = params.gamma_c
        mass = sys.mass
        self._bt = _boundary_schur_terms(sys)
        if exact_blocks:
            self._bs_exact = ExactBsSolver(sys)
            bs = sys.bs_sparse()
            a_s = sys.as_sparse() if sys.second is None else self._gn_as_sparse()
            n = bs.shape[0] // 2
            bub = sp.bmat(
                [[sp.csr_matrix((n, n)), None], [None, sp.block_diag(self._bt)]]
            )
            self._fact_s1 = _splu(bs.T + (1.0 / self.eta) * a_s, "schur factor 1", 0)
            self._fact_s3 = _splu(bs + self.eta * bub, "schur factor 3", 0)
        else:
            self._fact_pz = []
            for k in range(grid.nt):
                lu = _splu(sys.lpz[k], "density step", k + 1)
                self._fact_pz.append(lu)
                self._emit_factor_record("L_pz", k + 1, lu)
            self._fact_qc = _splu(sys.lqc, "attractant step", 0)
            self._emit_factor_record("L_qc", 0, self._fact_qc)
            self._fact_zp_fin = _splu(
                sys.lpz[grid.nt - 1].T + (1.0 / self.eta) * mass, "adjoint density final", grid.nt
            )
            self._fact_cq_fin = _splu(
                sys.lqc.T + (gamma_c / self.eta) * mass, "adjoint attractant final", grid.nt
            )
            self._fact_qcb = []
            cache = {}
            for k in range(grid.nt):
                key = id(self._bt[k])
                if key not in cache:
                    cache[key] = _splu(sys.lqc + self.eta * self._bt[k], "boundary-augmented step", k + 1)
                    self._emit_factor_record("L_qc+etaB", k + 1, cache[key])
                self._fact_qcb.append(cache[key])
        self.setup_seconds = time.perf_counter() - t0

    def _gn_as_sparse(self):
        from ksopt import fem

        chi = fem.assemble_final_time_restriction(self.grid)
        return sp.bmat([[chi, None], [None, self.sys.params.gamma_c * chi]], format="csr")

    def _emit_factor_record(self, label, step, lu):
        if self.diagnostics is None:
            return
        udiag = np.abs(lu.U.diagonal())
        cond = float(udiag.max() / udiag.min()) if udiag.min() > 0 else np.inf
        self.diagnostics.write(
            f"factor block={label} step={step} pivot_min={udiag.min():.6e} "
            f"pivot_max={udiag.max():.6e} cond_est={cond:.6e}\n"
        )

    # --- the three split solves ------------------------------------------
    def _solve_bs_uzawa(self, r_z, r_c):
        """(B_s)_Uzawa^{-1}: forward-in-time, one sparse solve per sub-block."""
        sys = self.sys
        nt = self.grid.nt
        z = np.empty_like(r_z)
        c = np.empty_like(r_c)
        if not self.alt_annihilate:
            for k in range(nt):
                rhs_c = r_c[k] + (sys.mass.dot(c[k - 1]) if k > 0 else 0.0)
                c[k] = self._fact_qc.solve(rhs_c)
                rhs_z = r_z[k] - sys.lpc[k].dot(c[k]) + (sys.mass.dot(z[k - 1]) if k > 0 else 0.0)
                z[k] = self._fact_pz[k].solve(rhs_z)
        else:
            for k in range(nt):
                rhs_z = r_z[k] + (sys.mass.dot(z[k - 1]) if k > 0 else 0.0)
                z[k] = self._fact_pz[k].solve(rhs_z)
                rhs_c = r_c[k] - sys.lqz[k].dot(z[k]) + (sys.mass.dot(c[k - 1]) if k > 0 else 0.0)
                c[k] = self._fact_qc.solve(rhs_c)
        return z, c

    def _apply_bs_uzawa(self, z, c):
        """Multiply by the (B_s)_Uzawa splitting matrix."""
        sys = self.sys
        nt = self.grid.nt
        out_z = np.empty_like(z)
        out_c = np.empty_like(c)
        for k in range(nt):
            out_z[k] = sys.lpz[k].dot(z[k])
            out_c[k] = sys.lqc.dot(c[k])
            if not self.alt_annihilate:
                out_z[k] += sys.lpc[k].dot(c[k])
            else:
                out_c[k] += sys.lqz[k].dot(z[k])
            if k > 0:
                out_z[k] -= sys.mass.dot(z[k - 1])
                out_c[k] -= sys.mass.dot(c[k - 1])
        return out_z, out_c

    def _solve_adjoint_uzawa(self, r_z, r_c):
        """((B_s^T + (1/eta) A_s))_Uzawa^{-1}: backward-in-time sweeps."""
        sys = self.sys
        nt = self.grid.nt
        z = np.empty_like(r_z)
        c = np.empty_like(r_c)
        if not self.alt_annihilate:
            for k in range(nt - 1, -1, -1):
                rhs_z = r_z[k] + (sys.mass.dot(z[k + 1]) if k < nt - 1 else 0.0)
                z[k] = (self._fact_zp_fin.solve(rhs_z) if k == nt - 1
                        else self._fact_pz[k].solve(rhs_z, trans="T"))
            for k in range(nt - 1, -1, -1):
                rhs_c = r_c[k] - sys.lpc[k].T.dot(z[k]) + (sys.mass.dot(c[k + 1]) if k < nt - 1 else 0.0)
                c[k] = (self._fact_cq_fin.solve(rhs_c) if k == nt - 1
                        else self._fact_qc.solve(rhs_c, trans="T"))
        else:
            for k in range(nt - 1, -1, -1):
                rhs_c = r_c[k] + (sys.mass.dot(c[k + 1]) if k < nt - 1 else 0.0)
                c[k] = (self._fact_cq_fin.solve(rhs_c) if k == nt - 1
                        else self._fact_qc.solve(rhs_c, trans="T"))
            for k in range(nt - 1, -1, -1):
                rhs_z = r_z[k] - sys.lqz[k].T.dot(c[k]) + (sys.mass.dot(z[k + 1]) if k < nt - 1 else 0.0)
                z[k] = (self._fact_zp_fin.solve(rhs_z) if k == nt - 1
                        else self._fact_pz[k].solve(rhs_z, trans="T"))
        return z, c

    def _solve_boundary_uzawa(self, r_z, r_c):
        """((B_s + eta B_u A_u^{-1} B_u^T))_Uzawa^{-1}: forward-in-time sweeps."""
        sys = self.sys
        nt = self.grid.nt
        z = np.empty_like(r_z)
        c = np.empty_like(r_c)
        if not self.alt_annihilate:
            for k in range(nt):
                rhs_c = r_c[k] + (sys.mass.dot(c[k - 1]) if k > 0 else 0.0)
                c[k] = self._fact_qcb[k].solve(rhs_c)
                rhs_z = r_z[k] - sys.lpc[k].dot(c[k]) + (sys.mass.dot(z[k - 1]) if k > 0 else 0.0)
                z[k] = self._fact_pz[k].solve(rhs_z)
        else:
            for k in range(nt):
                rhs_z = r_z[k] + (sys.mass.dot(z[k - 1]) if k > 0 else 0.0)
                z[k] = self._fact_pz[k].solve(rhs_z)
                rhs_c = r_c[k] - sys.lqz[k].dot(z[k]) + (sys.mass.dot(c[k - 1]) if k > 0 else 0.0)
                c[k] = self._fact_qcb[k].solve(rhs_c)
        return z, c

    def apply_schur_inverse(self, r_z, r_c):
        """Matching approximation of the pivoted Schur complement inverse."""
        if self.exact_blocks:
            w = self._fact_s1.solve(np.concatenate([r_z.ravel(), r_c.ravel()]))
            nt, nn = self.grid.nt, self.grid.num_nodes
            w_z, w_c = w[: nt * nn].reshape(nt, nn), w[nt * nn :].reshape(nt, nn)
            v_z, v_c = self.sys._apply_bs(w_z, w_c)
            sol = self._fact_s3.solve(np.concatenate([v_z.ravel(), v_c.ravel()]))
            return sol[: nt * nn].reshape(nt, nn), sol[nt * nn :].reshape(nt, nn)
        w_z, w_c = self._solve_adjoint_uzawa(r_z, r_c)
        v_z, v_c = self._apply_bs_uzawa(w_z, w_c)
        return self._solve_boundary_uzawa(v_z, v_c)

    def apply(self, r):
        """Update = P^{-1} r in the pivoted ordering, returned in the
        original variable packing."""
        t0 = time.perf_counter()
        sys = self.sys
        grid = self.grid
        r_z, r_c, r_u, r_p, r_q = sys.unpack(np.asarray(r, dtype=float))
        s_p, s_q = self.apply_schur_inverse(r_z, r_c)
        tau_beta = grid.tau * sys.params.beta
        if sys.is_reduced:
            rhs_p = r_p
            rhs_q = r_q + sys.apply_bt(s_q)
            if self.exact_blocks:
                s_z, s_c = self._bs_exact.solve(rhs_p, rhs_q)
            else:
                s_z, s_c = self._solve_bs_uzawa(rhs_p, rhs_q)
            out = sys.pack(s_z, s_c, s_p, s_q)
        else:
            s_u = (r_u + tau_beta * sys.bcouple.T.dot(s_q.T).T) / sys.au_diag
            rhs_p = r_p
            rhs_q = r_q + tau_beta * sys.bcouple.dot(s_u.T).T
            if self.exact_blocks:
                s_z, s_c = self._bs_exact.solve(rhs_p, rhs_q)
            else:
                s_z, s_c = self._solve_bs_uzawa(rhs_p, rhs_q)
            out = sys.pack(s_z, s_c, s_u, s_p, s_q)
        if self.diagnostics is not None:
            self.diagnostics.write(
                f"apply eta={self.eta:.6e} seconds={time.perf_counter() - t0:.6e}\n"
            )
        return out


def exact_pivoted_preconditioner(sys: kkt.BlockKKT):
    """Apply callable of the pivoted preconditioner with the exact Schur
    complement (dense; validation scale only).  The preconditioned operator
    is unipotent, so GMRES converges in at most two iterations."""
    schur = compute_pivoted_schur(sys).dense()
    import scipy.linalg as la

    lu_s = la.lu_factor(schur)
    bs = ExactBsSolver(sys)
    grid = sys.grid
    nt, nn = grid.nt, grid.num_nodes

    def apply(r):
        r_z, r_c, r_u, r_p, r_q = sys.unpack(np.asarray(r, dtype=float))
        s_pq = la.lu_solve(lu_s, np.concatenate([r_z.ravel(), r_c.ravel()]))
        s_p, s_q = s_pq[: nt * nn].reshape(nt, nn), s_pq[nt * nn :].reshape(nt, nn)
        tau_beta = grid.tau * sys.params.beta
        if sys.is_reduced:
            s_z, s_c = bs.solve(r_p, r_q + sys.apply_bt(s_q))
            return sys.pack(s_z, s_c, s_p, s_q)
        s_u = (r_u + tau_beta * sys.bcouple.T.dot(s_q.T).T) / sys.au_diag
        s_z, s_c = bs.solve(r_p, r_q + tau_beta * sys.bcouple.dot(s_u.T).T)
        return sys.pack(s_z, s_c, s_u, s_p, s_q)

    return apply


def ideal_preconditioners(sys: kkt.BlockKKT):
    """Exact block-diagonal and block-triangular saddle preconditioners.

    Requires an invertible (1,1)-block A = diag(A_s, A_u), which for the
    misfit-only Gauss-Newton block means a single time step; otherwise the
    classical Schur complement does not exist and the pivoted form must be
    used instead (see compute_pivoted_schur).  Returns (apply_pd, apply_pt).
    """
    import scipy.linalg as la

    if sys.is_reduced:
        raise ValueError("ideal preconditioners operate on the full saddle form")
    if sys.second is None and sys.grid.nt > 1:
        raise ValueError(
            "the Gauss-Newton (1,1)-block is singular for nt > 1; the Schur "
            "complement only exists for the pivoted re-ordering"
        )
    a_s = sys.as_sparse().toarray()
    a_u = np.diag(sys.au_diag.ravel())
    a = np.block(
        [[a_s, np.zeros((a_s.shape[0], a_u.shape[0]))],
         [np.zeros((a_u.shape[0], a_s.shape[0])), a_u]]
    )
    b = np.hstack([sys.bs_sparse().toarray(), sys.bu_sparse().toarray()])
    lu_a = la.lu_factor(a)
    schur = b @ la.lu_solve(lu_a, b.T)
    lu_s = la.lu_factor(schur)
    na = a.shape[0]

    def apply_pd(r):
        r = np.asarray(r, dtype=float)
        return np.concatenate([la.lu_solve(lu_a, r[:na]), la.lu_solve(lu_s, r[na:])])

    def apply_pt(r):
        r = np.asarray(r, dtype=float)
        x1 = la.lu_solve(lu_a, r[:na])
        x2 = -la.lu_solve(lu_s, r[na:] - b @ x1)
        return np.concatenate([x1, x2])

    return apply_pd, apply_pt
