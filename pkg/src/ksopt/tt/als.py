"""Alternating solves over block tensor-train cores.

The solution is sought in block TT format; at each stop the component
carrier sits at core m, the orthonormal frame matrix Y_m maps carrier
entries to full component vectors, and each block L_ij of the KKT operator
is projected to Y_m^T L_ij Y_m without ever forming Y_m densely (left and
right environments are contracted core by core and updated incrementally
as the carrier moves).  The projected system is solved densely when small,
otherwise by warm-started GMRES with a pointwise J x J block-Jacobi
preconditioner.  Rank adaptivity enriches the carrier SVD factor with the
dominant directions of the local residual before each shift.
"""

from __future__ import annotations

import time

import numpy as np

from ksopt import krylov
from ksopt.tt.blocktt import BlockTT, _svd_rank
from ksopt.tt.core import TTMatrix, TTVector

__all__ = ["LocalSystem", "frame_project", "als_solve"]


def _op_env_step_left(env, ycore, acore):
    """E'(a',A',b') = E(a,A,b) Y(a,n,a') A(A,n,n',A') Y(b,n',b')."""
    t = np.einsum("aAb,anx->Abnx", env, ycore, optimize=True)
    t = np.einsum("Abnx,AnmY->bxYm", t, acore, optimize=True)
    return np.einsum("bxYm,bmy->xYy", t, ycore, optimize=True)


def _op_env_step_right(env, ycore, acore):
    """E'(a,A,b) = Y(a,n,x) A(A,n,n',A') Y(b,n',y) E(x,A',y)."""
    t = np.einsum("xCy,bny->xCbn", env, ycore, optimize=True)
    t = np.einsum("xCbn,AmnC->xAbm", t, acore, optimize=True)
    return np.einsum("xAbm,amx->aAb", t, ycore, optimize=True)


def _vec_env_step_left(env, ycore, bcore):
    """e'(a',B') = e(a,B) Y(a,n,a') B(B,n,B')."""
    t = np.einsum("aB,anx->Bnx", env, ycore, optimize=True)
    return np.einsum("Bnx,BnY->xY", t, bcore, optimize=True)


def _vec_env_step_right(env, ycore, bcore):
    """e'(a,B) = Y(a,n,x) B(B,n,B') e(x,B')."""
    t = np.einsum("xB,bnx->Bbn", env, ycore, optimize=True)
    return np.einsum("Bbn,YnB->bY", t, bcore, optimize=True)


class LocalSystem:
    """Projected KKT system at one carrier position.

    ops_env: {(i, j): (left, op_core, right)} with left (r,R,r), core
    (R,n,n',R'), right (r,R',r); rhs_env: {i: (left, rhs_core, right)}.
    Local vectors have shape (r_left, n, J, r_right).
    """

    def __init__(self, shape, J, ops_env, rhs_env):
        self.shape = tuple(shape)
        self.J = int(J)
        self.ops_env = ops_env
        self.rhs_env = rhs_env
        self.size = int(np.prod(self.shape)) * self.J

    def local_rhs(self) -> np.ndarray:
        rl, n, rr = self.shape
        out = np.zeros((rl, n, self.J, rr))
        for j, (le, core, re) in self.rhs_env.items():
            t = np.einsum("aB,BnC->anC", le, core, optimize=True)
            out[:, :, j, :] += np.einsum("anC,xC->anx", t, re, optimize=True)
        return out

    def matvec_local(self, v: np.ndarray) -> np.ndarray:
        rl, n, rr = self.shape
        v = v.reshape(rl, n, self.J, rr)
        out = np.zeros_like(v)
        for (i, j), (le, core, re) in self.ops_env.items():
            vj = v[:, :, j, :]
            t1 = np.einsum("bnd,gcd->bngc", vj, re, optimize=True)
            t2 = np.einsum("bngc,amnc->bgam", t1, core, optimize=True)
            out[:, :, i, :] += np.einsum("eab,bgam->emg", le, t2, optimize=True)
        return out

    def matvec(self, x: np.ndarray) -> np.ndarray:
        return self.matvec_local(x).ravel()

    def dense(self) -> np.ndarray:
        rl, n, rr = self.shape
        dim = rl * n * rr
        out = np.zeros((self.J * dim, self.J * dim))
        for (i, j), (le, core, re) in self.ops_env.items():
            t = np.einsum("aAb,AmnC->abmnC", le, core, optimize=True)
            blk = np.einsum("abmnC,gCd->amgbnd", t, re, optimize=True)
            out[i * dim : (i + 1) * dim, j * dim : (j + 1) * dim] += blk.reshape(dim, dim)
        return out

    def pointwise_diag(self) -> np.ndarray:
        """(npts, J, J) pointwise coupling used by the block-Jacobi solve."""
        rl, n, rr = self.shape
        out = np.zeros((rl * n * rr, self.J, self.J))
        for (i, j), (le, core, re) in self.ops_env.items():
            dl = np.einsum("aAa->aA", le)
            dr = np.einsum("gCg->gC", re)
            dc = np.einsum("AnnC->AnC", core)
            d = np.einsum("aA,AnC,gC->ang", dl, dc, dr, optimize=True)
            out[:, i, j] += d.ravel()
        return out


def frame_project(x: BlockTT, operators: dict, rhs: dict) -> LocalSystem:
    """Projected system at the current carrier position (fresh environments).

    Requires orthonormal frames (cores left of the carrier left-orthogonal,
    right of it right-orthogonal), which carrier shifts maintain.
    """
    m = x.pos
    L = x.num_modes
    ops_env = {}
    for key, a in operators.items():
        le = np.ones((1, 1, 1))
        for t in range(m):
            le = _op_env_step_left(le, x.cores[t], a.cores[t])
        re = np.ones((1, 1, 1))
        for t in range(L - 1, m, -1):
            re = _op_env_step_right(re, x.cores[t], a.cores[t])
        ops_env[key] = (le, a.cores[m], re)
    rhs_env = {}
    for j, b in rhs.items():
        le = np.ones((1, 1))
        for t in range(m):
            le = _vec_env_step_left(le, x.cores[t], b.cores[t])
        re = np.ones((1, 1))
        for t in range(L - 1, m, -1):
            re = _vec_env_step_right(re, x.cores[t], b.cores[t])
        rhs_env[j] = (le, b.cores[m], re)
    r0, n, _, r1 = x.cores[m].shape
    return LocalSystem((r0, n, r1), x.J, ops_env, rhs_env)


class _EnvCache:
    """Incrementally maintained operator/rhs environments for the sweeps."""

    def __init__(self, y: BlockTT, operators, rhs):
        self.operators = operators
        self.rhs = rhs
        L = y.num_modes
        self.op_left = {k: [np.ones((1, 1, 1))] + [None] * L for k in operators}
        self.op_right = {k: [None] * L + [np.ones((1, 1, 1))] for k in operators}
        self.rhs_left = {k: [np.ones((1, 1))] + [None] * L for k in rhs}
        self.rhs_right = {k: [None] * L + [np.ones((1, 1))] for k in rhs}
        for t in range(L - 1, y.pos, -1):
            self.update_right(y, t)
        for t in range(0, y.pos):
            self.update_left(y, t)

    def update_left(self, y: BlockTT, t: int):
        for k, a in self.operators.items():
            self.op_left[k][t + 1] = _op_env_step_left(self.op_left[k][t], y.cores[t], a.cores[t])
        for k, b in self.rhs.items():
            self.rhs_left[k][t + 1] = _vec_env_step_left(self.rhs_left[k][t], y.cores[t], b.cores[t])

    def update_right(self, y: BlockTT, t: int):
        for k, a in self.operators.items():
            self.op_right[k][t] = _op_env_step_right(self.op_right[k][t + 1], y.cores[t], a.cores[t])
        for k, b in self.rhs.items():
            self.rhs_right[k][t] = _vec_env_step_right(self.rhs_right[k][t + 1], y.cores[t], b.cores[t])

    def local_system(self, y: BlockTT) -> LocalSystem:
        m = y.pos
        ops_env = {
            k: (self.op_left[k][m], a.cores[m], self.op_right[k][m + 1])
            for k, a in self.operators.items()
        }
        rhs_env = {
            k: (self.rhs_left[k][m], b.cores[m], self.rhs_right[k][m + 1])
            for k, b in self.rhs.items()
        }
        r0, n, _, r1 = y.cores[m].shape
        return LocalSystem((r0, n, r1), y.J, ops_env, rhs_env)


def _solve_local(loc: LocalSystem, x0, tol, dense_cutoff, gmres_maxit, use_jacobi):
    rhs = loc.local_rhs()
    rhs_flat = rhs.ravel()
    if loc.size <= dense_cutoff:
        mat = loc.dense()
        try:
            sol = np.linalg.solve(mat, rhs_flat)
        except np.linalg.LinAlgError:
            sol = np.linalg.lstsq(mat, rhs_flat, rcond=None)[0]
        return sol.reshape(rhs.shape), loc.matvec_local(sol.reshape(rhs.shape)) - rhs, \
            {"solver": "dense", "iterations": 0}
    apply_p = None
    if use_jacobi:
        diag = loc.pointwise_diag()
        ridge = 1e-13 * max(1.0, float(np.abs(diag).max()))
        diag = diag + ridge * np.eye(loc.J)[None, :, :]
        try:
            inv = np.linalg.inv(diag)
        except np.linalg.LinAlgError:
            inv = np.linalg.pinv(diag)
        rl, n, rr = loc.shape

        def apply_p(v):
            w = v.reshape(rl, n, loc.J, rr)
            w = np.einsum("injr->inrj", w).reshape(-1, loc.J)
            out = np.einsum("pij,pj->pi", inv, w)
            return np.einsum("inrj->injr", out.reshape(rl, n, rr, loc.J)).ravel()

    sol, rep = krylov.gmres(
        loc.matvec, rhs_flat, apply_p_inv=apply_p, tol=tol,
        max_iter=gmres_maxit, x0=None if x0 is None else np.asarray(x0).ravel(),
    )
    sol = sol.reshape(rhs.shape)
    residual = loc.matvec_local(sol) - rhs
    return sol, residual, {"solver": "gmres", "iterations": rep.iterations,
                           "converged": rep.converged}


def _orthonormalize_frames(y: BlockTT) -> BlockTT:
    """Carrier to position 0 with all later cores right-orthogonal."""
    while y.pos > 0:
        y = y.shift_carrier(-1, tol=0.0)
    n0 = y.cores[0].shape[1]
    flat = y.to_ttvector().orthogonalize_right()
    return BlockTT.from_ttvector(flat, 0, y.J, n0)


def _enrich(u, carry, residual_mat, kick, max_rank):
    """Append residual directions to an orthonormal factor (columns of u)."""
    take = min(kick, residual_mat.shape[1])
    if max_rank is not None:
        take = min(take, max(0, max_rank - u.shape[1]))
    if take <= 0 or not np.any(residual_mat):
        return u, carry
    ru = np.linalg.svd(residual_mat, full_matrices=False)[0][:, :take]
    for _ in range(2):
        ru = ru - u @ (u.T @ ru)
    norms = np.linalg.norm(ru, axis=0)
    ru = ru[:, norms > 1e-12]
    if ru.shape[1] == 0:
        return u, carry
    qs = np.linalg.qr(ru)[0]
    u = np.hstack([u, qs])
    carry = np.vstack([carry, np.zeros((qs.shape[1], carry.shape[1]))])
    return u, carry


def _shift_with_enrichment(y: BlockTT, residual, direction, trunc_tol, max_rank, kick):
    """Truncated-SVD carrier shift, enriching the kept factor with the
    dominant local-residual directions (rank adaptivity)."""
    m = y.pos
    car = y.cores[m]
    rl, n, J, rr = car.shape
    cores = [c.copy() for c in y.cores]
    if direction == 1:
        mat = car.reshape(rl * n, J * rr)
        u, s, vt = np.linalg.svd(mat, full_matrices=False)
        r = _svd_rank(s, trunc_tol, max_rank)
        u = u[:, :r]
        carry = s[:r, None] * vt[:r]
        if kick > 0 and residual is not None:
            u, carry = _enrich(u, carry, residual.reshape(rl * n, J * rr), kick, max_rank)
        rnew = u.shape[1]
        cores[m] = u.reshape(rl, n, rnew)
        carry = carry.reshape(rnew, J, rr)
        cores[m + 1] = np.einsum("ajb,bnc->anjc", carry, cores[m + 1])
        return BlockTT(cores, m + 1, J)
    mat = np.transpose(car, (0, 2, 1, 3)).reshape(rl * J, n * rr)
    u, s, vt = np.linalg.svd(mat, full_matrices=False)
    r = _svd_rank(s, trunc_tol, max_rank)
    v = vt[:r]
    carry = u[:, :r] * s[:r][None, :]
    if kick > 0 and residual is not None:
        rmat = np.transpose(residual, (0, 2, 1, 3)).reshape(rl * J, n * rr)
        vt_new, carry_t = _enrich(v.T, carry.T, rmat.T, kick, max_rank)
        v, carry = vt_new.T, carry_t.T
    rnew = v.shape[0]
    cores[m] = v.reshape(rnew, n, rr)
    carry = carry.reshape(rl, J, rnew)
    cores[m - 1] = np.einsum("anb,bjc->anjc", cores[m - 1], carry)
    return BlockTT(cores, m - 1, J)


def als_solve(system_builder, initial: BlockTT, tol=1e-6, max_sweeps=30,
              max_rank=150, kick=4, dense_cutoff=3000, local_tol_factor=0.05,
              gmres_maxit=60, use_jacobi=True, verbose=False):
    """Alternating sweeps over the carrier position for one linear solve.

    system_builder() (or a prebuilt (operators, rhs) pair) supplies the TT
    forms of every KKT block and right-hand-side component.  Sweeps run the
    carrier 0..L-1..0 and stop when the largest relative local update over
    a full sweep drops below tol.  Returns (BlockTT, info).
    """
    operators, rhs = system_builder() if callable(system_builder) else system_builder
    y = _orthonormalize_frames(initial.copy())
    L = y.num_modes
    env = _EnvCache(y, operators, rhs)
    info = {"sweeps": 0, "updates": [], "max_rank": y.max_rank,
            "local_stats": [], "converged": False}
    t_start = time.perf_counter()
    trunc_tol = tol / np.sqrt(max(1, L - 1))
    for sweep in range(1, max_sweeps + 1):
        max_update = 0.0
        for direction, stops in ((1, list(range(L - 1))), (-1, list(range(L - 1, 0, -1)))):
            for m in stops:
                loc = env.local_system(y)
                x0 = y.cores[m]
                sol, residual, st = _solve_local(
                    loc, x0, max(1e-12, local_tol_factor * tol), dense_cutoff,
                    gmres_maxit, use_jacobi,
                )
                info["local_stats"].append(st)
                dn = float(np.linalg.norm(sol - x0))
                sn = float(np.linalg.norm(sol))
                if sn > 0:
                    max_update = max(max_update, dn / sn)
                y.cores[m] = sol
                y = _shift_with_enrichment(y, residual, direction, trunc_tol, max_rank, kick)
                if direction == 1:
                    env.update_left(y, m)
                else:
                    env.update_right(y, m)
        loc = env.local_system(y)
        sol, _, st = _solve_local(loc, y.cores[0], max(1e-12, local_tol_factor * tol),
                                  dense_cutoff, gmres_maxit, use_jacobi)
        info["local_stats"].append(st)
        dn = float(np.linalg.norm(sol - y.cores[0]))
        sn = float(np.linalg.norm(sol))
        if sn > 0:
            max_update = max(max_update, dn / sn)
        y.cores[0] = sol
        info["sweeps"] = sweep
        info["updates"].append(max_update)
        info["max_rank"] = max(info["max_rank"], y.max_rank)
        if verbose:
            print(f"    als sweep {sweep}: max update {max_update:.3e} max rank {y.max_rank}")
        if max_update <= tol:
            info["converged"] = True
            break
    info["seconds"] = time.perf_counter() - t_start
    info["final_update"] = info["updates"][-1] if info["updates"] else 0.0
    return y, info
