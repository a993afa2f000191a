"""Cross approximation: build a tensor train from sampled entries.

Alternating sweeps draw fibers of the tensor at index sets selected by
maxvol pivoting on each unfolding; ranks grow by appending random index
rows whenever a held-out random validation sample still shows an error
above the requested tolerance, up to a rank cap.  The evaluator is an
arbitrary elementwise function of 0-based digit tuples, so nothing is ever
formed densely.
"""

from __future__ import annotations

import numpy as np

from ksopt.tt.core import TTVector, tt_evaluate

__all__ = ["maxvol", "tt_cross"]


def maxvol(mat: np.ndarray, max_iters: int = 100, tol: float = 1.05) -> np.ndarray:
    """Row indices of a quasi-maximal-volume square submatrix."""
    n, r = mat.shape
    if n <= r:
        return np.arange(n)
    piv = np.argsort(-np.einsum("ij,ij->i", mat, mat))[:r].copy()
    try:
        coeff = np.linalg.solve(mat[piv].T, mat.T).T
    except np.linalg.LinAlgError:
        coeff = np.linalg.lstsq(mat[piv].T, mat.T, rcond=None)[0].T
    for _ in range(max_iters):
        flat = np.argmax(np.abs(coeff))
        i, j = np.unravel_index(flat, coeff.shape)
        if abs(coeff[i, j]) <= tol:
            break
        coeff += np.outer(coeff[:, j], coeff[piv[j]] - coeff[i]) / coeff[i, j]
        piv[j] = i
    return np.sort(piv)


def _combine_left(ileft, n):
    """All combinations of left index rows with a full mode: (rl*n, m+1)."""
    rl = ileft.shape[0]
    rows = np.repeat(ileft, n, axis=0)
    mode = np.tile(np.arange(n), rl)[:, None]
    return np.hstack([rows, mode])


def _combine_right(iright, n):
    rr = iright.shape[0]
    mode = np.repeat(np.arange(n), rr)[:, None]
    rows = np.tile(iright, (n, 1))
    return np.hstack([mode, rows])


def _fiber_indices(ileft, n, iright):
    """(rl*n*rr, L) index array for one fiber tensor, C-ordered (rl, n, rr)."""
    rl = max(1, ileft.shape[0])
    rr = max(1, iright.shape[0])
    left = np.repeat(ileft, n * rr, axis=0) if ileft.size else np.zeros((n * rr, 0), dtype=np.int64)
    mode = np.tile(np.repeat(np.arange(n), rr), rl)[:, None]
    right = (np.tile(iright, (rl * n, 1)) if iright.size
             else np.zeros((rl * n * rr, 0), dtype=np.int64))
    if ileft.size == 0:
        left = np.zeros((rl * n * rr, 0), dtype=np.int64)
    return np.hstack([left, mode, right]).astype(np.int64)


def tt_cross(evaluator, mode_sizes, tol=1e-8, max_rank=50, initial=None,
             rank_init=2, kick=4, max_sweeps=8, validation_size=1000, rng=None):
    """TT approximation of an elementwise-defined tensor.

    evaluator(idx) takes an (B, L) array of 0-based digit indices and
    returns B values.  Returns (TTVector, info); info carries the achieved
    validation error estimate, and info['converged'] is False when the rank
    cap prevented reaching the tolerance.
    """
    mode_sizes = tuple(int(n) for n in mode_sizes)
    L = len(mode_sizes)
    rng = np.random.default_rng(0) if rng is None else rng

    val_idx = np.column_stack([rng.integers(0, n, size=validation_size) for n in mode_sizes])
    val_ref = np.asarray(evaluator(val_idx), dtype=float)
    scale = float(np.linalg.norm(val_ref)) or 1.0

    def random_rows(count, upto):
        return np.column_stack(
            [rng.integers(0, mode_sizes[t], size=count) for t in range(upto, L)]
        )

    # right nested index sets I_right[m] lists digits for modes m..L-1
    ranks = [1] * (L + 1)
    if initial is not None:
        ranks = list(initial.ranks)
    else:
        for m in range(1, L):
            cap = min(int(np.prod(mode_sizes[:m])), int(np.prod(mode_sizes[m:])))
            ranks[m] = min(rank_init, cap, max_rank)
    iright = [None] * (L + 1)
    iright[L] = np.zeros((1, 0), dtype=np.int64)
    for m in range(L - 1, 0, -1):
        iright[m] = np.hstack([
            rng.integers(0, mode_sizes[m], size=(ranks[m], 1)),
            iright[m + 1][rng.integers(0, iright[m + 1].shape[0], size=ranks[m])],
        ])
    ileft = [None] * (L + 1)
    ileft[0] = np.zeros((1, 0), dtype=np.int64)

    cores = [np.zeros((ranks[m], mode_sizes[m], ranks[m + 1])) for m in range(L)]
    info = {"sweeps": 0, "validation_error": np.inf, "converged": False}
    best = None

    for sweep in range(1, max_sweeps + 1):
        # left-to-right: build nested left sets by maxvol
        for m in range(L - 1):
            idx = _fiber_indices(ileft[m], mode_sizes[m], iright[m + 1])
            fib = np.asarray(evaluator(idx), dtype=float).reshape(
                ileft[m].shape[0] * mode_sizes[m], iright[m + 1].shape[0]
            )
            q, _ = np.linalg.qr(fib)
            piv = maxvol(q)
            sub = q[piv]
            try:
                cores[m] = np.linalg.solve(sub.T, q.T).T.reshape(
                    ileft[m].shape[0], mode_sizes[m], len(piv)
                )
            except np.linalg.LinAlgError:
                cores[m] = np.linalg.lstsq(sub.T, q.T, rcond=None)[0].T.reshape(
                    ileft[m].shape[0], mode_sizes[m], len(piv)
                )
            combined = _combine_left(ileft[m], mode_sizes[m])
            ileft[m + 1] = combined[piv]
        # last core: plain evaluation at the final left set
        idx = _fiber_indices(ileft[L - 1], mode_sizes[L - 1], iright[L])
        cores[L - 1] = np.asarray(evaluator(idx), dtype=float).reshape(
            ileft[L - 1].shape[0], mode_sizes[L - 1], 1
        )
        # right-to-left: refresh nested right sets
        for m in range(L - 1, 0, -1):
            rl, n, rr = ileft[m].shape[0], mode_sizes[m], iright[m + 1].shape[0]
            idx = _fiber_indices(ileft[m], n, iright[m + 1])
            fib = np.asarray(evaluator(idx), dtype=float).reshape(rl, n * rr)
            q, _ = np.linalg.qr(fib.T)
            piv = maxvol(q)
            try:
                interp = np.linalg.solve(q[piv].T, q.T).T    # (n*rr, k)
            except np.linalg.LinAlgError:
                interp = np.linalg.lstsq(q[piv].T, q.T, rcond=None)[0].T
            cores[m] = interp.T.reshape(len(piv), n, rr)
            iright[m] = _combine_right(iright[m + 1], n)[piv]
        # first core at the refreshed right set
        idx = _fiber_indices(ileft[0], mode_sizes[0], iright[1])
        cores[0] = np.asarray(evaluator(idx), dtype=float).reshape(
            1, mode_sizes[0], iright[1].shape[0]
        )
        approx = TTVector([c.copy() for c in cores])
        err = float(np.linalg.norm(tt_evaluate(approx, val_idx) - val_ref)) / scale
        info["sweeps"] = sweep
        info["validation_error"] = err
        if best is None or err < best[1]:
            best = (approx, err)
        if err <= tol:
            info["converged"] = True
            return approx, info
        # enrich ranks and resweep
        grew = False
        for m in range(1, L):
            cap = min(int(np.prod(mode_sizes[:m])), int(np.prod(mode_sizes[m:])), max_rank)
            want = min(iright[m].shape[0] + kick, cap)
            add = want - iright[m].shape[0]
            if add > 0:
                extra = np.hstack([
                    rng.integers(0, mode_sizes[m], size=(add, 1)),
                    iright[m + 1][rng.integers(0, iright[m + 1].shape[0], size=add)]
                    if iright[m + 1].shape[0] else np.zeros((add, 0), dtype=np.int64),
                ])
                iright[m] = np.vstack([iright[m], extra])
                grew = True
        if not grew and sweep > 1:
            break
    approx, err = best
    info["validation_error"] = err
    info["converged"] = err <= tol
    return approx, info
