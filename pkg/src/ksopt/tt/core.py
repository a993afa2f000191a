"""Tensor-train vectors and matrices: storage, arithmetic, rounding.

A TTVector stores a chain of order-3 cores (r_{m-1}, n_m, r_m) with unit
boundary ranks; a TTMatrix stores (R_{m-1}, n_m, n'_m, R_m) cores.  SVD
rounding distributes a requested Frobenius tolerance as tol/sqrt(L-1) per
unfolding, so the accumulated error stays below tol.  All operations are
deterministic; nothing mutates an existing object.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "TTVector",
    "TTMatrix",
    "tt_from_full",
    "tt_full",
    "tt_add",
    "tt_dot",
    "tt_norm",
    "tt_hadamard",
    "tt_matvec",
    "tt_rank1",
    "tt_ones",
    "tt_random",
    "tt_evaluate",
    "ttm_from_dense",
    "ttm_identity",
    "ttm_diag",
    "ttm_kron_concat",
    "ttm_matmat",
    "ttm_add",
    "ttm_transpose",
    "ttm_full",
]


def _truncation_rank(s: np.ndarray, threshold: float, max_rank: int | None):
    if s.size == 0:
        return 1
    tails = np.sqrt(np.cumsum(s[::-1] ** 2))[::-1]
    # keep the smallest r with tail energy below the threshold
    r = s.size
    for i in range(s.size, 0, -1):
        tail = tails[i] if i < s.size else 0.0
        if tail <= threshold:
            r = i
        else:
            break
    r = max(1, r)
    if max_rank is not None:
        r = min(r, int(max_rank))
    return r


class TTVector:
    def __init__(self, cores):
        self.cores = [np.asarray(c, dtype=float) for c in cores]
        self._check()

    def _check(self):
        if not self.cores:
            raise ValueError("empty tensor train")
        if self.cores[0].shape[0] != 1 or self.cores[-1].shape[-1] != 1:
            raise ValueError("boundary ranks must equal 1")
        for a, b in zip(self.cores, self.cores[1:]):
            if a.shape[-1] != b.shape[0]:
                raise ValueError("core ranks do not chain")

    @property
    def num_modes(self):
        return len(self.cores)

    @property
    def mode_sizes(self):
        return tuple(c.shape[1] for c in self.cores)

    @property
    def ranks(self):
        return tuple([self.cores[0].shape[0]] + [c.shape[-1] for c in self.cores])

    @property
    def max_rank(self):
        return max(self.ranks)

    @property
    def size(self):
        return int(np.prod(self.mode_sizes))

    def copy(self):
        return TTVector([c.copy() for c in self.cores])

    def full(self):
        return tt_full(self)

    def scale(self, alpha):
        out = self.copy()
        out.cores[0] = out.cores[0] * float(alpha)
        return out

    def __add__(self, other):
        return tt_add(self, other)

    def __sub__(self, other):
        return tt_add(self, other.scale(-1.0))

    def norm(self):
        return tt_norm(self)

    def dot(self, other):
        return tt_dot(self, other)

    def orthogonalize_right(self):
        """Right-to-left QR; afterwards cores 2..L are right-orthogonal and
        the whole norm sits in the first core."""
        cores = [c.copy() for c in self.cores]
        for m in range(len(cores) - 1, 0, -1):
            r0, n, r1 = cores[m].shape
            mat = cores[m].reshape(r0, n * r1)
            q, rme = np.linalg.qr(mat.T)
            k = q.shape[1]
            cores[m] = q.T.reshape(k, n, r1)
            cores[m - 1] = np.einsum("abc,dc->abd", cores[m - 1], rme)
        return TTVector(cores)

    def round(self, tol=1e-14, max_rank=None):
        return tt_round(self, tol, max_rank)


def tt_round(x: TTVector, tol=1e-14, max_rank=None) -> TTVector:
    """SVD rounding: relative Frobenius error <= tol, ranks never increase."""
    if x.num_modes == 1:
        return x.copy()
    y = x.orthogonalize_right()
    cores = y.cores
    nrm = np.linalg.norm(cores[0])
    threshold = (tol / np.sqrt(max(1, len(cores) - 1))) * nrm
    for m in range(len(cores) - 1):
        r0, n, r1 = cores[m].shape
        mat = cores[m].reshape(r0 * n, r1)
        u, s, vt = np.linalg.svd(mat, full_matrices=False)
        r = _truncation_rank(s, threshold, max_rank)
        cores[m] = u[:, :r].reshape(r0, n, r)
        carry = (s[:r, None] * vt[:r]).astype(float)
        cores[m + 1] = np.einsum("ab,bcd->acd", carry, cores[m + 1])
    return TTVector(cores)


def tt_from_full(tensor: np.ndarray, tol=0.0, max_rank=None, mode_sizes=None) -> TTVector:
    """Sequential truncated SVD of a dense tensor (validation scale)."""
    tensor = np.asarray(tensor, dtype=float)
    if mode_sizes is not None:
        tensor = tensor.reshape(mode_sizes)
    sizes = tensor.shape
    L = len(sizes)
    nrm = np.linalg.norm(tensor)
    threshold = 0.0 if nrm == 0 else (tol / np.sqrt(max(1, L - 1))) * nrm
    cores = []
    rest = tensor.reshape(1, -1)
    r_prev = 1
    for m in range(L - 1):
        mat = rest.reshape(r_prev * sizes[m], -1)
        u, s, vt = np.linalg.svd(mat, full_matrices=False)
        r = _truncation_rank(s, threshold, max_rank)
        cores.append(u[:, :r].reshape(r_prev, sizes[m], r))
        rest = s[:r, None] * vt[:r]
        r_prev = r
    cores.append(rest.reshape(r_prev, sizes[-1], 1))
    return TTVector(cores)


def tt_full(x: TTVector) -> np.ndarray:
    out = x.cores[0]
    for core in x.cores[1:]:
        out = np.tensordot(out, core, axes=([out.ndim - 1], [0]))
    return out.reshape(x.mode_sizes)


def tt_add(x: TTVector, y: TTVector) -> TTVector:
    if x.mode_sizes != y.mode_sizes:
        raise ValueError("mode sizes differ")
    if x.num_modes == 1:
        return TTVector([x.cores[0] + y.cores[0]])
    cores = []
    for m, (a, b) in enumerate(zip(x.cores, y.cores)):
        ra0, n, ra1 = a.shape
        rb0, _, rb1 = b.shape
        if m == 0:
            core = np.concatenate([a, b], axis=2)
        elif m == x.num_modes - 1:
            core = np.concatenate([a, b], axis=0)
        else:
            core = np.zeros((ra0 + rb0, n, ra1 + rb1))
            core[:ra0, :, :ra1] = a
            core[ra0:, :, ra1:] = b
        cores.append(core)
    return TTVector(cores)


def tt_dot(x: TTVector, y: TTVector) -> float:
    if x.mode_sizes != y.mode_sizes:
        raise ValueError("mode sizes differ")
    v = np.ones((1, 1))
    for a, b in zip(x.cores, y.cores):
        w = np.tensordot(v, a, axes=([0], [0]))       # (ry0, n, rx1)
        v = np.tensordot(w, b, axes=([0, 1], [0, 1]))  # (rx1, ry1)
    return float(v[0, 0])


def tt_norm(x: TTVector) -> float:
    y = x.orthogonalize_right()
    return float(np.linalg.norm(y.cores[0]))


def tt_hadamard(x: TTVector, y: TTVector) -> TTVector:
    if x.mode_sizes != y.mode_sizes:
        raise ValueError("mode sizes differ")
    cores = []
    for a, b in zip(x.cores, y.cores):
        ra0, n, ra1 = a.shape
        rb0, _, rb1 = b.shape
        core = np.einsum("anb,cnd->acnbd", a, b).reshape(ra0 * rb0, n, ra1 * rb1)
        cores.append(core)
    return TTVector(cores)


def tt_rank1(factors) -> TTVector:
    return TTVector([np.asarray(f, dtype=float).reshape(1, -1, 1) for f in factors])


def tt_ones(mode_sizes) -> TTVector:
    return tt_rank1([np.ones(n) for n in mode_sizes])


def tt_random(mode_sizes, rank, rng) -> TTVector:
    mode_sizes = tuple(mode_sizes)
    L = len(mode_sizes)
    ranks = [1] + [int(rank)] * (L - 1) + [1]
    for m in range(1, L):
        cap = int(np.prod(mode_sizes[:m]))
        cap2 = int(np.prod(mode_sizes[m:]))
        ranks[m] = min(ranks[m], cap, cap2)
    cores = [rng.standard_normal((ranks[m], mode_sizes[m], ranks[m + 1])) for m in range(L)]
    return TTVector(cores)


def tt_evaluate(x: TTVector, indices) -> np.ndarray:
    """Entries of the tensor at a batch of 0-based digit tuples (B, L)."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim == 1:
        idx = idx[None, :]
    cur = np.ones((idx.shape[0], 1))
    for m, core in enumerate(x.cores):
        slab = core[:, idx[:, m], :]              # (r0, B, r1)
        cur = np.einsum("br,rbs->bs", cur, slab)
    return cur[:, 0]


# ----------------------------------------------------------------------
class TTMatrix:
    def __init__(self, cores):
        self.cores = [np.asarray(c, dtype=float) for c in cores]
        if self.cores[0].shape[0] != 1 or self.cores[-1].shape[-1] != 1:
            raise ValueError("boundary ranks must equal 1")
        for a, b in zip(self.cores, self.cores[1:]):
            if a.shape[-1] != b.shape[0]:
                raise ValueError("core ranks do not chain")

    @property
    def num_modes(self):
        return len(self.cores)

    @property
    def row_sizes(self):
        return tuple(c.shape[1] for c in self.cores)

    @property
    def col_sizes(self):
        return tuple(c.shape[2] for c in self.cores)

    @property
    def ranks(self):
        return tuple([self.cores[0].shape[0]] + [c.shape[-1] for c in self.cores])

    @property
    def max_rank(self):
        return max(self.ranks)

    def copy(self):
        return TTMatrix([c.copy() for c in self.cores])

    def scale(self, alpha):
        out = self.copy()
        out.cores[0] = out.cores[0] * float(alpha)
        return out

    def __add__(self, other):
        return ttm_add(self, other)

    def __sub__(self, other):
        return ttm_add(self, other.scale(-1.0))

    def transpose(self):
        return ttm_transpose(self)

    def as_vector(self) -> TTVector:
        return TTVector([c.reshape(c.shape[0], -1, c.shape[-1]) for c in self.cores])

    @classmethod
    def from_vector(cls, vec: TTVector, row_sizes, col_sizes) -> "TTMatrix":
        cores = []
        for c, nr, nc in zip(vec.cores, row_sizes, col_sizes):
            cores.append(c.reshape(c.shape[0], nr, nc, c.shape[-1]))
        return cls(cores)

    def round(self, tol=1e-14, max_rank=None):
        vec = self.as_vector().round(tol, max_rank)
        return TTMatrix.from_vector(vec, self.row_sizes, self.col_sizes)

    def full(self):
        return ttm_full(self)

    def dot(self, x: TTVector) -> TTVector:
        return tt_matvec(self, x)


def tt_matvec(a: TTMatrix, x: TTVector) -> TTVector:
    if a.col_sizes != x.mode_sizes:
        raise ValueError("matrix/vector mode sizes differ")
    cores = []
    for am, xm in zip(a.cores, x.cores):
        R0, nr, nc, R1 = am.shape
        r0, _, r1 = xm.shape
        core = np.einsum("aijb,cjd->acibd", am, xm).reshape(R0 * r0, nr, R1 * r1)
        cores.append(core)
    return TTVector(cores)


def ttm_from_dense(mat: np.ndarray, row_sizes, col_sizes, tol=0.0, max_rank=None) -> TTMatrix:
    """Fold a dense matrix into TT-matrix cores (exact up to tol)."""
    mat = np.asarray(mat, dtype=float)
    row_sizes = tuple(row_sizes)
    col_sizes = tuple(col_sizes)
    L = len(row_sizes)
    tensor = mat.reshape(row_sizes[::-1] + col_sizes[::-1])
    # bring to interleaved digit order (i_1, j_1, i_2, j_2, ...)
    tensor = tensor.transpose(tuple(range(L - 1, -1, -1)) + tuple(range(2 * L - 1, L - 1, -1)))
    perm = []
    for m in range(L):
        perm.extend([m, L + m])
    tensor = tensor.transpose(perm)
    grouped = tensor.reshape([row_sizes[m] * col_sizes[m] for m in range(L)])
    vec = tt_from_full(grouped, tol=tol, max_rank=max_rank)
    return TTMatrix.from_vector(vec, row_sizes, col_sizes)


def ttm_full(a: TTMatrix) -> np.ndarray:
    vec = a.as_vector()
    grouped = tt_full(vec)
    L = a.num_modes
    tensor = grouped.reshape([s for m in range(L) for s in (a.row_sizes[m], a.col_sizes[m])])
    perm = list(range(2 * L - 2, -2, -2)) + list(range(2 * L - 1, -1, -2))
    tensor = tensor.transpose(perm)
    nrow = int(np.prod(a.row_sizes))
    ncol = int(np.prod(a.col_sizes))
    return tensor.reshape(nrow, ncol)


def ttm_identity(mode_sizes) -> TTMatrix:
    return TTMatrix([np.eye(n).reshape(1, n, n, 1) for n in mode_sizes])


def ttm_diag(x: TTVector) -> TTMatrix:
    cores = []
    for c in x.cores:
        r0, n, r1 = c.shape
        core = np.zeros((r0, n, n, r1))
        idx = np.arange(n)
        core[:, idx, idx, :] = c
        cores.append(core)
    return TTMatrix(cores)


def ttm_kron_concat(factors) -> TTMatrix:
    """Kronecker product over dimension groups by core concatenation.

    factors are TTMatrix objects acting on consecutive digit groups, listed
    fastest group first (so the result acts on the concatenated digits in
    grid order).
    """
    cores = []
    for f in factors:
        cores.extend(c.copy() for c in f.cores)
    return TTMatrix(cores)


def ttm_add(a: TTMatrix, b: TTMatrix) -> TTMatrix:
    if a.row_sizes != b.row_sizes or a.col_sizes != b.col_sizes:
        raise ValueError("mode sizes differ")
    vec = tt_add(a.as_vector(), b.as_vector())
    return TTMatrix.from_vector(vec, a.row_sizes, a.col_sizes)


def ttm_transpose(a: TTMatrix) -> TTMatrix:
    return TTMatrix([c.transpose(0, 2, 1, 3).copy() for c in a.cores])


def ttm_matmat(a: TTMatrix, b: TTMatrix) -> TTMatrix:
    if a.col_sizes != b.row_sizes:
        raise ValueError("inner mode sizes differ")
    cores = []
    for am, bm in zip(a.cores, b.cores):
        R0, nr, nk, R1 = am.shape
        S0, _, nc, S1 = bm.shape
        core = np.einsum("aikb,ckjd->acijbd", am, bm).reshape(R0 * S0, nr, nc, R1 * S1)
        cores.append(core)
    return TTMatrix(cores)
