"""Block tensor-train format: several components sharing all cores but one.

One carrier core holds an extra component index j in {0..J-1}; moving the
carrier to a neighboring position is a truncated SVD that keeps all cores
to its left left-orthogonal and to its right right-orthogonal, so the
frame matrix (the linear map from carrier entries to a full component
vector) always has orthonormal columns.
"""

from __future__ import annotations

import numpy as np

from ksopt.tt.core import TTVector, tt_full

__all__ = ["BlockTT", "blocktt_from_components"]


class BlockTT:
    """cores: list of order-3 cores except cores[pos], which has shape
    (r0, n, J, r1)."""

    def __init__(self, cores, pos: int, J: int):
        self.cores = [np.asarray(c, dtype=float) for c in cores]
        self.pos = int(pos)
        self.J = int(J)
        if self.cores[self.pos].ndim != 4 or self.cores[self.pos].shape[2] != self.J:
            raise ValueError("carrier core shape does not match the component count")

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

    def copy(self):
        return BlockTT([c.copy() for c in self.cores], self.pos, self.J)

    # --- conversions ------------------------------------------------------
    def to_ttvector(self) -> TTVector:
        """Flatten the carrier's (n, J) pair into one mode of size n*J."""
        cores = []
        for m, c in enumerate(self.cores):
            if m == self.pos:
                r0, n, J, r1 = c.shape
                cores.append(c.reshape(r0, n * J, r1))
            else:
                cores.append(c)
        return TTVector(cores)

    @classmethod
    def from_ttvector(cls, vec: TTVector, pos: int, J: int, mode_size: int) -> "BlockTT":
        cores = []
        for m, c in enumerate(vec.cores):
            if m == pos:
                r0, _, r1 = c.shape
                cores.append(c.reshape(r0, mode_size, J, r1))
            else:
                cores.append(c)
        return cls(cores, pos, J)

    def round(self, tol=1e-14, max_rank=None) -> "BlockTT":
        n = self.cores[self.pos].shape[1]
        vec = self.to_ttvector().round(tol, max_rank)
        return BlockTT.from_ttvector(vec, self.pos, self.J, n)

    def orthonormalize(self, pos=None) -> "BlockTT":
        """Orthonormal frames with the carrier at pos (default: keep it)."""
        target = self.pos if pos is None else int(pos)
        y = self
        while y.pos > 0:
            y = y.shift_carrier(-1, tol=0.0)
        n0 = y.cores[0].shape[1]
        flat = y.to_ttvector().orthogonalize_right()
        y = BlockTT.from_ttvector(flat, 0, y.J, n0)
        while y.pos < target:
            y = y.shift_carrier(1, tol=0.0)
        return y

    def norm(self) -> float:
        return self.to_ttvector().norm()

    def component(self, j: int) -> TTVector:
        """One component as a plain tensor train (shares untouched cores)."""
        cores = []
        for m, c in enumerate(self.cores):
            if m == self.pos:
                cores.append(c[:, :, j, :].copy())
            else:
                cores.append(c.copy())
        return TTVector(cores)

    def component_full(self, j: int) -> np.ndarray:
        return tt_full(self.component(j))

    def evaluate_components(self, indices) -> np.ndarray:
        """All J component values at a batch of 0-based digit tuples: (B, J)."""
        idx = np.asarray(indices, dtype=np.int64)
        if idx.ndim == 1:
            idx = idx[None, :]
        B = idx.shape[0]
        left = np.ones((B, 1))
        for m in range(self.pos):
            slab = self.cores[m][:, idx[:, m], :]
            left = np.einsum("br,rbs->bs", left, slab)
        right = np.ones((B, 1))
        for m in range(self.num_modes - 1, self.pos, -1):
            slab = self.cores[m][:, idx[:, m], :]
            right = np.einsum("rbs,bs->br", slab, right)
        carrier = self.cores[self.pos][:, idx[:, self.pos], :, :]  # (r0,B,J,r1)
        return np.einsum("br,rbjs,bs->bj", left, carrier, right)

    # --- carrier movement ---------------------------------------------
    def shift_carrier(self, direction: int, tol=0.0, max_rank=None) -> "BlockTT":
        """Move the component index one core left or right via truncated SVD.

        Shifting right leaves a left-orthogonal core behind; shifting left a
        right-orthogonal one, so frames stay orthonormal automatically.
        """
        if direction not in (-1, 1):
            raise ValueError("direction must be -1 or +1")
        m = self.pos
        if not 0 <= m + direction < self.num_modes:
            raise ValueError("cannot shift the component index past the ends")
        cores = [c.copy() for c in self.cores]
        car = cores[m]
        r0, n, J, r1 = car.shape
        if direction == 1:
            mat = car.reshape(r0 * n, J * r1)
            u, s, vt = np.linalg.svd(mat, full_matrices=False)
            r = _svd_rank(s, tol, max_rank)
            cores[m] = u[:, :r].reshape(r0, n, r)
            carry = (s[:r, None] * vt[:r]).reshape(r, J, r1)
            nxt = cores[m + 1]
            new_car = np.einsum("ajb,bnc->anjc", carry, nxt)
            cores[m + 1] = new_car
        else:
            mat = np.transpose(car, (0, 2, 1, 3)).reshape(r0 * J, n * r1)
            u, s, vt = np.linalg.svd(mat, full_matrices=False)
            r = _svd_rank(s, tol, max_rank)
            cores[m] = vt[:r].reshape(r, n, r1)
            carry = (u[:, :r] * s[:r][None, :]).reshape(r0, J, r)
            prev = cores[m - 1]
            new_car = np.einsum("anb,bjc->anjc", prev, carry)
            cores[m - 1] = new_car
        return BlockTT(cores, m + direction, self.J)


def _svd_rank(s, tol, max_rank):
    if s.size == 0:
        return 1
    if tol <= 0.0:
        r = int(np.sum(s > s[0] * 1e-15)) if s[0] > 0 else 1
    else:
        tails = np.sqrt(np.cumsum(s[::-1] ** 2))[::-1]
        thr = tol * np.linalg.norm(s)
        r = s.size
        for i in range(s.size, 0, -1):
            tail = tails[i] if i < s.size else 0.0
            if tail <= thr:
                r = i
            else:
                break
    r = max(1, r)
    if max_rank is not None:
        r = min(r, int(max_rank))
    return r


def blocktt_from_components(components, pos: int, tol=1e-14, max_rank=None) -> "BlockTT":
    """Stack J plain tensor trains into one block TT with the carrier at pos.

    Built as a direct sum with component-indicator slices at the carrier,
    then rounded.
    """
    J = len(components)
    sizes = components[0].mode_sizes
    L = len(sizes)
    for comp in components:
        if comp.mode_sizes != sizes:
            raise ValueError("components must share mode sizes")
    cores = []
    for m in range(L):
        blocks = [comp.cores[m] for comp in components]
        r0s = [b.shape[0] for b in blocks]
        r1s = [b.shape[-1] for b in blocks]
        n = sizes[m]
        if m == pos:
            core = np.zeros((sum(r0s) if m > 0 else 1, n, J,
                             sum(r1s) if m < L - 1 else 1))
        else:
            core = np.zeros((sum(r0s) if m > 0 else 1, n,
                             sum(r1s) if m < L - 1 else 1))
        o0 = o1 = 0
        for j, b in enumerate(blocks):
            sl0 = slice(o0, o0 + b.shape[0]) if m > 0 else slice(0, 1)
            sl1 = slice(o1, o1 + b.shape[-1]) if m < L - 1 else slice(0, 1)
            if m == pos:
                core[sl0, :, j, sl1] += b
            else:
                core[sl0, :, sl1] += b
            if m > 0:
                o0 += b.shape[0]
            if m < L - 1:
                o1 += b.shape[-1]
        cores.append(core)
    out = BlockTT(cores, pos, J)
    return out.round(tol, max_rank)
