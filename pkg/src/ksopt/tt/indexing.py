"""Folding of grid indices into tensors of digits.

A linear index over a tensor-product grid factorizes dimension by
dimension, and each dimension's range factorizes further into digits
(binary by default), so an entire space-time vector becomes a tensor with
one small mode per digit.  Digits are ordered fastest first within each
dimension and dimensions are ordered (x, y, t) with x fastest, matching
the lexicographic node ordering of the discretization: the fold of a grid
vector is a pure reshape in Fortran order.

Index conventions follow the algebra i = 1 + sum_m (i_m - 1) prod_{p<m} n_p
with 1-based digits; array storage is 0-based.
"""

from __future__ import annotations

import numpy as np

__all__ = ["QTTIndexMap", "qtt_fold", "qtt_unfold"]


class QTTIndexMap:
    """Bijection between linear indices and digit tuples.

    dims: list of per-dimension digit-size lists, e.g. [[2,2], [2,2], [2]]
    for a 4 x 4 x 2 grid folded binarily.
    """

    def __init__(self, dims):
        self.dims = tuple(tuple(int(d) for d in dim) for dim in dims)
        self.mode_sizes = tuple(d for dim in self.dims for d in dim)
        if any(d < 1 for d in self.mode_sizes):
            raise ValueError("digit sizes must be positive")
        self.num_modes = len(self.mode_sizes)
        self.total = int(np.prod(self.mode_sizes)) if self.mode_sizes else 1
        self.strides = np.concatenate([[1], np.cumprod(self.mode_sizes[:-1])]).astype(np.int64)

    @classmethod
    def from_grid(cls, grid):
        return cls(grid.level_factorization)

    def fold(self, i: int):
        """1-based linear index -> tuple of 1-based digits."""
        if not 1 <= i <= self.total:
            raise ValueError(f"linear index {i} outside [1, {self.total}]")
        rem = int(i) - 1
        digits = []
        for size in self.mode_sizes:
            digits.append(rem % size + 1)
            rem //= size
        return tuple(digits)

    def unfold(self, digits):
        """Tuple of 1-based digits -> 1-based linear index."""
        digits = tuple(int(d) for d in digits)
        if len(digits) != self.num_modes:
            raise ValueError(f"expected {self.num_modes} digits, got {len(digits)}")
        for d, size in zip(digits, self.mode_sizes):
            if not 1 <= d <= size:
                raise ValueError(f"digit {d} outside [1, {size}]")
        return 1 + int(np.dot(np.asarray(digits, dtype=np.int64) - 1, self.strides))

    def fold_array(self, vec: np.ndarray) -> np.ndarray:
        """Reshape a grid vector into its digit tensor (no copy semantics)."""
        vec = np.asarray(vec)
        if vec.size != self.total:
            raise ValueError(f"vector length {vec.size} does not match grid size {self.total}")
        return vec.reshape(self.mode_sizes, order="F")

    def unfold_array(self, tensor: np.ndarray) -> np.ndarray:
        tensor = np.asarray(tensor)
        if tuple(tensor.shape) != self.mode_sizes:
            raise ValueError("tensor shape does not match the digit factorization")
        return tensor.reshape(-1, order="F")


def qtt_fold(i: int, index_map: QTTIndexMap):
    return index_map.fold(i)


def qtt_unfold(digits, index_map: QTTIndexMap):
    return index_map.unfold(digits)
