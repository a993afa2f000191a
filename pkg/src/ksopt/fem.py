"""Q1 finite elements on the unit square and the implicit-Euler time grid.

Everything lives on a uniform tensor-product grid of ``n x n`` nodes on
``[0,1]^2`` (``n`` a power of two, mesh width ``h = 1/(n-1)``) and ``nt``
implicit-Euler steps of size ``tau = T/nt`` covering ``(0, T]``.  Nodes are
ordered lexicographically, x fastest, then y; space-time vectors stack the
``nt`` spatial slices with time slowest.  This ordering makes the folding of
a grid vector into a tensor of binary digits a pure reshape.

All matrices are assembled exactly (2x2 Gauss quadrature is exact for the
polynomial degrees that occur) and returned as ``scipy.sparse.csr_matrix``.
Nonlinear coefficients are interpolated nodally before entering a weighted
form, so a weighted form is a contraction of fixed triple-product tensors
with the coefficient vector.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Grid",
    "Field",
    "build_grid",
    "node_coords",
    "boundary_node_indices",
    "assemble_mass",
    "assemble_stiffness",
    "assemble_boundary_mass",
    "boundary_coupling",
    "boundary_mass_full",
    "assemble_final_time_restriction",
    "assemble_weighted_form",
    "integrate",
]


def _check_power_of_two(value: int, name: str) -> int:
    value = int(value)
    if value < 2 or (value & (value - 1)) != 0:
        raise ValueError(f"grid size {name}={value} is not a power of two")
    return int(round(np.log2(value)))


@dataclass(frozen=True)
class Grid:
    """Uniform space-time grid.

    Attributes
    ----------
    n : nodes per spatial dimension (power of two), mesh width h = 1/(n-1).
    nt : number of implicit-Euler steps (power of two), step tau = T/nt.
    T : final time.
    level_factorization : digit sizes per dimension (x, y, t) used when a
        grid vector is folded into a tensor of binary digits.
    """

    n: int
    nt: int
    T: float
    h: float
    tau: float
    level_factorization: tuple

    @property
    def num_nodes(self) -> int:
        return self.n * self.n

    @property
    def num_boundary(self) -> int:
        return 4 * (self.n - 1)

    @property
    def num_levels(self) -> int:
        return sum(len(d) for d in self.level_factorization)


@dataclass
class Field:
    """Coefficient vector with a declared layout.

    kind is one of ``spatial`` (length n^2), ``spacetime`` (length n^2*nt)
    or ``boundary-spacetime`` (length 4(n-1)*nt).
    """

    values: np.ndarray
    kind: str

    KINDS = ("spatial", "spacetime", "boundary-spacetime")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown field kind {self.kind!r}")
        self.values = np.asarray(self.values, dtype=float).ravel()

    def expected_length(self, grid: Grid) -> int:
        if self.kind == "spatial":
            return grid.num_nodes
        if self.kind == "spacetime":
            return grid.num_nodes * grid.nt
        return grid.num_boundary * grid.nt

    def validate(self, grid: Grid) -> "Field":
        if self.values.size != self.expected_length(grid):
            raise ValueError(
                f"{self.kind} field has length {self.values.size}, "
                f"expected {self.expected_length(grid)}"
            )
        return self

    def slices(self, grid: Grid) -> np.ndarray:
        """View of a space-time field as (nt, slice_length)."""
        if self.kind == "spatial":
            raise ValueError("spatial fields have no time slices")
        return self.values.reshape(grid.nt, -1)


def build_grid(n: int, nt: int, T: float = 1.0) -> Grid:
    """Validated grid with binary digit factorization for both dimensions."""
    if n < 4:
        raise ValueError(f"need at least n=4 spatial nodes per dimension, got {n}")
    if nt < 2:
        raise ValueError(f"need at least nt=2 time steps, got {nt}")
    if not T > 0:
        raise ValueError(f"final time must be positive, got {T}")
    lx = _check_power_of_two(n, "n")
    lt = _check_power_of_two(nt, "nt")
    factorization = ((2,) * lx, (2,) * lx, (2,) * lt)
    return Grid(
        n=int(n),
        nt=int(nt),
        T=float(T),
        h=1.0 / (n - 1),
        tau=float(T) / nt,
        level_factorization=factorization,
    )


@functools.lru_cache(maxsize=64)
def _coords_1d(n: int) -> np.ndarray:
    return np.linspace(0.0, 1.0, n)


def node_coords(grid: Grid) -> np.ndarray:
    """(n^2, 2) array of node coordinates, x fastest."""
    xs = _coords_1d(grid.n)
    X, Y = np.meshgrid(xs, xs, indexing="xy")
    return np.column_stack([X.ravel(), Y.ravel()])


@functools.lru_cache(maxsize=64)
def _element_nodes(n: int) -> np.ndarray:
    """(num_elements, 4) global node indices, local order (00, 10, 01, 11)."""
    ex, ey = np.meshgrid(np.arange(n - 1), np.arange(n - 1), indexing="xy")
    base = (ey * n + ex).ravel()
    return np.column_stack([base, base + 1, base + n, base + n + 1])


def _triple_1d(h: float):
    """Exact 1D element triple-product tensors on [0, h].

    Index convention (a, b, c): a is the test index, b the trial index and
    c the coefficient index; each runs over the two local hat functions.
    """
    t0 = np.empty((2, 2, 2))
    for a in range(2):
        for b in range(2):
            for c in range(2):
                s = a + b + c
                t0[a, b, c] = h / 4.0 if s in (0, 3) else h / 12.0
    g = np.array([-1.0, 1.0]) / h
    half = np.array([h / 2.0, h / 2.0])
    # gradients on (a, b): int phi_a' phi_b' phi_c
    t_ab = np.einsum("a,b,c->abc", g, g, half)
    # gradients on (a, c): int phi_a' phi_b phi_c'
    t_ac = np.einsum("a,b,c->abc", g, half, g)
    return t0, t_ab, t_ac


@functools.lru_cache(maxsize=32)
def _element_tensor(h: float, p: int, q: int) -> np.ndarray:
    """4x4x4 element tensor H_el[a, b, c] = int w_c d^p phi_a . d^q phi_b.

    Local 2D index is ax + 2*ay.  For (p, q) = (1, 0) the gradient pairs the
    test function with the coefficient, giving entries
    int (grad w . grad phi_a) phi_b; (0, 1) is its transpose.
    """
    t0, t_ab, t_ac = _triple_1d(h)

    def outer(tx, ty):
        # combine 1D factors: 2D local index a = ax + 2*ay
        full = np.einsum("ABC,abc->AaBbCc", ty, tx)
        return full.reshape(4, 4, 4)

    if (p, q) == (0, 0):
        return outer(t0, t0)
    if (p, q) == (1, 1):
        return outer(t0, t_ab) + outer(t_ab, t0)
    if (p, q) == (1, 0):
        return outer(t0, t_ac) + outer(t_ac, t0)
    if (p, q) == (0, 1):
        el = outer(t0, t_ac) + outer(t_ac, t0)
        return el.transpose(1, 0, 2).copy()
    raise ValueError(f"invalid derivative orders (p, q)=({p}, {q}); each must be 0 or 1")


def _scatter(grid: Grid, blocks: np.ndarray) -> sp.csr_matrix:
    """Assemble per-element 4x4 blocks into a global sparse matrix."""
    enodes = _element_nodes(grid.n)
    rows = np.repeat(enodes, 4, axis=1).ravel()
    cols = np.tile(enodes, (1, 4)).ravel()
    mat = sp.coo_matrix(
        (blocks.ravel(), (rows, cols)), shape=(grid.num_nodes, grid.num_nodes)
    )
    return mat.tocsr()


def assemble_mass(grid: Grid, lumped: bool = False) -> sp.csr_matrix:
    """Consistent Q1 mass matrix on the unit square, or its row-sum lumping."""
    h2 = grid.h * grid.h
    el = (h2 / 36.0) * np.array(
        [[4.0, 2.0, 2.0, 1.0], [2.0, 4.0, 1.0, 2.0], [2.0, 1.0, 4.0, 2.0], [1.0, 2.0, 2.0, 4.0]]
    )
    nel = (grid.n - 1) ** 2
    mass = _scatter(grid, np.broadcast_to(el, (nel, 4, 4)))
    if lumped:
        diag = np.asarray(mass.sum(axis=1)).ravel()
        return sp.diags(diag).tocsr()
    return mass


def assemble_stiffness(grid: Grid) -> sp.csr_matrix:
    """Q1 Laplacian with natural boundary conditions (h-independent entries)."""
    el = (1.0 / 6.0) * np.array(
        [[4.0, -1.0, -1.0, -2.0], [-1.0, 4.0, -2.0, -1.0], [-1.0, -2.0, 4.0, -1.0], [-2.0, -1.0, -1.0, 4.0]]
    )
    nel = (grid.n - 1) ** 2
    return _scatter(grid, np.broadcast_to(el, (nel, 4, 4)))


def assemble_weighted_form(grid: Grid, w, p: int, q: int) -> sp.csr_matrix:
    """Form with a nodally interpolated coefficient w.

    Entries are sum_k H(i, j, k) w_k with H the exact triple products of the
    Q1 basis: (0,0) gives the weighted mass, (1,1) the weighted stiffness,
    (1,0) the convection form int (grad w . grad phi_i) phi_j and (0,1) its
    transpose.
    """
    w = np.asarray(getattr(w, "values", w), dtype=float).ravel()
    if w.size != grid.num_nodes:
        raise ValueError(f"weight has length {w.size}, expected {grid.num_nodes}")
    el = _element_tensor(grid.h, int(p), int(q))
    wel = w[_element_nodes(grid.n)]
    blocks = np.einsum("abc,ec->eab", el, wel)
    return _scatter(grid, blocks)


def integrate(grid: Grid, f) -> float:
    """Integral of the Q1 interpolant of f over the unit square (1^T M f)."""
    f = np.asarray(getattr(f, "values", f), dtype=float).ravel()
    mass = assemble_mass(grid)
    return float(mass.dot(f).sum())


@functools.lru_cache(maxsize=64)
def boundary_node_indices(n: int) -> np.ndarray:
    """Boundary node global indices, counterclockwise starting at the origin.

    Corners appear exactly once; the path runs along y=0, x=1, y=1, x=0.
    """
    bottom = np.arange(n)
    right = np.arange(1, n) * n + (n - 1)
    top = (n - 1) * n + np.arange(n - 2, -1, -1)
    left = np.arange(n - 2, 0, -1) * n
    return np.concatenate([bottom, right, top, left])


def assemble_boundary_mass(grid: Grid, lumped: bool = False) -> sp.csr_matrix:
    """1D line mass matrix over the boundary ring in the trace basis.

    The boundary of the square is a closed polyline of 4(n-1) segments of
    length h; the trace basis is continuous piecewise linear on it.
    """
    nb = grid.num_boundary
    h = grid.h
    el = (h / 6.0) * np.array([[2.0, 1.0], [1.0, 2.0]])
    left = np.arange(nb)
    rightn = (left + 1) % nb
    rows = np.concatenate([left, left, rightn, rightn])
    cols = np.concatenate([left, rightn, left, rightn])
    vals = np.concatenate(
        [np.full(nb, el[0, 0]), np.full(nb, el[0, 1]), np.full(nb, el[1, 0]), np.full(nb, el[1, 1])]
    )
    mat = sp.coo_matrix((vals, (rows, cols)), shape=(nb, nb)).tocsr()
    if lumped:
        return sp.diags(np.asarray(mat.sum(axis=1)).ravel()).tocsr()
    return mat


def boundary_coupling(grid: Grid) -> sp.csr_matrix:
    """(n^2 x 4(n-1)) coupling int_dOmega phi_i phi_b between full and trace bases."""
    trace = assemble_boundary_mass(grid).tocoo()
    full_idx = boundary_node_indices(grid.n)
    mat = sp.coo_matrix(
        (trace.data, (full_idx[trace.row], trace.col)),
        shape=(grid.num_nodes, grid.num_boundary),
    )
    return mat.tocsr()


def boundary_mass_full(grid: Grid) -> sp.csr_matrix:
    """Boundary mass with both indices in the full nodal basis (Robin term)."""
    trace = assemble_boundary_mass(grid).tocoo()
    full_idx = boundary_node_indices(grid.n)
    mat = sp.coo_matrix(
        (trace.data, (full_idx[trace.row], full_idx[trace.col])),
        shape=(grid.num_nodes, grid.num_nodes),
    )
    return mat.tocsr()


def assemble_final_time_restriction(grid: Grid) -> sp.csr_matrix:
    """Space-time operator equal to the spatial mass on the final slice.

    Time slices are counted 1..nt, so the nonzero block sits at index nt.
    """
    mass = assemble_mass(grid)
    selector = sp.coo_matrix(
        ([1.0], ([grid.nt - 1], [grid.nt - 1])), shape=(grid.nt, grid.nt)
    )
    return sp.kron(selector, mass, format="csr")
