"""Reference finite element solver for the variable-coefficient Laplace problem.

Bilinear (trilinear) elements on the uniform nodal grid, 2-point Gauss rule per
axis, symmetric Dirichlet elimination, unpreconditioned conjugate gradients.
The element matrices are built from explicit reference shape functions and do
not share code with :func:`mgpde.problem.energy_loss`, which they validate.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .problem import BoundaryMasks, GridSpec, diffusivity_field


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


@dataclass
class SparseMatrix:
    """Compressed sparse row matrix (storage backed by ``scipy.sparse``)."""

    n: int
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray
    symmetric: bool = False

    @classmethod
    def from_scipy(cls, m, symmetric: bool = False) -> "SparseMatrix":
        m = sp.csr_matrix(m)
        m.sum_duplicates()
        m.sort_indices()
        return cls(m.shape[0], m.indptr, m.indices, m.data, symmetric)

    def to_scipy(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.data, self.indices, self.indptr), shape=(self.n, self.n))

    def matvec(self, x: np.ndarray) -> np.ndarray:
        return self.to_scipy() @ x

    def diagonal(self) -> np.ndarray:
        return self.to_scipy().diagonal()

    def dense(self) -> np.ndarray:
        return self.to_scipy().toarray()

    def asymmetry(self) -> float:
        m = self.to_scipy()
        d = (m - m.T).tocoo()
        return float(np.abs(d.data).max()) if d.nnz else 0.0


def _reference_element(rank: int):
    """Shape values and reference gradients at the 2^rank Gauss points.

    Local node ``a`` has per-axis offsets ``corners[a]`` in {0, 1}; returns
    ``phi[q, a]`` and ``dphi[q, a, d]`` on the reference cube [-1, 1]^rank.
    """
    g = 1.0 / np.sqrt(3.0)
    corners = list(itertools.product((0, 1), repeat=rank))
    points = list(itertools.product((-g, g), repeat=rank))
    nq, na = len(points), len(corners)
    phi = np.zeros((nq, na))
    dphi = np.zeros((nq, na, rank))
    for q, xi in enumerate(points):
        for a, c in enumerate(corners):
            s = [1.0 if ci else -1.0 for ci in c]
            factors = [(1.0 + s[j] * xi[j]) / 2.0 for j in range(rank)]
            phi[q, a] = np.prod(factors)
            for d in range(rank):
                others = np.prod([factors[j] for j in range(rank) if j != d])
                dphi[q, a, d] = s[d] / 2.0 * others
    return corners, phi, dphi


def _element_connectivity(grid: GridSpec, corners) -> np.ndarray:
    """Global node ids (n_el, 2^rank) in row-major order over grid.shape."""
    n = grid.resolution
    ids = np.arange(n**grid.rank).reshape(grid.shape)
    cols = []
    for c in corners:
        sl = tuple(slice(ci, ci + n - 1) for ci in c)
        cols.append(ids[sl].ravel())
    return np.stack(cols, axis=1)


def stiffness(nu: np.ndarray, grid: GridSpec) -> SparseMatrix:
    """Unreduced stiffness ``K_ij = int nu grad(phi_i) . grad(phi_j)``."""
    nu = np.asarray(nu, dtype=np.float64).reshape(grid.shape)
    if np.any(nu <= 0):
        raise ValueError("stiffness: nodal nu must be strictly positive")
    corners, phi, dphi = _reference_element(grid.rank)
    conn = _element_connectivity(grid, corners)
    nu_q = nu.ravel()[conn] @ phi.T  # (n_el, nq)
    G = np.einsum("qad,qbd->qab", dphi, dphi)
    scale = (grid.h / 2.0) ** (grid.rank - 2)
    ke = scale * np.einsum("eq,qab->eab", nu_q, G)
    rows = np.repeat(conn, conn.shape[1], axis=1).ravel()
    cols = np.tile(conn, (1, conn.shape[1])).ravel()
    ndof = grid.resolution**grid.rank
    K = sp.coo_matrix((ke.ravel(), (rows, cols)), shape=(ndof, ndof)).tocsr()
    K = 0.5 * (K + K.T)  # duplicate summation order differs between (i, j) and (j, i)
    return SparseMatrix.from_scipy(K, symmetric=True)


def load_vector(f: np.ndarray, grid: GridSpec) -> np.ndarray:
    """``int f phi_i`` for a nodal source ``f``."""
    corners, phi, _ = _reference_element(grid.rank)
    conn = _element_connectivity(grid, corners)
    f_q = np.asarray(f, dtype=np.float64).ravel()[conn] @ phi.T
    fe = (grid.h / 2.0) ** grid.rank * f_q @ phi  # (n_el, na)
    out = np.zeros(grid.resolution**grid.rank)
    np.add.at(out, conn.ravel(), fe.ravel())
    return out


def dirichlet_nodes(grid: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """(flat Dirichlet node ids, their prescribed values)."""
    masks = BoundaryMasks(grid)
    ids = np.flatnonzero(masks.chi_b.ravel())
    return ids, masks.u_bc.ravel()[ids]


def assemble(nu: np.ndarray, grid: GridSpec, forcing: np.ndarray | None = None):
    """Stiffness system with Dirichlet DOFs eliminated symmetrically.

    Returns ``(K, rhs)``: Dirichlet rows/columns of ``K`` are zero except a unit
    diagonal, and ``rhs`` carries the lifted boundary values.
    """
    K = stiffness(nu, grid).to_scipy()
    n = K.shape[0]
    bid, bval = dirichlet_nodes(grid)
    g = np.zeros(n)
    g[bid] = bval
    rhs = -(K @ g)
    if forcing is not None:
        rhs += load_vector(forcing, grid)
    keep = np.ones(n)
    keep[bid] = 0.0
    P = sp.diags(keep)
    unit = np.zeros(n)
    unit[bid] = 1.0
    Kr = (P @ K @ P + sp.diags(unit)).tocsr()
    rhs[bid] = bval
    return SparseMatrix.from_scipy(Kr, symmetric=True), rhs


def solve_cg(
    K: SparseMatrix,
    rhs: np.ndarray,
    tol: float = 1e-12,
    max_iter: int | None = None,
    jacobi: bool = False,
    x0: np.ndarray | None = None,
    return_info: bool = False,
):
    """Conjugate gradients until ``||K x - rhs|| / ||rhs|| <= tol``.

    Raises :class:`ConvergenceError` (carrying the final relative residual) when
    ``max_iter`` is exhausted.
    """
    if tol <= 0:
        raise ValueError("solve_cg: tol must be positive")
    A = K.to_scipy()
    b = np.asarray(rhs, dtype=np.float64)
    n = b.size
    max_iter = 10 * n if max_iter is None else max_iter
    bnorm = np.linalg.norm(b)
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=np.float64)
    if bnorm == 0.0:
        return (x, {"iterations": 0, "residual": 0.0}) if return_info else x
    r = b - A @ x
    dinv = 1.0 / A.diagonal() if jacobi else None
    z = r * dinv if jacobi else r
    p = z.copy()
    rz = r @ z
    res = np.linalg.norm(r) / bnorm
    it = 0
    while res > tol:
        if it >= max_iter:
            raise ConvergenceError(
                f"CG did not converge in {max_iter} iterations (relative residual {res:.3e})", res, it
            )
        Ap = A @ p
        alpha = rz / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        it += 1
        res = np.linalg.norm(r) / bnorm
        z = r * dinv if jacobi else r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    return (x, {"iterations": it, "residual": res}) if return_info else x


def fem_solution(omega, grid: GridSpec, tol: float = 1e-12, jacobi: bool = False) -> np.ndarray:
    """Nodal FEM solution for diffusivity parameter ``omega`` on ``grid``."""
    nu = diffusivity_field(omega, grid)
    return solve_field(nu, grid, tol=tol, jacobi=jacobi)


def solve_field(nu: np.ndarray, grid: GridSpec, tol: float = 1e-12, jacobi: bool = False) -> np.ndarray:
    K, rhs = assemble(nu, grid)
    u = solve_cg(K, rhs, tol=tol, jacobi=jacobi).reshape(grid.shape)
    # elimination makes Dirichlet rows exact; pin them to the bit
    bid, bval = dirichlet_nodes(grid)
    u.ravel()[bid] = bval
    return u
