import numpy as np
import pytest
import scipy.sparse as sp

from mgpde.fem import (ConvergenceError, SparseMatrix, assemble, dirichlet_nodes, fem_solution, solve_cg,
                       solve_field, stiffness)
from mgpde.problem import BoundaryMasks, GridSpec, diffusivity_field, energy_loss, resample_field
from mgpde.tensor import Tensor


def linear(grid):
    return 1.0 - np.broadcast_to(grid.coords(), grid.shape)


def test_unit_nu_rows_sum_to_zero():
    K = stiffness(np.ones((8, 8)), GridSpec(8)).to_scipy()
    assert np.max(np.abs(K @ np.ones(64))) < 1e-13


def test_bilinear_interior_diagonal_is_eight_thirds():
    # interior node of a uniform bilinear mesh touches four elements, 2/3 each
    g = GridSpec(4)
    K = stiffness(np.ones(g.shape), g)
    interior = 1 * 4 + 1
    assert K.diagonal()[interior] == pytest.approx(8.0 / 3.0, rel=1e-14)


def test_hand_element_matrix():
    # element stiffness of the unit square for nu = 1, assembled by hand
    ke = np.array([[4, -1, -2, -1], [-1, 4, -1, -2], [-2, -1, 4, -1], [-1, -2, -1, 4]]) / 6.0
    g = GridSpec(4)
    K = stiffness(np.ones(g.shape), g).dense()
    # nodes (y, x) = (0,0),(0,1),(1,1),(1,0) of the corner element, flat ids y*4+x
    ids = [0, 1, 5, 4]
    corner = np.array([[K[i, j] for j in ids] for i in ids])
    # the corner node 0 belongs to one element only; its row restricted to the element equals ke
    assert np.allclose(corner[0], ke[0], rtol=0, atol=1e-14)


@pytest.mark.parametrize("rank", [2, 3])
def test_assembled_system_is_symmetric_with_unit_dirichlet_rows(rank, rng):
    g = GridSpec(8, rank)
    K, rhs = assemble(diffusivity_field(rng.uniform(-3, 3, 4), g), g)
    assert K.symmetric and K.asymmetry() == 0.0
    bid, bval = dirichlet_nodes(g)
    d = K.dense()
    assert np.array_equal(d[bid][:, bid], np.eye(bid.size))
    keep = np.setdiff1d(np.arange(K.n), bid)
    assert np.all(d[np.ix_(keep, bid)] == 0) and np.all(K.diagonal() > 0)
    assert np.array_equal(rhs[bid], bval)


def test_non_positive_nu_rejected():
    nu = np.ones((8, 8))
    nu[3, 3] = 0.0
    with pytest.raises(ValueError, match="positive"):
        assemble(nu, GridSpec(8))


def test_cg_identity_one_iteration(rng):
    b = rng.standard_normal(20)
    x, info = solve_cg(SparseMatrix.from_scipy(sp.identity(20), True), b, return_info=True)
    assert info["iterations"] == 1 and np.allclose(x, b, rtol=0, atol=1e-15)


def test_cg_random_spd_matches_dense_solver(rng):
    A = rng.standard_normal((50, 50))
    A = A @ A.T + 50 * np.eye(50)
    b = rng.standard_normal(50)
    x = solve_cg(SparseMatrix.from_scipy(A, True), b, tol=1e-13)
    assert np.max(np.abs(x - np.linalg.solve(A, b))) < 1e-8


def test_cg_reports_non_convergence(rng):
    A = rng.standard_normal((40, 40))
    A = A @ A.T + 1e-3 * np.eye(40)
    with pytest.raises(ConvergenceError) as err:
        solve_cg(SparseMatrix.from_scipy(A, True), rng.standard_normal(40), tol=1e-14, max_iter=3)
    assert err.value.iterations == 3 and err.value.residual > 1e-14


def test_cg_jacobi_agrees(rng):
    g = GridSpec(16)
    nu = diffusivity_field(rng.uniform(-3, 3, 4), g)
    a = solve_field(nu, g)
    b = solve_field(nu, g, jacobi=True)
    assert np.max(np.abs(a - b)) < 1e-9


@pytest.mark.parametrize("n", [32, 64])
def test_unit_nu_reproduces_linear_solution(n):
    g = GridSpec(n)
    assert np.max(np.abs(fem_solution(np.zeros(4), g) - linear(g))) < 1e-10


def test_faces_exact_for_any_omega(rng):
    g = GridSpec(16)
    u = fem_solution(rng.uniform(-3, 3, 4), g)
    assert np.all(u[..., 0] == 1.0) and np.all(u[..., -1] == 0.0)


def test_spd_and_maximum_principle(rng):
    g = GridSpec(16)
    bid, _ = dirichlet_nodes(g)
    for _ in range(50):
        w = rng.uniform(-3, 3, 4)
        K, rhs = assemble(diffusivity_field(w, g), g)
        x = rng.standard_normal(K.n)
        x[bid] = 0.0
        assert x @ K.matvec(x) > 0
        u = solve_cg(K, rhs, tol=1e-12)
        assert u.min() >= -1e-9 and u.max() <= 1 + 1e-9


def test_refinement_consistency(rng):
    w = rng.uniform(-3, 3, 4)
    fine = GridSpec(64)
    ref = fem_solution(w, fine)
    errs = []
    for n in (16, 32):
        g = GridSpec(n)
        u = resample_field(fem_solution(w, g), g, fine)
        errs.append(np.linalg.norm(u - ref))
    assert errs[0] > errs[1]


def test_quadratic_form_matches_energy_with_boundary_terms(rng):
    # 2 J(u) = u_I K_II u_I + 2 u_I K_IB u_B + u_B K_BB u_B, with the reduced system carrying K_IB u_B
    g = GridSpec(8)
    nu = diffusivity_field(rng.uniform(-3, 3, 4), g)
    Kr, rhs = assemble(nu, g)
    Kf = stiffness(nu, g).to_scipy()
    bid, bval = dirichlet_nodes(g)
    interior = np.setdiff1d(np.arange(Kr.n), bid)
    for _ in range(20):
        u = rng.standard_normal(g.shape)
        u.ravel()[bid] = bval
        uf = u.ravel()
        uI, uB = uf[interior], uf[bid]
        quad = uI @ Kr.to_scipy()[interior][:, interior] @ uI - 2 * uI @ rhs[interior]
        quad += uB @ Kf[bid][:, bid] @ uB
        J = energy_loss(Tensor(u), nu, g).item()
        assert abs(2 * J - quad) <= 1e-12 * abs(quad)


def test_solution_is_deterministic(rng):
    w = rng.uniform(-3, 3, 4)
    g = GridSpec(16)
    assert fem_solution(w, g).tobytes() == fem_solution(w, g).tobytes()
