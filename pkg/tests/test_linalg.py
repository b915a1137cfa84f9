import numpy as np
import pytest
import scipy.sparse as sp

from mlspde.fespace import FluxSpace, ScalarSpace, assemble_divergence, assemble_flux_mass, assemble_scalar_mass
from mlspde.linalg import (
    NonConvergenceError,
    SaddleSystem,
    SolverError,
    apply_essential_flux_bc,
    build_block_ldu,
    direct_solve,
    gmres,
    hybridize,
    make_inverse,
    pcg,
)
from mlspde.mesh import build_simplicial_mesh, build_structured_mesh


def sampler_system(mesh, kappa=3.0, seed=0):
    fs = FluxSpace(mesh)
    w = mesh.cell_volumes
    M = assemble_flux_mass(fs)
    B = assemble_divergence(fs, ScalarSpace(mesh))
    rng = np.random.default_rng(seed)
    s = SaddleSystem(M, B, sp.diags(-kappa**2 * w).tocsr(), np.zeros(mesh.n_facets), rng.standard_normal(mesh.n_cells),
                     variant="sampler", space=fs, reaction=kappa**2 * w)
    return apply_essential_flux_bc(s, mesh.boundary_facets, 0.0)


def darcy_system(mesh, k):
    fs = FluxSpace(mesh)
    M = assemble_flux_mass(fs, 1.0 / k)
    B = assemble_divergence(fs, ScalarSpace(mesh))
    f = np.zeros(mesh.n_facets)
    f[mesh.facets_on("x0")] = -mesh.facet_measures[mesh.facets_on("x0")] * mesh.boundary_orientation[mesh.facets_on("x0")]
    s = SaddleSystem(M, B, None, f, np.zeros(mesh.n_cells), space=fs)
    side = np.concatenate([mesh.facets_on(n) for n in mesh.markers if n[0] != "x"])
    return apply_essential_flux_bc(s, side, 0.0)


def box(n, d=2):
    return build_structured_mesh([(0.0, 1.0)] * d, [n] * d)


def test_direct_trivial_and_random(rng):
    np.testing.assert_allclose(direct_solve(sp.eye(3), [1.0, 2, 3]), [1, 2, 3])
    np.testing.assert_allclose(direct_solve(sp.diags([2.0, 4.0]), [2.0, 8.0]), [1, 2])
    Q = rng.standard_normal((50, 50))
    A = Q @ Q.T + 50 * np.eye(50)
    b = rng.standard_normal(50)
    x = direct_solve(sp.csr_matrix(A), b)
    assert np.linalg.norm(A @ x - b) / np.linalg.norm(b) < 1e-12


def test_direct_singular_raises():
    with pytest.raises(SolverError):
        direct_solve(sp.csr_matrix(np.zeros((2, 2))), [1.0, 1.0])


def test_pcg_zero_rhs_and_jacobi():
    x, its = pcg(sp.eye(4), np.zeros(4))
    assert its == 0 and not x.any()
    A = sp.diags([1.0, 5.0, 9.0])
    x, its = pcg(A, np.ones(3), make_inverse(A, "jacobi"))
    assert its == 1
    np.testing.assert_allclose(x, [1, 0.2, 1 / 9])


def test_pcg_reports_nonconvergence(rng):
    Q = rng.standard_normal((30, 30))
    A = sp.csr_matrix(Q @ Q.T + np.eye(30))
    with pytest.raises(NonConvergenceError) as info:
        pcg(A, np.ones(30), maxit=2)
    assert info.value.iterations == 2


def test_gmres_identity_one_iteration():
    _, its = gmres(sp.eye(5), np.arange(1.0, 6.0))
    assert its == 1


def test_gmres_stopping_rule(rng):
    A = sp.csr_matrix(np.eye(40) * 3 + 0.3 * rng.standard_normal((40, 40)))
    b = rng.standard_normal(40)
    x, _ = gmres(A, b, restart=7)
    assert np.linalg.norm(A @ x - b) <= max(1e-6 * np.linalg.norm(b), 1e-12)


@pytest.mark.parametrize("kind", ["direct", "amg", "ilu", "jacobi"])
def test_inverse_kinds_are_linear(kind, rng):
    A = darcy_system(box(6), 1.0).blocks()[0]
    P = make_inverse(A, kind)
    r = rng.standard_normal(A.shape[0])
    np.testing.assert_allclose(P(2.5 * r), 2.5 * P(r), rtol=1e-12, atol=1e-12)


def test_essential_bc_zeroes_boundary_and_is_idempotent():
    m = box(3)
    s = sampler_system(m)
    again = apply_essential_flux_bc(s, m.boundary_facets, 0.0)
    np.testing.assert_array_equal(again.fixed, s.fixed)
    assert abs(again.matrix() - s.matrix()).max() == 0
    u = direct_solve(s)[: s.n_u]
    assert not u[m.boundary_facets].any()


def test_one_cell_sampler_system_matches_dense():
    m = box(1)
    s = sampler_system(m)
    x = direct_solve(s)
    # all flux dofs are fixed to 0: -kappa^2 |K| theta = f_p
    assert x[-1] == pytest.approx(s.f_p[0] / (-9.0))


@pytest.mark.parametrize("mesh", [box(1), box(2), box(4), build_simplicial_mesh("unit_square:2"),
                                  build_structured_mesh([(0, 1)] * 3, [2, 2, 2])], ids=["1", "2x2", "4x4", "tri", "hex"])
def test_hybridization_matches_monolithic(mesh):
    s = sampler_system(mesh)
    h = hybridize(s)
    assert h.n_multipliers == len(np.setdiff1d(np.flatnonzero(mesh.facet_cells[:, 1] >= 0), s.fixed))
    ref = direct_solve(s)
    for method in ("direct", "pcg"):
        h.set_solver(method, "amg", rtol=1e-14, atol=1e-15)
        u, th = h.solve()
        assert np.abs(np.concatenate([u, th]) - ref).max() <= 1e-10 * np.abs(ref).max()


def test_reduced_operator_matches_dense_formula():
    h = hybridize(sampler_system(box(2)))
    np.testing.assert_allclose(h.H.toarray(), h.dense_H(), atol=1e-12)
    H = h.H.toarray()
    assert np.allclose(H, H.T) and np.all(np.linalg.eigvalsh(H) > 0)


def test_hybridization_rejects_darcy_and_zero_reaction():
    with pytest.raises(SolverError):
        hybridize(darcy_system(box(2), 1.0))
    s = sampler_system(box(2), kappa=0.0)
    with pytest.raises(SolverError, match="kappa"):
        hybridize(s)


def test_warm_start_from_exact_solution_converges_immediately():
    s = sampler_system(box(4))
    h = hybridize(s).set_solver("pcg", "amg", rtol=1e-8)
    u, th = h.solve()
    *_, its = h.solve_info(x0=(u, th))
    assert its <= 1


def _schur_dense(s):
    M, B, *_ = s.blocks()
    return B.toarray() @ np.diag(1.0 / M.diagonal()) @ B.T.toarray()


def test_schur_approximation_two_cells():
    m = build_structured_mesh([(0, 2), (0, 1)], [2, 1])
    s = darcy_system(m, 1.0)
    P = build_block_ldu(s, schur_solver="direct")
    np.testing.assert_allclose(P.S_tilde.toarray(), _schur_dense(s), atol=1e-14)
    np.testing.assert_allclose(P.S_tilde @ np.ones(2), _schur_dense(s) @ np.ones(2), atol=1e-14)


@pytest.mark.parametrize("variant", ["ldu", "diag", "lower", "upper"])
def test_block_preconditioner_is_linear(variant, rng):
    s = darcy_system(box(4), np.exp(rng.standard_normal(16)))
    P = build_block_ldu(s, variant=variant)
    r = rng.standard_normal(s.shape[0])
    np.testing.assert_allclose(P(-3.0 * r), -3.0 * P(r), rtol=1e-12, atol=1e-12)


def test_exact_ldu_needs_at_most_two_iterations(rng):
    s = darcy_system(box(8), np.exp(rng.standard_normal(64)))
    _, its = gmres(s.matrix(), s.rhs(), build_block_ldu(s, exact=True))
    assert its <= 2


@pytest.mark.parametrize("schur", ["direct", "amg"])
def test_gmres_ldu_matches_direct_on_darcy_grid(schur, rng):
    s = darcy_system(box(8), np.exp(rng.standard_normal(64)))
    ref = direct_solve(s)
    x, its = gmres(s.matrix(), s.rhs(), build_block_ldu(s, schur_solver=schur), rtol=1e-11, atol=1e-14)
    assert np.abs(x - ref).max() <= 1e-8 * np.abs(ref).max()
    assert its < 60
