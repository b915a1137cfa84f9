import math

import mpmath
import numpy as np
import pytest
import scipy.sparse as sp

from mlspde.fespace import assemble_divergence, assemble_flux_mass
from mlspde.linalg import apply_essential_flux_bc, direct_solve
from mlspde.sampler import (
    MaternParams,
    NoiseVector,
    Sampler,
    assemble_spde_system,
    draw_noise,
    project_stage,
    scaling_g,
    solve_stage,
    white_noise_rhs,
)


def g_oracle(d, nu, kappa):
    """(4 pi)^(d/4) kappa^nu sqrt(Gamma(nu + d/2) / Gamma(nu)) in 50-digit arithmetic."""
    mpmath.mp.dps = 50
    nu, kappa = mpmath.mpf(nu), mpmath.mpf(kappa)
    return float((4 * mpmath.pi) ** (mpmath.mpf(d) / 4) * kappa**nu * mpmath.sqrt(mpmath.gamma(nu + mpmath.mpf(d) / 2) / mpmath.gamma(nu)))


# frozen from g_oracle
G_3D_HALF = 5.0132565492620005
G_2D_ONE = 3.5449077018110318


def test_scaling_constant_values():
    assert g_oracle(3, 0.5, 1.0) == pytest.approx(G_3D_HALF, rel=1e-15)
    assert g_oracle(2, 1.0, 1.0) == pytest.approx(math.sqrt(4 * math.pi), rel=1e-15)
    assert scaling_g(MaternParams(1.0, 1.0, 3)) == pytest.approx(G_3D_HALF, rel=1e-13)
    assert scaling_g(MaternParams(1.0, 1.0, 2)) == pytest.approx(G_2D_ONE, rel=1e-13)
    assert round(G_3D_HALF, 4) == 5.0133


@pytest.mark.parametrize("d,kappa", [(2, 0.7), (3, 4.0), (2, 14.0)])
def test_scaling_constant_against_oracle_and_homogeneity(d, kappa):
    p = MaternParams(1.0, kappa, d)
    assert p.g == pytest.approx(g_oracle(d, p.nu, kappa), rel=1e-12)
    assert MaternParams(1.0, 3 * kappa, d).g == pytest.approx(3**p.nu * p.g, rel=1e-13)


def test_correlation_length_mapping():
    p = MaternParams.from_correlation_length(1.0, 0.2, 2)
    assert p.nu == 1.0 and p.alpha == 2.0
    assert p.kappa == pytest.approx(math.sqrt(8) / 0.2)
    assert p.correlation_length == pytest.approx(0.2)
    assert MaternParams.from_correlation_length(2.0, 0.5, 3).kappa == pytest.approx(4.0)


def test_white_noise_rhs_small_cases():
    W = np.array([4.0, 9.0])
    np.testing.assert_allclose(white_noise_rhs(W, NoiseVector(0, np.array([1.0, -1.0])), 1.0), [-2.0, 3.0])
    np.testing.assert_array_equal(white_noise_rhs(W, NoiseVector(0, np.zeros(2)), 2.0), 0.0)


def test_white_noise_covariance_monte_carlo():
    W = np.array([0.5, 2.0, 0.1])
    g = 1.7
    F = np.array([white_noise_rhs(W, draw_noise(3, 5, (i,)), g) for i in range(100_000)])
    cov = np.cov(F.T)
    target = g**2 * np.diag(W)
    n = len(F)
    # SE of a sample covariance entry for Gaussians: sqrt((s_ii s_jj + s_ij^2) / n)
    se = np.sqrt((np.outer(np.diag(target), np.diag(target)) + target**2) / n)
    assert np.all(np.abs(cov - target) <= 5 * se)


def test_noise_streams_are_reproducible_and_distinct():
    a = draw_noise(100, 42, (1, 7))
    b = draw_noise(100, 42, (1, 7))
    assert a.xi.tobytes() == b.xi.tobytes()
    assert not np.array_equal(draw_noise(100, 42, (1, 8)).xi, a.xi)
    assert not np.array_equal(draw_noise(100, 43, (1, 7)).xi, a.xi)
    assert draw_noise(100, 42, (1, 7)).metadata()["stream"] == [1, 7]


def _direct_system(hier, level, params):
    """Sampler system assembled on the level's own embedding mesh, no Galerkin."""
    lev = hier[level]
    M = assemble_flux_mass(lev.flux_bar)
    B = assemble_divergence(lev.flux_bar, lev.scalar_bar)
    W = lev.mesh_bar.cell_volumes
    return M, B, sp.diags(-params.kappa**2 * W)


@pytest.mark.parametrize("level", [1, 2])
def test_galerkin_coarse_system_matches_direct(hier2d, level):
    p = MaternParams(1.0, 5.0, 2)
    s = assemble_spde_system(hier2d, level, p)
    M, B, C = _direct_system(hier2d, level, p)
    assert abs(s.M - M).max() < 1e-12
    assert abs(s.B - B).max() < 1e-12
    assert abs(s.C - C).max() < 1e-12


def test_system_symmetry_and_kappa_scaling(hier2d):
    p = MaternParams(1.0, 5.0, 2)
    A = assemble_spde_system(hier2d, 1, p).matrix()
    assert abs(A - A.T).max() < 1e-14
    s1 = assemble_spde_system(hier2d, 1, p)
    s2 = assemble_spde_system(hier2d, 1, MaternParams(1.0, 10.0, 2))
    assert abs(s2.C - 4.0 * s1.C).max() < 1e-12


def test_zero_noise_gives_zero_fields(sampler2d):
    r = sampler2d.sample(0, NoiseVector(0, np.zeros(sampler2d.hierarchy[0].mesh_bar.n_cells)))
    assert not r.theta_bar.any() and not r.theta.any()
    fine, coarse = sampler2d.sample_pair(0, NoiseVector(0, np.zeros(sampler2d.hierarchy[0].mesh_bar.n_cells)))
    assert not fine.theta.any() and not coarse.theta.any()


@pytest.mark.parametrize("level", [0, 1, 2])
def test_hybridized_sampler_matches_direct(sampler2d, level):
    noise = sampler2d.noise(level, 3, (level, 0))
    r = sampler2d.sample(level, noise)
    s = sampler2d.system(level)
    ref = direct_solve(s.with_rhs(f_p=sampler2d.rhs(level, noise)))
    assert np.abs(r.theta_bar - ref[s.n_u:]).max() <= 1e-8 * np.abs(ref).max()
    assert np.abs(r.u_bar - ref[: s.n_u]).max() <= 1e-8 * np.abs(ref).max()


def test_two_level_identity(sampler2d):
    h = sampler2d.hierarchy
    for level in (0, 1):
        noise = sampler2d.noise(level, 11, (level, 4))
        fine, coarse = sampler2d.sample_pair(level, noise)
        sf, sc = sampler2d.system(level), sampler2d.system(level + 1)
        F = sampler2d.rhs(level, noise)
        Uf = direct_solve(sf.with_rhs(f_p=F))
        Pb = h.Pbar(level)
        Fc = h.pairs_bar[level].P_theta.T @ F
        Uc = direct_solve(sc.with_rhs(f_p=Fc))
        rel = lambda a, b: np.abs(a - b).max() / np.abs(b).max()
        assert rel(np.concatenate([coarse.u_bar, coarse.theta_bar]), Uc) <= 1e-8
        assert rel(np.concatenate([fine.u_bar, fine.theta_bar]), Uf) <= 1e-8
        # correction is orthogonal to the coarse space in the fine operator
        dU = np.concatenate([fine.u_bar, fine.theta_bar]) - Pb @ np.concatenate([coarse.u_bar, coarse.theta_bar])
        res = Pb.T @ (sf.matrix() @ dU)
        free = np.concatenate([sc.free, sc.n_u + np.arange(sc.n_p)])
        assert np.abs(res[free]).max() <= 1e-8 * np.abs(Pb.T @ (sf.matrix() @ Uf)).max()


def test_sampler_mean_is_zero(hier2d):
    s = Sampler(hier2d, MaternParams.from_correlation_length(1.0, 0.3, 2), solver="hybrid-direct")
    n = 2000
    T = np.array([s.sample(2, s.noise(2, 9, (2, i))).theta_bar for i in range(n)])
    se = T.std(axis=0, ddof=1) / math.sqrt(n)
    assert np.all(np.abs(T.mean(axis=0)) <= 4 * se)


def test_stage_names_and_timer(sampler2d):
    sampler2d.sample(1, sampler2d.noise(1, 0, (1, 0)))
    assert solve_stage(1) in sampler2d.timer.stages and project_stage(1) in sampler2d.timer.stages
    assert "Preconditioner Set-up" in sampler2d.timer.stages


def test_dimension_mismatch_rejected(hier2d):
    with pytest.raises(ValueError, match="dimension"):
        Sampler(hier2d, MaternParams(1.0, 1.0, 3))


def test_sample_pair_on_coarsest_rejected(sampler2d):
    with pytest.raises(ValueError, match="coarser"):
        sampler2d.sample_pair(2, sampler2d.noise(2, 0, (2, 0)))


def test_three_dimensional_direct_agreement(hier3d):
    s = Sampler(hier3d, MaternParams.from_correlation_length(1.0, 0.5, 3), rtol=1e-12, atol=1e-14)
    for level in (0, 1):
        noise = s.noise(level, 1, (level, 0))
        r = s.sample(level, noise)
        sysm = s.system(level)
        ref = direct_solve(sysm.with_rhs(f_p=s.rhs(level, noise)))
        assert np.abs(r.theta_bar - ref[sysm.n_u:]).max() <= 1e-8 * np.abs(ref).max()
