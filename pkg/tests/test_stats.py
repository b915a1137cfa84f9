import math

import mpmath
import numpy as np
import pytest

from mlspde.mesh import build_structured_mesh
from mlspde.stats import (
    CovarianceProbe,
    empirical_covariance,
    interior_probe_pairs,
    matern_cov,
    probe_summary,
    variance_field,
    variance_se,
)

K1_AT_1 = 0.6019072301972346  # mpmath.besselk(1, 1)


def test_matern_closed_forms():
    assert matern_cov(0.0, 2.5, 3.0, 1.0) == 2.5
    assert matern_cov(0.5, 1.0, 2.0, 0.5) == pytest.approx(math.exp(-1), rel=1e-14)
    assert matern_cov(1.0, 1.0, 1.0, 1.0) == pytest.approx(K1_AT_1, rel=1e-14)
    assert float(mpmath.besselk(1, 1)) == pytest.approx(K1_AT_1, rel=1e-15)


@pytest.mark.parametrize("nu", [0.5, 1.0, 1.5])
def test_matern_matches_mpmath(nu):
    r = np.array([0.05, 0.3, 1.0, 4.0])
    mpmath.mp.dps = 30
    ref = [float(mpmath.mpf(1) / (2 ** (nu - 1) * mpmath.gamma(nu)) * (2.0 * x) ** nu * mpmath.besselk(nu, 2.0 * x)) for x in r]
    np.testing.assert_allclose(matern_cov(r, 1.0, 2.0, nu), ref, rtol=1e-12)


def test_matern_rejects_negative_distances():
    with pytest.raises(ValueError):
        matern_cov(-1.0, 1.0, 1.0, 1.0)


@pytest.fixture(scope="module")
def grid():
    return build_structured_mesh([(0, 1), (0, 1)], [4, 4])


def test_empirical_covariance_of_white_noise(grid):
    S = np.random.default_rng(0).standard_normal((4000, grid.n_cells))
    pts = grid.cell_centroids
    probe = CovarianceProbe(pts[:8], pts[8:16])
    out = empirical_covariance(S, probe, grid, reference=lambda r: np.zeros_like(r))
    assert np.all(np.abs(out.z_scores()) <= 3.5)
    var = empirical_covariance(S, CovarianceProbe(pts[:3], pts[:3]), grid, reference=lambda r: np.ones_like(r))
    assert np.all(np.abs(var.z_scores()) <= 3.5)


def test_constant_realizations_have_zero_covariance(grid):
    S = np.full((10, grid.n_cells), 3.0)
    pts = grid.cell_centroids
    out = empirical_covariance(S, CovarianceProbe(pts[:2], pts[2:4]), grid)
    assert not out.cov.any()
    assert not variance_field(S).any()


def test_variance_field_iid(grid):
    S = 2.0 * np.random.default_rng(5).standard_normal((3000, grid.n_cells))
    v, se = variance_field(S), variance_se(S)
    assert np.all(np.abs(v - 4.0) <= 4 * se)
    with pytest.raises(ValueError):
        variance_field(S[:1])


def test_probe_outside_mesh_rejected(grid):
    S = np.zeros((3, grid.n_cells))
    with pytest.raises(ValueError, match="outside"):
        empirical_covariance(S, CovarianceProbe([[5.0, 5.0]], [[0.5, 0.5]]), grid)


def test_probe_design(grid):
    p = interior_probe_pairs([0, 0], [1, 1], 20, 0.4, seed=2, inset=0.1, snap_to=grid)
    assert len(p.x) == 20 and p.distance[0] == 0.0
    assert np.all((p.x >= 0) & (p.x <= 1)) and np.all((p.y >= 0) & (p.y <= 1))
    centroids = {tuple(c) for c in np.round(grid.cell_centroids, 12)}
    assert all(tuple(c) in centroids for c in np.round(p.x, 12))
    q = interior_probe_pairs([0, 0], [1, 1], 5, 0.3, seed=1, include_zero=False)
    np.testing.assert_allclose(q.distance, np.linspace(0.06, 0.3, 5))


def test_summary_rule():
    p = CovarianceProbe(np.zeros((20, 2)), np.zeros((20, 2)), np.zeros(20), np.ones(20), np.zeros(20))
    p.cov[0] = 4.0
    assert probe_summary(p)["passed"] and probe_summary(p)["n_outside"] == 1
    p.cov[1] = -4.0
    assert not probe_summary(p)["passed"]
