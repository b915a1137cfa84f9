import math

import numpy as np
import pytest

from mlspde.darcy import DarcyModel
from mlspde.mlmc import (
    DarcyMlmcProblem,
    MlmcError,
    RunningStats,
    fit_rate,
    mc_estimate,
    optimal_allocation,
    predicted_cost_order,
    run_adaptive_mlmc,
)
from mlspde.pipeline import _solver_opts
from mlspde.config import resolve
from mlspde.darcy import qoi_effective_permeability


def test_running_stats_small_cases():
    s = RunningStats()
    for x in (1.0, 2.0, 3.0):
        s.push(x)
    assert (s.mean, s.variance) == (2.0, 1.0)
    c = RunningStats()
    for _ in range(5):
        c.push(0.3)
    assert c.variance == 0.0


def test_running_stats_clt_bound():
    x = np.random.default_rng(1).standard_normal(10_000)
    s = RunningStats()
    for v in x:
        s.push(v)
    assert abs(s.mean) <= 4 / math.sqrt(10_000)
    assert s.variance == pytest.approx(x.var(ddof=1), rel=1e-12)


def test_mc_estimate():
    m, v, se = mc_estimate([1.0, 2.0, 3.0])
    assert (m, v) == (2.0, 1.0) and se == pytest.approx(1 / math.sqrt(3))
    with pytest.raises(ValueError):
        mc_estimate([])


def test_allocation_hand_values():
    # sum sqrt(VC) = 3; N = 3 * sqrt(V/C) / eps2 = (3, 1.5)
    assert optimal_allocation([1, 1], [1, 4], 1.0).tolist() == [3, 2]
    assert optimal_allocation([2.0, 2.0], [5.0, 5.0], 0.3).tolist()[0] == optimal_allocation([2.0, 2.0], [5.0, 5.0], 0.3).tolist()[1]
    assert optimal_allocation([1e-9, 1e-9], [1, 1], 1.0, min_samples=4).tolist() == [4, 4]


def test_allocation_rejects_bad_input():
    for V, C, e in (([1], [1, 2], 1.0), ([1], [0], 1.0), ([-1], [1], 1.0), ([1], [1], 0.0)):
        with pytest.raises(ValueError):
            optimal_allocation(V, C, e)


def test_rate_fit_and_cost_order():
    assert fit_rate([1.0, 2.0, 4.0, 8.0]) == pytest.approx(1.0)
    assert fit_rate([0.0, 1.0]) is None
    assert predicted_cost_order(1.0, 2.0, 1.0) == "eps^-2"
    assert predicted_cost_order(1.0, 1.0, 1.0) == "eps^-2 (log eps)^2"
    assert predicted_cost_order(1.0, 1.0, 2.0) == "eps^-3"
    assert predicted_cost_order(None, 1, 1) == "undetermined"


class ToyProblem:
    """Q_l = x + (1 - h_l) x^2 with x ~ N(0, 1) from stream (level, i) and h_l halving towards level 0."""

    def __init__(self, n_levels=3, seed=0, fail_at=None):
        self.n_levels = n_levels
        self.seed = seed
        self.fail_at = fail_at

    def h(self, l):
        return 0.5 ** (self.n_levels - 1 - l + 1)

    def q(self, l, x):
        return x + (1.0 - self.h(l)) * x**2

    def draw(self, level, i):
        return np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(level, i))).standard_normal()

    def evaluate(self, level, i):
        if self.fail_at is not None and i >= self.fail_at:
            raise RuntimeError("synthetic failure")
        x = self.draw(level, i)
        qc = self.q(level + 1, x) if level + 1 < self.n_levels else None
        return self.q(level, x), qc

    def cost(self, level):
        return 4.0 ** (self.n_levels - 1 - level)


def test_toy_mlmc_agrees_with_fine_monte_carlo():
    p = ToyProblem()
    res = run_adaptive_mlmc(p, 1e-3, warmup=20)
    assert res.converged
    n_ref = 10 * sum(s.n for s in res.levels)
    ref = np.array([p.q(0, p.draw(99, i)) for i in range(n_ref)])
    m, v, se = mc_estimate(ref)
    assert abs(res.estimate - m) <= 3 * math.sqrt(se**2 + res.standard_error**2)
    assert res.sampling_error <= 1e-3 / 2 * 1.0001


def test_worker_count_does_not_change_result():
    a = run_adaptive_mlmc(ToyProblem(), 2e-3, workers=1)
    b = run_adaptive_mlmc(ToyProblem(), 2e-3, workers=4)
    assert a.estimate == b.estimate
    assert [s.n for s in a.levels] == [s.n for s in b.levels]


def test_large_target_stops_after_warmup():
    res = run_adaptive_mlmc(ToyProblem(), 1e6, warmup=8, min_samples=2)
    assert res.iterations == 1 and [s.n for s in res.levels] == [8, 8, 8]


def test_failure_carries_partial_result():
    with pytest.raises(MlmcError) as info:
        run_adaptive_mlmc(ToyProblem(fail_at=5), 1e-3, warmup=8)
    assert info.value.partial is not None
    with pytest.raises(ValueError):
        run_adaptive_mlmc(ToyProblem(), -1.0)


def _darcy_problem(hier, sampler=None):
    cfg = resolve({})
    model = DarcyModel(hier, cfg["darcy"]["bc"])
    return DarcyMlmcProblem(sampler, model, lambda s, m: qoi_effective_permeability(s, "x1", m), 1, 0.0,
                            dict(_solver_opts(cfg), method="direct"))


def test_deterministic_field_telescopes(darcy_hier2d):
    res = run_adaptive_mlmc(_darcy_problem(darcy_hier2d), 1e-4, warmup=3, min_samples=1)
    assert res.iterations == 1
    assert all(s.Y.variance == 0.0 for s in res.levels)
    q0 = res.levels[0].Q.mean
    assert res.estimate == pytest.approx(q0, abs=1e-12)
    assert q0 == pytest.approx(1.0, abs=1e-8)


def test_single_level_is_plain_monte_carlo(hier2d, sampler2d):
    from mlspde.hierarchy import LevelHierarchy

    flat = LevelHierarchy(hier2d.levels[:1], [], [], hier2d.transfers[:1], hier2d.timer)
    sampler = type(sampler2d)(flat, sampler2d.params, solver="hybrid-direct")
    prob = _darcy_problem(flat, sampler)
    res = run_adaptive_mlmc(prob, 1.0, warmup=6, min_samples=6)
    q = [prob.evaluate(0, i)[0] for i in range(6)]
    assert res.estimate == pytest.approx(np.mean(q), rel=1e-14)
    assert res.bias_estimate == 0.0
