import math

import numpy as np
import pytest

from mixar.em_fit import (
    ExpertSpec,
    FitConfig,
    _run_chain,
    derive_seed,
    e_step,
    em_run,
    initialize,
    m_step_linear,
    m_step_mlp,
    m_step_weights,
    weighted_expert_loglik,
)
from mixar.errors import InsufficientDataError, InvariantError
from mixar.model_core import (
    SIGMA_FLOOR,
    ExpertParams,
    MixtureModel,
    SeriesData,
    log_likelihood,
)
from mixar.simulator import GenerativeSpec, simulate

from conftest import naive_mean, random_expert, random_series

LINEAR1 = ExpertSpec("linear", 1)


def seventy_thirty_truth():
    return MixtureModel((ExpertParams.linear([0.1], 0.5, 0.5), ExpertParams.linear([0.5], -0.5, 0.5)), [0.7, 0.3])


class TestEStep:
    def test_single_component(self, rng):
        m = MixtureModel((random_expert(rng, "linear"),), [1.0])
        assert np.all(e_step(m, random_series(rng, 20)) == 1.0)

    def test_identical_experts(self, rng):
        e = random_expert(rng, "mlp")
        r = e_step(MixtureModel((e, e), [0.5, 0.5]), random_series(rng, 20))
        assert np.allclose(r, 0.5, atol=1e-15)

    def test_brute_force_bayes(self):
        m = MixtureModel((ExpertParams.linear([0.2], 0.3, 0.5), ExpertParams.linear([-0.6], -0.4, 1.2)), [0.7, 0.3])
        values = [0.1, -0.5, 0.9, 1.4, -0.2]
        r = e_step(m, SeriesData(values))
        for t in range(1, 5):
            joint = []
            for w, e in zip(m.weights, m.experts):
                res = values[t] - naive_mean(e, values[t - 1:t])
                joint.append(w * math.exp(-res ** 2 / (2 * e.sigma ** 2)) / (e.sigma * math.sqrt(2 * math.pi)))
            for i in range(2):
                assert r[t - 1, i] == pytest.approx(joint[i] / sum(joint), abs=1e-12)

    def test_rows_sum_to_one_under_underflow(self):
        m = MixtureModel((ExpertParams.linear([0.0], 0.0, SIGMA_FLOOR), ExpertParams.linear([0.0], 1e4, SIGMA_FLOOR)),
                         [0.5, 0.5])
        r = e_step(m, SeriesData([0.0, 5e3, 0.0]))
        assert np.all(np.isfinite(r))
        assert np.allclose(r.sum(axis=1), 1.0, atol=1e-10)


class TestWeights:
    def test_balanced(self):
        assert np.allclose(m_step_weights(np.full((8, 2), 0.5), 1e-3), [0.5, 0.5])

    def test_floor_active(self):
        resp = np.tile([1.0, 0.0], (10, 1))
        pi = m_step_weights(resp, 1e-3)
        assert pi == pytest.approx([0.999, 0.001], abs=1e-15)

    def test_column_means(self, rng):
        resp = rng.dirichlet(np.ones(3), size=10)
        expected = [sum(resp[t, i] for t in range(10)) / 10 for i in range(3)]
        assert m_step_weights(resp, 1e-3) == pytest.approx(expected, abs=1e-14)

    def test_floor_respected(self, rng):
        resp = rng.dirichlet([5.0, 0.01, 0.01, 0.01], size=30)
        pi = m_step_weights(resp, 0.01)
        assert pi.sum() == pytest.approx(1.0, abs=1e-14)
        assert np.all(pi >= 0.01 - 1e-15)


class TestLinearMStep:
    def test_interpolation(self):
        values = [3.0]
        for _ in range(9):
            values.append(0.5 * values[-1] + 0.5)
        e = m_step_linear(SeriesData(values), np.ones(9), 1)
        assert e.linear_a[0] == pytest.approx(0.5, abs=1e-10)
        assert e.linear_b == pytest.approx(0.5, abs=1e-10)
        assert e.sigma == SIGMA_FLOOR

    def test_uniform_weights_is_ols(self, rng):
        s = random_series(rng, 60)
        X, y = s.windows(3)
        A = np.column_stack([X, np.ones(len(y))])
        coef, *_ = np.linalg.lstsq(A, y, rcond=None)
        e = m_step_linear(s, np.ones(len(y)), 3)
        assert np.allclose(np.append(e.linear_a, e.linear_b), coef, atol=1e-10)
        assert e.sigma == pytest.approx(np.sqrt(np.mean((y - A @ coef) ** 2)), abs=1e-10)

    def test_hand_normal_equations(self):
        # transitions 0->1, 1->3, 3->2 carry weight; solve [[10,4],[4,3]] [a,b] = [9,6]
        s = SeriesData([0.0, 1.0, 3.0, 2.0, 5.0, -4.0])
        e = m_step_linear(s, [1, 1, 1, 0, 0], 1)
        assert e.linear_a[0] == pytest.approx(3 / 14, abs=1e-12)
        assert e.linear_b == pytest.approx(12 / 7, abs=1e-12)
        assert e.sigma == pytest.approx(math.sqrt(25 / 42), abs=1e-12)

    def test_singular_design_uses_ridge(self):
        s = SeriesData([1.0, 1.0, 1.0, 1.0, 2.0])
        e = m_step_linear(s, [1, 1, 1, 0], 1)
        assert np.isfinite(e.linear_a[0]) and np.isfinite(e.linear_b)

    def test_requires_mass(self, rng):
        with pytest.raises(InvariantError):
            m_step_linear(random_series(rng, 5), np.zeros(4), 1)


class TestMlpMStep:
    def mlp_data(self, rng, n=400):
        truth = MixtureModel((ExpertParams.mlp(0.2, [1.5], [0.1], [[1.2]], 0.3),), [1.0])
        return simulate(GenerativeSpec(truth), n, seed=5).series

    def test_tiny_mass_still_valid(self, rng):
        s = self.mlp_data(rng, 50)
        col = np.zeros(49)
        col[3] = 1e-12
        start = random_expert(rng, "mlp", k=2)
        out = m_step_mlp(s, col, start, FitConfig(inner_max_iterations=5))
        assert isinstance(out, ExpertParams)
        assert weighted_expert_loglik(out, s, col) >= weighted_expert_loglik(start, s, col) - 1e-10

    def test_stationary_point_is_fixed(self, rng):
        s = random_series(rng, 80)
        _, y = s.windows(1)
        col = rng.uniform(0.2, 1.0, size=y.size)
        mean = float(np.sum(col * y) / col.sum())
        sd = math.sqrt(float(np.sum(col * (y - mean) ** 2) / col.sum()))
        start = ExpertParams.mlp(mean, [0.0, 0.0], [0.0, 0.0], [[0.0], [0.0]], sd)
        assert m_step_mlp(s, col, start) == start

    def test_strict_ascent(self, rng):
        s = self.mlp_data(rng)
        col = np.ones(len(s) - 1)
        start = random_expert(rng, "mlp", k=1, sigma=1.0)
        one = m_step_mlp(s, col, start, FitConfig(inner_max_iterations=1))
        q0 = weighted_expert_loglik(start, s, col)
        assert weighted_expert_loglik(one, s, col) > q0
        # finite-difference directional derivative along the move is an ascent direction
        d = one.to_vector() - start.to_vector()
        h = 1e-6 / np.linalg.norm(d)
        up = weighted_expert_loglik(start.with_vector(start.to_vector() + h * d), s, col)
        dn = weighted_expert_loglik(start.with_vector(start.to_vector() - h * d), s, col)
        assert (up - dn) / (2 * h) > 0
        full = m_step_mlp(s, col, start)
        assert weighted_expert_loglik(full, s, col) >= weighted_expert_loglik(one, s, col)


class TestInitialize:
    def test_single(self, rng):
        m = initialize(random_series(rng, 30), 1, LINEAR1, seed=4)
        assert m.weights.tolist() == [1.0]

    @pytest.mark.parametrize("spec", [LINEAR1, ExpertSpec("mlp", 2, 3)])
    def test_deterministic_and_seed_sensitive(self, rng, spec):
        s = random_series(rng, 30)
        assert initialize(s, 3, spec, 7) == initialize(s, 3, spec, 7)
        assert initialize(s, 3, spec, 7) != initialize(s, 3, spec, 8)

    def test_mlp_ranges(self, rng):
        m = initialize(random_series(rng, 30), 2, ExpertSpec("mlp", 3, 4), 1)
        for e in m.experts:
            assert np.all(np.abs(e.to_vector()[:-1]) <= 0.7)
        assert np.allclose(m.weights, 0.5)


class TestEmRun:
    def test_p1_linear_is_ols(self, rng):
        s = random_series(rng, 200)
        fit = em_run(s, 1, LINEAR1, FitConfig(restarts=2))
        X, y = s.windows(1)
        A = np.column_stack([X, np.ones(len(y))])
        coef, *_ = np.linalg.lstsq(A, y, rcond=None)
        e = fit.model.experts[0]
        assert np.allclose([e.linear_a[0], e.linear_b], coef, atol=1e-8)
        assert e.sigma == pytest.approx(np.sqrt(np.mean((y - A @ coef) ** 2)), abs=1e-8)
        assert fit.em_iterations <= 2
        assert abs(fit.loglik_trace[-1] - fit.loglik_trace[-2]) < 1e-6 * abs(fit.loglik_trace[-2])

    def test_loglik_consistent_and_monotone(self, rng):
        s = simulate(GenerativeSpec(seventy_thirty_truth()), 400, seed=2).series
        fit = em_run(s, 3, LINEAR1, FitConfig(restarts=3, master_seed=9))
        assert fit.loglik == pytest.approx(log_likelihood(fit.model, s), abs=1e-9)
        assert np.all(np.diff(fit.loglik_trace) >= -1e-8)
        assert fit.best_restart == int(np.nanargmax(fit.restart_logliks))
        assert np.all(fit.model.weights >= 1e-3 - 1e-15)

    def test_deterministic(self, rng):
        s = simulate(GenerativeSpec(seventy_thirty_truth()), 300, seed=2).series
        a = em_run(s, 2, LINEAR1, FitConfig(restarts=3, master_seed=5))
        b = em_run(s, 2, LINEAR1, FitConfig(restarts=3, master_seed=5))
        assert a.model == b.model and a.loglik_trace == b.loglik_trace

    def test_recovers_symmetric_example(self):
        truth = MixtureModel((ExpertParams.linear([0.5], 0.0, 1.0), ExpertParams.linear([-0.5], 0.0, 1.0)), [0.5, 0.5])
        s = simulate(GenerativeSpec(truth), 2000, seed=17).series
        fit = em_run(s, 2, LINEAR1, FitConfig(restarts=10, master_seed=1))
        m = fit.model.canonical()
        assert abs(m.weights[0] - 0.5) < 0.1
        slopes = sorted(e.linear_a[0] for e in m.experts)
        assert slopes[0] == pytest.approx(-0.5, abs=0.25)
        assert slopes[1] == pytest.approx(0.5, abs=0.25)
        for e in m.experts:
            assert e.sigma == pytest.approx(1.0, abs=0.25)

    def test_recovers_seventy_thirty_weights(self):
        # the n=1000 MLE of pi is itself noisy, so ask for a clear majority of seeds
        hits, leading = 0, []
        for seed in range(8):
            s = simulate(GenerativeSpec(seventy_thirty_truth()), 1000, seed=derive_seed(1000, seed)).series
            fit = em_run(s, 2, LINEAR1, FitConfig(master_seed=seed))
            assert fit.loglik >= log_likelihood(seventy_thirty_truth(), s)
            w = fit.model.canonical().weights
            leading.append(w[0])
            hits += bool(np.all(np.abs(w - [0.7, 0.3]) < 0.1))
        assert hits >= 5
        assert abs(np.median(leading) - 0.7) < 0.1

    def test_label_symmetry(self, rng):
        s = simulate(GenerativeSpec(seventy_thirty_truth()), 500, seed=8).series
        X, y = s.windows(1)
        start = initialize(s, 3, LINEAR1, seed=12)
        a = _run_chain(X, y, start, FitConfig())[0].canonical()
        b = _run_chain(X, y, start.permuted([2, 0, 1]), FitConfig())[0].canonical()
        assert np.allclose(a.weights, b.weights, atol=1e-8)
        for ea, eb in zip(a.experts, b.experts):
            assert np.allclose(ea.to_vector(), eb.to_vector(), atol=1e-8)

    def test_mlp_runs(self, rng):
        s = random_series(rng, 120)
        fit = em_run(s, 2, ExpertSpec("mlp", 2, 2), FitConfig(restarts=2, max_em_iterations=15))
        assert np.all(np.diff(fit.loglik_trace) >= -1e-8)
        assert fit.loglik == pytest.approx(log_likelihood(fit.model, s), abs=1e-9)

    def test_insufficient_data(self):
        with pytest.raises(InsufficientDataError):
            em_run(SeriesData([1.0, 2.0, 3.0]), 3, LINEAR1)

    def test_restart_seeds_distinct(self):
        assert len({derive_seed(42, i) for i in range(100)}) == 100
        assert derive_seed(1, 2) != derive_seed(2, 1)
