"""Tests for trend fitting (OLS, Huber IRLS) and the outer alternation."""

import numpy as np
import pytest
import statsmodels.api as sm

from mtsk import (
    ConfigurationError,
    ConstantBasis,
    HyperParams,
    LinearBasis,
    Measurement,
    RankDeficientBasisError,
    TaskDataset,
    pool_designs,
)
from mtsk.em import EMConfig, run_em
from mtsk.kernels import KernelConfig, chol_lower, gram
from mtsk.trend import OuterTrace, TrendConfig, fit_trend, iterate_model

OLS = TrendConfig(regression="ols")
HUBER = TrendConfig(regression="huber_irls")


def make_task(task_id, xs, values, basis, lo=0.0, hi=20.0):
    xs = np.asarray(xs, dtype=float).reshape(-1, 1)
    ms = [
        Measurement(location=x, replicates=np.atleast_1d(v), fidelity_id="low")
        for x, v in zip(xs, values)
    ]
    return TaskDataset(
        task_id=task_id, measurements=ms, basis=basis,
        domain_lo=np.array([lo]), domain_hi=np.array([hi]),
    )


class TestFitTrend:
    def test_constant_fit(self):
        u = np.ones((3, 1))
        y = np.array([2.0, 2.0, 2.0])
        np.testing.assert_allclose(fit_trend(u, y, OLS), [2.0], rtol=1e-14)
        np.testing.assert_allclose(fit_trend(u, y, HUBER), [2.0], rtol=1e-12)

    def test_exact_linear_data_both_methods(self):
        u = np.array([[1.0, 0.0], [1.0, 1.0], [1.0, 2.0]])
        y = np.array([0.0, 1.0, 2.0])
        np.testing.assert_allclose(fit_trend(u, y, OLS), [0.0, 1.0], atol=1e-13)
        np.testing.assert_allclose(fit_trend(u, y, HUBER), [0.0, 1.0], atol=1e-12)

    def test_outlier_pulls_huber_less_than_ols(self):
        u = np.array([[1.0, 0.0], [1.0, 1.0], [1.0, 2.0]])
        y = np.array([0.0, 1.0, 100.0])
        b_ols = fit_trend(u, y, OLS)
        b_hub = fit_trend(u, y, HUBER)
        target = np.array([0.0, 1.0])
        assert np.linalg.norm(b_hub - target) < np.linalg.norm(b_ols - target)

    def test_huber_matches_independent_irls(self):
        # statsmodels RLM with the same norm, scale, and stopping rule
        rng = np.random.default_rng(42)
        for _ in range(20):
            n = int(rng.integers(8, 40))
            x = rng.uniform(0, 10, size=n)
            u = np.column_stack([np.ones(n), x])
            y = u @ rng.normal(size=2) + rng.normal(0, 0.5, size=n)
            k = int(rng.integers(1, max(2, n // 5)))
            idx = rng.choice(n, size=k, replace=False)
            y[idx] += rng.choice([-1, 1], size=k) * rng.uniform(5, 50, size=k)
            mine = fit_trend(u, y, HUBER)
            rlm = sm.RLM(y, u, M=sm.robust.norms.HuberT(t=1.345)).fit(
                scale_est="mad", conv="coefs", tol=1e-12, maxiter=500
            )
            np.testing.assert_allclose(mine, rlm.params, atol=1e-6)

    def test_huber_is_a_fixed_point_of_its_own_weights(self):
        rng = np.random.default_rng(5)
        n = 25
        x = rng.uniform(0, 10, size=n)
        u = np.column_stack([np.ones(n), x])
        y = u @ np.array([1.0, -0.5]) + rng.normal(0, 0.3, size=n)
        y[3] += 20.0
        beta = fit_trend(u, y, HUBER)
        r = y - u @ beta
        s = np.median(np.abs(r)) / 0.6744897501960817
        cut = 1.345 * s
        w = np.where(np.abs(r) <= cut, 1.0, cut / np.abs(r))
        sw = np.sqrt(w)
        refit, *_ = np.linalg.lstsq(u * sw[:, None], y * sw, rcond=None)
        np.testing.assert_allclose(beta, refit, atol=1e-8)

    def test_ols_residuals_orthogonal_to_basis(self):
        rng = np.random.default_rng(11)
        n = 30
        x = rng.uniform(0, 10, size=n)
        u = np.column_stack([np.ones(n), x, x**2])
        y = rng.normal(size=n)
        beta = fit_trend(u, y, OLS)
        resid_coef = fit_trend(u, y - u @ beta, OLS)
        assert np.linalg.norm(resid_coef) < 1e-6 * (np.linalg.norm(beta) + 1.0)

    def test_rank_deficient_names_columns(self):
        u = np.column_stack([np.ones(4), np.arange(4.0), np.arange(4.0)])
        with pytest.raises(RankDeficientBasisError, match=r"rank 2 < 3"):
            fit_trend(u, np.zeros(4), OLS)

    def test_underdetermined_rejected(self):
        with pytest.raises(ConfigurationError):
            fit_trend(np.ones((1, 2)), np.zeros(1), OLS)

    def test_invalid_config_rejected(self):
        with pytest.raises(ConfigurationError):
            TrendConfig(regression="lasso")
        with pytest.raises(ConfigurationError):
            TrendConfig(huber_c=0.0)
        with pytest.raises(ConfigurationError):
            TrendConfig(k2_max=0)


class TestIterateModel:
    def test_pure_trend_converges_first_iteration(self):
        beta_star = {1: np.array([0.5, 0.3]), 2: np.array([-1.0, 0.1])}
        xs = np.linspace(0.0, 20.0, 8)
        tasks = [
            make_task(tid, xs, b[0] + b[1] * xs, LinearBasis())
            for tid, b in beta_star.items()
        ]
        pooled = pool_designs(tasks, tau_dup=1e-8)
        hyper = HyperParams(delta_sq=8.0)
        noises = {tid: np.full(8, 1e-8) for tid in (1, 2)}
        state, trace = iterate_model(
            tasks, pooled, KernelConfig(delta_sq=8.0), hyper, noises
        )
        assert trace.converged
        assert trace.n_iter == 1
        for tid in (1, 2):
            np.testing.assert_allclose(
                state.tasks[tid].beta_hat, beta_star[tid], atol=1e-8
            )
            np.testing.assert_allclose(state.tasks[tid].alpha_hat, 0.0, atol=1e-4)

    def test_cap_one_equals_fit_then_em_composition(self):
        rng = np.random.default_rng(9)
        xs = np.linspace(0.0, 20.0, 10)
        tasks = []
        for tid in (1, 2):
            y = 0.4 * xs - 2.0 + np.sin(xs / 3.0) + rng.normal(0, 0.1, size=10)
            tasks.append(make_task(tid, xs, y, LinearBasis()))
        pooled = pool_designs(tasks, tau_dup=1e-8)
        hyper = HyperParams(delta_sq=8.0)
        cfg = KernelConfig(delta_sq=8.0)
        noises = {tid: np.full(10, 0.01) for tid in (1, 2)}
        state, trace = iterate_model(
            tasks, pooled, cfg, hyper, noises,
            trend_cfg=TrendConfig(k2_max=1),
        )
        assert trace.n_iter == 1
        # manual composition: trend on raw means, then one EM pass
        from mtsk.data import sample_means
        residuals = {}
        betas = {}
        for t in tasks:
            u = t.basis_values()
            b = fit_trend(u, sample_means(t), TrendConfig())
            betas[t.task_id] = b
            residuals[t.task_id] = sample_means(t) - u @ b
        em_state, _ = run_em(residuals, noises, pooled, cfg, hyper)
        for tid in (1, 2):
            np.testing.assert_array_equal(state.tasks[tid].beta_hat, betas[tid])
            np.testing.assert_allclose(
                state.tasks[tid].alpha_hat, em_state.alpha_hat[tid], atol=1e-12
            )
        np.testing.assert_allclose(state.mu_alpha, em_state.mu_alpha, atol=1e-12)

    def test_zero_mean_field_absorbed_by_residual_model(self):
        rng = np.random.default_rng(31)
        n = 12
        xs = np.linspace(0.0, 10.0, n)
        k = gram(KernelConfig(delta_sq=4.0), xs.reshape(-1, 1))
        l = chol_lower(k, 1e-10)
        f = l @ rng.standard_normal(n)
        f -= f.mean()
        tasks = [make_task(1, xs, f, ConstantBasis(), hi=10.0)]
        pooled = pool_designs(tasks, tau_dup=1e-8)
        hyper = HyperParams(delta_sq=4.0)
        cfg = KernelConfig(delta_sq=4.0)
        noises = {1: np.full(n, 2.5e-3)}
        state, trace = iterate_model(tasks, pooled, cfg, hyper, noises)
        # the constant trend stays near the (zero) sample mean ...
        assert abs(float(state.tasks[1].beta_hat[0])) < 0.15
        # ... and the field carries the structure: total fit matches a single
        # EM pass on the raw values
        em_state, _ = run_em({1: f}, noises, pooled, cfg, hyper)
        total_iterate = state.tasks[1].beta_hat[0] + k @ state.tasks[1].alpha_hat
        total_single = k @ em_state.alpha_hat[1]
        np.testing.assert_allclose(total_iterate, total_single, atol=0.05)
        np.testing.assert_allclose(total_iterate, f, atol=0.2)

    def test_deterministic_bitwise(self):
        rng = np.random.default_rng(77)
        xs = np.sort(rng.uniform(0, 20, size=9))
        y = np.sin(xs / 2.0) + rng.normal(0, 0.1, size=9)
        mk = lambda: [make_task(1, xs, y, LinearBasis())]
        noises = {1: np.full(9, 0.01)}
        hyper = HyperParams(delta_sq=8.0)
        cfg = KernelConfig(delta_sq=8.0)
        t1 = mk()
        s1, _ = iterate_model(t1, pool_designs(t1, 1e-8), cfg, hyper, noises)
        t2 = mk()
        s2, _ = iterate_model(t2, pool_designs(t2, 1e-8), cfg, hyper, noises)
        np.testing.assert_array_equal(s1.tasks[1].beta_hat, s2.tasks[1].beta_hat)
        np.testing.assert_array_equal(s1.mu_alpha, s2.mu_alpha)

    def test_trace_records_and_stop_reason(self):
        rng = np.random.default_rng(13)
        xs = np.linspace(0.0, 20.0, 10)
        y = 0.2 * xs + np.sin(xs / 2.0) + rng.normal(0, 0.05, size=10)
        tasks = [make_task(1, xs, y, LinearBasis())]
        pooled = pool_designs(tasks, tau_dup=1e-8)
        state, trace = iterate_model(
            tasks, pooled, KernelConfig(delta_sq=8.0), HyperParams(delta_sq=8.0),
            {1: np.full(10, 0.01)},
        )
        assert trace.stop_reason
        assert 1 <= trace.n_iter <= 5
        assert len(trace.em_traces) == trace.n_iter
        table = trace.to_table()
        assert table.startswith("iteration\tmax_beta_delta\tmean_beta_delta")
        assert len(table.strip().split("\n")) == trace.n_iter + 1

    def test_noise_update_hook_receives_residuals(self):
        xs = np.linspace(0.0, 20.0, 8)
        y = 0.1 * xs + np.sin(xs / 3.0)
        tasks = [make_task(1, xs, y, LinearBasis())]
        pooled = pool_designs(tasks, tau_dup=1e-8)
        calls = []

        def update(residuals, em_state):
            calls.append((set(residuals.keys()), em_state is None))
            return {1: np.full(8, 0.05)}

        iterate_model(
            tasks, pooled, KernelConfig(delta_sq=8.0), HyperParams(delta_sq=8.0),
            {1: np.full(8, 0.01)}, noise_update=update,
        )
        assert calls
        assert calls[0] == ({1}, True)
        assert all(keys == {1} for keys, _ in calls)
        assert all(first is False for _, first in calls[1:])

    def test_duplicate_task_ids_rejected(self):
        xs = np.linspace(0.0, 20.0, 5)
        tasks = [
            make_task(1, xs, np.zeros(5), ConstantBasis()),
            make_task(1, xs, np.ones(5), ConstantBasis()),
        ]
        pooled = pool_designs([tasks[0]], tau_dup=1e-8)
        with pytest.raises(ConfigurationError):
            iterate_model(
                tasks, pooled, KernelConfig(), HyperParams(),
                {1: np.full(5, 0.01)},
            )
