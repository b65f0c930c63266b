import math
import warnings

import numpy as np
import pytest
from _oracles import cir_euler, ekf_scalar_step, heston_with_leverage

from hestonfqi import HestonParams, PricePath, SimConfig, simulate_heston
from hestonfqi.calibrate import (
    EPS_V,
    DEFAULT_INIT,
    CalibrationConfig,
    FilterState,
    calibrate,
    ekf_filter_pass,
    ekf_step,
    pml_estimate_rho,
    pml_estimate_vol_params,
    rho_neg_loglik,
)
from hestonfqi.errors import EstimationError, InvalidParameterError

DT = 1 / 252
TRUE = HestonParams(3.0, 0.04, 0.3, -0.6, 0.0)


class TestEkfStep:
    def test_noise_free_step_is_pure_prediction(self):
        params = HestonParams(2.0, 0.05, 0.0, 0.3)
        state = FilterState(0.02, 0.0)
        out = ekf_step(state, math.log(100), math.log(101.7), params, DT)
        # zero gain: the posterior is the prediction itself
        assert out.v_hat == 0.02 + 2.0 * 0.05 * DT - 2.0 * 0.02 * DT
        assert out.v_hat == pytest.approx(0.02 + 2.0 * (0.05 - 0.02) * DT, rel=1e-15)
        assert out.p_cov == 0.0
        assert out.k == 1

    def test_theta_is_prediction_fixed_point(self):
        for kappa in (0.5, 3.0, 40.0):
            params = HestonParams(kappa, 0.04, 0.0, 0.0)
            out = ekf_step(FilterState(0.04, 0.0), 0.0, 0.01, params, DT)
            assert out.v_hat == pytest.approx(0.04, abs=1e-17)

    def test_matches_scalar_oracle(self):
        params = HestonParams(3.0, 0.04, 0.3, -0.6, 0.0)
        rng = np.random.default_rng(0)
        for _ in range(50):
            v = float(rng.uniform(0.001, 0.1))
            p = float(rng.uniform(0.0, 1e-3))
            ret = float(rng.normal(0.0, 0.02))
            got = ekf_step(FilterState(v, p), 4.6, 4.6 + ret, params, DT)
            want = ekf_scalar_step(v, p, 4.6, 4.6 + ret, 3.0, 0.04, 0.3, -0.6, 0.0, DT)
            assert got.v_hat == pytest.approx(want[0], abs=1e-12, rel=0)
            assert got.p_cov == pytest.approx(want[1], abs=1e-12, rel=0)

    def test_reference_step(self):
        # V=0.01, P=1e-4, return of +0.5%
        got = ekf_step(FilterState(0.01, 1e-4), 0.0, 0.005, TRUE, DT)
        want = ekf_scalar_step(0.01, 1e-4, 0.0, 0.005, 3.0, 0.04, 0.3, -0.6, 0.0, DT)
        assert abs(got.v_hat - want[0]) < 1e-12
        assert abs(got.p_cov - want[1]) < 1e-12

    def test_floor_applied(self):
        out = ekf_step(FilterState(1e-6, 0.0), 0.0, 0.5, HestonParams(0.1, 1e-6, 0.5, -0.99), DT)
        assert out.v_hat >= EPS_V

    def test_bad_dt(self):
        with pytest.raises(InvalidParameterError):
            ekf_step(FilterState(0.01, 0.0), 0.0, 0.0, TRUE, 0.0)


class TestFilterPass:
    def test_shape(self):
        path = simulate_heston(TRUE, SimConfig(v0=0.04, n_steps=99, dt=DT))
        out = ekf_filter_pass(path, TRUE)
        assert out.v_hat.shape == (99,)
        assert out.p_cov.shape == (99,)
        assert math.isfinite(out.loglik)

    def test_agrees_with_stepwise(self):
        path = simulate_heston(TRUE, SimConfig(v0=0.04, n_steps=300, dt=DT, seed=4))
        cfg = CalibrationConfig(p0=2e-4)
        out = ekf_filter_pass(path, TRUE, cfg)
        state = FilterState(TRUE.theta, 2e-4)
        log_s = np.log(path.prices)
        for k in range(300):
            state = ekf_step(state, log_s[k], log_s[k + 1], TRUE, DT)
            assert out.v_hat[k] == pytest.approx(state.v_hat, abs=1e-14, rel=1e-12)
            assert out.p_cov[k] == pytest.approx(state.p_cov, abs=1e-14, rel=1e-12)

    def test_gain_free_limit(self):
        params = HestonParams(4.0, 0.03, 0.0, 0.2)
        path = simulate_heston(HestonParams(3.0, 0.04, 0.3, 0.0), SimConfig(v0=0.04, n_steps=200, dt=DT))
        out = ekf_filter_pass(path, params, CalibrationConfig(p0=0.0))
        v = params.theta
        for k in range(200):
            v = v + params.kappa * params.theta * DT - params.kappa * v * DT
            assert out.v_hat[k] == v

    def test_constant_prices_non_increasing(self):
        params = HestonParams(0.1, 0.04, 1e-3, 0.0)
        out = ekf_filter_pass(PricePath(np.full(300, 100.0), dt=DT), params)
        assert np.all(np.diff(out.v_hat[10:]) <= 0)

    def test_beats_constant_predictor(self):
        path = simulate_heston(TRUE, SimConfig(v0=0.04, n_steps=20_000, dt=DT, seed=1))
        out = ekf_filter_pass(path, TRUE)
        truth = path.variances[1:]
        assert np.abs(out.v_hat - truth).mean() < np.abs(TRUE.theta - truth).mean()

    def test_covariance_nonnegative(self):
        for seed in range(5):
            path = simulate_heston(TRUE, SimConfig(v0=0.04, n_steps=2000, dt=DT, seed=seed))
            out = ekf_filter_pass(path, HestonParams(1.0, 0.1, 0.8, 0.7))
            assert np.all(out.p_cov >= 0)
            assert np.all(out.v_hat >= EPS_V)

    def test_too_short(self):
        with pytest.raises(InvalidParameterError):
            ekf_filter_pass(PricePath(np.array([1.0, 2.0])), TRUE)


class TestVolParams:
    def test_noiseless_ar1(self):
        kappa, theta = 2.0, 0.04
        b = math.exp(-kappa * DT)
        v = np.empty(500)
        v[0] = 0.09
        for k in range(1, 500):
            v[k] = b * v[k - 1] + theta * (1 - b)
        k_hat, th_hat, s_hat = pml_estimate_vol_params(v, DT)
        assert abs(k_hat - kappa) < 1e-6
        assert abs(th_hat - theta) < 1e-9
        assert s_hat < 1e-6

    def test_constant_series_fails(self):
        with pytest.raises(EstimationError):
            pml_estimate_vol_params(np.full(100, 0.04), DT)

    def test_floor_lifted(self):
        v = cir_euler(3.0, 0.04, 0.3, 0.04, 2000, DT, 0)
        v_zeroed = v.copy()
        v_zeroed[[300, 1200]] = 0.0
        lifted = v.copy()
        lifted[[300, 1200]] = EPS_V
        assert pml_estimate_vol_params(v_zeroed, DT) == pml_estimate_vol_params(lifted, DT)

    def test_short_series(self):
        with pytest.raises(InvalidParameterError):
            pml_estimate_vol_params(np.linspace(0.01, 0.02, 9), DT)

    @pytest.mark.parametrize("seed", range(5))
    def test_cir_recovery(self, seed):
        v = cir_euler(3.0, 0.04, 0.3, 0.04, 50_000, DT, seed)
        k, th, s = pml_estimate_vol_params(v, DT)
        assert abs(k / 3.0 - 1) < 0.25
        assert abs(th / 0.04 - 1) < 0.10
        assert abs(s / 0.3 - 1) < 0.10

    def test_error_shrinks_with_length(self):
        lengths = (1_000, 10_000, 50_000)
        errs = np.zeros((len(lengths), 3))
        seeds = range(20)
        for seed in seeds:
            full = cir_euler(3.0, 0.04, 0.3, 0.04, lengths[-1], DT, 1000 + seed)
            for i, n in enumerate(lengths):
                k, th, s = pml_estimate_vol_params(full[: n + 1], DT)
                errs[i] += np.abs(np.array([k / 3.0, th / 0.04, s / 0.3]) - 1)
        errs /= len(seeds)
        assert np.all(np.diff(errs, axis=0) < 0), errs


class TestRho:
    def _sample(self, rho, seed, n=50_000):
        prices, v = heston_with_leverage(3.0, 0.04, 0.3, rho, 0.04, 100.0, n, DT, seed)
        path = PricePath(prices, dt=DT)
        return path, v, pml_estimate_vol_params(v, DT)

    def test_zero_correlation(self):
        path, v, vol = self._sample(0.0, 1)
        assert abs(pml_estimate_rho(path, v, vol, 0.0, DT)) < 0.1

    def test_negative_correlation(self):
        path, v, vol = self._sample(-0.6, 2)
        assert -0.8 < pml_estimate_rho(path, v, vol, 0.0, DT) < -0.4

    def test_is_maximiser(self):
        path, v, vol = self._sample(-0.3, 3, n=5_000)
        tol = 1e-6
        rho_hat = pml_estimate_rho(path, v, vol, 0.0, DT, tol)
        log_s = np.log(path.prices)
        best = rho_neg_loglik(rho_hat, log_s, v, vol, 0.0, DT)
        for rho in np.random.default_rng(0).uniform(-0.999, 0.999, 100):
            assert best <= rho_neg_loglik(rho, log_s, v, vol, 0.0, DT) + tol

    def test_against_fine_grid(self):
        path, v, vol = self._sample(0.4, 4, n=5_000)
        tol = 1e-6
        rho_hat = pml_estimate_rho(path, v, vol, 0.0, DT, tol)
        grid = np.linspace(-0.999, 0.999, 2001)
        log_s = np.log(path.prices)
        vals = [rho_neg_loglik(g, log_s, v, vol, 0.0, DT) for g in grid]
        i = int(np.argmin(vals))
        lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, grid.size - 1)]
        assert lo - tol <= rho_hat <= hi + tol

    def test_open_interval(self):
        path, v, vol = self._sample(-0.98, 5, n=5_000)
        rho_hat = pml_estimate_rho(path, v, vol, 0.0, DT)
        assert -1 < rho_hat < 1

    def test_flat_likelihood_warns(self, monkeypatch):
        import hestonfqi.calibrate as cal

        monkeypatch.setattr(cal, "rho_neg_loglik", lambda *args: 1.0)
        path = PricePath(np.full(200, 50.0), dt=DT)
        with pytest.warns(RuntimeWarning, match="flat"):
            out = cal.pml_estimate_rho(path, np.full(200, 0.04), (3.0, 0.04, 0.3), 0.0, DT)
        assert out == 0.0

    def test_length_mismatch(self):
        with pytest.raises(InvalidParameterError):
            pml_estimate_rho(PricePath(np.ones(20)), np.ones(19), (1.0, 0.1, 0.1), 0.0, 1.0)


class TestCalibrate:
    def test_single_sweep(self):
        path = simulate_heston(TRUE, SimConfig(v0=0.04, n_steps=500, dt=DT))
        params, trace = calibrate(path, 0.0, CalibrationConfig(max_sweeps=1))
        assert len(trace) == 1
        assert trace.records[0].ok
        assert params.as_tuple() == tuple(trace.params_matrix()[0])

    def test_year_length_trace_finite(self):
        prices = simulate_heston(
            HestonParams(3.0, 1e-4, 0.01, -0.5), SimConfig(s0=2250.0, v0=1e-4, n_steps=250, dt=1.0, seed=2017)
        )
        params, trace = calibrate(PricePath(prices.prices, dt=1.0), 0.00004, CalibrationConfig(DEFAULT_INIT))
        assert 1 <= len(trace) <= 50
        assert np.all(np.isfinite(trace.params_matrix()))
        assert all(math.isfinite(r.loglik) for r in trace.records if r.ok)

    def test_tolerance_stop_consistent(self):
        path = simulate_heston(TRUE, SimConfig(v0=0.04, n_steps=3000, dt=DT, seed=8))
        cfg = CalibrationConfig(max_sweeps=200, tol=1e-3)
        params, trace = calibrate(path, 0.0, cfg)
        if trace.converged:
            a, b = trace.params_matrix()[-2:]
            assert np.max(np.abs(b - a) / np.maximum(np.abs(a), 1e-12)) < cfg.tol

    def test_too_few_prices(self):
        with pytest.raises(InvalidParameterError):
            calibrate(PricePath(np.linspace(100, 101, 49)), 0.0)

    def test_first_sweep_failure_raises(self):
        # perfectly flat prices leave nothing to estimate from
        with pytest.raises(EstimationError), warnings.catch_warnings():
            warnings.simplefilter("ignore")
            calibrate(
                PricePath(np.full(100, 10.0), dt=DT),
                0.0,
                CalibrationConfig(HestonParams(0.1, 0.1, 0.0, 0.0), p0=0.0),
            )

    def test_config_validation(self):
        with pytest.raises(InvalidParameterError):
            CalibrationConfig(max_sweeps=0)
        with pytest.raises(InvalidParameterError):
            CalibrationConfig(tol=0.0)

    def test_later_sweep_failure_recorded(self, monkeypatch):
        import hestonfqi.calibrate as cal

        real = cal.pml_estimate_vol_params
        calls = {"n": 0}

        def flaky(v, dt):
            calls["n"] += 1
            if calls["n"] == 2:
                raise EstimationError("injected")
            return real(v, dt)

        monkeypatch.setattr(cal, "pml_estimate_vol_params", flaky)
        path = simulate_heston(TRUE, SimConfig(v0=0.04, n_steps=500, dt=DT))
        params, trace = cal.calibrate(path, 0.0, CalibrationConfig(max_sweeps=10))
        assert len(trace) == 2
        first, second = trace.records
        assert first.ok and not second.ok
        assert "injected" in second.message
        assert params.as_tuple() == (first.kappa, first.theta, first.sigma, first.rho)
