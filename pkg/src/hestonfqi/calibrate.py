"""Heston calibration: EKF variance filtering alternated with pseudo-MLE.

One *sweep* runs the extended Kalman filter over the whole log-price series
with the current parameters, then re-estimates ``(kappa, theta, sigma)`` in
closed form from the filtered variance series and ``rho`` by a 1-d search
over the return pseudo-likelihood.  Sweeps repeat until the largest relative
parameter change drops below ``tol``.

Filter conventions (scalar state ``V``, noise ``w = (dWs, dWv)/sqrt(dt)``,
``Q = I``)::

    F = 1 - kappa dt                    L = [0, sigma sqrt(V dt)]
    Vbar = V + kappa theta dt - kappa V dt
    Pbar = F P F + L L^T
    H = -dt / 2                         M = [sqrt((1-rho^2) Vbar dt), rho sqrt(Vbar dt)]
    S = H Pbar H + M M^T + 2 H (L M^T)
    K = (Pbar H + L M^T) / S
    V+ = Vbar + K (dlogS - (r - Vbar/2) dt)
    P+ = Pbar - K (H Pbar + M L^T)
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import EstimationError, InvalidParameterError, NumericalDegeneracyError
from .heston import HestonParams, PricePath

EPS_V = 1e-10
DEFAULT_P0 = 1e-4
RHO_BOUND = 0.999
_GAIN_FLOOR = 1e-300
_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0

DEFAULT_INIT = HestonParams(kappa=0.1, theta=0.1, sigma=0.1, rho=0.1, r=0.0)


@dataclass(frozen=True)
class FilterState:
    v_hat: float
    p_cov: float
    k: int = 0

    def __post_init__(self):
        if not self.p_cov >= 0:
            raise InvalidParameterError(f"p_cov must be >= 0, got {self.p_cov}")
        if not self.v_hat >= 0:
            raise InvalidParameterError(f"v_hat must be >= 0, got {self.v_hat}")


@dataclass(frozen=True)
class CalibrationConfig:
    init_params: HestonParams = DEFAULT_INIT
    max_sweeps: int = 50
    tol: float = 1e-4
    rho_search_tol: float = 1e-6
    p0: float = DEFAULT_P0

    def __post_init__(self):
        if int(self.max_sweeps) != self.max_sweeps or self.max_sweeps < 1:
            raise InvalidParameterError(f"max_sweeps must be >= 1, got {self.max_sweeps}")
        if not self.tol > 0:
            raise InvalidParameterError(f"tol must be > 0, got {self.tol}")
        if not self.rho_search_tol > 0:
            raise InvalidParameterError(f"rho_search_tol must be > 0, got {self.rho_search_tol}")
        if not self.p0 >= 0:
            raise InvalidParameterError(f"p0 must be >= 0, got {self.p0}")


@dataclass(frozen=True)
class FilterResult:
    v_hat: np.ndarray
    p_cov: np.ndarray
    loglik: float


@dataclass(frozen=True)
class SweepRecord:
    sweep: int
    kappa: float
    theta: float
    sigma: float
    rho: float
    loglik: float
    ok: bool = True
    message: str = ""


@dataclass
class CalibrationTrace:
    records: list[SweepRecord] = field(default_factory=list)
    converged: bool = False

    def __len__(self) -> int:
        return len(self.records)

    def params_matrix(self) -> np.ndarray:
        return np.array([[r.kappa, r.theta, r.sigma, r.rho] for r in self.records])

    def rows(self):
        for r in self.records:
            yield (r.sweep, r.kappa, r.theta, r.sigma, r.rho, r.loglik)


TRACE_HEADER = ("sweep", "kappa", "theta", "sigma", "rho", "loglik")


def ekf_step(
    state: FilterState,
    log_s_k: float,
    log_s_k1: float,
    params: HestonParams,
    dt: float,
) -> FilterState:
    """Advance the variance filter by one observed log return."""
    if not dt > 0:
        raise InvalidParameterError(f"dt must be > 0, got {dt}")
    kappa, theta, sigma, rho = params.as_tuple()
    v = state.v_hat
    f = 1.0 - kappa * dt
    vbar = max(v + kappa * theta * dt - kappa * v * dt, EPS_V)
    pbar = f * state.p_cov * f + sigma * sigma * v * dt
    h = -0.5 * dt
    cross = sigma * math.sqrt(v * dt) * rho * math.sqrt(vbar * dt)
    s = h * pbar * h + vbar * dt + 2.0 * h * cross
    if s < _GAIN_FLOOR:
        raise NumericalDegeneracyError(f"gain denominator {s!r} below {_GAIN_FLOOR}", state.k)
    gain = (pbar * h + cross) / s
    resid = log_s_k1 - log_s_k - (params.r - 0.5 * vbar) * dt
    v_new = max(vbar + gain * resid, EPS_V)
    p_new = max(pbar - gain * (h * pbar + cross), 0.0)
    return FilterState(v_new, p_new, state.k + 1)


def ekf_filter_pass(
    prices: PricePath,
    params: HestonParams,
    cfg: CalibrationConfig | None = None,
) -> FilterResult:
    """Filter the latent variance over every return of ``prices``.

    Starts from ``V = theta`` and ``P = cfg.p0``.  Returns the posterior
    variance and covariance after each return (length ``len(prices) - 1``)
    and the Gaussian log-likelihood of the innovations.
    """
    cfg = cfg or CalibrationConfig()
    if len(prices) < 3:
        raise InvalidParameterError("the filter needs at least 3 prices")
    log_s = np.log(prices.prices)
    v, p, ll, bad = _kernels.ekf_pass(
        log_s,
        params.theta,
        float(cfg.p0),
        params.kappa,
        params.theta,
        params.sigma,
        params.rho,
        params.r,
        float(prices.dt),
        EPS_V,
    )
    if bad >= 0:
        raise NumericalDegeneracyError(f"gain denominator collapsed at step {bad}", int(bad))
    return FilterResult(v, p, float(ll))


def pml_estimate_vol_params(v_series, dt: float) -> tuple[float, float, float]:
    """Closed-form pseudo-MLE of ``(kappa, theta, sigma)`` from a variance series.

    Values at or below the filter floor are lifted to it first.

    Raises
    ------
    EstimationError
        If the autoregressive coefficient falls outside (0, 1), the implied
        long-run level is not positive, or the residual variance is not
        positive (e.g. a constant series).
    """
    v = np.maximum(np.asarray(v_series, dtype=np.float64), EPS_V)
    if v.ndim != 1 or v.size < 10:
        raise InvalidParameterError("need a 1-d variance series of length >= 10")
    if not dt > 0:
        raise InvalidParameterError(f"dt must be > 0, got {dt}")
    cur, prev = v[1:], v[:-1]
    n = cur.size
    inv_prev = 1.0 / prev
    mean_cur = cur.sum() / n
    mean_prev = prev.sum() / n
    mean_inv = inv_prev.sum() / n
    mean_ratio = (cur * inv_prev).sum() / n

    denom = mean_prev * mean_inv - 1.0
    if not denom > 64 * np.finfo(float).eps:
        raise EstimationError("variance series has no dispersion; beta1 is undefined")
    beta1 = (mean_cur * mean_inv - mean_ratio) / denom
    if not 0.0 < beta1 < 1.0:
        raise EstimationError(f"beta1 = {beta1:.6g} outside (0, 1)")
    beta2 = (mean_ratio - beta1) / ((1.0 - beta1) * mean_inv)
    if not beta2 > 0:
        raise EstimationError(f"long-run variance estimate {beta2:.6g} is not positive")
    resid = cur - prev * beta1 - beta2 * (1.0 - beta1)
    beta3 = (resid * resid * inv_prev).sum() / n
    if not beta3 > 0:
        raise EstimationError(f"residual variance {beta3:.6g} is not positive")

    kappa = -math.log(beta1) / dt
    sigma = math.sqrt(2.0 * kappa * beta3 / (1.0 - beta1 * beta1))
    return kappa, float(beta2), sigma


def rho_neg_loglik(
    rho: float,
    log_s: np.ndarray,
    v: np.ndarray,
    vol_params: tuple[float, float, float],
    r: float,
    dt: float,
) -> float:
    """Negative return pseudo-log-likelihood, up to an additive constant."""
    kappa, theta, sigma = vol_params
    y = np.diff(log_s)
    vp = v[:-1]
    dv = np.diff(v)
    lev = rho / sigma
    m = y - (r - 0.5 * vp - lev * kappa * (theta - vp)) * dt - lev * dv
    var = vp * (1.0 - rho * rho) * dt
    return float(np.sum(0.5 * np.log(var) + 0.5 * m * m / var))


def golden_section(fn, lo: float, hi: float, tol: float) -> float:
    a, b = lo, hi
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = fn(c), fn(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = fn(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = fn(d)
    return c if fc <= fd else d


def pml_estimate_rho(
    prices: PricePath,
    v_series,
    vol_params: tuple[float, float, float],
    r: float,
    dt: float,
    tol: float = 1e-6,
) -> float:
    """Maximise the return pseudo-likelihood over ``rho`` in [-0.999, 0.999].

    A 41-point grid locates the best bracket, golden-section search refines
    it to ``tol``.  If the likelihood is flat over the grid the result is
    0.0 and a ``RuntimeWarning`` is issued.
    """
    v = np.maximum(np.asarray(v_series, dtype=np.float64), EPS_V)
    log_s = np.log(prices.prices)
    if v.shape != log_s.shape:
        raise InvalidParameterError(
            f"variance series length {v.size} does not match {log_s.size} prices"
        )
    if not vol_params[2] > 0:
        raise InvalidParameterError("sigma must be > 0 to estimate rho")

    def objective(rho: float) -> float:
        return rho_neg_loglik(rho, log_s, v, vol_params, r, dt)

    grid = np.linspace(-RHO_BOUND, RHO_BOUND, 41)
    values = np.array([objective(g) for g in grid])
    if not np.all(np.isfinite(values)):
        raise EstimationError("rho likelihood is not finite on the search grid")
    spread = values.max() - values.min()
    if spread <= 1e-12 * (1.0 + abs(values.min())):
        warnings.warn("rho likelihood is flat; returning 0", RuntimeWarning, stacklevel=2)
        return 0.0
    i = int(np.argmin(values))
    lo = grid[max(i - 1, 0)]
    hi = grid[min(i + 1, grid.size - 1)]
    return float(golden_section(objective, lo, hi, tol))


def _max_rel_change(new: tuple, old: tuple) -> float:
    return max(abs(a - b) / max(abs(b), 1e-12) for a, b in zip(new, old))


def calibrate(
    prices: PricePath,
    r: float,
    cfg: CalibrationConfig | None = None,
) -> tuple[HestonParams, CalibrationTrace]:
    """Fit Heston parameters to a price series by filter/estimate sweeps.

    Returns the last successfully estimated parameters and the per-sweep
    trace.  A failure in any sweep after the first is recorded in the trace
    (``ok=False``) and ends the run with the previous sweep's parameters.

    Raises
    ------
    EstimationError
        If the very first sweep cannot produce an estimate.
    """
    cfg = cfg or CalibrationConfig()
    if len(prices) < 50:
        raise InvalidParameterError(f"calibration needs at least 50 prices, got {len(prices)}")
    dt = prices.dt
    init = cfg.init_params
    params = HestonParams(init.kappa, init.theta, init.sigma, init.rho, r)
    trace = CalibrationTrace()

    for sweep in range(1, cfg.max_sweeps + 1):
        old = params.as_tuple()
        try:
            filt = ekf_filter_pass(prices, params, cfg)
            v = np.concatenate(([params.theta], filt.v_hat))
            vol = pml_estimate_vol_params(v, dt)
            rho = pml_estimate_rho(prices, v, vol, r, dt, cfg.rho_search_tol)
            new_params = HestonParams(vol[0], vol[1], vol[2], rho, r)
        except (EstimationError, InvalidParameterError) as exc:
            if sweep == 1:
                raise EstimationError(f"first calibration sweep failed: {exc}") from exc
            trace.records.append(
                SweepRecord(sweep, *old, loglik=math.nan, ok=False, message=str(exc))
            )
            break
        params = new_params
        trace.records.append(SweepRecord(sweep, *params.as_tuple(), loglik=filt.loglik))
        if _max_rel_change(params.as_tuple(), old) < cfg.tol:
            trace.converged = True
            break
    return params, trace
