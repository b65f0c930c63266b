"""Discrete-lot trading environment with spread and impact costs.

Trades are whole round lots, at most ``K`` per step, with the holding kept
in ``[-M, M]`` lots.  A trade of ``dn`` shares executes at the current price
and the post-trade position is carried over the next price move::

    pnl    = (holding * lot_size + dn) * (p_next - p) - spread(dn) - impact(dn)
    reward = pnl - 0.5 * risk_kappa * pnl**2

Impact is booked as a cost only; the price path itself is never shifted.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, NamedTuple

import numpy as np

from . import _kernels
from .errors import InfeasibleActionError, InvalidParameterError, PriceAlignmentError
from .heston import HestonParams, PricePath
from .rng import generator

_ALIGN_TOL = 1e-6


@dataclass(frozen=True)
class TradingConfig:
    max_trade_lots: int = 5
    max_hold_lots: int = 10
    lot_size: int = 100
    tick_size: float = 0.01
    risk_kappa: float = 1e-4
    discount: float = 0.999

    def __post_init__(self):
        if self.max_trade_lots < 1:
            raise InvalidParameterError("max_trade_lots must be >= 1")
        if self.max_hold_lots < self.max_trade_lots:
            raise InvalidParameterError("max_hold_lots must be >= max_trade_lots")
        if self.lot_size < 1:
            raise InvalidParameterError("lot_size must be >= 1")
        if not self.tick_size > 0:
            raise InvalidParameterError("tick_size must be > 0")
        if not self.risk_kappa >= 0:
            raise InvalidParameterError("risk_kappa must be >= 0")
        if not 0.0 <= self.discount <= 1.0:
            raise InvalidParameterError("discount must lie in [0, 1]")


@dataclass(frozen=True)
class EnvState:
    holding: int
    price: float
    vol: float = 0.0


@dataclass(frozen=True)
class StepOutcome:
    next_state: EnvState
    pnl: float
    reward: float
    position: int
    gross: float
    cost: float


def action_universe(cfg: TradingConfig) -> tuple[int, ...]:
    k = cfg.max_trade_lots
    return tuple(cfg.lot_size * a for a in range(-k, k + 1))


def feasible_actions(holding: int, cfg: TradingConfig) -> tuple[int, ...]:
    """Share trades keeping ``|holding + lots| <= M``, ascending."""
    m = cfg.max_hold_lots
    if abs(holding) > m:
        raise InfeasibleActionError(f"holding {holding} outside [-{m}, {m}]")
    k = cfg.max_trade_lots
    lo = max(-k, -m - holding)
    hi = min(k, m - holding)
    return tuple(cfg.lot_size * a for a in range(lo, hi + 1))


def feasible_mask(holding: int, cfg: TradingConfig) -> np.ndarray:
    """Boolean mask over :func:`action_universe`."""
    lots = np.arange(-cfg.max_trade_lots, cfg.max_trade_lots + 1)
    return np.abs(holding + lots) <= cfg.max_hold_lots


def spread_cost(dn: float, cfg: TradingConfig) -> float:
    return cfg.tick_size * abs(dn)


def impact_cost(dn: float, cfg: TradingConfig) -> float:
    return dn * dn * cfg.tick_size / cfg.lot_size


def reward_of(pnl: float, cfg: TradingConfig) -> float:
    return pnl - 0.5 * cfg.risk_kappa * pnl * pnl


def to_ticks(price: float, tick_size: float) -> int:
    """Nearest tick count, halves rounded away from zero."""
    q = price / tick_size
    return int(math.copysign(math.floor(abs(q) + 0.5), q))


def align_price(price: float, tick_size: float) -> float:
    return to_ticks(price, tick_size) * tick_size


def _checked_ticks(price: float, tick_size: float) -> int:
    q = price / tick_size
    n = to_ticks(price, tick_size)
    if abs(q - n) > _ALIGN_TOL or n <= 0:
        raise PriceAlignmentError(f"price {price!r} is not a positive multiple of {tick_size}")
    return n


def step(state: EnvState, dn: int, next_price: float, cfg: TradingConfig, next_vol: float = 0.0) -> StepOutcome:
    """Execute ``dn`` shares at ``state.price`` and mark to ``next_price``.

    Raises
    ------
    InfeasibleActionError
        ``dn`` is not a whole-lot trade admissible from ``state.holding``.
    PriceAlignmentError
        Either price is off the tick grid or not positive.
    """
    if dn not in feasible_actions(state.holding, cfg):
        raise InfeasibleActionError(f"trade {dn} not feasible from holding {state.holding}")
    t0 = _checked_ticks(state.price, cfg.tick_size)
    t1 = _checked_ticks(next_price, cfg.tick_size)
    position = state.holding * cfg.lot_size + dn
    # price moves in whole ticks keep the gross term free of representation error
    gross = position * (t1 - t0) * cfg.tick_size
    cost = spread_cost(dn, cfg) + impact_cost(dn, cfg)
    pnl = gross - cost
    nxt = EnvState(state.holding + dn // cfg.lot_size, next_price, next_vol)
    return StepOutcome(nxt, pnl, reward_of(pnl, cfg), position, gross, cost)


def state_features(state: EnvState, p0: float) -> tuple[float, float, float]:
    """Learner-facing features: price relative to the start, holding in lots, variance."""
    return (state.price / p0, float(state.holding), state.vol)


class MarketTick(NamedTuple):
    price: float
    vol: float


class MarketStream:
    """A tick-aligned price/variance sequence consumed one step at a time."""

    def __init__(self, prices, vols, tick_size: float = 0.01):
        prices = np.asarray(prices, dtype=np.float64)
        vols = np.asarray(vols, dtype=np.float64)
        if prices.ndim != 1 or prices.size < 1:
            raise InvalidParameterError("market needs a non-empty 1-d price series")
        if vols.shape != prices.shape:
            raise InvalidParameterError(
                f"vol series length {vols.size} does not match {prices.size} prices"
            )
        ticks = np.array([max(to_ticks(p, tick_size), 1) for p in prices], dtype=np.int64)
        self.tick_size = tick_size
        self.prices = ticks * tick_size
        self.vols = vols

    def __len__(self) -> int:
        return self.prices.size

    @property
    def n_steps(self) -> int:
        return self.prices.size - 1

    def __iter__(self) -> Iterator[MarketTick]:
        for p, v in zip(self.prices, self.vols):
            yield MarketTick(float(p), float(v))


def replay_market(prices: PricePath, filtered_vols=None, tick_size: float = 0.01) -> MarketStream:
    """Wrap observed prices and a per-step variance estimate as a market.

    ``filtered_vols`` defaults to the path's own variance series when it has
    one.  A series one shorter than the prices (a filter output, which has no
    value for the first observation) is padded with its first element.
    """
    vols = prices.variances if filtered_vols is None else np.asarray(filtered_vols, dtype=float)
    if vols is None:
        raise InvalidParameterError("no variance series available for the market")
    if vols.size == prices.prices.size - 1 and vols.size > 0:
        vols = np.concatenate(([vols[0]], vols))
    return MarketStream(prices.prices, vols, tick_size)


@dataclass(frozen=True)
class ArbitrageMarketConfig:
    """Mean-reverting log price driven by a Heston variance process.

    ``reversion_rate`` defaults to a 20-step half-life and
    ``equilibrium_log_price`` to ``log(s0)``.
    """

    heston: HestonParams
    s0: float = 50.0
    v0: float | None = None
    n_steps: int = 10_000
    seed: int = 0
    reversion_rate: float = math.log(2.0) / 20.0
    equilibrium_log_price: float | None = None
    dt: float = 1.0
    tick_size: float = 0.01

    def __post_init__(self):
        if not isinstance(self.heston, HestonParams):
            raise InvalidParameterError("heston must be a HestonParams")
        if not self.reversion_rate >= 0:
            raise InvalidParameterError("reversion_rate must be >= 0")
        if not self.s0 > 0:
            raise InvalidParameterError("s0 must be > 0")
        if self.v0 is not None and not self.v0 >= 0:
            raise InvalidParameterError("v0 must be >= 0")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise InvalidParameterError("n_steps must be a positive integer")
        if not self.dt > 0 or not self.tick_size > 0:
            raise InvalidParameterError("dt and tick_size must be > 0")
        if self.seed < 0:
            raise InvalidParameterError("seed must be non-negative")

    @property
    def equilibrium(self) -> float:
        if self.equilibrium_log_price is None:
            return math.log(self.s0)
        return self.equilibrium_log_price

    @property
    def initial_variance(self) -> float:
        return self.heston.theta if self.v0 is None else self.v0


def simulate_arbitrage_log_path(cfg: ArbitrageMarketConfig) -> tuple[np.ndarray, np.ndarray]:
    """Unrounded log prices and (truncated) variances of the reverting market."""
    z = generator(cfg.seed).standard_normal((2, cfg.n_steps))
    h = cfg.heston
    log_s, var = _kernels.reverting_paths(
        np.ascontiguousarray(z[0][None, :]),
        np.ascontiguousarray(z[1][None, :]),
        math.log(cfg.s0),
        float(cfg.initial_variance),
        h.kappa,
        h.theta,
        h.sigma,
        h.rho,
        float(cfg.equilibrium),
        float(cfg.reversion_rate),
        float(cfg.dt),
    )
    return log_s[0], np.maximum(var[0], 0.0)


def simulate_arbitrage_path(cfg: ArbitrageMarketConfig) -> PricePath:
    """Tick-rounded reverting price path, floored at one tick, with its variances."""
    log_s, var = simulate_arbitrage_log_path(cfg)
    ticks = np.maximum(np.floor(np.exp(log_s) / cfg.tick_size + 0.5), 1.0)
    return PricePath(ticks * cfg.tick_size, var, cfg.dt)
