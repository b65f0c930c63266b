"""Greedy-policy backtests and the per-agent / cross-agent statistics."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InvalidParameterError
from .fqi import QFunction, greedy_action
from .trading_env import EnvState, MarketStream, TradingConfig, feasible_actions, state_features, step

N_BINS = 20


@dataclass
class EpisodeResult:
    pnl_series: np.ndarray
    trade_count: int
    final_holding: int
    actions: np.ndarray
    gross_series: np.ndarray
    cost_series: np.ndarray
    initial_price: float

    @property
    def total_pnl(self) -> float:
        return float(self.pnl_series.sum())

    def decomposition_gap(self) -> float:
        """``|sum(pnl) - (sum(n_t dp) - sum(costs))|``; zero up to rounding."""
        return abs(self.total_pnl - (float(self.gross_series.sum()) - float(self.cost_series.sum())))


@dataclass
class AgentReport:
    sharpe: float | None
    total_return_pct: float
    capital_base: float
    total_pnl: float = 0.0
    trade_count: int = 0
    final_holding: int = 0
    n_steps: int = 0
    pnl_decomposition_ok: bool = True
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.capital_base > 0:
            raise InvalidParameterError("capital_base must be > 0")

    @property
    def sharpe_defined(self) -> bool:
        return self.sharpe is not None

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["sharpe_defined"] = self.sharpe_defined
        return doc


def run_policy(q: QFunction, market: MarketStream, cfg: TradingConfig) -> EpisodeResult:
    """Trade ``market`` greedily under ``q``, starting flat."""
    n = market.n_steps
    if n < 1:
        raise InvalidParameterError("market has no steps to trade")
    prices = market.prices
    vols = market.vols
    p0 = float(prices[0])
    pnl = np.empty(n)
    gross = np.empty(n)
    cost = np.empty(n)
    actions = np.empty(n)
    trades = 0
    state = EnvState(0, p0, float(vols[0]))
    for t in range(n):
        feasible = feasible_actions(state.holding, cfg)
        dn = int(greedy_action(q, state_features(state, p0), feasible))
        out = step(state, dn, float(prices[t + 1]), cfg, float(vols[t + 1]))
        pnl[t] = out.pnl
        gross[t] = out.gross
        cost[t] = out.cost
        actions[t] = dn
        trades += dn != 0
        state = out.next_state
    return EpisodeResult(pnl, trades, state.holding, actions, gross, cost, p0)


def sharpe_ratio(pnl_series, periods_per_year: int = 252, risk_free: float = 0.0) -> float | None:
    """Annualised per-step Sharpe ratio; ``None`` when the pnl has zero spread."""
    pnl = np.asarray(pnl_series, dtype=np.float64)
    if pnl.size < 2:
        raise InvalidParameterError("sharpe ratio needs at least 2 observations")
    excess = pnl - risk_free
    sd = float(np.std(excess, ddof=1))
    if sd == 0.0:
        return None
    return float(np.mean(excess)) / sd * math.sqrt(periods_per_year)


def total_return_pct(pnl_series, capital_base: float) -> float:
    if not capital_base > 0:
        raise InvalidParameterError(f"capital_base must be > 0, got {capital_base}")
    return 100.0 * float(np.sum(pnl_series)) / capital_base


def capital_base(cfg: TradingConfig, p0: float) -> float:
    """Largest permitted position valued at the first price."""
    return cfg.max_hold_lots * cfg.lot_size * p0


def make_report(
    episode: EpisodeResult,
    cfg: TradingConfig,
    periods_per_year: int = 252,
    risk_free: float = 0.0,
) -> AgentReport:
    base = capital_base(cfg, episode.initial_price)
    gap = episode.decomposition_gap()
    scale = max(1.0, float(np.abs(episode.gross_series).sum()))
    # a single step has no sample spread, so its Sharpe ratio is undefined
    sharpe = None
    if episode.pnl_series.size >= 2:
        sharpe = sharpe_ratio(episode.pnl_series, periods_per_year, risk_free)
    return AgentReport(
        sharpe=sharpe,
        total_return_pct=total_return_pct(episode.pnl_series, base),
        capital_base=base,
        total_pnl=episode.total_pnl,
        trade_count=episode.trade_count,
        final_holding=episode.final_holding,
        n_steps=int(episode.pnl_series.size),
        pnl_decomposition_ok=gap <= 1e-9 * scale,
    )


@dataclass
class MetricSummary:
    mean: float
    std: float
    count: int
    bin_edges: list[float]
    counts: list[int]


@dataclass
class Summary:
    sharpe: MetricSummary
    total_return_pct: MetricSummary
    n_agents: int
    n_sharpe_undefined: int


def _summarise(values: list[float]) -> MetricSummary:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return MetricSummary(math.nan, math.nan, 0, [], [])
    mean = float(arr.mean())
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    counts, edges = np.histogram(arr, bins=N_BINS)
    return MetricSummary(mean, std, int(arr.size), edges.tolist(), counts.tolist())


def aggregate_reports(reports: list[AgentReport]) -> Summary:
    """Sample mean, sample std and a 20-bin histogram of each metric.

    Agents whose Sharpe ratio is undefined are left out of the Sharpe
    statistics and counted in ``n_sharpe_undefined``.
    """
    if not reports:
        raise InvalidParameterError("no reports to aggregate")
    sharpes = [r.sharpe for r in reports if r.sharpe is not None]
    returns = [r.total_return_pct for r in reports]
    return Summary(
        sharpe=_summarise(sharpes),
        total_return_pct=_summarise(returns),
        n_agents=len(reports),
        n_sharpe_undefined=len(reports) - len(sharpes),
    )


def histogram_rows(summary: Summary):
    for name, metric in (("sharpe", summary.sharpe), ("return_pct", summary.total_return_pct)):
        for left, right, count in zip(metric.bin_edges[:-1], metric.bin_edges[1:], metric.counts):
            yield (name, left, right, count)
