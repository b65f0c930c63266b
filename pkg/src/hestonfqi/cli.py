"""Command-line entry point.

Exit codes: 0 success, 1 input error, 2 numeric/estimation failure,
3 internal error.
"""
from __future__ import annotations

import argparse
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io
from .backtest import (
    aggregate_reports,
    histogram_rows,
    make_report,
    run_policy,
)
from .calibrate import TRACE_HEADER, calibrate, ekf_filter_pass
from .config import RunConfig, load_config
from .errors import DataFormatError, EstimationError, InvalidParameterError
from .fqi import FqiConfig, QFunction, TransitionBatch, collect_transitions, fqi_train
from .heston import HestonParams, PricePath, SimConfig, simulate_batch, simulate_heston
from .rng import derive_seed
from .trading_env import MarketStream, replay_market, simulate_arbitrage_path

log = logging.getLogger("hestonfqi")

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_NUMERIC = 2
EXIT_INTERNAL = 3

SUMMARY_HEADER = ("agent_id", "sharpe", "return_pct", "trade_count")
HISTOGRAM_HEADER = ("metric", "bin_left", "bin_right", "count")
DIAGNOSTICS_HEADER = ("iteration", "mean_abs_target_change")


class InputError(Exception):
    """Bad user input; maps to exit code 1."""


def _comment(cfg: RunConfig) -> str:
    return f"config_hash={cfg.config_hash}"


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _read_prices(path: Path, dt: float, minimum: int, what: str) -> PricePath:
    prices = io.read_price_csv(path, dt=dt)
    if len(prices) < minimum:
        raise InputError(
            f"insufficient data: {what} {path} has {len(prices)} prices, need at least {minimum}"
        )
    return prices


def _fqi_config(cfg: RunConfig, seed: int) -> FqiConfig:
    return replace(cfg.fqi, seed=seed)


def _market_for(prices: PricePath, cfg: RunConfig, params: HestonParams | None) -> MarketStream:
    if prices.variances is not None:
        return replay_market(prices, tick_size=cfg.trading.tick_size)
    if params is None:
        raise InputError("price file has no variance column; pass --params to filter one")
    filt = ekf_filter_pass(prices, params, cfg.calibration)
    return replay_market(prices, filt.v_hat, tick_size=cfg.trading.tick_size)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_calibrate(args, cfg: RunConfig) -> int:
    src = Path(args.price_csv or cfg.paths["price_csv"] or "")
    if not str(src) or not src.exists():
        raise InputError(f"price file {src} not found")
    prices = _read_prices(src, cfg.calibration_dt, 50, "price file")
    r = cfg.r if args.r is None else args.r
    params, trace = calibrate(prices, r, cfg.calibration)
    out = _out_dir(args)
    doc = params.to_dict()
    doc.update(
        config_hash=cfg.config_hash,
        sweeps=len(trace),
        converged=trace.converged,
        failed_sweeps=[rec.sweep for rec in trace.records if not rec.ok],
    )
    io.write_json(out / "params.json", doc)
    io.write_csv(out / "trace.csv", TRACE_HEADER, trace.rows(), _comment(cfg))
    log.info("calibrated %s in %d sweeps (converged=%s)", params, len(trace), trace.converged)
    return EXIT_OK


def _load_params(path) -> HestonParams:
    return HestonParams.from_dict(io.read_json(path))


def cmd_simulate(args, cfg: RunConfig) -> int:
    src = args.params_json or cfg.paths["params_json"]
    if not src:
        raise InputError("simulate needs a params JSON file")
    params = _load_params(src)
    sim = cfg.sim
    overrides = {
        k: getattr(args, k) for k in ("s0", "v0", "n_steps", "dt") if getattr(args, k) is not None
    }
    sim = replace(sim, seed=cfg.seed if args.seed is not None else sim.seed, **overrides)
    count = args.count if args.count is not None else cfg.sim_count
    out = _out_dir(args)
    if count == 1:
        io.write_path_csv(out / "path.csv", simulate_heston(params, sim), _comment(cfg))
    else:
        width = max(3, len(str(count - 1)))
        for i, path in enumerate(simulate_batch(params, sim, count)):
            io.write_path_csv(out / f"path_{i:0{width}d}.csv", path, _comment(cfg))
    return EXIT_OK


def cmd_collect(args, cfg: RunConfig) -> int:
    prices = _read_prices(Path(args.price_csv), cfg.calibration_dt, 2, "price file")
    params = _load_params(args.params) if args.params else None
    market = _market_for(prices, cfg, params)
    batch = collect_transitions(market, cfg.trading, derive_seed(cfg.seed, "collect", 0))
    out = _out_dir(args)
    batch.save(out / "transitions.npz")
    log.info("collected %d transitions", len(batch))
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    batch = TransitionBatch.load(args.transitions)
    result = fqi_train(batch, _fqi_config(cfg, derive_seed(cfg.seed, "fqi", 0)))
    out = _out_dir(args)
    result.q.save(out / "qfunction.json")
    io.write_csv(
        out / "diagnostics.csv",
        DIAGNOSTICS_HEADER,
        enumerate(result.mean_abs_target_change, start=1),
        _comment(cfg),
    )
    return EXIT_OK


def cmd_backtest(args, cfg: RunConfig) -> int:
    q = QFunction.load(args.qfunction)
    prices = _read_prices(Path(args.price_csv), cfg.calibration_dt, 2, "price file")
    params = _load_params(args.params) if args.params else None
    market = _market_for(prices, cfg, params)
    episode = run_policy(q, market, cfg.trading)
    report = make_report(episode, cfg.trading, cfg.periods_per_year, cfg.risk_free)
    doc = report.to_dict()
    doc["config_hash"] = cfg.config_hash
    io.write_json(_out_dir(args) / "report.json", doc)
    return EXIT_OK


def _run_arbitrage_agent(cfg: RunConfig, agent: int):
    train_cfg = replace(cfg.arbitrage, seed=derive_seed(cfg.seed, "train-path", agent))
    test_cfg = replace(cfg.arbitrage, seed=derive_seed(cfg.seed, "test-path", agent))
    train_path = simulate_arbitrage_path(train_cfg)
    batch = collect_transitions(train_path, cfg.trading, derive_seed(cfg.seed, "collect", agent))
    result = fqi_train(batch, _fqi_config(cfg, derive_seed(cfg.seed, "fqi", agent)))
    test_path = simulate_arbitrage_path(test_cfg)
    episode = run_policy(result.q, replay_market(test_path, tick_size=cfg.trading.tick_size), cfg.trading)
    return make_report(episode, cfg.trading, cfg.periods_per_year, cfg.risk_free)


def _agent_job(payload):
    cfg, agent = payload
    try:
        return agent, _run_arbitrage_agent(cfg, agent), None
    except Exception as exc:  # recorded per agent, the run continues
        return agent, None, f"{type(exc).__name__}: {exc}"


def cmd_experiment_arbitrage(args, cfg: RunConfig) -> int:
    out = _out_dir(args)
    agents_dir = out / "agents"
    agents_dir.mkdir(exist_ok=True)
    payloads = [(cfg, i) for i in range(cfg.n_agents)]
    if cfg.jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            results = list(pool.map(_agent_job, payloads))
    else:
        results = [_agent_job(p) for p in payloads]

    reports = []
    rows = []
    for agent, report, error in sorted(results, key=lambda r: r[0]):
        if report is None:
            log.error("agent %d failed: %s", agent, error)
            io.write_json(
                agents_dir / f"agent_{agent:03d}.json",
                {"agent_id": agent, "error": error, "config_hash": cfg.config_hash},
            )
            continue
        doc = report.to_dict()
        doc.update(agent_id=agent, config_hash=cfg.config_hash)
        io.write_json(agents_dir / f"agent_{agent:03d}.json", doc)
        reports.append(report)
        rows.append((agent, report.sharpe, report.total_return_pct, report.trade_count))
    if not reports:
        log.error("every agent failed")
        return EXIT_NUMERIC

    summary = aggregate_reports(reports)
    comment = _comment(cfg)
    io.write_csv(out / "summary.csv", SUMMARY_HEADER, rows, comment)
    io.write_csv(out / "histogram.csv", HISTOGRAM_HEADER, histogram_rows(summary), comment)
    io.write_json(
        out / "summary.json",
        {
            "config_hash": cfg.config_hash,
            "n_agents": summary.n_agents,
            "n_failed": cfg.n_agents - len(reports),
            "n_sharpe_undefined": summary.n_sharpe_undefined,
            "sharpe_mean": summary.sharpe.mean,
            "sharpe_std": summary.sharpe.std,
            "return_pct_mean": summary.total_return_pct.mean,
            "return_pct_std": summary.total_return_pct.std,
            "total_pnl_mean": float(np.mean([r.total_pnl for r in reports])),
        },
    )
    log.info(
        "mean sharpe %.3f (sd %.3f), mean return %.4f%%",
        summary.sharpe.mean,
        summary.sharpe.std,
        summary.total_return_pct.mean,
    )
    return EXIT_OK


def cmd_experiment_real(args, cfg: RunConfig) -> int:
    train_src = Path(args.train_csv or cfg.paths["train_csv"] or "")
    test_src = Path(args.test_csv or cfg.paths["test_csv"] or "")
    for src in (train_src, test_src):
        if not str(src) or not src.exists():
            raise InputError(f"price file {src} not found")
    train = _read_prices(train_src, cfg.calibration_dt, 50, "train file")
    test = _read_prices(test_src, cfg.calibration_dt, 2, "test file")

    params, trace = calibrate(train, cfg.r, cfg.calibration)
    sim = SimConfig(
        s0=float(train.prices[-1]),
        v0=params.theta,
        n_steps=cfg.train_steps,
        dt=train.dt,
        seed=derive_seed(cfg.seed, "real-train-path", 0),
    )
    with np.errstate(over="ignore", invalid="ignore"):
        try:
            synthetic = simulate_heston(params, sim)
        except InvalidParameterError as exc:
            raise EstimationError(f"fitted parameters give an unusable path: {exc}") from exc
    batch = collect_transitions(synthetic, cfg.trading, derive_seed(cfg.seed, "collect", 0))
    result = fqi_train(batch, _fqi_config(cfg, derive_seed(cfg.seed, "fqi", 0)))

    market = replay_market(test, ekf_filter_pass(test, params, cfg.calibration).v_hat, cfg.trading.tick_size) \
        if len(test) >= 3 else replay_market(test, np.full(len(test), params.theta), cfg.trading.tick_size)
    episode = run_policy(result.q, market, cfg.trading)
    report = make_report(episode, cfg.trading, cfg.periods_per_year, cfg.risk_free)

    out = _out_dir(args)
    comment = _comment(cfg)
    pdoc = params.to_dict()
    pdoc["config_hash"] = cfg.config_hash
    io.write_json(out / "params.json", pdoc)
    io.write_csv(out / "trace.csv", TRACE_HEADER, trace.rows(), comment)
    result.q.save(out / "qfunction.json")
    doc = report.to_dict()
    doc.update(
        config_hash=cfg.config_hash,
        calibrated_params=params.to_dict(),
        calibration_sweeps=len(trace),
        decomposition_gap=episode.decomposition_gap(),
    )
    io.write_json(out / "report.json", doc)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config file (INI sections)")
    common.add_argument("--seed", type=int, help="master seed, overrides [run] seed")
    common.add_argument("--jobs", type=int, help="parallel agents, overrides [run] jobs")
    common.add_argument("--out-dir", default=".", help="directory for output files")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="hestonfqi", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", parents=[common], help="fit Heston parameters to a price CSV")
    p.add_argument("price_csv", nargs="?")
    p.add_argument("--r", type=float, help="per-step risk-free rate")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("simulate", parents=[common], help="simulate Heston paths from params JSON")
    p.add_argument("params_json", nargs="?")
    p.add_argument("--count", type=int)
    p.add_argument("--n-steps", type=int, dest="n_steps")
    p.add_argument("--s0", type=float)
    p.add_argument("--v0", type=float)
    p.add_argument("--dt", type=float)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("collect", parents=[common], help="random-policy transitions from a path CSV")
    p.add_argument("price_csv")
    p.add_argument("--params", help="params JSON used to filter variances when the CSV has none")
    p.set_defaults(func=cmd_collect)

    p = sub.add_parser("train", parents=[common], help="fitted Q iteration on a transitions file")
    p.add_argument("transitions")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("backtest", parents=[common], help="trade a price CSV greedily")
    p.add_argument("qfunction")
    p.add_argument("price_csv")
    p.add_argument("--params", help="params JSON used to filter variances when the CSV has none")
    p.set_defaults(func=cmd_backtest)

    p = sub.add_parser("experiment-arbitrage", parents=[common], help="train/test agents on reverting markets")
    p.set_defaults(func=cmd_experiment_arbitrage)

    p = sub.add_parser("experiment-real", parents=[common], help="calibrate, simulate, train, test on CSV prices")
    p.add_argument("train_csv", nargs="?")
    p.add_argument("test_csv", nargs="?")
    p.set_defaults(func=cmd_experiment_real)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    overrides: dict[str, dict] = {"run": {}}
    if args.seed is not None:
        overrides["run"]["seed"] = args.seed
    if args.jobs is not None:
        overrides["run"]["jobs"] = args.jobs
    try:
        cfg = load_config(args.config, overrides)
        return args.func(args, cfg)
    except (InputError, DataFormatError, InvalidParameterError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (EstimationError, FloatingPointError) as exc:
        print(f"estimation failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except Exception as exc:  # pragma: no cover - last-resort guard
        log.exception("internal error")
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
