"""Sectioned ``key = value`` run configuration (INI syntax).

Every key has a default; a config file only needs the keys it changes.
Unknown sections or keys are rejected so typos fail before any work starts.
The defaults use the standard trading setup (K=5, M=10, lot 100, tick
0.01, risk aversion 1e-4, discount 0.999, 10 trees, 5/5 split/leaf minima)
at desk scale; ``configs/full.ini`` switches on the full-size experiment.
"""
from __future__ import annotations

import configparser
import hashlib
import math
from dataclasses import dataclass
from pathlib import Path

from .calibrate import CalibrationConfig
from .errors import InvalidParameterError
from .extratrees import TreeParams
from .fqi import FqiConfig
from .heston import HestonParams, SimConfig
from .trading_env import ArbitrageMarketConfig, TradingConfig

DEFAULTS: dict[str, dict[str, object]] = {
    "run": {"seed": 0, "jobs": 1},
    "calibration": {
        "init_kappa": 0.1,
        "init_theta": 0.1,
        "init_sigma": 0.1,
        "init_rho": 0.1,
        "max_sweeps": 50,
        "tol": 1e-4,
        "rho_search_tol": 1e-6,
        "p0": 1e-4,
        "r": 0.00004,
        "dt": 1.0,
    },
    "simulation": {"s0": 100.0, "v0": 0.0001, "n_steps": 251, "dt": 1.0, "seed": 0, "count": 1},
    "trading": {
        "max_trade_lots": 5,
        "max_hold_lots": 10,
        "lot_size": 100,
        "tick_size": 0.01,
        "risk_kappa": 1e-4,
        "discount": 0.999,
    },
    "fqi": {
        "n_iterations": 50,
        "regressor": "extratrees",
        "early_stop": False,
        "early_stop_tol": 1e-4,
        "early_stop_patience": 5,
    },
    "trees": {
        "n_trees": 10,
        "min_samples_split": 5,
        "min_samples_leaf": 5,
        "n_candidate_splits": "auto",
    },
    "arbitrage": {
        "kappa": 0.05,
        "theta": 1e-4,
        "sigma": 0.002,
        "rho": -0.5,
        "s0": 50.0,
        "v0": "theta",
        "n_steps": 10_000,
        "half_life": 20.0,
        "dt": 1.0,
    },
    "experiment": {
        "n_agents": 10,
        "train_steps": 10_000,
        "periods_per_year": 252,
        "risk_free": 0.0,
    },
    "paths": {"price_csv": "", "train_csv": "", "test_csv": "", "params_json": ""},
}

# execution-only keys; they never change results, so they stay out of the hash
_UNHASHED = {("run", "jobs")}


def _coerce(section: str, key: str, raw: str):
    default = DEFAULTS[section][key]
    text = raw.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            value = float(text)
            if value != int(value):
                raise ValueError(text)
            return int(value)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise InvalidParameterError(f"[{section}] {key}: cannot parse {raw!r}") from None
    return text


def _canonical(values: dict[str, dict[str, object]]) -> str:
    lines = []
    for section in sorted(values):
        lines.append(f"[{section}]")
        for key in sorted(values[section]):
            if (section, key) in _UNHASHED:
                continue
            v = values[section][key]
            lines.append(f"{key}={v!r}")
    return "\n".join(lines)


@dataclass(frozen=True)
class RunConfig:
    values: dict
    seed: int
    jobs: int
    calibration: CalibrationConfig
    r: float
    calibration_dt: float
    sim: SimConfig
    sim_count: int
    trading: TradingConfig
    fqi: FqiConfig
    arbitrage: ArbitrageMarketConfig
    n_agents: int
    train_steps: int
    periods_per_year: int
    risk_free: float
    paths: dict

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(_canonical(self.values).encode()).hexdigest()[:16]

    def to_ini(self) -> str:
        parser = configparser.ConfigParser()
        for section in sorted(self.values):
            parser[section] = {k: str(v) for k, v in sorted(self.values[section].items())}
        from io import StringIO

        buf = StringIO()
        parser.write(buf)
        return buf.getvalue()


def _build(values: dict[str, dict[str, object]], base_dir: Path | None) -> RunConfig:
    run = values["run"]
    cal = values["calibration"]
    sim = values["simulation"]
    trd = values["trading"]
    fq = values["fqi"]
    tr = values["trees"]
    arb = values["arbitrage"]
    exp = values["experiment"]

    if run["seed"] < 0:
        raise InvalidParameterError("[run] seed must be non-negative")
    if run["jobs"] < 1:
        raise InvalidParameterError("[run] jobs must be >= 1")
    if not cal["dt"] > 0:
        raise InvalidParameterError("[calibration] dt must be > 0")

    calibration = CalibrationConfig(
        init_params=HestonParams(
            cal["init_kappa"], cal["init_theta"], cal["init_sigma"], cal["init_rho"], cal["r"]
        ),
        max_sweeps=cal["max_sweeps"],
        tol=cal["tol"],
        rho_search_tol=cal["rho_search_tol"],
        p0=cal["p0"],
    )
    sim_cfg = SimConfig(sim["s0"], sim["v0"], sim["n_steps"], sim["dt"], sim["seed"])
    if sim["count"] < 1:
        raise InvalidParameterError("[simulation] count must be >= 1")
    trading = TradingConfig(
        trd["max_trade_lots"],
        trd["max_hold_lots"],
        trd["lot_size"],
        trd["tick_size"],
        trd["risk_kappa"],
        trd["discount"],
    )
    n_cand = tr["n_candidate_splits"]
    if str(n_cand).lower() == "auto":
        n_cand = None
    else:
        try:
            n_cand = int(n_cand)
        except ValueError:
            raise InvalidParameterError("[trees] n_candidate_splits must be an integer or 'auto'") from None
    trees = TreeParams(tr["n_trees"], tr["min_samples_split"], tr["min_samples_leaf"], n_cand, 0)
    fqi = FqiConfig(
        n_iterations=fq["n_iterations"],
        discount=trading.discount,
        tree_params=trees,
        seed=0,
        regressor=fq["regressor"],
        early_stop=fq["early_stop"],
        early_stop_tol=fq["early_stop_tol"],
        early_stop_patience=fq["early_stop_patience"],
    )
    if not arb["half_life"] > 0:
        raise InvalidParameterError("[arbitrage] half_life must be > 0")
    heston = HestonParams(arb["kappa"], arb["theta"], arb["sigma"], arb["rho"], 0.0)
    v0_raw = str(arb["v0"]).strip().lower()
    try:
        v0 = None if v0_raw == "theta" else float(v0_raw)
    except ValueError:
        raise InvalidParameterError("[arbitrage] v0 must be a number or 'theta'") from None
    arbitrage = ArbitrageMarketConfig(
        heston=heston,
        s0=arb["s0"],
        v0=v0,
        n_steps=arb["n_steps"],
        seed=0,
        reversion_rate=math.log(2.0) / arb["half_life"],
        dt=arb["dt"],
        tick_size=trading.tick_size,
    )
    if exp["n_agents"] < 1:
        raise InvalidParameterError("[experiment] n_agents must be >= 1")
    if exp["train_steps"] < 1:
        raise InvalidParameterError("[experiment] train_steps must be >= 1")
    if exp["periods_per_year"] < 1:
        raise InvalidParameterError("[experiment] periods_per_year must be >= 1")

    paths = {}
    for key, raw in values["paths"].items():
        if not raw:
            paths[key] = None
            continue
        p = Path(raw)
        if not p.is_absolute() and base_dir is not None:
            p = base_dir / p
        if not p.exists():
            raise InvalidParameterError(f"[paths] {key}: {p} does not exist")
        paths[key] = p

    return RunConfig(
        values=values,
        seed=run["seed"],
        jobs=run["jobs"],
        calibration=calibration,
        r=cal["r"],
        calibration_dt=cal["dt"],
        sim=sim_cfg,
        sim_count=sim["count"],
        trading=trading,
        fqi=fqi,
        arbitrage=arbitrage,
        n_agents=exp["n_agents"],
        train_steps=exp["train_steps"],
        periods_per_year=exp["periods_per_year"],
        risk_free=exp["risk_free"],
        paths=paths,
    )


def load_config(
    source: str | Path | None = None,
    overrides: dict[str, dict[str, object]] | None = None,
) -> RunConfig:
    """Load and fully validate a run config.

    ``overrides`` are applied on top of the file, e.g.
    ``{"run": {"seed": 7}}`` for a ``--seed`` flag.
    """
    values = {s: dict(keys) for s, keys in DEFAULTS.items()}
    base_dir = None
    if source is not None:
        source = Path(source)
        if not source.exists():
            raise InvalidParameterError(f"config file {source} does not exist")
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read_string(source.read_text(), source=str(source))
        except configparser.Error as exc:
            raise InvalidParameterError(f"{source}: {exc}") from exc
        for section in parser.sections():
            if section not in DEFAULTS:
                raise InvalidParameterError(f"{source}: unknown section [{section}]")
            for key, raw in parser[section].items():
                if key not in DEFAULTS[section]:
                    raise InvalidParameterError(f"{source}: unknown key {key!r} in [{section}]")
                values[section][key] = _coerce(section, key, raw)
        base_dir = source.parent
    for section, keys in (overrides or {}).items():
        for key, value in keys.items():
            if section not in DEFAULTS or key not in DEFAULTS[section]:
                raise InvalidParameterError(f"unknown override {section}.{key}")
            values[section][key] = _coerce(section, key, str(value))
    return _build(values, base_dir)
