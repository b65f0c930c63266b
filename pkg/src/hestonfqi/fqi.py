"""Batch fitted Q iteration plus small-MDP tabular oracles.

``fqi_train`` starts from the zero function and, at iteration ``N``, fits a
fresh regressor on ``(state, action) -> r + discount * max_a' Q_{N-1}(s', a')``
where the max only ranges over the actions that were feasible at ``s'``.
The regressor is the extra-trees ensemble by default; a lookup table
(``regressor="table"``) gives exact FQI on finite problems.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from . import extratrees
from .errors import InvalidParameterError
from .extratrees import Ensemble, TreeParams
from .heston import PricePath
from .rng import derive_seed, generator
from .trading_env import (
    EnvState,
    MarketStream,
    TradingConfig,
    action_universe,
    feasible_actions,
    replay_market,
    state_features,
    step,
)

QFUNCTION_FORMAT = "hestonfqi.qfunction"
QFUNCTION_VERSION = 1


class Transition(NamedTuple):
    state: tuple
    action: float
    reward: float
    next_state: tuple
    next_feasible: tuple


@dataclass(eq=False)
class TransitionBatch:
    """Column-wise store of transitions; ``next_mask`` indexes ``action_universe``."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    next_mask: np.ndarray
    action_universe: tuple

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.float64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        self.next_states = np.asarray(self.next_states, dtype=np.float64)
        self.next_mask = np.asarray(self.next_mask, dtype=bool)
        self.action_universe = tuple(self.action_universe)
        n = self.actions.shape[0]
        if self.states.ndim != 2 or self.states.shape[0] != n:
            raise InvalidParameterError("states must be an (n, d) matrix")
        if self.next_states.shape != self.states.shape:
            raise InvalidParameterError("next_states must match states in shape")
        if self.rewards.shape != (n,):
            raise InvalidParameterError("rewards must have one entry per transition")
        if self.next_mask.shape != (n, len(self.action_universe)):
            raise InvalidParameterError("next_mask must be (n, |action_universe|)")
        if n and not self.next_mask.any(axis=1).all():
            raise InvalidParameterError("every next state needs at least one feasible action")
        if not np.all(np.isfinite(self.rewards)):
            raise InvalidParameterError("rewards must be finite")

    def __len__(self) -> int:
        return self.actions.shape[0]

    def __getitem__(self, i: int) -> Transition:
        acts = np.asarray(self.action_universe)
        return Transition(
            tuple(self.states[i]),
            float(self.actions[i]),
            float(self.rewards[i]),
            tuple(self.next_states[i]),
            tuple(acts[self.next_mask[i]].tolist()),
        )

    def __iter__(self) -> Iterator[Transition]:
        for i in range(len(self)):
            yield self[i]

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    def save(self, target: str | Path) -> None:
        with open(target, "wb") as fh:
            np.savez(
                fh,
                states=self.states,
                actions=self.actions,
                rewards=self.rewards,
                next_states=self.next_states,
                next_mask=self.next_mask,
                action_universe=np.asarray(self.action_universe, dtype=np.float64),
            )

    @classmethod
    def load(cls, source: str | Path) -> "TransitionBatch":
        with np.load(source) as z:
            return cls(
                z["states"],
                z["actions"],
                z["rewards"],
                z["next_states"],
                z["next_mask"],
                tuple(z["action_universe"].tolist()),
            )


def collect_transitions(
    market: PricePath | MarketStream,
    cfg: TradingConfig,
    seed: int,
) -> TransitionBatch:
    """Walk the market once under a uniformly random feasible-action policy."""
    if isinstance(market, PricePath):
        market = replay_market(market, tick_size=cfg.tick_size)
    if market.n_steps < 1:
        raise InvalidParameterError("need at least 2 prices to collect a transition")
    rng = generator(seed)
    universe = action_universe(cfg)
    lots = np.arange(-cfg.max_trade_lots, cfg.max_trade_lots + 1)
    n = market.n_steps
    prices = market.prices
    vols = market.vols
    p0 = float(prices[0])

    states = np.empty((n, 3))
    next_states = np.empty((n, 3))
    actions = np.empty(n)
    rewards = np.empty(n)
    next_mask = np.empty((n, len(universe)), dtype=bool)

    state = EnvState(0, float(prices[0]), float(vols[0]))
    for t in range(n):
        feasible = feasible_actions(state.holding, cfg)
        dn = feasible[int(rng.integers(len(feasible)))]
        out = step(state, dn, float(prices[t + 1]), cfg, float(vols[t + 1]))
        states[t] = state_features(state, p0)
        actions[t] = dn
        rewards[t] = out.reward
        next_states[t] = state_features(out.next_state, p0)
        next_mask[t] = np.abs(out.next_state.holding + lots) <= cfg.max_hold_lots
        state = out.next_state
    return TransitionBatch(states, actions, rewards, next_states, next_mask, universe)


class ZeroModel:
    """The initial Q function: zero everywhere."""

    kind = "zero"

    def __init__(self, feature_dim: int):
        self.feature_dim = feature_dim

    def predict_batch(self, xs) -> np.ndarray:
        return np.zeros(np.asarray(xs).shape[0])

    def to_dict(self) -> dict:
        return {"feature_dim": self.feature_dim}


class LookupTable:
    """Exact regressor for finite inputs: mean target per distinct feature row."""

    kind = "table"

    def __init__(self, table: dict[tuple, float], feature_dim: int, default: float = 0.0):
        self.table = table
        self.feature_dim = feature_dim
        self.default = default

    @classmethod
    def fit(cls, xs, ys) -> "LookupTable":
        xs = np.asarray(xs, dtype=np.float64)
        ys = np.asarray(ys, dtype=np.float64)
        keys, inverse = np.unique(xs, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        sums = np.bincount(inverse, weights=ys, minlength=len(keys))
        counts = np.bincount(inverse, minlength=len(keys))
        table = {tuple(k.tolist()): float(s / c) for k, s, c in zip(keys, sums, counts)}
        return cls(table, xs.shape[1])

    def predict_batch(self, xs) -> np.ndarray:
        xs = np.asarray(xs, dtype=np.float64)
        return np.array([self.table.get(tuple(row.tolist()), self.default) for row in xs])

    def to_dict(self) -> dict:
        return {
            "feature_dim": self.feature_dim,
            "keys": [list(k) for k in self.table],
            "values": list(self.table.values()),
        }


def _model_from_dict(kind: str, doc: dict):
    if kind == "extratrees":
        return Ensemble.from_dict(doc)
    if kind == "table":
        table = {tuple(k): float(v) for k, v in zip(doc["keys"], doc["values"])}
        return LookupTable(table, doc["feature_dim"])
    if kind == "zero":
        return ZeroModel(doc["feature_dim"])
    raise InvalidParameterError(f"unknown Q model kind {kind!r}")


def _model_kind(model) -> str:
    return "extratrees" if isinstance(model, Ensemble) else model.kind


@dataclass
class QFunction:
    model: object
    action_universe: tuple
    iteration_count: int = 0
    discount: float = 0.999

    @classmethod
    def zero(cls, state_dim: int, action_universe: Sequence, discount: float = 0.999) -> "QFunction":
        return cls(ZeroModel(state_dim + 1), tuple(action_universe), 0, discount)

    @property
    def state_dim(self) -> int:
        return self.model.feature_dim - 1

    def q_values(self, state, actions: Sequence) -> np.ndarray:
        state = np.asarray(state, dtype=np.float64)
        rows = np.empty((len(actions), state.size + 1))
        rows[:, :-1] = state
        rows[:, -1] = actions
        return self.model.predict_batch(rows)

    def to_dict(self) -> dict:
        kind = _model_kind(self.model)
        return {
            "format": QFUNCTION_FORMAT,
            "version": QFUNCTION_VERSION,
            "iteration_count": self.iteration_count,
            "discount": self.discount,
            "action_universe": list(self.action_universe),
            "model_kind": kind,
            "model": self.model.to_dict(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "QFunction":
        if doc.get("format") != QFUNCTION_FORMAT or doc.get("version") != QFUNCTION_VERSION:
            raise InvalidParameterError(f"not a version-{QFUNCTION_VERSION} Q function document")
        model = _model_from_dict(doc["model_kind"], doc["model"])
        return cls(model, tuple(doc["action_universe"]), int(doc["iteration_count"]), float(doc["discount"]))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def save(self, target: str | Path) -> None:
        Path(target).write_text(self.to_json())

    @classmethod
    def load(cls, source: str | Path) -> "QFunction":
        return cls.from_dict(json.loads(Path(source).read_text()))


@dataclass(frozen=True)
class FqiConfig:
    n_iterations: int = 50
    discount: float = 0.999
    tree_params: TreeParams = field(default_factory=TreeParams)
    seed: int = 0
    regressor: str = "extratrees"
    early_stop: bool = False
    early_stop_tol: float = 1e-4
    early_stop_patience: int = 5

    def __post_init__(self):
        if int(self.n_iterations) != self.n_iterations or self.n_iterations < 1:
            raise InvalidParameterError("n_iterations must be >= 1")
        if not 0.0 <= self.discount <= 1.0:
            raise InvalidParameterError("discount must lie in [0, 1]")
        if self.regressor not in ("extratrees", "table"):
            raise InvalidParameterError(f"unknown regressor {self.regressor!r}")
        if self.early_stop_patience < 1:
            raise InvalidParameterError("early_stop_patience must be >= 1")


@dataclass
class FqiResult:
    q: QFunction
    mean_abs_target_change: list[float]
    targets: np.ndarray
    target_history: list[np.ndarray] = field(default_factory=list)
    stopped_early: bool = False


def bootstrap_max(model, next_states: np.ndarray, next_mask: np.ndarray, actions) -> np.ndarray:
    """``max_a Q(s', a)`` per row, querying only the feasible ``(s', a)`` pairs."""
    acts = np.asarray(actions, dtype=np.float64)
    rows, cols = np.nonzero(next_mask)
    queries = np.empty((rows.size, next_states.shape[1] + 1))
    queries[:, :-1] = next_states[rows]
    queries[:, -1] = acts[cols]
    q = np.full(next_mask.shape, -np.inf)
    q[rows, cols] = model.predict_batch(queries)
    return q.max(axis=1)


def _fit_regressor(xs, ys, cfg: FqiConfig, iteration: int):
    if cfg.regressor == "table":
        return LookupTable.fit(xs, ys)
    seed = derive_seed(cfg.seed, "fqi-iteration", iteration)
    return extratrees.fit(xs, ys, cfg.tree_params.with_seed(seed))


def fqi_train(
    transitions: TransitionBatch,
    cfg: FqiConfig | None = None,
    keep_targets: bool = False,
) -> FqiResult:
    """Run fitted Q iteration over a fixed batch of transitions.

    Parameters
    ----------
    transitions : TransitionBatch
        The training tuples; their ``next_mask`` restricts the bootstrap max.
    cfg : FqiConfig
        Iteration count, discount, regressor choice and seeds.
    keep_targets : bool
        Also return every iteration's regression targets (for diagnostics).

    Returns
    -------
    FqiResult
        The final Q function, per-iteration mean absolute change of the
        target vector (iteration 1 is measured against zero) and the last
        targets.
    """
    cfg = cfg or FqiConfig()
    if len(transitions) == 0:
        raise InvalidParameterError("fqi_train needs at least one transition")
    xs = np.column_stack([transitions.states, transitions.actions])
    model = ZeroModel(xs.shape[1])
    prev = np.zeros(len(transitions))
    changes: list[float] = []
    history: list[np.ndarray] = []
    quiet = 0
    stopped = False
    done = 0
    for it in range(1, cfg.n_iterations + 1):
        if it == 1 or cfg.discount == 0.0:
            targets = transitions.rewards.copy()
        else:
            boot = bootstrap_max(
                model, transitions.next_states, transitions.next_mask, transitions.action_universe
            )
            targets = transitions.rewards + cfg.discount * boot
        model = _fit_regressor(xs, targets, cfg, it)
        done = it
        change = float(np.mean(np.abs(targets - prev)))
        changes.append(change)
        if keep_targets:
            history.append(targets.copy())
        prev = targets
        if cfg.early_stop:
            quiet = quiet + 1 if change < cfg.early_stop_tol else 0
            if quiet >= cfg.early_stop_patience:
                stopped = True
                break
    q = QFunction(model, transitions.action_universe, done, cfg.discount)
    return FqiResult(q, changes, prev, history, stopped)


def greedy_action(q: QFunction, state, feasible: Sequence) -> float:
    """Feasible action with the largest Q value.

    Exact ties go to the smallest ``|action|``, then to the negative one.
    """
    if len(feasible) == 0:
        raise InvalidParameterError("feasible action set is empty")
    if len(feasible) == 1:
        return feasible[0]
    values = q.q_values(state, feasible)
    best = values.max()
    tied = [a for a, v in zip(feasible, values) if v == best]
    return min(tied, key=lambda a: (abs(a), a))


# ---------------------------------------------------------------------------
# finite MDP oracles
# ---------------------------------------------------------------------------


@dataclass
class DiscreteMDP:
    """Finite MDP with transition tensor ``p[s, a, s']`` and rewards ``reward[s, a]``."""

    p: np.ndarray
    reward: np.ndarray

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=np.float64)
        self.reward = np.asarray(self.reward, dtype=np.float64)
        s, a = self.reward.shape
        if self.p.shape != (s, a, s):
            raise InvalidParameterError("p must have shape (S, A, S)")
        if not np.allclose(self.p.sum(axis=2), 1.0):
            raise InvalidParameterError("transition rows must sum to 1")

    @classmethod
    def deterministic(cls, next_state, reward) -> "DiscreteMDP":
        nxt = np.asarray(next_state, dtype=np.int64)
        s, a = nxt.shape
        p = np.zeros((s, a, s))
        for i in range(s):
            for j in range(a):
                p[i, j, nxt[i, j]] = 1.0
        return cls(p, reward)

    @property
    def n_states(self) -> int:
        return self.reward.shape[0]

    @property
    def n_actions(self) -> int:
        return self.reward.shape[1]

    def bellman(self, q: np.ndarray, discount: float) -> np.ndarray:
        return self.reward + discount * self.p @ q.max(axis=1)

    def transitions(self, copies: int = 1) -> TransitionBatch:
        """Every ``(s, a)`` pair with each reachable ``s'``, repeated ``copies`` times.

        Only valid for deterministic MDPs, where this is exhaustive coverage.
        """
        if not np.all((self.p == 0.0) | (self.p == 1.0)):
            raise InvalidParameterError("exhaustive transitions need a deterministic MDP")
        s_idx, a_idx, n_idx = np.nonzero(self.p)
        reps = np.repeat(np.arange(s_idx.size), copies)
        s_idx, a_idx, n_idx = s_idx[reps], a_idx[reps], n_idx[reps]
        return TransitionBatch(
            s_idx[:, None].astype(float),
            a_idx.astype(float),
            self.reward[s_idx, a_idx],
            n_idx[:, None].astype(float),
            np.ones((s_idx.size, self.n_actions), dtype=bool),
            tuple(float(a) for a in range(self.n_actions)),
        )


def chain_mdp(
    n_states: int = 3,
    left_reward: float = 0.5,
    right_reward: float = 1.0,
) -> DiscreteMDP:
    """Deterministic chain: action 0 moves left, action 1 moves right.

    Staying at the left end pays ``left_reward``; pushing right at the right
    end pays ``right_reward``; every other move pays nothing.
    """
    nxt = np.empty((n_states, 2), dtype=np.int64)
    reward = np.zeros((n_states, 2))
    for s in range(n_states):
        nxt[s, 0] = max(s - 1, 0)
        nxt[s, 1] = min(s + 1, n_states - 1)
    reward[0, 0] = left_reward
    reward[n_states - 1, 1] = right_reward
    return DiscreteMDP.deterministic(nxt, reward)


def value_iteration(mdp: DiscreteMDP, discount: float, tol: float = 1e-13, max_iter: int = 100_000) -> np.ndarray:
    """Optimal action values by repeated exact Bellman backups."""
    q = np.zeros_like(mdp.reward)
    for _ in range(max_iter):
        nxt = mdp.bellman(q, discount)
        if np.max(np.abs(nxt - q)) < tol:
            return nxt
        q = nxt
    return q


def tabular_q_learn(
    mdp: DiscreteMDP,
    alpha: float,
    discount: float,
    episodes: int,
    seed: int = 0,
    epsilon: float = 0.1,
    episode_length: int = 10,
) -> np.ndarray:
    """Watkins Q-learning with epsilon-greedy exploration from uniform random starts."""
    if not 0.0 < alpha <= 1.0:
        raise InvalidParameterError("alpha must lie in (0, 1]")
    rng = generator(seed)
    q = np.zeros_like(mdp.reward)
    n_s, n_a = mdp.reward.shape
    for _ in range(episodes):
        s = int(rng.integers(n_s))
        for _ in range(episode_length):
            if rng.random() < epsilon:
                a = int(rng.integers(n_a))
            else:
                a = int(np.argmax(q[s]))
            s2 = int(rng.choice(n_s, p=mdp.p[s, a]))
            target = mdp.reward[s, a] + discount * q[s2].max()
            q[s, a] += alpha * (target - q[s, a])
            s = s2
    return q
