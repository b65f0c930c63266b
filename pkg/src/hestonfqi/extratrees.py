"""Extremely randomized regression trees, written from scratch.

Each tree sees the full training set.  At a node holding at least
``min_samples_split`` points with non-constant targets, up to
``n_candidate_splits`` distinct non-constant features are drawn; each gets
one threshold uniform between the node-local min and max of that feature.
The candidate with the largest variance reduction whose children both keep
``min_samples_leaf`` points wins; with no admissible candidate the node is a
leaf holding the mean target.  Prediction routes ``x <= threshold`` left and
averages the leaf values of all trees with equal weight.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import _kernels
from .errors import InvalidParameterError
from .rng import derive_seed

FORMAT = "hestonfqi.ensemble"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class TreeParams:
    n_trees: int = 10
    min_samples_split: int = 5
    min_samples_leaf: int = 5
    n_candidate_splits: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise InvalidParameterError(f"n_trees must be >= 1, got {self.n_trees}")
        if self.min_samples_split < 2:
            raise InvalidParameterError(
                f"min_samples_split must be >= 2, got {self.min_samples_split}"
            )
        if self.min_samples_leaf < 1:
            raise InvalidParameterError(
                f"min_samples_leaf must be >= 1, got {self.min_samples_leaf}"
            )
        if self.n_candidate_splits is not None and self.n_candidate_splits < 1:
            raise InvalidParameterError("n_candidate_splits must be >= 1")
        if self.seed < 0:
            raise InvalidParameterError(f"seed must be non-negative, got {self.seed}")

    def with_seed(self, seed: int) -> "TreeParams":
        return TreeParams(
            self.n_trees,
            self.min_samples_split,
            self.min_samples_leaf,
            self.n_candidate_splits,
            seed,
        )


class Ensemble:
    """A fitted forest stored as flat node arrays.

    Node ``i`` is a leaf when ``feature[i] == -1``; ``left``/``right`` hold
    absolute node indices and ``roots[t]`` is the first node of tree ``t``.
    """

    def __init__(self, trees: list[tuple], feature_dim: int, params: TreeParams | None = None):
        if not trees:
            raise InvalidParameterError("an ensemble needs at least one tree")
        self.feature_dim = int(feature_dim)
        self.params = params
        self.n_trees = len(trees)
        sizes = [len(t[0]) for t in trees]
        offsets = np.concatenate(([0], np.cumsum(sizes)[:-1])).astype(np.int64)
        feat, thr, left, right, val = (np.concatenate(parts) for parts in zip(*trees))
        self.feature = np.ascontiguousarray(feat, dtype=np.int64)
        self.threshold = np.ascontiguousarray(thr, dtype=np.float64)
        self.value = np.ascontiguousarray(val, dtype=np.float64)
        shift = np.repeat(offsets, sizes)
        left = np.asarray(left, dtype=np.int64)
        right = np.asarray(right, dtype=np.int64)
        self.left = np.ascontiguousarray(np.where(left >= 0, left + shift, -1))
        self.right = np.ascontiguousarray(np.where(right >= 0, right + shift, -1))
        self.roots = offsets
        self._sizes = sizes
        if self.feature.max(initial=-1) >= self.feature_dim:
            raise InvalidParameterError("split feature index exceeds feature_dim")

    def tree_arrays(self, t: int) -> tuple[np.ndarray, ...]:
        """Local (per-tree) ``feature, threshold, left, right, value`` arrays."""
        start = int(self.roots[t])
        stop = start + self._sizes[t]
        sl = slice(start, stop)
        left = self.left[sl]
        right = self.right[sl]
        return (
            self.feature[sl],
            self.threshold[sl],
            np.where(left >= 0, left - start, -1),
            np.where(right >= 0, right - start, -1),
            self.value[sl],
        )

    def predict(self, x) -> float:
        row = np.asarray(x, dtype=np.float64)
        if row.ndim != 1:
            raise InvalidParameterError("predict expects a single feature row")
        return float(self.predict_batch(row[None, :])[0])

    def predict_batch(self, xs) -> np.ndarray:
        xs = np.asarray(xs, dtype=np.float64)
        if xs.size == 0:
            return np.empty(0)
        if xs.ndim != 2 or xs.shape[1] != self.feature_dim:
            raise InvalidParameterError(
                f"expected rows of dimension {self.feature_dim}, got shape {xs.shape}"
            )
        if not np.all(np.isfinite(xs)):
            raise InvalidParameterError("feature rows must be finite")
        return _kernels.predict_forest(
            np.ascontiguousarray(xs),
            self.feature,
            self.threshold,
            self.left,
            self.right,
            self.value,
            self.roots,
        )

    def to_dict(self) -> dict:
        trees = []
        for t in range(self.n_trees):
            f, thr, lf, rt, val = self.tree_arrays(t)
            trees.append(
                {
                    "feature": f.tolist(),
                    "threshold": thr.tolist(),
                    "left": lf.tolist(),
                    "right": rt.tolist(),
                    "value": val.tolist(),
                }
            )
        return {
            "format": FORMAT,
            "version": FORMAT_VERSION,
            "feature_dim": self.feature_dim,
            "params": None if self.params is None else asdict(self.params),
            "trees": trees,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Ensemble":
        if doc.get("format") != FORMAT or doc.get("version") != FORMAT_VERSION:
            raise InvalidParameterError(
                f"not a version-{FORMAT_VERSION} {FORMAT} document"
            )
        trees = [
            (
                np.asarray(t["feature"], dtype=np.int64),
                np.asarray(t["threshold"], dtype=np.float64),
                np.asarray(t["left"], dtype=np.int64),
                np.asarray(t["right"], dtype=np.int64),
                np.asarray(t["value"], dtype=np.float64),
            )
            for t in doc["trees"]
        ]
        params = TreeParams(**doc["params"]) if doc.get("params") else None
        return cls(trees, doc["feature_dim"], params)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def save(self, target: str | Path) -> None:
        Path(target).write_text(self.to_json())

    @classmethod
    def load(cls, source: str | Path) -> "Ensemble":
        return cls.from_dict(json.loads(Path(source).read_text()))


def _validate_training_data(xs, ys) -> tuple[np.ndarray, np.ndarray]:
    xs = np.ascontiguousarray(xs, dtype=np.float64)
    ys = np.ascontiguousarray(ys, dtype=np.float64)
    if xs.ndim != 2 or xs.shape[0] == 0 or xs.shape[1] == 0:
        raise InvalidParameterError("xs must be a non-empty 2-d matrix")
    if ys.shape != (xs.shape[0],):
        raise InvalidParameterError(
            f"ys has shape {ys.shape}, expected ({xs.shape[0]},)"
        )
    if not (np.all(np.isfinite(xs)) and np.all(np.isfinite(ys))):
        raise InvalidParameterError("training data must be finite")
    return xs, ys


def tree_seed(seed: int, index: int) -> int:
    return derive_seed(seed, "tree", index)


def fit(xs, ys, params: TreeParams | None = None) -> Ensemble:
    """Fit an extra-trees ensemble; deterministic in ``params.seed``."""
    params = params or TreeParams()
    xs, ys = _validate_training_data(xs, ys)
    d = xs.shape[1]
    n_cand = d if params.n_candidate_splits is None else params.n_candidate_splits
    trees = [
        _kernels.build_tree(
            xs,
            ys,
            params.min_samples_split,
            params.min_samples_leaf,
            n_cand,
            tree_seed(params.seed, t),
        )
        for t in range(params.n_trees)
    ]
    return Ensemble(trees, d, params)


def predict(model: Ensemble, x) -> float:
    return model.predict(x)


def predict_batch(model: Ensemble, xs) -> np.ndarray:
    return model.predict_batch(xs)
