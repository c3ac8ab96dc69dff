"""Regression random forest built from CART trees.

Trees are grown on bootstrap samples with variance-reduction splits and
stored as flat node arrays. Every tree draws from its own random stream
derived from ``(seed, tree_index)``, so results do not depend on the order
or concurrency of tree construction.
"""

from __future__ import annotations

import itertools
import json
import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import DegenerateTarget, EmptyTable

LEAF = -1

N_ESTIMATORS = tuple(range(100, 501, 50))
MAX_DEPTH = (10, 20, 30, None)
MIN_SAMPLES_SPLIT = (2, 5, 10)
MIN_SAMPLES_LEAF = (1, 2, 4)
MAX_FEATURES = ("sqrt", "log2", "all")


def thread_count() -> int:
    raw = os.environ.get("GREENSCAPE_THREADS", "")
    try:
        n = int(raw)
    except ValueError:
        n = 1
    return max(1, n)


@dataclass(frozen=True)
class ForestConfig:
    n_estimators: int = 200
    max_depth: int | None = None
    min_samples_split: int = 2
    min_samples_leaf: int = 2
    max_features: str = "all"
    seed: int = 0
    bootstrap: bool = True

    def __post_init__(self):
        if self.n_estimators < 1:
            raise ValueError("n_estimators must be >= 1")
        if self.max_depth is not None and self.max_depth < 1:
            raise ValueError("max_depth must be >= 1 or None")
        if self.min_samples_split < 2:
            raise ValueError("min_samples_split must be >= 2")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")
        if self.max_features not in MAX_FEATURES:
            raise ValueError(f"max_features must be one of {MAX_FEATURES}")

    def n_candidate_features(self, n_features: int) -> int:
        if self.max_features == "sqrt":
            return max(1, int(math.sqrt(n_features)))
        if self.max_features == "log2":
            return max(1, int(math.log2(n_features)))
        return n_features

    def hyperparameters(self) -> dict:
        return {
            "n_estimators": self.n_estimators,
            "max_depth": self.max_depth,
            "min_samples_split": self.min_samples_split,
            "min_samples_leaf": self.min_samples_leaf,
            "max_features": self.max_features,
        }


@dataclass(frozen=True)
class SearchSpace:
    n_estimators: tuple = N_ESTIMATORS
    max_depth: tuple = MAX_DEPTH
    min_samples_split: tuple = MIN_SAMPLES_SPLIT
    min_samples_leaf: tuple = MIN_SAMPLES_LEAF
    max_features: tuple = MAX_FEATURES

    def grid(self) -> list[dict]:
        keys = ("n_estimators", "max_depth", "min_samples_split", "min_samples_leaf", "max_features")
        values = [getattr(self, k) for k in keys]
        return [dict(zip(keys, combo)) for combo in itertools.product(*values)]

    def contains(self, config: ForestConfig) -> bool:
        return all(v in getattr(self, k) for k, v in config.hyperparameters().items())


# --------------------------------------------------------------------------
# trees


@dataclass
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n_samples: np.ndarray

    @property
    def node_count(self) -> int:
        return self.feature.size

    def apply(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        while True:
            f = self.feature[node]
            internal = f != LEAF
            if not internal.any():
                return node
            r, nd = rows[internal], node[internal]
            go_left = X[r, f[internal]] <= self.threshold[nd]
            node[internal] = np.where(go_left, self.left[nd], self.right[nd])

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(np.asarray(X, dtype=np.float64))]

    def to_dict(self, feature_names: Sequence[str] | None = None) -> dict:
        def node(i):
            if self.feature[i] == LEAF:
                return {"value": float(self.value[i]), "n": int(self.n_samples[i])}
            f = int(self.feature[i])
            return {
                "feature": f,
                "feature_name": feature_names[f] if feature_names is not None else None,
                "threshold": float(self.threshold[i]),
                "n": int(self.n_samples[i]),
                "value": float(self.value[i]),
                "left": node(int(self.left[i])),
                "right": node(int(self.right[i])),
            }

        return node(0)

    @classmethod
    def from_dict(cls, doc: dict) -> "Tree":
        feature, threshold, left, right, value, n = [], [], [], [], [], []
        stack = [(doc, -1, False)]
        while stack:
            d, parent, is_right = stack.pop()
            i = len(feature)
            if parent >= 0:
                (right if is_right else left)[parent] = i
            feature.append(d.get("feature", LEAF) if "left" in d else LEAF)
            threshold.append(d.get("threshold", 0.0))
            left.append(LEAF)
            right.append(LEAF)
            value.append(d["value"])
            n.append(d.get("n", 0))
            if "left" in d:
                stack.append((d["right"], i, True))
                stack.append((d["left"], i, False))
        return cls(
            np.array(feature, dtype=np.int64),
            np.array(threshold, dtype=np.float64),
            np.array(left, dtype=np.int64),
            np.array(right, dtype=np.int64),
            np.array(value, dtype=np.float64),
            np.array(n, dtype=np.int64),
        )


def _best_split(Xn: np.ndarray, yn: np.ndarray, features: np.ndarray, min_leaf: int):
    """Best variance-reduction split of one node over ``features``.

    Returns (feature, threshold) or None when no split separates the node
    with both children holding at least ``min_leaf`` rows.
    """
    n = yn.size
    cols = Xn[:, features]
    order = np.argsort(cols, axis=0, kind="stable")
    xs = np.take_along_axis(cols, order, axis=0)
    ys = yn[order]
    csum = np.cumsum(ys, axis=0)[:-1]
    total = csum[-1] + ys[-1] if n > 1 else ys[0]
    n_left = np.arange(1, n, dtype=np.float64)[:, None]
    n_right = n - n_left
    # maximizing S_L^2/n_L + S_R^2/n_R minimizes the children's summed squared error
    score = csum * csum / n_left + (total - csum) ** 2 / n_right
    valid = xs[1:] > xs[:-1]
    if min_leaf > 1:
        pos = np.arange(1, n)
        valid &= ((pos >= min_leaf) & (n - pos >= min_leaf))[:, None]
    if not valid.any():
        return None
    score = np.where(valid, score, -np.inf)
    # column-major flat argmax: the first candidate feature wins ties
    flat = int(np.argmax(score.T))
    k, i = divmod(flat, n - 1)
    parent = total[k] * total[k] / n
    if not score[i, k] > parent + 1e-12 * max(1.0, abs(parent)):
        return None
    lo, hi = xs[i, k], xs[i + 1, k]
    thr = lo + (hi - lo) / 2.0
    if not lo <= thr < hi:
        thr = lo
    return int(features[k]), float(thr)


def build_tree(
    X: np.ndarray,
    y: np.ndarray,
    config: ForestConfig,
    rng: np.random.Generator,
    sample: np.ndarray | None = None,
) -> Tree:
    """Grow one CART regression tree on rows ``sample`` (duplicates allowed)."""
    n_features = X.shape[1]
    k = config.n_candidate_features(n_features)
    max_depth = config.max_depth if config.max_depth is not None else np.iinfo(np.int64).max
    if sample is None:
        sample = np.arange(X.shape[0])

    feature: list[int] = []
    threshold: list[float] = []
    left: list[int] = []
    right: list[int] = []
    value: list[float] = []
    n_samples: list[int] = []

    def new_node(idx):
        feature.append(LEAF)
        threshold.append(0.0)
        left.append(LEAF)
        right.append(LEAF)
        yi = y[idx]
        # pure nodes keep the exact target value
        value.append(float(yi[0]) if yi.min() == yi.max() else float(np.mean(yi)))
        n_samples.append(idx.size)
        return len(feature) - 1

    stack = [(sample, 0, new_node(sample))]
    while stack:
        idx, depth, node = stack.pop()
        n = idx.size
        if depth >= max_depth or n < config.min_samples_split or n < 2 * config.min_samples_leaf:
            continue
        yn = y[idx]
        if yn.max() - yn.min() <= 0.0:
            continue
        features = rng.permutation(n_features)[:k] if k < n_features else np.arange(n_features)
        split = _best_split(X[idx], yn, features, config.min_samples_leaf)
        if split is None:
            continue
        f, thr = split
        mask = X[idx, f] <= thr
        li, ri = idx[mask], idx[~mask]
        feature[node] = f
        threshold[node] = thr
        left[node] = new_node(li)
        right[node] = new_node(ri)
        stack.append((ri, depth + 1, right[node]))
        stack.append((li, depth + 1, left[node]))

    return Tree(
        np.array(feature, dtype=np.int64),
        np.array(threshold, dtype=np.float64),
        np.array(left, dtype=np.int64),
        np.array(right, dtype=np.int64),
        np.array(value, dtype=np.float64),
        np.array(n_samples, dtype=np.int64),
    )


@dataclass
class TrainedForest:
    trees: list[Tree]
    config: ForestConfig
    feature_names: list[str]

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != len(self.feature_names):
            raise ValueError(f"expected {len(self.feature_names)} feature columns, got shape {X.shape}")
        # fixed summation order keeps predictions independent of how trees were built
        total = np.zeros(X.shape[0])
        lo = np.full(X.shape[0], np.inf)
        hi = np.full(X.shape[0], -np.inf)
        for t in self.trees:
            p = t.predict(X)
            total += p
            np.minimum(lo, p, out=lo)
            np.maximum(hi, p, out=hi)
        # unanimous trees return their shared value exactly, not a rounded mean
        return np.where(lo == hi, lo, total / len(self.trees))

    def to_dict(self) -> dict:
        return {
            "format": "greenscape-forest",
            "version": 1,
            "config": asdict(self.config),
            "feature_names": list(self.feature_names),
            "trees": [t.to_dict(self.feature_names) for t in self.trees],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainedForest":
        if doc.get("format") != "greenscape-forest":
            raise ValueError("not a greenscape forest document")
        return cls(
            [Tree.from_dict(t) for t in doc["trees"]],
            ForestConfig(**doc["config"]),
            list(doc["feature_names"]),
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "TrainedForest":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _train_one(X, y, config: ForestConfig, index: int) -> Tree:
    rng = np.random.default_rng([config.seed, index])
    sample = rng.integers(0, X.shape[0], X.shape[0]) if config.bootstrap else None
    return build_tree(X, y, config, rng, sample)


def train_forest(
    X: np.ndarray,
    y: np.ndarray,
    config: ForestConfig = ForestConfig(),
    feature_names: Sequence[str] | None = None,
    threads: int | None = None,
) -> TrainedForest:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.shape[0] == 0:
        raise EmptyTable("cannot train on an empty table")
    if y.shape != (X.shape[0],):
        raise ValueError(f"target shape {y.shape} does not match {X.shape[0]} rows")
    if np.ptp(y) == 0:
        warnings.warn("constant target; the forest predicts that constant", DegenerateTarget, stacklevel=2)
    names = list(feature_names) if feature_names is not None else [f"x{i}" for i in range(X.shape[1])]
    threads = threads or thread_count()
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            trees = list(pool.map(lambda i: _train_one(X, y, config, i), range(config.n_estimators)))
    else:
        trees = [_train_one(X, y, config, i) for i in range(config.n_estimators)]
    return TrainedForest(trees, config, names)


def evaluate(forest: TrainedForest, X, y) -> tuple[float, float]:
    """Test-set MSE and R^2 (against the test-set mean)."""
    y = np.asarray(y, dtype=np.float64)
    if y.size == 0:
        raise EmptyTable("cannot evaluate on an empty table")
    return regression_scores(y, forest.predict(X))


def regression_scores(y, pred) -> tuple[float, float]:
    y = np.asarray(y, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    sse = float(np.sum((y - pred) ** 2))
    sst = float(np.sum((y - y.mean()) ** 2))
    mse = sse / y.size
    if sst == 0.0:
        return mse, 1.0 if sse == 0.0 else 0.0
    return mse, 1.0 - sse / sst
