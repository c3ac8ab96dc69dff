"""Green-perception model: feature table, stratified splits, random search
and conditional permutation importance on top of :mod:`greenscape.forest`."""

from __future__ import annotations

import csv
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import EmptyTable, TooFewEntries
from .forest import ForestConfig, SearchSpace, TrainedForest, regression_scores, train_forest
from .metrics import MetricRow
from .scoring import ALL, INDICATORS, ScoreTable, image_key

log = logging.getLogger(__name__)

TARGET_INDICATOR = "green"
IMAGE_FEATURES = ("sky_view_index", "gvi", "spatial_entropy", "global_entropy")
OTHER_INDICATORS = tuple(i for i in INDICATORS if i != TARGET_INDICATOR)


@dataclass
class FeatureTable:
    X: np.ndarray
    y: np.ndarray
    feature_names: list[str]
    row_keys: list[tuple[str, str]]  # (image_id, participant_scope)
    strata: list[str]

    def __len__(self) -> int:
        return self.y.size

    def take(self, idx) -> "FeatureTable":
        idx = np.asarray(idx, dtype=np.int64)
        return FeatureTable(
            self.X[idx],
            self.y[idx],
            list(self.feature_names),
            [self.row_keys[i] for i in idx],
            [self.strata[i] for i in idx],
        )

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["image_id", "participant_scope", "stratum", *self.feature_names, "target"])
            for (img, scope), s, x, t in zip(self.row_keys, self.strata, self.X, self.y):
                w.writerow([img, scope, s, *map(repr, x.tolist()), repr(float(t))])


@dataclass(frozen=True)
class DropReason:
    image_id: str
    participant_scope: str
    reason: str


def build_feature_table(
    metrics: Sequence[MetricRow],
    scores: ScoreTable,
    countries: Sequence[str] | None = None,
) -> tuple[FeatureTable, list[DropReason]]:
    """Join image metrics with participant-scoped Q scores.

    One row per (image, participant scope) with a retained green score,
    using contexts whose image scope is ALL. Rows missing another
    indicator's score or the image's metrics are dropped and reported.
    """
    by_image = {m.image_id: m for m in metrics}
    q = {}
    for r in scores:
        if r.image_scope == ALL:
            q[(r.participant_scope, r.indicator, r.image_id)] = r.q_normalized
    scopes = sorted({r.participant_scope for r in scores if r.image_scope == ALL})
    if countries is None:
        countries = [s for s in scopes if s != ALL]
    names = [f"country_{c}" for c in countries] + list(IMAGE_FEATURES) + [f"q_{i}" for i in OTHER_INDICATORS]

    rows, targets, keys, strata, dropped = [], [], [], [], []
    green = sorted(
        ((scope, img) for (scope, ind, img) in q if ind == TARGET_INDICATOR),
        key=lambda k: (k[0] == ALL, k[0], image_key(k[1])),
    )
    for scope, img in green:
        missing = [i for i in OTHER_INDICATORS if (scope, i, img) not in q]
        if missing:
            dropped.append(DropReason(img, scope, f"missing indicator {missing[0]}"))
            continue
        m = by_image.get(img)
        if m is None:
            dropped.append(DropReason(img, scope, "no image metrics"))
            continue
        onehot = [1.0 if scope == c else 0.0 for c in countries]
        image_feats = [m.sky_view_index, m.gvi, m.spatial_entropy, m.global_entropy]
        others = [q[(scope, i, img)] for i in OTHER_INDICATORS]
        rows.append(onehot + image_feats + others)
        targets.append(q[(scope, TARGET_INDICATOR, img)])
        keys.append((img, scope))
        strata.append(f"{m.city}|{scope}")
    for d in dropped:
        log.info("dropped image %s (%s): %s", d.image_id, d.participant_scope, d.reason)
    X = np.array(rows, dtype=np.float64).reshape(len(rows), len(names))
    return FeatureTable(X, np.array(targets, dtype=np.float64), names, keys, strata), dropped


def _group_rows(strata: Sequence[str]) -> dict[str, list[int]]:
    groups: dict[str, list[int]] = defaultdict(list)
    for i, s in enumerate(strata):
        groups[s].append(i)
    return dict(sorted(groups.items()))


def stratified_split(
    table: FeatureTable, test_fraction: float = 0.2, seed: int = 0
) -> tuple[FeatureTable, FeatureTable]:
    """Stratified train/test split.

    The overall test size is ``ceil(test_fraction * n)`` over strata with at
    least two rows, apportioned by largest remainder so each stratum's test
    count is within one row of its exact share. Singleton strata go to train.
    """
    train_idx, test_idx = stratified_indices(table.strata, test_fraction, seed)
    return table.take(train_idx), table.take(test_idx)


def stratified_indices(strata: Sequence[str], test_fraction: float = 0.2, seed: int = 0):
    if len(strata) == 0:
        raise EmptyTable("cannot split an empty table")
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie in (0, 1)")
    groups = _group_rows(strata)
    eligible = {s: rows for s, rows in groups.items() if len(rows) >= 2}
    n_eligible = sum(len(r) for r in eligible.values())
    target = math.ceil(test_fraction * n_eligible - 1e-9)

    quota = {s: len(r) * test_fraction for s, r in eligible.items()}
    alloc = {s: min(int(math.floor(v)), len(eligible[s]) - 1) for s, v in quota.items()}
    remaining = target - sum(alloc.values())
    order = sorted(eligible, key=lambda s: (-(quota[s] - math.floor(quota[s])), s))
    for s in order:
        if remaining <= 0:
            break
        if alloc[s] < len(eligible[s]) - 1:
            alloc[s] += 1
            remaining -= 1

    rng = np.random.default_rng(seed)
    train, test = [], []
    for s, rows in groups.items():
        perm = [rows[i] for i in rng.permutation(len(rows))]
        k = alloc.get(s, 0)
        test.extend(perm[:k])
        train.extend(perm[k:])
    return np.array(sorted(train), dtype=np.int64), np.array(sorted(test), dtype=np.int64)


def stratified_folds(strata: Sequence[str], folds: int = 5, seed: int = 0) -> list[np.ndarray]:
    """Validation index sets; each stratum is dealt round-robin across folds."""
    if len(strata) < folds:
        raise TooFewEntries(f"{len(strata)} rows cannot fill {folds} folds")
    rng = np.random.default_rng(seed)
    out: list[list[int]] = [[] for _ in range(folds)]
    start = 0
    for rows in _group_rows(strata).values():
        perm = [rows[i] for i in rng.permutation(len(rows))]
        for j, r in enumerate(perm):
            out[(start + j) % folds].append(r)
        start = (start + len(perm)) % folds
    return [np.array(sorted(f), dtype=np.int64) for f in out]


@dataclass
class LeaderboardEntry:
    candidate: int
    config: ForestConfig
    fold_mse: list[float]
    fold_r2: list[float] = field(default_factory=list)

    @property
    def mean_mse(self) -> float:
        return float(np.mean(self.fold_mse))

    @property
    def mean_r2(self) -> float:
        return float(np.mean(self.fold_r2)) if self.fold_r2 else float("nan")


def random_search_cv(
    train: FeatureTable,
    space: SearchSpace = SearchSpace(),
    n_candidates: int = 50,
    folds: int = 5,
    seed: int = 0,
) -> tuple[ForestConfig, float, list[LeaderboardEntry]]:
    """Randomized hyperparameter search scored by stratified k-fold CV MSE.

    Candidates are drawn uniformly without replacement from the grid. The
    best candidate has the lowest mean validation MSE; earlier candidates
    win ties.
    """
    grid = space.grid()
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(grid), size=min(n_candidates, len(grid)), replace=False)
    val_sets = stratified_folds(train.strata, folds, seed)
    everything = np.arange(len(train))

    results = []
    for candidate, gi in enumerate(picks):
        config = ForestConfig(**grid[gi], seed=seed)
        fold_mse, fold_r2 = [], []
        for val in val_sets:
            fit = np.setdiff1d(everything, val, assume_unique=True)
            forest = train_forest(train.X[fit], train.y[fit], config, train.feature_names)
            mse, r2 = regression_scores(train.y[val], forest.predict(train.X[val]))
            fold_mse.append(mse)
            fold_r2.append(r2)
        results.append(LeaderboardEntry(candidate, config, fold_mse, fold_r2))
        log.info("candidate %d/%d %s cv_mse=%.6f", candidate + 1, len(picks), config.hyperparameters(), results[-1].mean_mse)
    best = min(results, key=lambda e: (e.mean_mse, e.candidate))
    return best.config, best.mean_mse, results


def write_leaderboard(path, entries: Sequence[LeaderboardEntry]) -> None:
    keys = ("n_estimators", "max_depth", "min_samples_split", "min_samples_leaf", "max_features")
    n_folds = max((len(e.fold_mse) for e in entries), default=0)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["candidate", *keys, "mean_mse", "mean_r2", *[f"fold{i + 1}_mse" for i in range(n_folds)]])
        for e in sorted(entries, key=lambda e: (e.mean_mse, e.candidate)):
            hp = e.config.hyperparameters()
            w.writerow(
                [e.candidate, *["None" if hp[k] is None else hp[k] for k in keys], repr(e.mean_mse), repr(e.mean_r2), *map(repr, e.fold_mse)]
            )


# --------------------------------------------------------------------------
# conditional permutation importance


@dataclass
class FeatureImportance:
    feature: str
    mean_delta_mse: float
    sd_delta_mse: float
    deltas: list[float]
    conditioners: list[str]


@dataclass
class ImportanceReport:
    features: list[FeatureImportance]
    repeats: int
    correlation_threshold: float
    n_bins: int
    baseline_mse: float

    def by_name(self) -> dict[str, FeatureImportance]:
        return {f.feature: f for f in self.features}

    def ranked(self) -> list[FeatureImportance]:
        return sorted(self.features, key=lambda f: -f.mean_delta_mse)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["feature", "mean_delta_mse", "sd_delta_mse", "repeats", "conditioners"])
            for f in self.ranked():
                w.writerow([f.feature, repr(f.mean_delta_mse), repr(f.sd_delta_mse), self.repeats, ";".join(f.conditioners)])


def _abs_correlations(X: np.ndarray) -> np.ndarray:
    Xc = X - X.mean(axis=0)
    norms = np.sqrt((Xc * Xc).sum(axis=0))
    with np.errstate(divide="ignore", invalid="ignore"):
        corr = (Xc.T @ Xc) / np.outer(norms, norms)
    corr = np.nan_to_num(corr, nan=0.0)
    return np.abs(corr)


def quantile_bins(x: np.ndarray, n_bins: int) -> np.ndarray:
    """Bin index of each value by the sample's own quantile edges."""
    edges = np.quantile(x, np.linspace(0.0, 1.0, n_bins + 1))
    return np.searchsorted(edges[1:-1], x, side="right")


def permutation_cells(X: np.ndarray, conditioners: Sequence[int], n_bins: int) -> list[np.ndarray]:
    """Row groups sharing the same bin in every conditioning column."""
    n = X.shape[0]
    if not conditioners:
        return [np.arange(n)]
    codes = np.stack([quantile_bins(X[:, c], n_bins) for c in conditioners], axis=1)
    _, inverse = np.unique(codes, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    return [np.flatnonzero(inverse == g) for g in range(inverse.max() + 1)]


def permute_within(X: np.ndarray, column: int, cells: Sequence[np.ndarray], rng: np.random.Generator) -> np.ndarray:
    Xp = X.copy()
    for rows in cells:
        if rows.size > 1:
            Xp[rows, column] = X[rng.permutation(rows), column]
    return Xp


def delta_mse(forest: TrainedForest, X: np.ndarray, y: np.ndarray, X_perm: np.ndarray) -> float:
    base = float(np.mean((y - forest.predict(X)) ** 2))
    return float(np.mean((y - forest.predict(X_perm)) ** 2)) - base


def conditional_permutation_importance(
    forest: TrainedForest,
    X,
    y,
    repeats: int = 30,
    correlation_threshold: float = 0.3,
    n_bins: int = 10,
    seed: int = 0,
) -> ImportanceReport:
    """MSE increase when each feature is shuffled within bins of its correlates.

    For feature ``j`` the conditioning set is every other feature with
    ``|r| >= correlation_threshold``; rows are grouped by the cross-product of
    those features' quantile bins and ``j`` is permuted inside each group.
    With no qualifying conditioner the permutation is unconditional.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if repeats < 2:
        raise ValueError("repeats must be >= 2")
    if X.shape[0] < 2 * n_bins:
        raise TooFewEntries(f"need at least {2 * n_bins} rows for {n_bins} bins, got {X.shape[0]}")
    baseline = float(np.mean((y - forest.predict(X)) ** 2))
    corr = _abs_correlations(X)
    names = forest.feature_names
    out = []
    for j in range(X.shape[1]):
        cond = [k for k in range(X.shape[1]) if k != j and corr[j, k] >= correlation_threshold]
        cells = permutation_cells(X, cond, n_bins)
        deltas = []
        for r in range(repeats):
            rng = np.random.default_rng([seed, j, r])
            Xp = permute_within(X, j, cells, rng)
            deltas.append(float(np.mean((y - forest.predict(Xp)) ** 2)) - baseline)
        out.append(
            FeatureImportance(
                names[j],
                float(np.mean(deltas)),
                float(np.std(deltas, ddof=1)),
                deltas,
                [names[k] for k in cond],
            )
        )
    return ImportanceReport(out, repeats, correlation_threshold, n_bins, baseline)
