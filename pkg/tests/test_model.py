import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from greenscape.errors import TooFewEntries
from greenscape.forest import ForestConfig, SearchSpace, train_forest
from greenscape.metrics import MetricRow
from greenscape.model import (
    IMAGE_FEATURES,
    OTHER_INDICATORS,
    FeatureTable,
    build_feature_table,
    conditional_permutation_importance,
    quantile_bins,
    random_search_cv,
    stratified_folds,
    stratified_indices,
    write_leaderboard,
)
from greenscape.scoring import ALL, INDICATORS, ScoreRow, ScoreTable


def score(scope, indicator, image, q):
    return ScoreRow(scope, ALL, indicator, image, q, q / 10, 5, 25.0, 5.0, 10.0)


def metric(image, city="Tokyo"):
    return MetricRow(image, city, 0.3, 0.2, 0.6, 0.45, 2.0)


class TestFeatureTable:
    def test_single_country_row(self):
        scores = ScoreTable([score("Chile", ind, "1", 5.0 + k) for k, ind in enumerate(INDICATORS)])
        table, dropped = build_feature_table([metric("1")], scores)
        assert dropped == []
        assert table.feature_names[0] == "country_Chile"
        assert table.feature_names[1:5] == list(IMAGE_FEATURES)
        assert table.feature_names[5:] == [f"q_{i}" for i in OTHER_INDICATORS]
        assert table.X.shape == (1, 14)
        assert table.X[0, 0] == 1.0
        assert table.y[0] == pytest.approx(0.5 + INDICATORS.index("green") / 10)
        assert table.strata == ["Tokyo|Chile"]

    def test_missing_indicator_dropped(self):
        rows = [score("Chile", ind, "1", 5.0) for ind in INDICATORS if ind != "walk"]
        table, dropped = build_feature_table([metric("1")], ScoreTable(rows))
        assert len(table) == 0
        assert [(d.image_id, d.reason) for d in dropped] == [("1", "missing indicator walk")]

    def test_all_scope_has_zero_onehot(self):
        rows = [score(s, ind, "1", 5.0) for s in ("Chile", "USA", ALL) for ind in INDICATORS]
        table, _ = build_feature_table([metric("1")], ScoreTable(rows))
        assert [k for k in table.row_keys] == [("1", "Chile"), ("1", "USA"), ("1", ALL)]
        np.testing.assert_array_equal(table.X[:, :2], [[1, 0], [0, 1], [0, 0]])


class TestSplits:
    def test_single_stratum(self):
        train, test = stratified_indices(["a"] * 100, 0.2, seed=1)
        assert (len(train), len(test)) == (80, 20)

    def test_rounding_per_stratum(self):
        strata = ["a"] * 10 + ["b"] * 10 + ["c"] * 5
        _, test = stratified_indices(strata, 0.2, seed=3)
        counts = [sum(strata[i] == s for i in test) for s in "abc"]
        assert counts == [2, 2, 1]

    def test_1903_row_split(self):
        # 1,903 rows, many uneven strata: the overall 80/20 cut lands on 1,522/381
        rng = np.random.default_rng(0)
        sizes = rng.integers(2, 60, 60)
        sizes[-1] += 1903 - sizes.sum()
        strata = [f"s{k}" for k, n in enumerate(sizes) for _ in range(n)]
        train, test = stratified_indices(strata, 0.2)
        assert (len(train), len(test)) == (1522, 381)

    def test_singletons_go_to_train(self):
        train, test = stratified_indices(["x", "a", "a", "a", "a", "a"], 0.2)
        assert 0 in train

    def test_folds_partition(self):
        strata = ["a"] * 13 + ["b"] * 7
        folds = stratified_folds(strata, 5, seed=2)
        assert sorted(np.concatenate(folds).tolist()) == list(range(20))
        assert [len(f) for f in folds] == [4, 4, 4, 4, 4]
        with pytest.raises(TooFewEntries):
            stratified_folds(["a"] * 3, 5)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(1, 30), min_size=1, max_size=8), st.integers(0, 100))
def test_split_shares_within_one_row(sizes, seed):
    strata = [f"s{k}" for k, n in enumerate(sizes) for _ in range(n)]
    train, test = stratified_indices(strata, 0.2, seed)
    assert sorted(train.tolist() + test.tolist()) == list(range(len(strata)))
    for k, n in enumerate(sizes):
        got = sum(strata[i] == f"s{k}" for i in test)
        if n == 1:
            assert got == 0
        else:
            assert abs(got - 0.2 * n) < 1 + 1e-9
            assert got <= n - 1


def table_from(X, y, strata=None):
    n = len(y)
    return FeatureTable(X, y, [f"x{i}" for i in range(X.shape[1])], [(str(i), ALL) for i in range(n)], strata or ["s"] * n)


class TestSearch:
    def test_single_config_space(self):
        rng = np.random.default_rng(0)
        X = rng.uniform(size=(60, 2))
        space = SearchSpace((100,), (10,), (2,), (2,), ("all",))
        best, _, entries = random_search_cv(table_from(X, X[:, 0]), space, n_candidates=5, folds=3)
        assert len(entries) == 1
        assert best.hyperparameters() == {"n_estimators": 100, "max_depth": 10, "min_samples_split": 2, "min_samples_leaf": 2, "max_features": "all"}

    def test_crippled_candidate_loses(self, tmp_path):
        rng = np.random.default_rng(1)
        X = rng.uniform(size=(120, 2))
        y = np.sin(6 * X[:, 0]) + X[:, 1] ** 2
        space = SearchSpace((100,), (1, None), (2,), (1,), ("all",))
        best, cv_mse, entries = random_search_cv(table_from(X, y), space, n_candidates=2, folds=3, seed=4)
        assert best.max_depth is None
        assert cv_mse == min(e.mean_mse for e in entries)
        again = random_search_cv(table_from(X, y), space, n_candidates=2, folds=3, seed=4)[2]
        write_leaderboard(tmp_path / "a.csv", entries)
        write_leaderboard(tmp_path / "b.csv", again)
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


class TestImportance:
    def data(self, n=600, seed=0):
        rng = np.random.default_rng(seed)
        X = rng.uniform(size=(n, 4))
        y = X[:, 0] + 0.05 * rng.normal(size=n)
        return X, y

    def test_signal_dominates(self):
        X, y = self.data()
        forest = train_forest(X[:400], y[:400], ForestConfig(n_estimators=20))
        rep = conditional_permutation_importance(forest, X[400:], y[400:], repeats=10)
        assert rep.ranked()[0].feature == "x0"
        for f in rep.features[1:]:
            assert abs(f.mean_delta_mse) <= 2 * f.sd_delta_mse + 1e-12
        assert all(f.conditioners == [] for f in rep.features)

    def test_threshold_picks_correlated_conditioner(self):
        X, y = self.data()
        X[:, 1] = X[:, 0] + 0.05 * np.random.default_rng(9).normal(size=len(y))
        forest = train_forest(X, y, ForestConfig(n_estimators=5))
        rep = conditional_permutation_importance(forest, X, y, repeats=2)
        assert rep.by_name()["x0"].conditioners == ["x1"]
        assert rep.by_name()["x2"].conditioners == []

    def test_deterministic(self):
        X, y = self.data(200)
        forest = train_forest(X, y, ForestConfig(n_estimators=5))
        a = conditional_permutation_importance(forest, X, y, repeats=3, seed=2)
        b = conditional_permutation_importance(forest, X, y, repeats=3, seed=2)
        assert [f.deltas for f in a.features] == [f.deltas for f in b.features]

    def test_quantile_bins(self):
        bins = quantile_bins(np.arange(100.0), 10)
        assert np.bincount(bins).tolist() == [10] * 10

    def test_too_few_rows(self):
        X, y = self.data(15)
        forest = train_forest(X, y, ForestConfig(n_estimators=2))
        with pytest.raises(TooFewEntries):
            conditional_permutation_importance(forest, X, y)
