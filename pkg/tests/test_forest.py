import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from greenscape.errors import DegenerateTarget, EmptyTable
from greenscape.forest import (
    ForestConfig,
    SearchSpace,
    TrainedForest,
    Tree,
    build_tree,
    evaluate,
    regression_scores,
    train_forest,
)


def synthetic(n, seed=0, noise=0.0):
    rng = np.random.default_rng(seed)
    X = rng.uniform(0, 1, (n, 3))
    y = X[:, 0] + noise * rng.normal(size=n)
    return X, y


class TestConfig:
    def test_reported_best_is_default(self):
        assert ForestConfig().hyperparameters() == {
            "n_estimators": 200,
            "max_depth": None,
            "min_samples_split": 2,
            "min_samples_leaf": 2,
            "max_features": "all",
        }

    def test_grid_size(self):
        grid = SearchSpace().grid()
        assert len(grid) == 9 * 4 * 3 * 3 * 3
        assert SearchSpace().contains(ForestConfig())
        assert not SearchSpace().contains(ForestConfig(n_estimators=7))

    @pytest.mark.parametrize(
        "kwargs", [{"n_estimators": 0}, {"max_depth": 0}, {"min_samples_split": 1}, {"min_samples_leaf": 0}, {"max_features": "half"}]
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            ForestConfig(**kwargs)

    @pytest.mark.parametrize("mode, n, k", [("sqrt", 16, 4), ("log2", 16, 4), ("all", 16, 16), ("sqrt", 2, 1), ("log2", 1, 1)])
    def test_candidate_features(self, mode, n, k):
        assert ForestConfig(max_features=mode).n_candidate_features(n) == k


class TestTree:
    def test_interpolates_training_data(self):
        X, y = synthetic(200, noise=0.1)
        cfg = ForestConfig(n_estimators=1, min_samples_leaf=1, bootstrap=False)
        tree = build_tree(X, y, cfg, np.random.default_rng(0))
        assert np.mean((tree.predict(X) - y) ** 2) == 0.0

    def test_depth_limit(self):
        X, y = synthetic(200)
        cfg = ForestConfig(max_depth=1, min_samples_leaf=1, bootstrap=False)
        tree = build_tree(X, y, cfg, np.random.default_rng(0))
        assert tree.node_count == 3
        assert len(np.unique(tree.predict(X))) == 2

    def test_min_leaf_respected(self):
        X, y = synthetic(100, noise=0.3)
        cfg = ForestConfig(min_samples_leaf=7, bootstrap=False)
        tree = build_tree(X, y, cfg, np.random.default_rng(0))
        assert np.bincount(tree.apply(X)).max() >= 7
        counts = np.bincount(tree.apply(X))
        assert counts[counts > 0].min() >= 7

    def test_dict_round_trip(self):
        X, y = synthetic(80, noise=0.2)
        tree = build_tree(X, y, ForestConfig(), np.random.default_rng(1))
        back = Tree.from_dict(tree.to_dict(["a", "b", "c"]))
        np.testing.assert_array_equal(back.predict(X), tree.predict(X))


class TestForest:
    def test_constant_target(self):
        X = np.random.default_rng(0).normal(size=(50, 2))
        with pytest.warns(DegenerateTarget):
            forest = train_forest(X, np.full(50, 0.7), ForestConfig(n_estimators=5))
        assert np.all(forest.predict(X) == 0.7)
        assert evaluate(forest, X, np.full(50, 0.7)) == (0.0, 1.0)

    def test_learns_identity(self):
        X, y = synthetic(500, seed=2)
        forest = train_forest(X[:400], y[:400], ForestConfig(n_estimators=50))
        _, r2 = evaluate(forest, X[400:], y[400:])
        assert r2 > 0.9

    def test_deterministic_and_thread_independent(self):
        X, y = synthetic(150, seed=3, noise=0.2)
        cfg = ForestConfig(n_estimators=8, max_features="sqrt", seed=5)
        a = train_forest(X, y, cfg, threads=1).predict(X)
        b = train_forest(X, y, cfg, threads=3).predict(X)
        np.testing.assert_array_equal(a, b)
        c = train_forest(X, y, ForestConfig(n_estimators=8, max_features="sqrt", seed=6)).predict(X)
        assert not np.array_equal(a, c)

    def test_save_load(self, tmp_path):
        X, y = synthetic(100, noise=0.1)
        forest = train_forest(X, y, ForestConfig(n_estimators=4), ["p", "q", "r"])
        forest.save(tmp_path / "f.json")
        back = TrainedForest.load(tmp_path / "f.json")
        assert back.feature_names == ["p", "q", "r"]
        assert back.config == forest.config
        np.testing.assert_array_equal(back.predict(X), forest.predict(X))

    def test_empty(self):
        with pytest.raises(EmptyTable):
            train_forest(np.zeros((0, 2)), np.zeros(0))


class TestScores:
    def test_perfect(self):
        assert regression_scores([1, 2, 3], [1, 2, 3]) == (0.0, 1.0)

    def test_mean_baseline(self):
        y = np.array([1.0, 2.0, 6.0])
        mse, r2 = regression_scores(y, np.full(3, y.mean()))
        assert r2 == 0.0
        assert mse == pytest.approx(np.var(y))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_predictions_stay_within_target_range(seed):
    X, y = synthetic(60, seed=seed, noise=0.5)
    forest = train_forest(X, y, ForestConfig(n_estimators=3, seed=seed))
    Xq = np.random.default_rng(seed).uniform(-1, 2, (40, 3))
    pred = forest.predict(Xq)
    assert pred.min() >= y.min() - 1e-12 and pred.max() <= y.max() + 1e-12
