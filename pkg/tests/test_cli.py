import csv
import itertools
import json

import numpy as np
import pytest

from greenscape.cli import main
from greenscape.config import ProjectConfig
from greenscape.errors import ConfigError
from greenscape.ingest import write_label_png, write_pfm
from greenscape.scoring import INDICATORS

CLASSES = {
    "classes": {"0": "road", "3": "building", "7": "vegetation", "9": "sky", "11": "terrain"},
    "vegetation": ["vegetation"],
    "terrain": ["terrain"],
    "sky": ["sky"],
}


def make_project(root, n_per_city=6, depth=True, comparisons=True):
    rng = np.random.default_rng(0)
    labels, depths = root / "labels", root / "depth"
    images = []
    for city in ("Amsterdam", "Tokyo"):
        (labels / city).mkdir(parents=True)
        for k in range(n_per_city):
            img = str(len(images) + 1)
            grid = rng.choice([0, 3, 7, 9, 11], size=(20, 20))
            write_label_png(labels / city / f"{img}.png", grid)
            if depth:
                depths.mkdir(exist_ok=True)
                write_pfm(depths / f"{img}.pfm", rng.uniform(1, 50, (20, 20)))
            images.append((img, city))
    (root / "classes.json").write_text(json.dumps(CLASSES))
    cfg = {
        "paths": {"labels_dir": "labels", "class_map": "classes.json", "output_dir": "out"},
        "metrics": {"stride": 2, "fractions": [0.3, 0.45, 0.6, 1.0]},
        "model": {
            "n_candidates": 2,
            "folds": 2,
            "importance_repeats": 2,
            "n_bins": 2,
            "search_space": {"n_estimators": [100], "max_depth": [5, None], "min_samples_split": [2],
                             "min_samples_leaf": [2], "max_features": ["all"]},
        },
    }
    if depth:
        cfg["paths"]["depth_dir"] = "depth"
    if comparisons:
        with open(root / "comparisons.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["participant_id", "country_of_residence", "indicator", "left_image_id", "right_image_id",
                        "choice", "left_image_city", "right_image_city"])
            pid = 0
            for country in ("Chile", "USA"):
                for ind in INDICATORS:
                    for city in ("Amsterdam", "Tokyo"):
                        ids = [i for i, c in images if c == city]
                        for a, b in itertools.combinations(ids, 2):
                            pid += 1
                            w.writerow([pid, country, ind, a, b, rng.choice(["left", "right", "equal"]), city, city])
        cfg["paths"]["comparisons_csv"] = "comparisons.csv"
    (root / "config.json").write_text(json.dumps(cfg))
    return root / "config.json"


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestMetricsCommand:
    def test_rows_and_depth(self, tmp_path):
        cfg = make_project(tmp_path, n_per_city=2)
        assert main(["metrics", "--config", str(cfg)]) == 0
        rows = read_csv(tmp_path / "out" / "metrics.csv")
        assert [r["image_id"] for r in rows] == ["1", "2", "3", "4"]
        assert [r["city"] for r in rows] == ["Amsterdam"] * 2 + ["Tokyo"] * 2
        assert rows[0]["mean_veg_depth"] != ""
        meta = json.loads((tmp_path / "out" / "metrics.meta.json").read_text())
        assert len(meta["config_fingerprint"]) == 16

    def test_without_depth(self, tmp_path):
        cfg = make_project(tmp_path, n_per_city=2, depth=False)
        assert main(["metrics", "--config", str(cfg)]) == 0
        header = (tmp_path / "out" / "metrics.csv").read_text().splitlines()[0]
        assert "mean_veg_depth" not in header

    def test_corrupt_file_becomes_error_row(self, tmp_path):
        cfg = make_project(tmp_path, n_per_city=2, depth=False)
        (tmp_path / "labels" / "Tokyo" / "4.png").write_bytes(b"not a png")
        assert main(["metrics", "--config", str(cfg)]) == 0
        assert len(read_csv(tmp_path / "out" / "metrics.csv")) == 3
        errors = read_csv(tmp_path / "out" / "errors.csv")
        assert [(e["image_id"], e["error"]) for e in errors] == [("4", "MalformedFile")]

    def test_flag_overrides(self, tmp_path):
        cfg = make_project(tmp_path, n_per_city=1, depth=False)
        assert main(["metrics", "--config", str(cfg), "--fraction", "1.0", "--output", str(tmp_path / "o2")]) == 0
        rows = read_csv(tmp_path / "o2" / "metrics.csv")
        assert {r["window_fraction"] for r in rows} == {"1.0"}

    def test_missing_class_map_exits_2(self, tmp_path, capsys):
        cfg = make_project(tmp_path, n_per_city=1)
        (tmp_path / "classes.json").unlink()
        assert main(["metrics", "--config", str(cfg)]) == 2
        assert "greenscape metrics" in capsys.readouterr().err


def test_full_pipeline_is_deterministic(tmp_path):
    cfg = make_project(tmp_path)
    out = tmp_path / "out"
    commands = ["metrics", "scores", "agree", "distrib", "model", "sweep"]
    for cmd in commands:
        assert main([cmd, "--config", str(cfg), "--svg"]) == 0, cmd
    first = {p.name: p.read_bytes() for p in out.iterdir()}
    for cmd in commands:
        assert main([cmd, "--config", str(cfg), "--svg"]) == 0, cmd
    second = {p.name: p.read_bytes() for p in out.iterdir()}
    assert first == second

    for name in ("metrics.csv", "scores.csv", "agreement.json", "correlation.csv", "bland_altman.csv", "qq.csv",
                 "distrib.json", "feature_table.csv", "leaderboard.csv", "model.json", "importance.csv",
                 "model_report.json", "sweep_curves.csv", "sweep_mean.csv", "sweep.json", "sweep_mean.svg"):
        assert name in first, name

    scores = read_csv(out / "scores.csv")
    green_all = [r for r in scores if r["indicator"] == "green" and r["participant_scope"] == "ALL" and r["image_scope"] == "ALL"]
    assert len(green_all) == 12
    assert all(0 <= float(r["q"]) <= 10 for r in scores)

    report = json.loads((out / "model_report.json").read_text())
    assert report["n_rows"] == 36
    assert report["n_train"] + report["n_test"] == 36
    assert len(report["importance"]) == 2 + 4 + 9

    sweep = json.loads((out / "sweep.json").read_text())
    assert [p["fraction"] for p in sweep["mean_curve"]] == [0.3, 0.45, 0.6, 1.0]


def test_scores_context_flag(tmp_path):
    cfg = make_project(tmp_path, n_per_city=5, depth=False)
    assert main(["scores", "--config", str(cfg), "--context", "Chile,Tokyo", "--indicator", "safe"]) == 0
    rows = read_csv(tmp_path / "out" / "scores.csv")
    assert {(r["participant_scope"], r["image_scope"], r["indicator"]) for r in rows} == {("Chile", "Tokyo", "safe")}
    assert len(rows) == 5


def test_seed_changes_model_only_through_config(tmp_path):
    cfg = make_project(tmp_path)
    for cmd in ("metrics", "scores"):
        assert main([cmd, "--config", str(cfg)]) == 0
    assert main(["model", "--config", str(cfg), "--seed", "3"]) == 0
    report = json.loads((tmp_path / "out" / "model_report.json").read_text())
    assert report["seed"] == 3


class TestConfig:
    def test_relative_paths_resolve_against_config(self, tmp_path):
        cfg = make_project(tmp_path, n_per_city=1)
        conf = ProjectConfig.load(cfg)
        assert conf.path("labels_dir") == tmp_path / "labels"

    def test_fingerprint_tracks_content(self, tmp_path):
        cfg = make_project(tmp_path, n_per_city=1)
        a = ProjectConfig.load(cfg).fingerprint()
        assert ProjectConfig.load(cfg).fingerprint() == a
        assert ProjectConfig.load(cfg, {"metrics": {"stride": 3}}).fingerprint() != a

    @pytest.mark.parametrize("override", [{"metrics": {"stride": 0}}, {"metrics": {"fraction": 1.5}}, {"model": {"test_fraction": 1.0}}])
    def test_validation(self, tmp_path, override):
        cfg = make_project(tmp_path, n_per_city=1)
        with pytest.raises(ConfigError):
            ProjectConfig.load(cfg, override)
