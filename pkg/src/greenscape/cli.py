"""Command-line entry point: ``greenscape {metrics|scores|agree|distrib|model|sweep}``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .config import ProjectConfig, atomic_path, write_json
from .errors import ConfigError, GreenscapeError
from .forest import SearchSpace, evaluate, thread_count, train_forest
from .ingest import (
    LabeledScene,
    build_vegetation_mask,
    load_class_config,
    load_depth_map,
    load_label_map,
    load_rgb,
    spectral_vegetation_mask,
)
from .metrics import (
    MetricRow,
    compute_metric_row,
    entropy_sweep,
    mean_curve,
    read_metric_rows,
    write_metric_rows,
    write_sweep_curve,
)
from .model import (
    build_feature_table,
    conditional_permutation_importance,
    random_search_cv,
    stratified_split,
    write_leaderboard,
)
from .scoring import (
    ALL,
    INDICATORS,
    GroupingContext,
    ScoreTable,
    TrueSkillParams,
    available_contexts,
    image_key,
    load_image_cities,
    parse_comparisons,
    read_score_table,
    score_table,
    write_score_table,
)
from .stats import bland_altman, mann_whitney_u, pearson, qq_data, quantile_groups, significance_stars
from .svg import bland_altman_svg, scatter_svg

log = logging.getLogger("greenscape")

LABEL_SUFFIXES = (".png",)
RGB_SUFFIXES = (".png", ".jpg", ".jpeg")


class Run:
    """Shared state for one subcommand invocation."""

    def __init__(self, config: ProjectConfig, svg: bool = False):
        self.config = config
        self.svg = svg
        self.out = config.output_dir
        self.out.mkdir(parents=True, exist_ok=True)
        self._image_cities = None

    @property
    def fingerprint(self) -> str:
        return self.config.fingerprint()

    def header(self, command: str) -> dict:
        return {
            "command": command,
            "config_fingerprint": self.fingerprint,
            "greenscape_version": __version__,
            "trueskill": self.config.section("scoring")["trueskill"],
        }

    def sidecar(self, name: str, command: str, **extra) -> None:
        write_json(self.out / f"{name}.meta.json", {**self.header(command), **extra})

    def write_csv(self, name: str, header, rows) -> Path:
        path = self.out / name
        with atomic_path(path) as tmp:
            with open(tmp, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh)
                w.writerow(header)
                w.writerows(rows)
        return path

    def write_text(self, name: str, text: str) -> None:
        path = self.out / name
        with atomic_path(path) as tmp:
            Path(tmp).write_text(text, encoding="utf-8")

    # -- inputs ----------------------------------------------------------

    def image_cities(self) -> dict[str, str] | None:
        if self._image_cities is None:
            p = self.config.path("images_csv")
            self._image_cities = load_image_cities(p) if p else {}
        return self._image_cities or None

    def trueskill_params(self) -> TrueSkillParams:
        return TrueSkillParams(**self.config.section("scoring")["trueskill"])

    def scores(self) -> ScoreTable:
        p = self.config.path("scores_csv")
        if p is None and (self.out / "scores.csv").exists():
            p = self.out / "scores.csv"
        if p is not None:
            return read_score_table(p)
        log.info("no score table on disk, computing one from comparisons")
        return compute_scores(self)

    def metrics(self) -> list[MetricRow]:
        p = self.config.path("metrics_csv")
        if p is None and (self.out / "metrics.csv").exists():
            p = self.out / "metrics.csv"
        if p is not None:
            return read_metric_rows(p)
        log.info("no metrics table on disk, computing one from label maps")
        rows, _ = compute_metrics(self)
        return rows


# --------------------------------------------------------------------------
# corpus


def discover_images(labels_dir: Path) -> list[Path]:
    files = [p for p in labels_dir.rglob("*") if p.suffix.lower() in LABEL_SUFFIXES and p.is_file()]
    return sorted(files, key=lambda p: (image_key(p.stem), str(p)))


def _companion(root: Path | None, rel: Path, suffixes) -> Path | None:
    if root is None:
        return None
    for base in (root / rel.parent, root):
        for suf in suffixes:
            cand = base / (rel.stem + suf)
            if cand.is_file():
                return cand
    return None


def load_scene(run: Run, path: Path, class_map) -> LabeledScene:
    labels_dir = run.config.path("labels_dir")
    rel = path.relative_to(labels_dir)
    cities = run.image_cities() or {}
    city = cities.get(path.stem) or (rel.parent.name if rel.parent != Path(".") else "")
    scene = load_label_map(path, class_map, image_id=path.stem, city=city)
    depth_path = _companion(run.config.path("depth_dir"), rel, (".pfm",))
    if depth_path is not None:
        scene = scene.with_depth(load_depth_map(depth_path))
    if run.config.section("metrics")["mask_source"] == "spectral":
        rgb_path = _companion(run.config.path("rgb_dir"), rel, RGB_SUFFIXES)
        if rgb_path is not None:
            scene = scene.with_rgb(load_rgb(rgb_path))
    return scene


def _class_config(run: Run):
    p = run.config.path("class_map")
    if p is None:
        raise ConfigError("paths.class_map (or --classes) is required")
    return load_class_config(p)


def _vegetation(run: Run, scene, class_map, policy):
    m = run.config.section("metrics")
    if m["mask_source"] == "spectral":
        return spectral_vegetation_mask(scene, int(m["excess_green_threshold"]))
    return build_vegetation_mask(scene, class_map, policy)


def _map_images(run: Run, fn):
    labels_dir = run.config.path("labels_dir")
    if labels_dir is None:
        raise ConfigError("paths.labels_dir is required")
    files = discover_images(labels_dir)
    if not files:
        raise ConfigError(f"no label maps found under {labels_dir}")

    def safe(path):
        try:
            return path, fn(path), None
        except (GreenscapeError, OSError, ValueError) as exc:
            return path, None, exc

    threads = thread_count()
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(safe, files))
    return [safe(p) for p in files]


def _error_rows(results):
    return [(p.stem, str(p), type(e).__name__, str(e)) for p, _, e in results if e is not None]


def compute_metrics(run: Run) -> tuple[list[MetricRow], list[tuple]]:
    class_map, policy = _class_config(run)
    m = run.config.section("metrics")

    def one(path):
        scene = load_scene(run, path, class_map)
        veg = _vegetation(run, scene, class_map, policy)
        return compute_metric_row(scene, class_map, policy, float(m["fraction"]), int(m["stride"]), vegetation=veg)

    results = _map_images(run, one)
    rows = sorted((r for _, r, e in results if e is None), key=lambda r: image_key(r.image_id))
    return rows, _error_rows(results)


def compute_scores(run: Run, indicators=None, contexts=None) -> ScoreTable:
    path = run.config.path("comparisons_csv")
    if path is None:
        raise ConfigError("paths.comparisons_csv is required")
    records = parse_comparisons(path)
    s = run.config.section("scoring")
    indicators = indicators or s.get("indicators") or INDICATORS
    if contexts is None and s.get("contexts"):
        contexts = [GroupingContext.parse(c) for c in s["contexts"]]
    if contexts is None:
        contexts = available_contexts(records, run.image_cities())
    return score_table(
        records, contexts, indicators, run.image_cities(), int(s["min_comparisons"]), run.trueskill_params()
    )


# --------------------------------------------------------------------------
# subcommands


def cmd_metrics(run: Run, args) -> int:
    rows, errors = compute_metrics(run)
    include_depth = run.config.path("depth_dir") is not None
    with atomic_path(run.out / "metrics.csv") as tmp:
        write_metric_rows(tmp, rows, include_depth=include_depth)
    run.write_csv("errors.csv", ("image_id", "path", "error", "message"), errors)
    run.sidecar("metrics", "metrics", n_images=len(rows), n_errors=len(errors))
    print(f"metrics: {len(rows)} images, {len(errors)} errors -> {run.out / 'metrics.csv'}")
    return 0 if rows else 1


def cmd_scores(run: Run, args) -> int:
    contexts = [GroupingContext.parse(args.context)] if args.context else None
    indicators = [args.indicator] if args.indicator else None
    table = compute_scores(run, indicators, contexts)
    with atomic_path(run.out / "scores.csv") as tmp:
        write_score_table(tmp, table)
    per_cell: dict[str, int] = {}
    for r in table:
        key = f"{r.participant_scope},{r.image_scope},{r.indicator}"
        per_cell[key] = per_cell.get(key, 0) + 1
    run.sidecar(
        "scores",
        "scores",
        n_rows=len(table),
        min_comparisons=run.config.section("scoring")["min_comparisons"],
        rows_per_cell=dict(sorted(per_cell.items())),
    )
    print(f"scores: {len(table)} retained rows -> {run.out / 'scores.csv'}")
    return 0


def _normalized_gvi(run: Run, metrics: list[MetricRow]) -> dict[str, float]:
    gvis = {m.image_id: m.gvi for m in metrics}
    if run.config.section("stats")["gvi_normalization"] == "none" or not gvis:
        return gvis
    lo, hi = min(gvis.values()), max(gvis.values())
    if hi == lo:
        return gvis
    return {k: (v - lo) / (hi - lo) for k, v in gvis.items()}


def _is_pair(ctx: GroupingContext) -> bool:
    return ctx.participant_scope != ALL and ctx.image_scope != ALL


def cmd_agree(run: Run, args) -> int:
    indicator = args.indicator or "green"
    scores = run.scores()
    gvi = _normalized_gvi(run, run.metrics())
    st = run.config.section("stats")
    alpha = float(st["alpha"])

    contexts, corr_rows, ba_rows, point_rows, qq_rows = [], [], [], [], []
    for ctx in scores.contexts():
        rows = [r for r in scores.select(ctx, indicator) if r.image_id in gvi]
        if not rows:
            continue
        q = np.array([r.q_normalized for r in rows])
        g = np.array([gvi[r.image_id] for r in rows])
        entry = {"participant_scope": ctx.participant_scope, "image_scope": ctx.image_scope, "n": len(rows)}
        try:
            c = pearson(q, g)
            entry["pearson"] = {"r": c.r, "p_value": c.p_value, "stars": significance_stars(c.p_value)}
            corr_rows.append((ctx.participant_scope, ctx.image_scope, c.n, repr(c.r), repr(c.p_value), significance_stars(c.p_value)))
        except GreenscapeError as exc:
            entry["pearson"] = {"skipped": str(exc)}
        try:
            ba = bland_altman(q, g)
            w = ba.wilcoxon
            entry["bland_altman"] = {
                "mean_diff": ba.mean_diff,
                "sd_diff": ba.sd_diff,
                "loa_low": ba.loa_low,
                "loa_high": ba.loa_high,
                "wilcoxon": asdict(w),
                "stars": significance_stars(w.p_value),
            }
            ba_rows.append(
                (ctx.participant_scope, ctx.image_scope, len(rows), repr(ba.mean_diff), repr(ba.sd_diff),
                 repr(ba.loa_low), repr(ba.loa_high), repr(w.statistic), repr(w.p_value), w.method, significance_stars(w.p_value))
            )
            for r, (mean, diff) in zip(rows, ba.pairs):
                point_rows.append((ctx.participant_scope, ctx.image_scope, r.image_id, repr(mean), repr(diff)))
            if run.svg:
                run.write_text(
                    f"bland_altman_{ctx.participant_scope}_{ctx.image_scope}.svg".replace(" ", "_"),
                    bland_altman_svg(ba.means, ba.diffs, ba.mean_diff, ba.loa_low, ba.loa_high,
                                     f"{ctx.participant_scope} / {ctx.image_scope}"),
                )
        except GreenscapeError as exc:
            entry["bland_altman"] = {"skipped": str(exc)}
        # TrueSkill mu is min-max scaled within the pool so both axes share [0, 1]
        mu = np.array([r.ts_mu for r in rows])
        span = mu.max() - mu.min()
        mu_scaled = (mu - mu.min()) / span if span > 0 else np.zeros_like(mu)
        for k, (a, b) in enumerate(qq_data(q, mu_scaled, int(st["qq_quantiles"]))):
            qq_rows.append((ctx.participant_scope, ctx.image_scope, k, repr(a), repr(b)))
        if run.svg and ctx == GroupingContext():
            run.write_text("scatter_ALL_ALL.svg", scatter_svg(g.tolist(), q.tolist(), "Q score vs GVI", "normalized GVI", "Q score"))
        contexts.append(entry)

    pairs = [e for e in contexts if _is_pair(GroupingContext(e["participant_scope"], e["image_scope"]))]
    summary = {
        "n_pairs": len(pairs),
        "significant_correlations": sum(1 for e in pairs if e.get("pearson", {}).get("p_value", 1.0) < alpha),
        "significant_differences": sum(
            1 for e in pairs if e.get("bland_altman", {}).get("wilcoxon", {}).get("p_value", 1.0) < alpha
        ),
    }
    write_json(run.out / "agreement.json", {**run.header("agree"), "indicator": indicator, "alpha": alpha,
                                            "summary": summary, "contexts": contexts})
    run.write_csv("correlation.csv", ("participant_scope", "image_scope", "n", "r", "p_value", "stars"), corr_rows)
    run.write_csv(
        "bland_altman.csv",
        ("participant_scope", "image_scope", "n", "mean_diff", "sd_diff", "loa_low", "loa_high",
         "wilcoxon_statistic", "wilcoxon_p", "method", "stars"),
        ba_rows,
    )
    run.write_csv("bland_altman_points.csv", ("participant_scope", "image_scope", "image_id", "mean", "diff"), point_rows)
    run.write_csv("qq.csv", ("participant_scope", "image_scope", "k", "q_quantile", "trueskill_quantile"), qq_rows)
    print(f"agree: {summary['significant_correlations']}/{summary['n_pairs']} significant correlations, "
          f"{summary['significant_differences']}/{summary['n_pairs']} significant differences")
    return 0


def _group_test(low_vals, high_vals):
    if not low_vals or not high_vals:
        return None
    t = mann_whitney_u(low_vals, high_vals)
    return {
        "statistic": t.statistic,
        "p_value": t.p_value,
        "method": t.method,
        "n_low": len(low_vals),
        "n_high": len(high_vals),
        "median_low": float(np.median(low_vals)),
        "median_high": float(np.median(high_vals)),
        "stars": significance_stars(t.p_value),
    }


def cmd_distrib(run: Run, args) -> int:
    indicator = args.indicator or "green"
    scores = run.scores()
    metrics = {m.image_id: m for m in run.metrics()}
    st = run.config.section("stats")
    alpha = float(st["alpha"])
    results, rows = [], []
    for ctx in scores.contexts():
        if not _is_pair(ctx):
            continue
        entries = [(r.image_id, r.q_normalized) for r in scores.select(ctx, indicator) if r.image_id in metrics]
        entry = {"participant_scope": ctx.participant_scope, "image_scope": ctx.image_scope, "n": len(entries)}
        try:
            low, high = quantile_groups(entries, float(st["low_quantile"]), float(st["high_quantile"]))
        except GreenscapeError as exc:
            entry["skipped"] = str(exc)
            results.append(entry)
            continue
        tests = {}
        for feature in ("spatial_entropy", "median_veg_depth"):
            lo = [getattr(metrics[i], feature) for i in low if getattr(metrics[i], feature) is not None]
            hi = [getattr(metrics[i], feature) for i in high if getattr(metrics[i], feature) is not None]
            tests[feature] = _group_test(lo, hi)
            if tests[feature] is not None:
                t = tests[feature]
                rows.append((ctx.participant_scope, ctx.image_scope, feature, t["n_low"], t["n_high"],
                             repr(t["median_low"]), repr(t["median_high"]), repr(t["statistic"]),
                             repr(t["p_value"]), t["method"], t["stars"]))
        entry.update({"low": low, "high": high, "tests": tests})
        results.append(entry)

    def count(feature):
        return sum(1 for e in results if (e.get("tests", {}).get(feature) or {}).get("p_value", 1.0) < alpha)

    summary = {
        "n_pairs": sum(1 for e in results if "tests" in e),
        "significant_spatial_entropy": count("spatial_entropy"),
        "significant_depth": count("median_veg_depth"),
    }
    write_json(run.out / "distrib.json", {**run.header("distrib"), "indicator": indicator, "alpha": alpha,
                                          "summary": summary, "contexts": results})
    run.write_csv(
        "distrib.csv",
        ("participant_scope", "image_scope", "feature", "n_low", "n_high", "median_low", "median_high",
         "u_statistic", "p_value", "method", "stars"),
        rows,
    )
    print(f"distrib: spatial entropy {summary['significant_spatial_entropy']}/{summary['n_pairs']}, "
          f"depth {summary['significant_depth']}/{summary['n_pairs']} significant pairs")
    return 0


def cmd_model(run: Run, args) -> int:
    md = run.config.section("model")
    seed = int(md["seed"])
    table, dropped = build_feature_table(run.metrics(), run.scores())
    if len(table) == 0:
        raise GreenscapeError("feature table is empty; nothing to train on")
    with atomic_path(run.out / "feature_table.csv") as tmp:
        table.write_csv(tmp)
    run.write_csv("dropped_rows.csv", ("image_id", "participant_scope", "reason"),
                  [(d.image_id, d.participant_scope, d.reason) for d in dropped])
    train, test = stratified_split(table, float(md["test_fraction"]), seed)
    space = SearchSpace(**{k: tuple(v) for k, v in md["search_space"].items()})
    best, cv_mse, board = random_search_cv(train, space, int(md["n_candidates"]), int(md["folds"]), seed)
    with atomic_path(run.out / "leaderboard.csv") as tmp:
        write_leaderboard(tmp, board)
    forest = train_forest(train.X, train.y, best, train.feature_names)
    with atomic_path(run.out / "model.json") as tmp:
        forest.save(tmp)
    mse, r2 = evaluate(forest, test.X, test.y)
    report = conditional_permutation_importance(
        forest, test.X, test.y, int(md["importance_repeats"]), float(md["correlation_threshold"]), int(md["n_bins"]), seed
    )
    with atomic_path(run.out / "importance.csv") as tmp:
        report.write_csv(tmp)
    best_entry = min(board, key=lambda e: (e.mean_mse, e.candidate))
    write_json(
        run.out / "model_report.json",
        {
            **run.header("model"),
            "seed": seed,
            "n_rows": len(table),
            "n_train": len(train),
            "n_test": len(test),
            "n_dropped": len(dropped),
            "best_config": best.hyperparameters(),
            "cv_mse": cv_mse,
            "cv_r2": best_entry.mean_r2,
            "test_mse": mse,
            "test_r2": r2,
            "importance": [
                {"feature": f.feature, "mean_delta_mse": f.mean_delta_mse, "sd_delta_mse": f.sd_delta_mse,
                 "conditioners": f.conditioners}
                for f in report.ranked()
            ],
            "importance_params": {"repeats": report.repeats, "correlation_threshold": report.correlation_threshold,
                                  "n_bins": report.n_bins},
        },
    )
    print(f"model: train={len(train)} test={len(test)} cv_mse={cv_mse:.4f} test_mse={mse:.4f} r2={r2:.3f}")
    return 0


def cmd_sweep(run: Run, args) -> int:
    class_map, policy = _class_config(run)
    m = run.config.section("metrics")
    fractions = [float(f) for f in m["fractions"]]

    def one(path):
        scene = load_scene(run, path, class_map)
        return entropy_sweep(_vegetation(run, scene, class_map, policy), fractions, int(m["stride"]))

    results = _map_images(run, one)
    curves = [(p.stem, c) for p, c, e in results if e is None]
    errors = _error_rows(results)
    run.write_csv("sweep_errors.csv", ("image_id", "path", "error", "message"), errors)
    if not curves:
        print("sweep: no image could be processed", file=sys.stderr)
        return 1
    run.write_csv(
        "sweep_curves.csv",
        ("image_id", "fraction", "mean_entropy"),
        [(img, repr(f), repr(h)) for img, c in curves for f, h in c.points],
    )
    agg = mean_curve([c for _, c in curves])
    with atomic_path(run.out / "sweep_mean.csv") as tmp:
        write_sweep_curve(tmp, agg)
    write_json(
        run.out / "sweep.json",
        {
            **run.header("sweep"),
            "n_images": len(curves),
            "argmax_fraction": agg.argmax_fraction,
            "mean_curve": [{"fraction": f, "mean_entropy": h} for f, h in agg.points],
            "per_image_argmax": {img: c.argmax_fraction for img, c in curves},
        },
    )
    if run.svg:
        run.write_text("sweep_mean.svg", scatter_svg(agg.fractions, agg.entropies, "Mean spatial entropy by window size",
                                                     "window fraction", "mean entropy"))
    print(f"sweep: {len(curves)} images, mean-curve argmax at {agg.argmax_fraction}")
    return 0


COMMANDS = {
    "metrics": cmd_metrics,
    "scores": cmd_scores,
    "agree": cmd_agree,
    "distrib": cmd_distrib,
    "model": cmd_model,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="greenscape", description="Objective/subjective greenery analysis pipeline")
    parser.add_argument("--version", action="version", version=f"greenscape {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="project config JSON")
        p.add_argument("--seed", type=int)
        p.add_argument("--svg", action="store_true", help="also render SVG plots")
        p.add_argument("--indicator", choices=INDICATORS)
        p.add_argument("--context", help="grouping context as COUNTRY,CITY (ALL allowed)")
        p.add_argument("--classes", type=Path, help="class map JSON")
        p.add_argument("--output", type=Path, help="output directory")
        p.add_argument("--fraction", type=float, help="relative window size")
        p.add_argument("--stride", type=int, help="window stride in pixels")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def overrides_from(args) -> dict:
    o: dict = {}
    if args.seed is not None:
        o.setdefault("model", {})["seed"] = args.seed
    if args.classes is not None:
        o.setdefault("paths", {})["class_map"] = str(args.classes.resolve())
    if args.output is not None:
        o.setdefault("paths", {})["output_dir"] = str(args.output.resolve())
    if args.fraction is not None:
        o.setdefault("metrics", {})["fraction"] = args.fraction
    if args.stride is not None:
        o.setdefault("metrics", {})["stride"] = args.stride
    if args.indicator is not None:
        o.setdefault("scoring", {})["indicators"] = [args.indicator]
    if args.context is not None:
        o.setdefault("scoring", {})["contexts"] = [args.context]
    return o


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        config = ProjectConfig.load(args.config, overrides_from(args))
        return COMMANDS[args.command](Run(config, args.svg), args)
    except (GreenscapeError, OSError) as exc:
        print(f"greenscape {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
