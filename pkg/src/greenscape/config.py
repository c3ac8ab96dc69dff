"""Project configuration: one JSON document plus command-line overrides."""

from __future__ import annotations

import copy
import hashlib
import json
import math
import os
import tempfile
from contextlib import contextmanager
from pathlib import Path
from typing import Any

from .errors import ConfigError
from .forest import MAX_DEPTH, MAX_FEATURES, MIN_SAMPLES_LEAF, MIN_SAMPLES_SPLIT, N_ESTIMATORS
from .metrics import DEFAULT_FRACTION, DEFAULT_FRACTIONS, DEFAULT_STRIDE
from .ingest import DEFAULT_EXCESS_GREEN_THRESHOLD

INPUT_PATHS = ("labels_dir", "depth_dir", "rgb_dir", "comparisons_csv", "images_csv", "class_map", "metrics_csv", "scores_csv")

DEFAULTS: dict[str, Any] = {
    "paths": {
        "labels_dir": None,
        "depth_dir": None,
        "rgb_dir": None,
        "comparisons_csv": None,
        "images_csv": None,
        "class_map": None,
        "metrics_csv": None,
        "scores_csv": None,
        "output_dir": "out",
    },
    "metrics": {
        "fraction": DEFAULT_FRACTION,
        "fractions": list(DEFAULT_FRACTIONS),
        "stride": DEFAULT_STRIDE,
        "mask_source": "semantic",
        "excess_green_threshold": DEFAULT_EXCESS_GREEN_THRESHOLD,
    },
    "scoring": {
        "min_comparisons": 4,
        "indicators": None,
        "contexts": None,
        "trueskill": {
            "mu0": 25.0,
            "sigma0": 25.0 / 3.0,
            "beta": 25.0 / 6.0,
            "tau": 25.0 / 300.0,
            "draw_probability": 0.10,
        },
    },
    "stats": {
        "low_quantile": 0.25,
        "high_quantile": 0.75,
        "exact_cutoff": 25,
        "gvi_normalization": "minmax",
        "qq_quantiles": 101,
        "alpha": 0.05,
    },
    "model": {
        "seed": 0,
        "test_fraction": 0.2,
        "n_candidates": 50,
        "folds": 5,
        "search_space": {
            "n_estimators": list(N_ESTIMATORS),
            "max_depth": list(MAX_DEPTH),
            "min_samples_split": list(MIN_SAMPLES_SPLIT),
            "min_samples_leaf": list(MIN_SAMPLES_LEAF),
            "max_features": list(MAX_FEATURES),
        },
        "importance_repeats": 30,
        "correlation_threshold": 0.3,
        "n_bins": 10,
    },
}


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "search_space":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


class ProjectConfig:
    """Resolved configuration; relative paths are taken from the config file's directory."""

    def __init__(self, data: dict, base_dir: Path):
        self.data = data
        self.base_dir = base_dir

    @classmethod
    def load(cls, path: str | os.PathLike | None, overrides: dict | None = None) -> "ProjectConfig":
        doc: dict = {}
        base = Path.cwd()
        if path is not None:
            try:
                with open(path, encoding="utf-8") as fh:
                    doc = json.load(fh)
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from exc
            base = Path(path).resolve().parent
        data = _merge(DEFAULTS, doc)
        if overrides:
            data = _merge(data, overrides)
        cfg = cls(data, base)
        cfg.validate()
        return cfg

    def section(self, name: str) -> dict:
        return self.data[name]

    def path(self, key: str) -> Path | None:
        raw = self.data["paths"].get(key)
        if raw in (None, ""):
            return None
        p = Path(raw)
        return p if p.is_absolute() else (self.base_dir / p)

    @property
    def output_dir(self) -> Path:
        return self.path("output_dir") or Path("out")

    def validate(self) -> None:
        for key in INPUT_PATHS:
            p = self.path(key)
            if p is not None and not p.exists():
                raise ConfigError(f"paths.{key} does not exist: {p}")
        m = self.data["metrics"]
        if not 0 < float(m["fraction"]) <= 1:
            raise ConfigError("metrics.fraction must lie in (0, 1]")
        if int(m["stride"]) < 1:
            raise ConfigError("metrics.stride must be >= 1")
        if m["mask_source"] not in ("semantic", "spectral"):
            raise ConfigError("metrics.mask_source must be 'semantic' or 'spectral'")
        fr = [float(f) for f in m["fractions"]]
        if not fr or any(not 0 < f <= 1 for f in fr) or any(b <= a for a, b in zip(fr, fr[1:])):
            raise ConfigError("metrics.fractions must be strictly increasing values in (0, 1]")
        s = self.data["scoring"]
        if int(s["min_comparisons"]) < 0:
            raise ConfigError("scoring.min_comparisons must be >= 0")
        if not 0 <= float(s["trueskill"]["draw_probability"]) < 1:
            raise ConfigError("scoring.trueskill.draw_probability must lie in [0, 1)")
        st = self.data["stats"]
        if not 0 <= float(st["low_quantile"]) <= float(st["high_quantile"]) <= 1:
            raise ConfigError("stats quantiles must satisfy 0 <= low <= high <= 1")
        if st["gvi_normalization"] not in ("minmax", "none"):
            raise ConfigError("stats.gvi_normalization must be 'minmax' or 'none'")
        md = self.data["model"]
        if not 0 < float(md["test_fraction"]) < 1:
            raise ConfigError("model.test_fraction must lie in (0, 1)")
        if int(md["folds"]) < 2:
            raise ConfigError("model.folds must be >= 2")
        if int(md["importance_repeats"]) < 2:
            raise ConfigError("model.importance_repeats must be >= 2")

    def fingerprint(self) -> str:
        canon = json.dumps(self.data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]


@contextmanager
def atomic_path(path: str | os.PathLike):
    """Yield a temporary sibling path that replaces ``path`` on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    os.close(fd)
    os.chmod(tmp, 0o644)
    try:
        yield tmp
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _finite(obj):
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    return obj


def write_json(path, doc) -> None:
    """Write JSON atomically; NaN and infinities become null."""
    with atomic_path(path) as tmp:
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(_finite(doc), fh, indent=2, sort_keys=True, allow_nan=False)
            fh.write("\n")
