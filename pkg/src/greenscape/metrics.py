"""Per-image greenery metrics.

Green View Index, Sky View Index, sliding-window spatial entropy of the
vegetation mask (with a window-size sensitivity sweep), label-frequency
Shannon entropy, and vegetation depth statistics.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from .errors import DimensionMismatch, DomainError, EmptyImage, NoVegetation, WindowTooLarge
from .ingest import (
    ClassMap,
    LabeledScene,
    Mask,
    TerrainPolicy,
    build_sky_mask,
    build_vegetation_mask,
    image_key,
)

DEFAULT_FRACTION = 0.45
DEFAULT_STRIDE = 1
DEFAULT_FRACTIONS: tuple[float, ...] = tuple(round(0.05 * k, 2) for k in range(2, 21))


def _binary_entropy(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    q = 1.0 - p
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -p * np.log2(p) - q * np.log2(q)
    # 0 * log2(0) = 0
    return np.where((p <= 0.0) | (p >= 1.0), 0.0, h)


def window_entropy(p: float) -> float:
    """Binary Shannon entropy (bits) of a vegetation proportion ``p``."""
    if not 0.0 <= p <= 1.0 or math.isnan(p):
        raise DomainError(f"proportion {p} outside [0, 1]")
    return float(_binary_entropy(np.float64(p)))


def pixel_ratio(mask: Mask) -> float:
    n = mask.width * mask.height
    if n == 0:
        raise EmptyImage(f"mask {mask.image_id} has no pixels")
    return mask.popcount() / n


def gvi(mask: Mask) -> float:
    """Green View Index: share of vegetation pixels in the image."""
    return pixel_ratio(mask)


def sky_view_index(mask: Mask) -> float:
    return pixel_ratio(mask)


def window_side(fraction: float, width: int, height: int) -> int:
    """Square window side for a relative window size, half-up rounded."""
    if not 0.0 < fraction <= 1.0:
        raise DomainError(f"window fraction {fraction} outside (0, 1]")
    short = min(width, height)
    if short < 1:
        raise EmptyImage("image has no pixels")
    s = int(math.floor(fraction * short + 0.5))
    if not 1 <= s <= short:
        raise WindowTooLarge(f"window side {s} invalid for a {width}x{height} image")
    return s


def window_offsets(length: int, side: int, stride: int) -> np.ndarray:
    """Window start offsets along one axis; the last valid offset is always included."""
    last = length - side
    offsets = np.arange(0, last + 1, stride, dtype=np.int64)
    if offsets[-1] != last:
        offsets = np.append(offsets, last)
    return offsets


def summed_area_table(bits: np.ndarray) -> np.ndarray:
    """Integral image with a leading zero row and column (int64)."""
    h, w = bits.shape
    sat = np.zeros((h + 1, w + 1), dtype=np.int64)
    np.cumsum(np.cumsum(bits, axis=0, dtype=np.int64), axis=1, out=sat[1:, 1:])
    return sat


def window_counts(bits: np.ndarray, side: int, stride: int) -> np.ndarray:
    """Set-pixel count in every ``side`` x ``side`` window, via a summed-area table."""
    h, w = bits.shape
    ys = window_offsets(h, side, stride)
    xs = window_offsets(w, side, stride)
    sat = summed_area_table(bits)
    y0, x0 = np.ix_(ys, xs)
    y1, x1 = y0 + side, x0 + side
    return sat[y1, x1] - sat[y0, x1] - sat[y1, x0] + sat[y0, x0]


def spatial_entropy(mask: Mask, fraction: float = DEFAULT_FRACTION, stride: int = DEFAULT_STRIDE) -> float:
    """Mean binary entropy of the vegetation proportion over all square windows.

    The window side is ``round(fraction * min(width, height))``; windows are
    enumerated at ``stride`` in both axes and always reach the image edge.
    """
    if mask.width * mask.height == 0:
        raise EmptyImage(f"mask {mask.image_id} has no pixels")
    if stride < 1:
        raise DomainError(f"stride must be >= 1, got {stride}")
    side = window_side(fraction, mask.width, mask.height)
    counts = window_counts(mask.bits, side, stride)
    return float(np.mean(_binary_entropy(counts / float(side * side))))


@dataclass(frozen=True)
class SweepCurve:
    points: tuple[tuple[float, float], ...]
    argmax_fraction: float

    @property
    def fractions(self) -> list[float]:
        return [f for f, _ in self.points]

    @property
    def entropies(self) -> list[float]:
        return [h for _, h in self.points]


def curve_from_points(fractions: Sequence[float], entropies: Sequence[float]) -> SweepCurve:
    fr = [float(f) for f in fractions]
    if any(b <= a for a, b in zip(fr, fr[1:])):
        raise DomainError("sweep fractions must be strictly increasing")
    best = int(np.argmax(entropies))  # first occurrence on ties
    return SweepCurve(tuple(zip(fr, map(float, entropies))), fr[best])


def entropy_sweep(
    mask: Mask, fractions: Sequence[float] = DEFAULT_FRACTIONS, stride: int = DEFAULT_STRIDE
) -> SweepCurve:
    values = [spatial_entropy(mask, f, stride) for f in fractions]
    return curve_from_points(fractions, values)


def mean_curve(curves: Sequence[SweepCurve]) -> SweepCurve:
    """Pointwise average of sweep curves sharing the same fractions."""
    if not curves:
        raise EmptyImage("no curves to aggregate")
    fr = curves[0].fractions
    for c in curves[1:]:
        if c.fractions != fr:
            raise DimensionMismatch("sweep curves use different fractions")
    values = np.mean([c.entropies for c in curves], axis=0)
    return curve_from_points(fr, values)


def global_entropy(scene: LabeledScene) -> float:
    """Shannon entropy (bits) of the label frequency distribution."""
    n = scene.labels.size
    if n == 0:
        raise EmptyImage(f"scene {scene.image_id} has no pixels")
    counts = np.bincount(scene.labels.ravel(), minlength=256)
    f = counts[counts > 0] / n
    return float(max(0.0, -np.sum(f * np.log2(f))))


@dataclass(frozen=True)
class DepthStats:
    mean_veg_depth: float
    median_veg_depth: float
    relative_depth: float | None


def vegetation_depth_stats(mask: Mask, depth: np.ndarray) -> DepthStats:
    """Mean/median depth over vegetation pixels and their ratio to the rest.

    ``relative_depth`` is None when the mask covers every pixel.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != mask.bits.shape:
        raise DimensionMismatch(f"depth shape {depth.shape} != mask shape {mask.bits.shape}")
    veg = mask.bits.astype(bool)
    if not veg.any():
        raise NoVegetation(f"mask {mask.image_id} has no vegetation pixels")
    inside = depth[veg]
    mean_in = float(np.mean(inside))
    median_in = float(np.median(inside))
    if veg.all():
        return DepthStats(mean_in, median_in, None)
    mean_out = float(np.mean(depth[~veg]))
    relative = mean_in / mean_out if mean_out > 0 else math.inf
    return DepthStats(mean_in, median_in, relative)


@dataclass(frozen=True)
class MetricRow:
    image_id: str
    city: str
    gvi: float
    sky_view_index: float
    spatial_entropy: float
    window_fraction: float
    global_entropy: float
    mean_veg_depth: float | None = None
    median_veg_depth: float | None = None
    relative_depth: float | None = None


METRIC_COLUMNS: tuple[str, ...] = tuple(f.name for f in fields(MetricRow))


def compute_metric_row(
    scene: LabeledScene,
    class_map: ClassMap,
    policy: TerrainPolicy = TerrainPolicy(),
    fraction: float = DEFAULT_FRACTION,
    stride: int = DEFAULT_STRIDE,
    vegetation: Mask | None = None,
) -> MetricRow:
    veg = vegetation if vegetation is not None else build_vegetation_mask(scene, class_map, policy)
    sky = build_sky_mask(scene, class_map)
    depth_stats = (None, None, None)
    if scene.depth is not None and veg.popcount() > 0:
        d = vegetation_depth_stats(veg, scene.depth)
        depth_stats = (d.mean_veg_depth, d.median_veg_depth, d.relative_depth)
    return MetricRow(
        scene.image_id,
        scene.city,
        gvi(veg),
        sky_view_index(sky),
        spatial_entropy(veg, fraction, stride),
        fraction,
        global_entropy(scene),
        *depth_stats,
    )


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_metric_rows(path, rows: Sequence[MetricRow], include_depth: bool = True) -> None:
    columns = METRIC_COLUMNS if include_depth else METRIC_COLUMNS[:7]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for row in sorted(rows, key=lambda r: image_key(r.image_id)):
            d = asdict(row)
            w.writerow([_fmt(d[c]) for c in columns])


def read_metric_rows(path) -> list[MetricRow]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            def num(key):
                v = rec.get(key, "")
                return float(v) if v not in ("", None) else None

            rows.append(
                MetricRow(
                    rec["image_id"],
                    rec.get("city", "") or "",
                    float(rec["gvi"]),
                    float(rec["sky_view_index"]),
                    float(rec["spatial_entropy"]),
                    float(rec["window_fraction"]),
                    float(rec["global_entropy"]),
                    num("mean_veg_depth"),
                    num("median_veg_depth"),
                    num("relative_depth"),
                )
            )
    return rows


def write_sweep_curve(path, curve: SweepCurve) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["fraction", "mean_entropy"])
        for f, h in curve.points:
            w.writerow([repr(f), repr(h)])
