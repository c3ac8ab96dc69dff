"""Scene ingestion: label maps, depth maps, RGB images and binary masks.

Label maps and masks are 8-bit single-channel PNGs, depth maps are PFM and
RGB images are 24-bit PNGs. Vegetation and sky masks are derived from a
label map through a :class:`ClassMap` and, for terrain, a
:class:`TerrainPolicy`.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Literal

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import (
    DimensionMismatch,
    InvalidClassMap,
    MalformedFile,
    MissingChannel,
    NegativeDepth,
    NonFiniteDepth,
    UnknownLabel,
)

DEFAULT_EXCESS_GREEN_THRESHOLD = 20


def image_key(image_id: str):
    """Sort key that orders numeric ids numerically and others lexically."""
    return (0, int(image_id), "") if image_id.isdigit() else (1, 0, image_id)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ClassMap:
    """Label id to class name mapping plus the class groups used for masks."""

    entries: tuple[tuple[int, str], ...]
    vegetation_classes: frozenset[str] = frozenset()
    terrain_classes: frozenset[str] = frozenset()
    sky_classes: frozenset[str] = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple((int(i), str(n)) for i, n in self.entries))
        for attr in ("vegetation_classes", "terrain_classes", "sky_classes"):
            object.__setattr__(self, attr, frozenset(getattr(self, attr)))

        ids = [i for i, _ in self.entries]
        if len(set(ids)) != len(ids):
            raise InvalidClassMap("label ids must be unique")
        for i in ids:
            if not 0 <= i <= 255:
                raise InvalidClassMap(f"label id {i} does not fit in an 8-bit label map")
        groups = {
            "vegetation": self.vegetation_classes,
            "terrain": self.terrain_classes,
            "sky": self.sky_classes,
        }
        names = list(groups)
        for a in range(len(names)):
            for b in range(a + 1, len(names)):
                both = groups[names[a]] & groups[names[b]]
                if both:
                    raise InvalidClassMap(
                        f"{names[a]} and {names[b]} classes overlap: {sorted(both)}"
                    )
        known = {n for _, n in self.entries}
        for group, members in groups.items():
            missing = members - known
            if missing:
                raise InvalidClassMap(f"{group} classes not among entries: {sorted(missing)}")

    @property
    def label_ids(self) -> frozenset[int]:
        return frozenset(i for i, _ in self.entries)

    def ids_for(self, class_names: Iterable[str]) -> np.ndarray:
        wanted = set(class_names)
        return np.array(sorted(i for i, n in self.entries if n in wanted), dtype=np.int64)

    def lookup_table(self, class_names: Iterable[str]) -> np.ndarray:
        """Boolean table of length 256, True where the label id is in ``class_names``."""
        table = np.zeros(256, dtype=bool)
        table[self.ids_for(class_names)] = True
        return table


@dataclass(frozen=True)
class TerrainPolicy:
    """Which images may count their terrain pixels as vegetation."""

    mode: Literal["include_all", "exclude_all", "per_image_whitelist"] = "include_all"
    whitelist: frozenset[str] = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "whitelist", frozenset(str(w) for w in self.whitelist))
        if self.mode not in ("include_all", "exclude_all", "per_image_whitelist"):
            raise InvalidClassMap(f"unknown terrain policy mode {self.mode!r}")
        if self.whitelist and self.mode != "per_image_whitelist":
            raise InvalidClassMap("whitelist is only allowed with mode per_image_whitelist")

    def admits(self, image_id: str) -> bool:
        if self.mode == "include_all":
            return True
        if self.mode == "exclude_all":
            return False
        return image_id in self.whitelist


@dataclass(frozen=True, eq=False)
class LabeledScene:
    image_id: str
    labels: np.ndarray
    city: str = ""
    depth: np.ndarray | None = None
    rgb: np.ndarray | None = None

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2 or labels.shape[0] < 1 or labels.shape[1] < 1:
            raise DimensionMismatch(f"labels must be a nonempty 2-D grid, got shape {labels.shape}")
        object.__setattr__(self, "labels", _frozen(labels.astype(np.uint8, copy=False)))
        if self.depth is not None:
            depth = np.asarray(self.depth, dtype=np.float64)
            if depth.shape != labels.shape:
                raise DimensionMismatch(f"depth shape {depth.shape} != labels shape {labels.shape}")
            object.__setattr__(self, "depth", _frozen(depth))
        if self.rgb is not None:
            rgb = np.asarray(self.rgb)
            if rgb.shape != labels.shape + (3,):
                raise DimensionMismatch(f"rgb shape {rgb.shape} != {labels.shape + (3,)}")
            object.__setattr__(self, "rgb", _frozen(rgb.astype(np.uint8, copy=False)))

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def with_depth(self, depth: np.ndarray | None) -> "LabeledScene":
        return LabeledScene(self.image_id, self.labels, self.city, depth, self.rgb)

    def with_rgb(self, rgb: np.ndarray | None) -> "LabeledScene":
        return LabeledScene(self.image_id, self.labels, self.city, self.depth, rgb)


@dataclass(frozen=True, eq=False)
class Mask:
    """Binary grid derived from a scene; ``bits`` is a read-only uint8 array of 0/1."""

    image_id: str
    bits: np.ndarray
    source: Literal["semantic", "spectral"] = "semantic"

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 2:
            raise DimensionMismatch(f"mask must be 2-D, got shape {bits.shape}")
        object.__setattr__(self, "bits", _frozen((bits != 0).astype(np.uint8)))

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    def popcount(self) -> int:
        return int(self.bits.sum(dtype=np.int64))

    def complement(self) -> "Mask":
        return Mask(self.image_id, 1 - self.bits, self.source)

    def __eq__(self, other):
        if not isinstance(other, Mask):
            return NotImplemented
        return (
            self.image_id == other.image_id
            and self.source == other.source
            and np.array_equal(self.bits, other.bits)
        )


# Same representation; the names document intent at call sites.
VegetationMask = Mask
SkyMask = Mask


# --------------------------------------------------------------------------
# class map config


def load_class_config(path: str | os.PathLike) -> tuple[ClassMap, TerrainPolicy]:
    """Read a class map and terrain policy from one JSON document.

    Expected layout::

        {
          "classes": {"0": "road", "13": "vegetation", ...},
          "vegetation": ["vegetation"],
          "terrain": ["terrain"],
          "sky": ["sky"],
          "terrain_policy": {"mode": "include_all", "whitelist": []}
        }

    ``classes`` may also be a list of ``{"id": ..., "name": ...}`` objects.
    """
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise MalformedFile(f"cannot read class config {path}: {exc}") from exc
    return class_config_from_dict(doc)


def class_config_from_dict(doc: dict) -> tuple[ClassMap, TerrainPolicy]:
    raw = doc.get("classes")
    if isinstance(raw, dict):
        entries = [(int(k), v) for k, v in raw.items()]
    elif isinstance(raw, list):
        entries = [(int(e["id"]), e["name"]) for e in raw]
    else:
        raise InvalidClassMap("'classes' must be an object or a list")
    class_map = ClassMap(
        tuple(entries),
        frozenset(doc.get("vegetation", ())),
        frozenset(doc.get("terrain", ())),
        frozenset(doc.get("sky", ())),
    )
    pol = doc.get("terrain_policy", {}) or {}
    policy = TerrainPolicy(pol.get("mode", "include_all"), frozenset(pol.get("whitelist", ())))
    return class_map, policy


def class_config_to_dict(class_map: ClassMap, policy: TerrainPolicy) -> dict:
    return {
        "classes": {str(i): n for i, n in class_map.entries},
        "vegetation": sorted(class_map.vegetation_classes),
        "terrain": sorted(class_map.terrain_classes),
        "sky": sorted(class_map.sky_classes),
        "terrain_policy": {"mode": policy.mode, "whitelist": sorted(policy.whitelist)},
    }


# --------------------------------------------------------------------------
# image files


def _open_image(path: str | os.PathLike) -> Image.Image:
    try:
        img = Image.open(path)
        img.load()
    except (OSError, UnidentifiedImageError, SyntaxError, ValueError) as exc:
        raise MalformedFile(f"cannot decode {path}: {exc}") from exc
    if img.width < 1 or img.height < 1:
        raise MalformedFile(f"{path} has zero size")
    return img


def read_label_png(path: str | os.PathLike) -> np.ndarray:
    img = _open_image(path)
    # Palette images carry label ids as indices; L is a plain 8-bit grid.
    if img.mode not in ("L", "P"):
        raise MalformedFile(f"{path}: expected a single-channel 8-bit image, got mode {img.mode}")
    return np.array(img, dtype=np.uint8)


def write_label_png(path: str | os.PathLike, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.ndim != 2 or labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
        raise ValueError("labels must be a 2-D grid of values in [0, 255]")
    Image.fromarray(labels.astype(np.uint8), mode="L").save(path, format="PNG")


def load_label_map(
    path: str | os.PathLike, class_map: ClassMap, image_id: str | None = None, city: str = ""
) -> LabeledScene:
    """Load an 8-bit label PNG and check every pixel against ``class_map``.

    Raises :class:`UnknownLabel` for the first offending pixel in row-major
    order and :class:`MalformedFile` when the file cannot be decoded.
    """
    labels = read_label_png(path)
    known = np.zeros(256, dtype=bool)
    known[list(class_map.label_ids)] = True
    bad = ~known[labels]
    if bad.any():
        y, x = np.argwhere(bad)[0]
        raise UnknownLabel(int(labels[y, x]), int(x), int(y))
    if image_id is None:
        image_id = Path(path).stem
    return LabeledScene(image_id=image_id, labels=labels, city=city)


def load_rgb(path: str | os.PathLike) -> np.ndarray:
    img = _open_image(path)
    if img.mode != "RGB":
        img = img.convert("RGB")
    return np.array(img, dtype=np.uint8)


def write_mask_png(path: str | os.PathLike, mask: Mask) -> None:
    Image.fromarray((mask.bits * 255).astype(np.uint8), mode="L").save(path, format="PNG")


def read_mask_png(
    path: str | os.PathLike, image_id: str | None = None, source: str = "semantic"
) -> Mask:
    img = _open_image(path)
    if img.mode != "L":
        raise MalformedFile(f"{path}: masks must be 8-bit grayscale, got mode {img.mode}")
    values = np.array(img, dtype=np.uint8)
    if not np.isin(values, (0, 255)).all():
        raise MalformedFile(f"{path}: mask values must be 0 or 255")
    return Mask(image_id or Path(path).stem, values == 255, source)


# --------------------------------------------------------------------------
# PFM depth maps

_PFM_DIMS = re.compile(rb"^\s*(\d+)\s+(\d+)\s*$")


def read_pfm(path: str | os.PathLike) -> np.ndarray:
    """Decode a single-channel PFM file into a top-to-bottom float64 grid."""
    try:
        with open(path, "rb") as fh:
            header = fh.readline().rstrip()
            if header == b"PF":
                raise MalformedFile(f"{path}: color PFM given where a depth map was expected")
            if header != b"Pf":
                raise MalformedFile(f"{path}: not a PFM file")
            dims = _PFM_DIMS.match(fh.readline())
            if not dims:
                raise MalformedFile(f"{path}: bad PFM dimensions line")
            width, height = int(dims.group(1)), int(dims.group(2))
            try:
                scale = float(fh.readline().strip())
            except ValueError as exc:
                raise MalformedFile(f"{path}: bad PFM scale line") from exc
            data = fh.read()
    except OSError as exc:
        raise MalformedFile(f"cannot read {path}: {exc}") from exc

    if width < 1 or height < 1:
        raise MalformedFile(f"{path}: zero-size PFM")
    if scale == 0:
        raise MalformedFile(f"{path}: PFM scale must be nonzero")
    dtype = "<f4" if scale < 0 else ">f4"
    expected = width * height * 4
    if len(data) < expected:
        raise MalformedFile(f"{path}: truncated PFM payload ({len(data)} of {expected} bytes)")
    grid = np.frombuffer(data[:expected], dtype=dtype).reshape(height, width)
    # PFM stores rows bottom-to-top.
    return np.flipud(grid).astype(np.float64)


def write_pfm(path: str | os.PathLike, grid: np.ndarray, little_endian: bool = True) -> None:
    grid = np.asarray(grid, dtype=np.float32)
    if grid.ndim != 2:
        raise ValueError("depth grid must be 2-D")
    height, width = grid.shape
    dtype = "<f4" if little_endian else ">f4"
    with open(path, "wb") as fh:
        fh.write(b"Pf\n")
        fh.write(f"{width} {height}\n".encode())
        fh.write(b"-1.0\n" if little_endian else b"1.0\n")
        fh.write(np.flipud(grid).astype(dtype).tobytes())


def validate_depth(grid: np.ndarray) -> np.ndarray:
    grid = np.asarray(grid, dtype=np.float64)
    bad = ~np.isfinite(grid)
    if bad.any():
        y, x = np.argwhere(bad)[0]
        raise NonFiniteDepth(int(x), int(y))
    neg = grid < 0
    if neg.any():
        y, x = np.argwhere(neg)[0]
        raise NegativeDepth(int(x), int(y))
    return grid


def load_depth_map(path: str | os.PathLike) -> np.ndarray:
    """Load a PFM depth map in meters, rejecting NaN/inf and negative values."""
    return validate_depth(read_pfm(path))


# --------------------------------------------------------------------------
# masks


def build_vegetation_mask(
    scene: LabeledScene, class_map: ClassMap, policy: TerrainPolicy = TerrainPolicy()
) -> Mask:
    classes = set(class_map.vegetation_classes)
    if policy.admits(scene.image_id):
        classes |= class_map.terrain_classes
    table = class_map.lookup_table(classes)
    return Mask(scene.image_id, table[scene.labels], "semantic")


def build_sky_mask(scene: LabeledScene, class_map: ClassMap) -> Mask:
    table = class_map.lookup_table(class_map.sky_classes)
    return Mask(scene.image_id, table[scene.labels], "semantic")


def spectral_vegetation_mask(
    scene: LabeledScene, excess_green_threshold: int = DEFAULT_EXCESS_GREEN_THRESHOLD
) -> Mask:
    """Excess-green thresholding: a pixel is vegetation when 2G - R - B > threshold."""
    if scene.rgb is None:
        raise MissingChannel(f"scene {scene.image_id} has no RGB channel")
    rgb = scene.rgb.astype(np.int32)
    exg = 2 * rgb[..., 1] - rgb[..., 0] - rgb[..., 2]
    return Mask(scene.image_id, exg > int(excess_green_threshold), "spectral")
