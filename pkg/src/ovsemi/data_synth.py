"""Seeded "shapes world" benchmark.

In-distribution scenes contain coloured shapes from the target classes on a
noisy background.  OOD scenes additionally contain shapes from classes that
never appear in the target label space (they are labeled background) and are
rendered with a shifted appearance.  In-distribution scenes may also carry an
unlabeled OOD-class object as clutter.  Each OOD class has a target-class
"confuser" that an embedder can place close to it in embedding space, which
is what makes a teacher restricted to the target vocabulary mislabel it.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigError, InfeasibleSplitError, ManifestParseError

BACKGROUND_ID = 0
IGNORE_ID = 255

DEFAULT_IN_CLASSES = ("background", "square", "disk", "triangle", "cross")
DEFAULT_OOD_CLASSES = ("star", "ring", "diamond")

# target class that each OOD shape is easily mistaken for
DEFAULT_CONFUSERS = {"star": "cross", "ring": "disk", "diamond": "square"}

_BASE_COLORS = {
    "square": (0.85, 0.20, 0.20),
    "disk": (0.20, 0.75, 0.30),
    "triangle": (0.25, 0.35, 0.90),
    "cross": (0.90, 0.80, 0.20),
    "star": (0.60, 0.30, 0.80),
    "ring": (0.20, 0.80, 0.85),
    "diamond": (0.92, 0.92, 0.92),
}

APPEARANCE_SHIFTS = ("none", "palette", "texture")
PROTOCOLS = ("original", "blended", "priority")


@dataclass(frozen=True)
class SceneSpec:
    image_size: tuple[int, int] = (64, 64)
    in_class_names: tuple[str, ...] = DEFAULT_IN_CLASSES
    ood_class_names: tuple[str, ...] = DEFAULT_OOD_CLASSES
    shapes_per_scene: tuple[int, int] = (1, 3)
    appearance_shift: str = "palette"
    seed: int = 0
    # chance that an in-distribution scene carries one unlabeled OOD-class object
    clutter_prob: float = 0.5
    radius_range: tuple[int, int] = (7, 13)

    @property
    def n_in(self) -> int:
        return len(self.in_class_names)

    @property
    def all_class_names(self) -> tuple[str, ...]:
        return tuple(self.in_class_names) + tuple(self.ood_class_names)

    def validate(self, need_ood: bool = False) -> None:
        if len(self.in_class_names) < 2:
            raise ConfigError("need at least two in-distribution classes (background + one)")
        if len(set(self.in_class_names)) != len(self.in_class_names):
            raise ConfigError("duplicate in-distribution class name")
        if set(self.in_class_names) & set(self.ood_class_names):
            raise ConfigError("in-distribution and OOD class names overlap")
        if need_ood and not self.ood_class_names:
            raise ConfigError("OOD scene requested but ood_class_names is empty")
        lo, hi = self.shapes_per_scene
        if lo < 0 or hi < lo:
            raise ConfigError(f"bad shapes_per_scene {self.shapes_per_scene}")
        if self.appearance_shift not in APPEARANCE_SHIFTS:
            raise ConfigError(f"unknown appearance_shift {self.appearance_shift!r}")
        h, w = self.image_size
        rmin, rmax = self.radius_range
        if rmin < 2 or rmax < rmin or 2 * rmax + 1 > min(h, w):
            raise ConfigError(f"radius_range {self.radius_range} does not fit image {self.image_size}")


@dataclass(frozen=True)
class SceneObject:
    class_name: str
    box: tuple[int, int, int, int]  # top, left, h, w of the rasterized mask
    is_ood: bool


@dataclass(frozen=True)
class Scene:
    image: np.ndarray  # H x W x 3 float32 in [0, 1]
    label: np.ndarray  # H x W uint8 over target ids; OOD objects are background
    semantic: np.ndarray  # H x W uint8 over target + OOD ids (teacher-side truth)
    objects: tuple[SceneObject, ...] = field(default_factory=tuple)


def shape_mask(name: str, dy: np.ndarray, dx: np.ndarray, r: float) -> np.ndarray:
    """Boolean mask of a shape of half-size ``r`` given offsets from its center."""
    ady, adx = np.abs(dy), np.abs(dx)
    dist = np.hypot(dy, dx)
    if name == "square":
        return (ady <= 0.8 * r) & (adx <= 0.8 * r)
    if name == "disk":
        return dist <= r
    if name == "triangle":
        return (dy >= -r) & (dy <= r) & (adx <= (dy + r) / 2.0)
    if name == "cross":
        arm = r / 3.0
        return ((adx <= arm) & (ady <= r)) | ((ady <= arm) & (adx <= r))
    if name == "star":
        theta = np.arctan2(dy, dx) + math.pi / 2
        phase = (theta * 5 / (2 * math.pi)) % 1.0
        tri = 1.0 - 2.0 * np.abs(phase - 0.5)
        return dist <= r * (0.45 + 0.55 * (1.0 - tri))
    if name == "ring":
        return (dist <= r) & (dist >= 0.55 * r)
    if name == "diamond":
        return ady + adx <= r
    # unknown names (user-supplied vocabularies) fall back to an ellipse
    return (dy / r) ** 2 + (dx / (0.6 * r)) ** 2 <= 1.0


def _class_color(name: str, index: int) -> np.ndarray:
    if name in _BASE_COLORS:
        return np.array(_BASE_COLORS[name])
    # deterministic colour for classes outside the default vocabulary
    hue = (index * 0.61803398875) % 1.0
    return np.array([0.5 + 0.4 * math.cos(2 * math.pi * (hue + k / 3)) for k in range(3)])


def _background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    level = rng.uniform(0.15, 0.45)
    tint = rng.uniform(-0.05, 0.05, size=3)
    gy, gx = rng.uniform(-0.1, 0.1, size=2)
    yy, xx = np.meshgrid(np.linspace(-0.5, 0.5, h), np.linspace(-0.5, 0.5, w), indexing="ij")
    img = level + tint[None, None, :] + (gy * yy + gx * xx)[..., None]
    return img + rng.normal(0.0, 0.05, size=(h, w, 3))


def generate_scene(spec: SceneSpec, index: int, ood: bool = False) -> Scene:
    """Render scene ``index`` of the in-distribution (or OOD) stream."""
    spec.validate(need_ood=ood)
    if index < 0:
        raise ConfigError(f"scene index must be >= 0, got {index}")
    h, w = spec.image_size
    rng = np.random.default_rng([spec.seed & 0xFFFFFFFFFFFFFFFF, index, int(ood)])
    n_in = spec.n_in

    image = _background(rng, h, w)
    label = np.zeros((h, w), dtype=np.uint8)
    semantic = np.zeros((h, w), dtype=np.uint8)

    lo, hi = spec.shapes_per_scene
    draws = [(int(c), False) for c in rng.integers(1, n_in, size=rng.integers(lo, hi + 1))]
    n_ood = 0
    if ood:
        n_ood = int(rng.integers(1, 3))
    elif spec.ood_class_names and rng.random() < spec.clutter_prob:
        n_ood = 1
    # OOD objects are drawn last so their full mask is visible in the label map
    draws += [(n_in + int(c), True) for c in rng.integers(0, len(spec.ood_class_names) or 1, size=n_ood)]

    yy, xx = np.mgrid[0:h, 0:w]
    objects = []
    names = spec.all_class_names
    for class_id, is_ood in draws:
        name = names[class_id]
        r = int(rng.integers(spec.radius_range[0], spec.radius_range[1] + 1))
        cy = int(rng.integers(r, h - r))
        cx = int(rng.integers(r, w - r))
        mask = shape_mask(name, yy - cy, xx - cx, r)
        color = _class_color(name, class_id) + rng.uniform(-0.08, 0.08, size=3)
        image[mask] = color
        label[mask] = BACKGROUND_ID if is_ood else class_id
        semantic[mask] = class_id
        rows = np.flatnonzero(mask.any(axis=1))
        cols = np.flatnonzero(mask.any(axis=0))
        box = (int(rows[0]), int(cols[0]), int(rows[-1] - rows[0] + 1), int(cols[-1] - cols[0] + 1))
        objects.append(SceneObject(name, box, is_ood))

    if ood and spec.appearance_shift == "palette":
        image = image * rng.uniform(0.75, 1.25, size=3)[None, None, :]
    elif ood and spec.appearance_shift == "texture":
        period = rng.uniform(4.0, 9.0)
        angle = rng.uniform(0, math.pi)
        stripes = np.sin(2 * math.pi * (yy * math.sin(angle) + xx * math.cos(angle)) / period)
        image = image + 0.1 * stripes[..., None]

    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return Scene(image=image, label=label, semantic=semantic, objects=tuple(objects))


@dataclass(frozen=True)
class DatasetSplit:
    labeled: tuple[tuple[int, str], ...]  # (scene id, "fine" | "coarse")
    unlabeled_in: tuple[int, ...]
    unlabeled_out: tuple[str, ...]
    protocol: str

    @property
    def labeled_ids(self) -> list[int]:
        return [i for i, _ in self.labeled]

    def to_json(self) -> str:
        return json.dumps(
            {
                "protocol": self.protocol,
                "labeled": [[i, tag] for i, tag in self.labeled],
                "unlabeled_in": list(self.unlabeled_in),
                "unlabeled_out": list(self.unlabeled_out),
            },
            indent=1,
        )

    @classmethod
    def from_json(cls, text: str) -> "DatasetSplit":
        d = json.loads(text)
        return cls(
            labeled=tuple((int(i), str(tag)) for i, tag in d["labeled"]),
            unlabeled_in=tuple(int(i) for i in d["unlabeled_in"]),
            unlabeled_out=tuple(str(i) for i in d["unlabeled_out"]),
            protocol=d["protocol"],
        )


def fine_tier_size(n_scenes: int, quality_fraction: float) -> int:
    return int(round(n_scenes * quality_fraction))


def make_splits(n_scenes, n_labeled, protocol, quality_fraction, seed, unlabeled_out=()):
    """Choose labeled scenes under one of the three selection protocols.

    Scene ids ``[0, fine_tier_size)`` form the finely annotated tier, the rest
    are coarse.  ``original`` draws only from the fine tier, ``blended`` draws
    uniformly from all scenes and ``priority`` exhausts the fine tier before
    touching the coarse one.  Everything not labeled becomes ``unlabeled_in``.
    """
    if protocol not in PROTOCOLS:
        raise ConfigError(f"unknown protocol {protocol!r}")
    if not 0.0 <= quality_fraction <= 1.0:
        raise ConfigError(f"quality_fraction must lie in [0, 1], got {quality_fraction}")
    if not 0 < n_labeled < n_scenes:
        raise InfeasibleSplitError(
            f"need 0 < n_labeled < n_scenes, got n_labeled={n_labeled}, n_scenes={n_scenes}"
        )
    n_fine = fine_tier_size(n_scenes, quality_fraction)
    fine = np.arange(n_fine)
    coarse = np.arange(n_fine, n_scenes)
    rng = np.random.default_rng([seed, PROTOCOLS.index(protocol)])

    if protocol == "original":
        if n_labeled > n_fine:
            raise InfeasibleSplitError(
                f"original protocol needs {n_labeled} fine scenes but the fine tier has {n_fine}"
            )
        chosen = rng.choice(fine, size=n_labeled, replace=False)
    elif protocol == "blended":
        chosen = rng.choice(n_scenes, size=n_labeled, replace=False)
    else:
        take_fine = min(n_labeled, n_fine)
        chosen = np.concatenate([
            rng.choice(fine, size=take_fine, replace=False),
            rng.choice(coarse, size=n_labeled - take_fine, replace=False),
        ])

    chosen = np.sort(chosen)
    taken = np.zeros(n_scenes, dtype=bool)
    taken[chosen] = True
    labeled = tuple((int(i), "fine" if i < n_fine else "coarse") for i in chosen)
    unlabeled = tuple(int(i) for i in np.flatnonzero(~taken))
    return DatasetSplit(labeled, unlabeled, tuple(unlabeled_out), protocol)


@dataclass(frozen=True)
class ManifestItem:
    id: str
    path: str
    width: int
    height: int


@dataclass(frozen=True)
class CorpusManifest:
    items: tuple[ManifestItem, ...]
    max_pixels: int | None = None
    n_dropped: int = 0

    @property
    def ids(self) -> list[str]:
        return [it.id for it in self.items]


def load_manifest(path, max_pixels=None) -> CorpusManifest:
    """Read a tab-separated ``id path width height`` manifest.

    Blank lines and lines starting with ``#`` are skipped.  Relative item
    paths are resolved against the manifest's directory.  Items whose pixel
    count exceeds ``max_pixels`` are dropped and counted.
    """
    path = Path(path)
    base = path.parent
    items = []
    dropped = 0
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ManifestParseError(path, line_no, f"expected 4 tab-separated fields, got {len(parts)}")
            item_id, item_path, w, h = parts
            try:
                width, height = int(w), int(h)
            except ValueError:
                raise ManifestParseError(path, line_no, f"non-integer size {w!r} x {h!r}") from None
            if width <= 0 or height <= 0 or not item_id:
                raise ManifestParseError(path, line_no, "empty id or non-positive size")
            if max_pixels is not None and width * height > max_pixels:
                dropped += 1
                continue
            p = Path(item_path)
            items.append(ManifestItem(item_id, str(p if p.is_absolute() else base / p), width, height))
    return CorpusManifest(tuple(items), max_pixels, dropped)


def write_manifest(path, items: Sequence[ManifestItem]) -> None:
    path = Path(path)
    lines = []
    for it in items:
        p = Path(it.path)
        try:
            p = p.relative_to(path.parent)
        except ValueError:
            pass
        lines.append(f"{it.id}\t{p.as_posix()}\t{it.width}\t{it.height}\n")
    path.write_text("".join(lines), encoding="utf-8")


_SQUARE = np.ones((3, 3), dtype=bool)


def coarsen_label(label: np.ndarray, seed: int, min_area: int = 12, drop_prob: float = 0.5) -> np.ndarray:
    """Emulate a coarse annotation of ``label``.

    Each connected region is independently dilated (into background only) or
    eroded by one pixel; regions smaller than ``min_area`` are dropped to
    background with probability ``drop_prob``.  Ignore pixels are kept.
    """
    label = np.asarray(label)
    out = label.copy()
    rng = np.random.default_rng([seed, 0xC0A25E])
    for class_id in np.unique(label):
        if class_id in (BACKGROUND_ID, IGNORE_ID):
            continue
        regions, n = ndimage.label(label == class_id)
        for k in range(1, n + 1):
            region = regions == k
            if region.sum() < min_area and rng.random() < drop_prob:
                out[region] = BACKGROUND_ID
                continue
            if rng.random() < 0.5:
                grown = ndimage.binary_dilation(region, structure=_SQUARE)
                out[grown & (label == BACKGROUND_ID) & (out == BACKGROUND_ID)] = class_id
            else:
                kept = ndimage.binary_erosion(region, structure=_SQUARE)
                out[region & ~kept] = BACKGROUND_ID
    return out
