"""Data model for category discovery: splits, scene annotations, synthetic benchmark.

A dataset is a list of samples with object labels and optional scene labels.
A split divides it into a labeled part (base classes only) and an unlabeled
part that mixes base and novel classes. The synthetic generator composites a
class-specific glyph onto a procedural scene texture, with a configurable
object-scene correlation and exact foreground masks.
"""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image

from .decouple import MaskSource, SaliencyMask, load_mask


@dataclass
class Sample:
    id: str
    image: np.ndarray  # (H, W, 3) float in [0, 1]
    object_label: int
    scene_label: int | None = None
    is_labeled: bool = False
    oracle_mask: SaliencyMask | None = None
    source_path: str | None = None  # set when loaded from disk

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValueError(f"sample {self.id!r}: expected (H, W, 3) image, got {self.image.shape}")
        if self.object_label < 0:
            raise ValueError(f"sample {self.id!r}: object_label must be >= 0")
        if self.oracle_mask is not None and self.oracle_mask.data.shape != self.image.shape[:2]:
            raise ValueError(
                f"sample {self.id!r}: mask shape {self.oracle_mask.data.shape} "
                f"does not match image {self.image.shape[:2]}"
            )


class Quadrant(Enum):
    """Object/scene base-novel membership buckets of the unlabeled set."""

    BASE_OBJ_BASE_SCENE = "base_obj_base_scene"
    NOVEL_OBJ_BASE_SCENE = "novel_obj_base_scene"
    BASE_OBJ_NOVEL_SCENE = "base_obj_novel_scene"
    NOVEL_OBJ_NOVEL_SCENE = "novel_obj_novel_scene"


@dataclass
class GcdSplit:
    labeled: list[Sample]
    unlabeled: list[Sample]
    base_classes: frozenset[int]
    all_classes: frozenset[int]
    base_scenes: frozenset[int] | None = None

    def __post_init__(self):
        if not self.base_classes <= self.all_classes:
            raise ValueError("base_classes must be a subset of all_classes")
        bad = [s.id for s in self.labeled if s.object_label not in self.base_classes]
        if bad:
            raise ValueError(f"labeled samples outside base classes: {bad[:5]}")
        ids_l = {s.id for s in self.labeled}
        ids_u = {s.id for s in self.unlabeled}
        if ids_l & ids_u:
            raise ValueError(f"labeled/unlabeled ids overlap: {sorted(ids_l & ids_u)[:5]}")
        if len(ids_l) != len(self.labeled) or len(ids_u) != len(self.unlabeled):
            raise ValueError("duplicate sample ids within a split partition")

    @property
    def novel_classes(self) -> frozenset[int]:
        return self.all_classes - self.base_classes

    def all_samples(self) -> list[Sample]:
        return self.labeled + self.unlabeled


def make_gcd_split(
    samples: list[Sample],
    base_class_fraction: float,
    labeled_fraction: float,
    seed: int,
) -> GcdSplit:
    """Partition samples into labeled (base classes) and unlabeled sets.

    Base classes are the first ceil(fraction * n_classes) class ids under a
    seeded shuffle; within each base class a seeded labeled_fraction of
    samples becomes labeled. Everything else, including all samples of
    novel classes, is unlabeled. Deterministic for a fixed seed.
    """
    if not samples:
        raise ValueError("samples must be non-empty")
    for name, frac in (("base_class_fraction", base_class_fraction),
                       ("labeled_fraction", labeled_fraction)):
        if not 0.0 < frac <= 1.0:
            raise ValueError(f"{name} must be in (0, 1], got {frac}")
    per_class: dict[int, list[int]] = {}
    for i, s in enumerate(samples):
        per_class.setdefault(s.object_label, []).append(i)
    thin = [c for c, idxs in per_class.items() if len(idxs) < 2]
    if thin:
        raise ValueError(f"every class needs >= 2 samples; too few in classes {sorted(thin)[:5]}")

    classes = sorted(per_class)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(classes))
    n_base = math.ceil(base_class_fraction * len(classes))
    base = frozenset(classes[i] for i in order[:n_base])

    labeled_idx: set[int] = set()
    for c in sorted(base):
        idxs = per_class[c]
        n_lab = int(math.floor(labeled_fraction * len(idxs) + 0.5))
        if n_lab == 0:
            raise ValueError(
                f"class {c}: labeled_fraction {labeled_fraction} rounds to zero labeled "
                f"samples out of {len(idxs)} (degenerate split)"
            )
        take = rng.permutation(len(idxs))[:n_lab]
        labeled_idx.update(idxs[t] for t in take)

    labeled = [replace(samples[i], is_labeled=True) for i in sorted(labeled_idx)]
    unlabeled = [replace(samples[i], is_labeled=False)
                 for i in range(len(samples)) if i not in labeled_idx]
    return GcdSplit(
        labeled=labeled,
        unlabeled=unlabeled,
        base_classes=base,
        all_classes=frozenset(classes),
    )


def quadrant_of(sample: Sample, split: GcdSplit) -> Quadrant:
    """Bucket a scene-annotated sample by base/novel membership of object and scene."""
    if sample.scene_label is None:
        raise ValueError(f"sample {sample.id!r} is unannotated: no scene label")
    if split.base_scenes is None:
        raise ValueError("split has no base_scenes; derive or attach them first")
    obj_base = sample.object_label in split.base_classes
    scene_base = sample.scene_label in split.base_scenes
    if obj_base and scene_base:
        return Quadrant.BASE_OBJ_BASE_SCENE
    if not obj_base and scene_base:
        return Quadrant.NOVEL_OBJ_BASE_SCENE
    if obj_base and not scene_base:
        return Quadrant.BASE_OBJ_NOVEL_SCENE
    return Quadrant.NOVEL_OBJ_NOVEL_SCENE


def derive_base_scenes(split: GcdSplit, min_labeled_count: int = 1) -> frozenset[int]:
    """Scenes seen at least `min_labeled_count` times in the labeled set.

    Scenes absent from (or too rare in) the labeled set count as novel. The
    threshold is a parameter because no canonical cutoff exists for "rare".
    """
    counts = Counter(
        s.scene_label for s in split.labeled if s.scene_label is not None
    )
    if not counts:
        raise ValueError("no scene labels present on labeled samples")
    return frozenset(scene for scene, n in counts.items() if n >= min_labeled_count)


# ---------------------------------------------------------------------------
# Synthetic benchmark generator
# ---------------------------------------------------------------------------

@dataclass
class SyntheticConfig:
    """Glyph-on-texture benchmark with a tunable object-scene correlation.

    `correlation` is the probability that a sample's scene is its object
    class's home scene (class k lives in scene k mod n_scene_classes);
    otherwise the scene is uniform over the remaining scene classes.
    """

    n_object_classes: int = 8
    n_scene_classes: int = 4
    image_size: tuple[int, int] = (64, 64)
    samples_per_class: int = 32
    correlation: float = 0.9
    seed: int = 0
    base_class_fraction: float = 0.5
    labeled_fraction: float = 0.5
    glyph_size: int = 16
    noise_std: float = 0.02

    def __post_init__(self):
        if self.n_object_classes < 2:
            raise ValueError("need at least 2 object classes")
        if self.n_scene_classes < 2:
            raise ValueError("need at least 2 scene classes")
        if self.samples_per_class < 1:
            raise ValueError("samples_per_class must be positive")
        if not 0.0 <= self.correlation <= 1.0:
            raise ValueError(f"correlation must be in [0, 1], got {self.correlation}")
        h, w = self.image_size
        if h < 8 or w < 8:
            raise ValueError(f"image_size too small: {self.image_size}")
        if self.glyph_size + 4 > min(h, w):
            raise ValueError(
                f"glyph of size {self.glyph_size} does not fit in image {self.image_size}"
            )
        if not 0.0 < self.base_class_fraction <= 1.0:
            raise ValueError("base_class_fraction must be in (0, 1]")
        if not 0.0 < self.labeled_fraction <= 1.0:
            raise ValueError("labeled_fraction must be in (0, 1]")


def home_scene(object_class: int, n_scene_classes: int) -> int:
    return object_class % n_scene_classes


# Shape families; classes 2k and 2k+1 share a family and differ only in the
# fill variant, so separating them leans on scene context, like fine-grained
# categories do.
_SHAPES = ("disk", "square", "triangle", "plus", "diamond", "hbars", "vbars", "cross")

# Scene textures share one base color so the mean-pixel fill leaks almost no
# scene identity into the object image.
_SCENE_BASE = np.array([0.55, 0.50, 0.45])
_SCENE_AMPLITUDE = 0.18
_SCENE_CYCLES = 6.0


def _family_color(family: int) -> np.ndarray:
    hue = (family * 0.618034) % 1.0  # golden-ratio spacing keeps hues distinct
    k = hue * 6.0
    r = np.clip(abs(k - 3.0) - 1.0, 0, 1)
    g = np.clip(2.0 - abs(k - 2.0), 0, 1)
    b = np.clip(2.0 - abs(k - 4.0), 0, 1)
    rgb = np.array([r, g, b])
    return 0.15 + 0.75 * rgb


def _shape_mask(shape: str, size: int, scale: float = 1.0) -> np.ndarray:
    c = (size - 1) / 2.0
    r = scale * size / 2.0
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    dy, dx = yy - c, xx - c
    if shape == "disk":
        return dy**2 + dx**2 <= r**2
    if shape == "square":
        return np.maximum(np.abs(dy), np.abs(dx)) <= 0.92 * r
    if shape == "triangle":
        return (dy >= -0.85 * r) & (np.abs(dx) <= 0.95 * (0.85 * r - dy) / 1.7)
    if shape == "plus":
        bar = 0.36 * r
        box = np.maximum(np.abs(dy), np.abs(dx)) <= r
        return box & ((np.abs(dy) <= bar) | (np.abs(dx) <= bar))
    if shape == "diamond":
        return np.abs(dy) + np.abs(dx) <= 1.2 * r
    if shape == "hbars":
        box = np.abs(dx) <= 0.95 * r
        return box & ((np.abs(dy - 0.5 * r) <= 0.28 * r) | (np.abs(dy + 0.5 * r) <= 0.28 * r))
    if shape == "vbars":
        box = np.abs(dy) <= 0.95 * r
        return box & ((np.abs(dx - 0.5 * r) <= 0.28 * r) | (np.abs(dx + 0.5 * r) <= 0.28 * r))
    if shape == "cross":
        bar = 0.33 * r
        box = np.maximum(np.abs(dy), np.abs(dx)) <= r
        return box & (np.abs(np.abs(dy) - np.abs(dx)) <= bar)
    raise ValueError(f"unknown shape {shape!r}")


def glyph_mask(object_class: int, size: int) -> np.ndarray:
    """Boolean stencil of a class's glyph on a size x size grid.

    Even classes are solid; their odd siblings carry a concentric hole,
    the fine-grained detail that distinguishes the pair.
    """
    family = object_class // 2
    shape = _SHAPES[family % len(_SHAPES)]
    outer = _shape_mask(shape, size)
    if object_class % 2 == 0:
        return outer
    hole = _shape_mask(shape, size, scale=0.52)
    return outer & ~hole


def _scene_texture(scene_class: int, n_scenes: int, hw: tuple[int, int],
                   phase: float) -> np.ndarray:
    h, w = hw
    angle = np.pi * scene_class / n_scenes
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    coord = xx * np.cos(angle) + yy * np.sin(angle)
    wave = np.sin(2.0 * np.pi * _SCENE_CYCLES * coord / max(h, w) + phase)
    return _SCENE_BASE[None, None, :] + _SCENE_AMPLITUDE * wave[:, :, None]


def gen_synthetic(config: SyntheticConfig) -> tuple[list[Sample], GcdSplit]:
    """Generate the synthetic benchmark and its split. Deterministic per seed."""
    rng = np.random.default_rng(config.seed)
    h, w = config.image_size
    g = config.glyph_size
    samples: list[Sample] = []
    for k in range(config.n_object_classes):
        color = _family_color(k // 2)
        stencil = glyph_mask(k, g)
        home = home_scene(k, config.n_scene_classes)
        others = [s for s in range(config.n_scene_classes) if s != home]
        for i in range(config.samples_per_class):
            if rng.random() < config.correlation:
                scene = home
            else:
                scene = others[rng.integers(len(others))]
            phase = rng.uniform(0.0, 2.0 * np.pi)
            img = _scene_texture(scene, config.n_scene_classes, (h, w), phase)
            top = int(rng.integers(2, h - g - 1))
            left = int(rng.integers(2, w - g - 1))
            full_mask = np.zeros((h, w), dtype=np.uint8)
            full_mask[top:top + g, left:left + g] = stencil
            region = img[top:top + g, left:left + g]
            region[stencil] = color
            if config.noise_std > 0:
                img = img + rng.normal(0.0, config.noise_std, size=img.shape)
            img = np.clip(img, 0.0, 1.0).astype(np.float32)
            samples.append(Sample(
                id=f"img_{k:03d}_{i:04d}",
                image=img,
                object_label=k,
                scene_label=scene,
                oracle_mask=SaliencyMask(data=full_mask, source=MaskSource.ORACLE),
            ))
    split = make_gcd_split(
        samples, config.base_class_fraction, config.labeled_fraction, seed=config.seed
    )
    split.base_scenes = derive_base_scenes(split, min_labeled_count=1)
    by_id = {s.id: s for s in split.all_samples()}
    samples = [by_id[s.id] for s in samples]
    return samples, split


# ---------------------------------------------------------------------------
# File formats: scene annotations, dataset manifest, image round trip
# ---------------------------------------------------------------------------

def load_scene_annotations(path: str | Path) -> dict[str, int]:
    """Parse `<sample_id>,<scene_name>` lines into sample-id -> scene-id.

    Scene names are interned to integer ids in first-appearance order.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"scene annotation file not found: {path}")
    mapping: dict[str, int] = {}
    names: dict[str, int] = {}
    with path.open(encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 2 or not parts[0].strip() or not parts[1].strip():
                raise ValueError(f"{path}:{lineno}: malformed record {line!r}")
            sample_id, scene_name = parts[0].strip(), parts[1].strip()
            if sample_id in mapping:
                raise ValueError(f"{path}:{lineno}: duplicate sample id {sample_id!r}")
            if scene_name not in names:
                names[scene_name] = len(names)
            mapping[sample_id] = names[scene_name]
    return mapping


def attach_scene_annotations(samples: list[Sample], annotations: dict[str, int]) -> None:
    """Attach scene ids in place; annotation ids must refer to known samples."""
    known = {s.id for s in samples}
    unknown = sorted(set(annotations) - known)
    if unknown:
        raise ValueError(f"annotations refer to unknown sample ids: {unknown[:5]}")
    for s in samples:
        if s.id in annotations:
            s.scene_label = annotations[s.id]


MANIFEST_FIELDS = ("id", "image", "object_label", "scene", "labeled", "mask")


def save_dataset(samples: list[Sample], split: GcdSplit, out_dir: str | Path) -> Path:
    """Write images, oracle masks, manifest, and scene annotations to disk."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    labeled_ids = {s.id for s in split.labeled}
    manifest_path = out / "manifest.csv"
    ann_lines = []
    with manifest_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_FIELDS)
        for s in samples:
            img_rel = f"images/{s.id}.png"
            arr = np.clip(np.rint(s.image * 255.0), 0, 255).astype(np.uint8)
            Image.fromarray(arr).save(out / img_rel)
            mask_rel = ""
            if s.oracle_mask is not None:
                mask_rel = f"masks/{s.id}.png"
                Image.fromarray(s.oracle_mask.data * 255).save(out / mask_rel)
            scene_name = "" if s.scene_label is None else f"scene{s.scene_label}"
            writer.writerow([s.id, img_rel, s.object_label, scene_name,
                             int(s.id in labeled_ids), mask_rel])
            if scene_name:
                ann_lines.append(f"{s.id},{scene_name}\n")
    (out / "scene_annotations.txt").write_text("".join(ann_lines), encoding="utf-8")
    return manifest_path


def load_dataset(manifest_path: str | Path,
                 min_labeled_scene_count: int = 1) -> tuple[list[Sample], GcdSplit]:
    """Rebuild samples and split from a manifest written by :func:`save_dataset`.

    8-bit images are normalized to [0, 1]. Base classes are recovered from
    the labeled flags; base scenes are re-derived from labeled annotations.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise FileNotFoundError(f"manifest not found: {manifest_path}")
    root = manifest_path.parent
    samples: list[Sample] = []
    labeled_flags: dict[str, bool] = {}
    scene_names: dict[str, int] = {}
    with manifest_path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(MANIFEST_FIELDS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{manifest_path}: missing manifest columns {sorted(missing)}")
        for row in reader:
            img_path = root / row["image"]
            with Image.open(img_path) as img:
                image = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
            scene = None
            if row["scene"]:
                if row["scene"] not in scene_names:
                    scene_names[row["scene"]] = len(scene_names)
                scene = scene_names[row["scene"]]
            mask = None
            if row["mask"]:
                loaded = load_mask(root / row["mask"], image.shape[:2])
                mask = SaliencyMask(data=loaded.data, source=MaskSource.ORACLE)
            sample = Sample(
                id=row["id"],
                image=image,
                object_label=int(row["object_label"]),
                scene_label=scene,
                is_labeled=bool(int(row["labeled"])),
                oracle_mask=mask,
                source_path=str(img_path),
            )
            samples.append(sample)
            labeled_flags[sample.id] = sample.is_labeled
    if not samples:
        raise ValueError(f"{manifest_path}: empty manifest")
    labeled = [s for s in samples if labeled_flags[s.id]]
    unlabeled = [s for s in samples if not labeled_flags[s.id]]
    base = frozenset(s.object_label for s in labeled)
    split = GcdSplit(
        labeled=labeled,
        unlabeled=unlabeled,
        base_classes=base,
        all_classes=frozenset(s.object_label for s in samples),
    )
    if any(s.scene_label is not None for s in labeled):
        split.base_scenes = derive_base_scenes(split, min_labeled_scene_count)
    return samples, split
