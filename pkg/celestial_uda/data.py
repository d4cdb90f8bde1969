"""Procedural terrain scenes with a controllable domain shift, plus dataset IO.

Geometry, background texture and sensor noise draw from three independent
streams of one seed, so a source and a target scene built from the same
seed share every object and differ only in the appearance shift.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np
import torch
import torchvision.transforms.functional as TF
import yaml
from PIL import Image

from .const import (
    DEFAULT_INPUT_SIZE,
    DOMAIN_SOURCE,
    DOMAIN_TARGET,
    MANIFEST_NAME,
    RECIPE_MINI_ASTEROID,
    RECIPE_MINI_MARS,
    RECIPE_MINI_MOON,
    SPLIT_SOURCE_TRAIN,
    SPLIT_TARGET_TEST,
    SPLIT_TARGET_TRAIN,
)
from .core import Box, Detection, DetectionSet, iou
from .exceptions import DatasetFormatError, DatasetIOError

_LOGGER = logging.getLogger(__name__)

CLASS_CRATER = "crater"
CLASS_DUNE = "dune"
CLASS_MOUNTAIN = "mountain"
CLASS_BOULDER = "boulder"
OBJECT_CLASSES = (CLASS_CRATER, CLASS_DUNE, CLASS_MOUNTAIN, CLASS_BOULDER)

PLACEMENT_ATTEMPTS = 100
PLACEMENT_MAX_IOU = 0.3

RIM_BRIGHTNESS = 0.45
SHADOW_DEPTH = 0.25
BOULDER_BRIGHTNESS = 0.5
BOULDER_SHADOW_OFFSET = 0.6
DUNE_BRIGHTNESS = 0.25
DUNE_RIPPLE = 0.12
PEAK_BRIGHTNESS = 0.45

BACKGROUND_LEVEL = 0.3
BACKGROUND_CONTRAST = 0.2


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    domain: str = DOMAIN_SOURCE
    classes: tuple[str, ...] = (CLASS_CRATER,)
    count_range: tuple[int, int] = (1, 4)
    invert: bool = False
    blur_radius: float = 0.0
    noise_std: float = 0.02
    texture_frequency: float = 6.0
    # Block size of the resolution loss; 1 keeps full resolution
    downsample: int = 1

    def __post_init__(self) -> None:
        if self.domain not in (DOMAIN_SOURCE, DOMAIN_TARGET):
            raise ValueError(f"Unknown domain {self.domain!r}")
        unknown = set(self.classes) - set(OBJECT_CLASSES)
        if not self.classes or unknown:
            raise ValueError(f"Invalid class set {self.classes!r}")
        lo, hi = self.count_range
        if lo < 0 or hi < lo:
            raise ValueError(f"Invalid object count range {self.count_range}")
        if self.downsample < 1:
            raise ValueError(f"downsample must be >= 1, got {self.downsample}")
        if self.blur_radius < 0 or self.noise_std < 0 or self.texture_frequency <= 0:
            raise ValueError("shift parameters must be non-negative")

    def class_id(self, name: str) -> int:
        return self.classes.index(name)


@dataclass
class LabeledImage:
    image: np.ndarray  # (H, W) float32 in [0, 1]
    detections: DetectionSet = field(default_factory=list)
    labeled: bool = True
    # Objects that found no free spot within the placement attempts
    dropped_objects: int = 0


@dataclass(frozen=True)
class PlacedObject:
    """One object in pixel coordinates; `size` is radius or semi-axes."""

    kind: str
    cx: float
    cy: float
    size: tuple[float, ...]

    def pixel_extent(self) -> tuple[float, float, float, float]:
        """Tight (x0, y0, x1, y1) around everything the object draws."""
        if self.kind in (CLASS_CRATER, CLASS_MOUNTAIN):
            r = self.size[0]
            return self.cx - r, self.cy - r, self.cx + r, self.cy + r
        a, b = self.size
        if self.kind == CLASS_BOULDER:
            dx = BOULDER_SHADOW_OFFSET * a
            dy = BOULDER_SHADOW_OFFSET * b
            return self.cx - a, self.cy - b, self.cx + a + dx, self.cy + b + dy
        return self.cx - a, self.cy - b, self.cx + a, self.cy + b

    def footprint_box(self, image_size: int) -> Box:
        x0, y0, x1, y1 = self.pixel_extent()
        return Box(
            (x0 + x1) / 2 / image_size,
            (y0 + y1) / 2 / image_size,
            (x1 - x0) / image_size,
            (y1 - y0) / image_size,
        )


def _pixel_grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    return yy + 0.5, xx + 0.5


def draw_object(canvas: np.ndarray, obj: PlacedObject) -> None:
    """Add one object's intensity pattern to the canvas in place."""
    yy, xx = _pixel_grid(canvas.shape[0])
    if obj.kind == CLASS_CRATER:
        r = obj.size[0]
        thickness = max(1.5, 0.25 * r)
        d = np.hypot(xx - obj.cx, yy - obj.cy)
        rim = (d <= r) & (d >= r - thickness)
        inner = d < r - thickness
        canvas[rim] += RIM_BRIGHTNESS
        # Light comes from the right: the left half of the bowl is shadowed
        shade = np.clip((obj.cx - xx) / r, 0.0, 1.0)
        canvas[inner] -= SHADOW_DEPTH * (0.4 + shade[inner])
    elif obj.kind == CLASS_BOULDER:
        a, b = obj.size
        body = ((xx - obj.cx) / a) ** 2 + ((yy - obj.cy) / b) ** 2 <= 1.0
        sx = obj.cx + BOULDER_SHADOW_OFFSET * a
        sy = obj.cy + BOULDER_SHADOW_OFFSET * b
        shadow = (((xx - sx) / a) ** 2 + ((yy - sy) / b) ** 2 <= 1.0) & ~body
        canvas[body] += BOULDER_BRIGHTNESS
        canvas[shadow] -= SHADOW_DEPTH
    elif obj.kind == CLASS_DUNE:
        a, b = obj.size
        inside = ((xx - obj.cx) / a) ** 2 + ((yy - obj.cy) / b) ** 2 <= 1.0
        period = max(a / 2.0, 2.0)
        ripple = np.sin(2.0 * math.pi * (xx - obj.cx) / period)
        canvas[inside] += DUNE_BRIGHTNESS + DUNE_RIPPLE * ripple[inside]
    elif obj.kind == CLASS_MOUNTAIN:
        r = obj.size[0]
        d = np.hypot(xx - obj.cx, yy - obj.cy)
        peak = d < r
        canvas[peak] += PEAK_BRIGHTNESS * (1.0 - d[peak] / r) ** 1.5
    else:
        raise ValueError(f"Unknown object kind {obj.kind!r}")


def _sample_size(kind: str, rng: np.random.Generator, image_size: int) -> tuple[float, ...]:
    scale = image_size / DEFAULT_INPUT_SIZE
    if kind == CLASS_CRATER:
        return (float(rng.uniform(6.0, 24.0)) * scale,)
    if kind == CLASS_MOUNTAIN:
        return (float(rng.uniform(10.0, 28.0)) * scale,)
    if kind == CLASS_BOULDER:
        a = float(rng.uniform(4.0, 12.0))
        return (a * scale, float(rng.uniform(3.0, a)) * scale)
    a = float(rng.uniform(12.0, 30.0))
    return (a * scale, float(rng.uniform(5.0, 12.0)) * scale)


def _place_objects(
    spec: SceneSpec, rng: np.random.Generator, image_size: int
) -> tuple[list[PlacedObject], int]:
    lo, hi = spec.count_range
    wanted = int(rng.integers(lo, hi + 1))
    placed: list[PlacedObject] = []
    boxes: list[Box] = []
    dropped = 0
    for _ in range(wanted):
        kind = spec.classes[int(rng.integers(len(spec.classes)))]
        size = _sample_size(kind, rng, image_size)
        candidate = PlacedObject(kind, 0.0, 0.0, size)
        x0, y0, x1, y1 = candidate.pixel_extent()
        for _attempt in range(PLACEMENT_ATTEMPTS):
            cx = float(rng.uniform(-x0, image_size - x1))
            cy = float(rng.uniform(-y0, image_size - y1))
            obj = PlacedObject(kind, cx, cy, size)
            box = obj.footprint_box(image_size)
            if all(iou(box, other) <= PLACEMENT_MAX_IOU for other in boxes):
                placed.append(obj)
                boxes.append(box)
                break
        else:
            dropped += 1
    if dropped:
        _LOGGER.debug("Scene seed %d: %d objects could not be placed", spec.seed, dropped)
    return placed, dropped


def value_noise(rng: np.random.Generator, size: int, frequency: float) -> np.ndarray:
    """Two octaves of smoothly interpolated lattice noise in [0, 1]."""
    out = np.zeros((size, size))
    total = 0.0
    for octave, amplitude in ((1, 1.0), (2, 0.5)):
        cells = max(1, int(round(frequency * octave)))
        lattice = rng.random((cells + 1, cells + 1))
        coords = (np.arange(size) + 0.5) / size * cells
        i0 = np.minimum(coords.astype(int), cells - 1)
        t = coords - i0
        t = t * t * (3.0 - 2.0 * t)
        rows = lattice[i0] * (1 - t)[:, None] + lattice[i0 + 1] * t[:, None]
        out += amplitude * (rows[:, i0] * (1 - t) + rows[:, i0 + 1] * t)
        total += amplitude
    return out / total


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Gaussian blur with a 3-sigma kernel and reflected borders."""
    if sigma <= 0:
        return image
    radius = max(1, int(math.ceil(3.0 * sigma)))
    blurred = TF.gaussian_blur(
        torch.from_numpy(np.ascontiguousarray(image))[None],
        kernel_size=[2 * radius + 1] * 2,
        sigma=[sigma] * 2,
    )
    return blurred[0].numpy()


def block_downsample(image: np.ndarray, factor: int) -> np.ndarray:
    """Average factor x factor blocks, then repeat them back to full size."""
    if factor <= 1:
        return image
    size_y, size_x = image.shape
    if size_y % factor or size_x % factor:
        raise ValueError(f"Image {image.shape} not divisible by {factor}")
    img = Image.fromarray(image.astype(np.float32))
    img = img.resize((size_x // factor, size_y // factor), Image.Resampling.BOX)
    img = img.resize((size_x, size_y), Image.Resampling.NEAREST)
    return np.asarray(img, dtype=np.float64)


def to_bytes(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def from_bytes(pixels: np.ndarray) -> np.ndarray:
    return pixels.astype(np.float32) / np.float32(255.0)


def render(spec: SceneSpec, size: int = DEFAULT_INPUT_SIZE) -> LabeledImage:
    """Render one scene; the result is a pure function of (spec, size)."""
    geometry_seq, texture_seq, noise_seq = np.random.SeedSequence(spec.seed).spawn(3)
    geometry_rng = np.random.default_rng(geometry_seq)
    texture_rng = np.random.default_rng(texture_seq)
    noise_rng = np.random.default_rng(noise_seq)

    canvas = BACKGROUND_LEVEL + BACKGROUND_CONTRAST * (
        value_noise(texture_rng, size, spec.texture_frequency) - 0.5
    )
    objects, dropped = _place_objects(spec, geometry_rng, size)
    detections: DetectionSet = []
    for obj in objects:
        draw_object(canvas, obj)
        detections.append(Detection(spec.class_id(obj.kind), obj.footprint_box(size)))

    canvas = block_downsample(canvas, spec.downsample)
    canvas = gaussian_blur(canvas, spec.blur_radius)
    if spec.invert:
        canvas = 1.0 - canvas
    if spec.noise_std > 0:
        canvas = canvas + noise_rng.normal(0.0, spec.noise_std, canvas.shape)
    image = from_bytes(to_bytes(canvas))
    return LabeledImage(image=image, detections=detections, dropped_objects=dropped)


def format_label_line(det: Detection) -> str:
    b = det.box
    return f"{det.class_id} {b.cx:.6f} {b.cy:.6f} {b.w:.6f} {b.h:.6f}\n"


def parse_label_line(line: str, path: Path | str, line_no: int) -> Detection:
    fields = line.split()
    if len(fields) != 5:
        raise DatasetFormatError(
            f"{path}:{line_no}: expected 5 fields, got {len(fields)}"
        )
    try:
        class_id = int(fields[0])
        cx, cy, w, h = (float(v) for v in fields[1:])
        return Detection(class_id, Box(cx, cy, w, h))
    except ValueError as err:
        raise DatasetFormatError(f"{path}:{line_no}: {err}") from err


def write_dataset(
    images: Sequence[LabeledImage],
    dir_path: str | Path,
    split: str,
    class_names: Sequence[str],
    labeled: bool = True,
    metadata: Mapping[str, Any] | None = None,
) -> dict[str, Any]:
    """Write `<dir>/<split>/` with PNG images, label files and a manifest."""
    root = Path(dir_path) / split
    items = []
    try:
        (root / "images").mkdir(parents=True, exist_ok=True)
        if labeled:
            (root / "labels").mkdir(parents=True, exist_ok=True)
        for index, sample in enumerate(images):
            stem = f"{index:06d}"
            image_rel = f"images/{stem}.png"
            Image.fromarray(to_bytes(sample.image)).save(root / image_rel)
            label_rel = None
            if labeled:
                label_rel = f"labels/{stem}.txt"
                with open(root / label_rel, "w", encoding="utf-8") as fh:
                    fh.writelines(format_label_line(det) for det in sample.detections)
            items.append(
                {
                    "image": image_rel,
                    "label": label_rel,
                    "dropped_objects": sample.dropped_objects,
                }
            )
        manifest = {
            "split": split,
            "class_names": list(class_names),
            "labeled": labeled,
            "items": items,
            **dict(metadata or {}),
        }
        with open(root / MANIFEST_NAME, "w", encoding="utf-8") as fh:
            yaml.safe_dump(manifest, fh, sort_keys=False)
    except OSError as err:
        raise DatasetIOError(f"Could not write dataset split {root}: {err}") from err
    _LOGGER.info("Wrote %d images to %s", len(images), root)
    return manifest


def read_manifest(dir_path: str | Path, split: str) -> dict[str, Any]:
    path = Path(dir_path) / split / MANIFEST_NAME
    try:
        with open(path, encoding="utf-8") as fh:
            manifest = yaml.safe_load(fh)
    except OSError as err:
        raise DatasetIOError(f"Could not read manifest {path}: {err}") from err
    except yaml.YAMLError as err:
        raise DatasetFormatError(f"{path}: {err}") from err
    if not isinstance(manifest, dict) or not {"items", "class_names"} <= manifest.keys():
        raise DatasetFormatError(f"{path}: missing items or class_names")
    return manifest


def _read_labels(path: Path) -> DetectionSet:
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as err:
        raise DatasetIOError(f"Could not read label file {path}: {err}") from err
    return [
        parse_label_line(line, path, line_no)
        for line_no, line in enumerate(lines, start=1)
        if line.strip()
    ]


def _read_image(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            pixels = np.asarray(img.convert("L"))
    except OSError as err:
        raise DatasetIOError(f"Could not read image {path}: {err}") from err
    return from_bytes(pixels)


@dataclass
class DatasetSplit:
    name: str
    class_names: list[str]
    items: list[LabeledImage]
    labeled: bool = True

    def __len__(self) -> int:
        return len(self.items)


def load_split(dir_path: str | Path, split: str) -> DatasetSplit:
    manifest = read_manifest(dir_path, split)
    root = Path(dir_path) / split
    items = []
    for entry in manifest["items"]:
        image = _read_image(root / entry["image"])
        dropped = int(entry.get("dropped_objects", 0))
        if entry.get("label"):
            detections = _read_labels(root / entry["label"])
            items.append(LabeledImage(image, detections, dropped_objects=dropped))
        else:
            items.append(LabeledImage(image, [], labeled=False, dropped_objects=dropped))
    labeled = bool(manifest.get("labeled", True)) and all(i.labeled for i in items)
    return DatasetSplit(split, list(manifest["class_names"]), items, labeled)


def read_dataset(dir_path: str | Path, split: str) -> list[LabeledImage]:
    """Inverse of `write_dataset`; unlabeled splits come back flagged."""
    return load_split(dir_path, split).items


@dataclass(frozen=True)
class Recipe:
    name: str
    classes: tuple[str, ...]
    count_range: tuple[int, int]
    source_shift: Mapping[str, Any]
    target_shift: Mapping[str, Any]
    split_sizes: Mapping[str, int]


_DESK_SPLITS = {SPLIT_SOURCE_TRAIN: 400, SPLIT_TARGET_TRAIN: 400, SPLIT_TARGET_TEST: 100}
_INVERT_BLUR = {"invert": True, "blur_radius": 1.0}

RECIPES: dict[str, Recipe] = {
    RECIPE_MINI_MARS: Recipe(
        RECIPE_MINI_MARS,
        (CLASS_CRATER, CLASS_DUNE, CLASS_MOUNTAIN),
        (2, 6),
        {},
        _INVERT_BLUR,
        _DESK_SPLITS,
    ),
    RECIPE_MINI_ASTEROID: Recipe(
        RECIPE_MINI_ASTEROID, (CLASS_BOULDER,), (1, 6), {}, _INVERT_BLUR, _DESK_SPLITS
    ),
    # Low-resolution source, full-resolution target
    RECIPE_MINI_MOON: Recipe(
        RECIPE_MINI_MOON, (CLASS_CRATER,), (2, 6), {"downsample": 4}, {}, _DESK_SPLITS
    ),
}

# Source and target training scenes share seeds; the test split has its own.
_SPLIT_STREAMS = {SPLIT_SOURCE_TRAIN: 0, SPLIT_TARGET_TRAIN: 0, SPLIT_TARGET_TEST: 1}


def scene_seed(seed: int, split: str, index: int) -> int:
    seq = np.random.SeedSequence([seed, _SPLIT_STREAMS[split], index])
    return int(seq.generate_state(1, dtype=np.uint64)[0])


def scene_spec(recipe: Recipe, seed: int, split: str, index: int) -> SceneSpec:
    domain = DOMAIN_SOURCE if split == SPLIT_SOURCE_TRAIN else DOMAIN_TARGET
    shift = recipe.source_shift if domain == DOMAIN_SOURCE else recipe.target_shift
    base = SceneSpec(
        seed=scene_seed(seed, split, index),
        domain=domain,
        classes=recipe.classes,
        count_range=recipe.count_range,
    )
    return replace(base, **dict(shift))


def generate_recipe(
    name: str,
    seed: int,
    out_dir: str | Path,
    size: int = DEFAULT_INPUT_SIZE,
    split_sizes: Mapping[str, int] | None = None,
    label_target_train: bool = False,
) -> dict[str, dict[str, Any]]:
    """Render and write every split of a named recipe."""
    if name not in RECIPES:
        raise ValueError(f"Unknown recipe {name!r}; choose from {sorted(RECIPES)}")
    recipe = RECIPES[name]
    sizes = {**recipe.split_sizes, **dict(split_sizes or {})}
    manifests = {}
    for split, count in sizes.items():
        images = [render(scene_spec(recipe, seed, split, i), size) for i in range(count)]
        labeled = split != SPLIT_TARGET_TRAIN or label_target_train
        manifests[split] = write_dataset(
            images,
            out_dir,
            split,
            recipe.classes,
            labeled=labeled,
            metadata={"recipe": name, "seed": seed, "image_size": size},
        )
    return manifests
