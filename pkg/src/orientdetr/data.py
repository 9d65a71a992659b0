"""Synthetic rotated-rectangle scenes and their on-disk format."""

from __future__ import annotations

import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import atomic_write
from .geom import OrientedBox, box_vertices_array, canonicalize, rotated_iou

IMAGE_MAGIC = b"AO2I"
MAX_OBJECTS = 5
MIN_SHORT, MAX_SHORT = 0.08, 0.3
MAX_ASPECT = 4.0
MAX_PAIR_IOU = 0.3
PLACEMENT_RETRIES = 100

_BASE_COLORS = np.array([[0.9, 0.15, 0.15], [0.15, 0.85, 0.2], [0.2, 0.3, 0.95]])


class DataFormatError(ValueError):
    pass


@dataclass
class Scene:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 5)))  # canonical (K, 5)
    classes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 5)
        self.classes = np.asarray(self.classes, dtype=np.int64).reshape(-1)
        if len(self.boxes) != len(self.classes):
            raise DataFormatError(f"{len(self.boxes)} boxes but {len(self.classes)} class ids")

    @property
    def annotations(self):
        return [(OrientedBox.from_array(b), int(c)) for b, c in zip(self.boxes, self.classes)]

    @property
    def target(self):
        return self.classes, self.boxes


def class_colors(num_classes):
    """Fixed fill colour per class; extra classes get deterministic colours."""
    if num_classes <= len(_BASE_COLORS):
        return _BASE_COLORS[:num_classes]
    rng = np.random.default_rng(12345)
    extra = rng.uniform(0.1, 0.95, size=(num_classes - len(_BASE_COLORS), 3))
    return np.concatenate([_BASE_COLORS, extra])


def inside_image(box, tol=1e-12):
    v = box_vertices_array(np.asarray(box, dtype=np.float64))
    return bool(np.all(v >= -tol) and np.all(v <= 1 + tol))


def _draw_box(rng):
    short = rng.uniform(MIN_SHORT, MAX_SHORT)
    aspect = rng.uniform(1.0, MAX_ASPECT)
    cx, cy = rng.uniform(0.0, 1.0, size=2)
    theta = rng.uniform(0.0, np.pi)
    return canonicalize(OrientedBox(cx, cy, short, short * aspect, theta)).to_array()


def _place(rng, count):
    """Draw ``count`` in-bounds boxes with limited overlap, or None."""
    boxes = []
    for _ in range(count):
        for _ in range(PLACEMENT_RETRIES):
            box = _draw_box(rng)
            if not inside_image(box):
                continue
            if all(rotated_iou(box, other) <= MAX_PAIR_IOU for other in boxes):
                boxes.append(box)
                break
        else:
            return None
    return np.array(boxes).reshape(-1, 5)


def rasterize(boxes, classes, size, colors, rng):
    """Noise background with each box filled in its class colour."""
    image = rng.uniform(0.0, 0.6, size=(size, size, 3))
    centers = (np.arange(size) + 0.5) / size
    xs, ys = np.meshgrid(centers, centers)
    for (cx, cy, w, h, t), c in zip(boxes, classes):
        dx, dy = xs - cx, ys - cy
        along_w = dx * np.cos(t) + dy * np.sin(t)
        along_h = -dx * np.sin(t) + dy * np.cos(t)
        mask = (np.abs(along_w) <= w / 2) & (np.abs(along_h) <= h / 2)
        fill = colors[c] + rng.normal(0.0, 0.05, size=(int(mask.sum()), 3))
        image[mask] = fill
    return np.clip(image, 0.0, 1.0)


def make_scene(rng, size=128, num_classes=3):
    colors = class_colors(num_classes)
    while True:
        count = int(rng.integers(1, MAX_OBJECTS + 1))
        boxes = _place(rng, count)
        if boxes is not None:
            break
    classes = rng.integers(0, num_classes, size=count)
    return Scene(rasterize(boxes, classes, size, colors, rng), boxes, classes)


def generate_scenes(count, seed=0, size=128, num_classes=3):
    """Deterministic scenes; scene i depends only on (seed, i)."""
    if size % 64:
        raise ValueError(f"image size {size} must be divisible by 64")
    seeds = np.random.SeedSequence(seed).spawn(count)
    return [make_scene(np.random.default_rng(s), size, num_classes) for s in seeds]


# -- file formats --------------------------------------------------------------
def encode_image(image) -> bytes:
    image = np.asarray(image, dtype="<f8")
    if image.ndim != 3:
        raise DataFormatError(f"image must be (H, W, C), got shape {image.shape}")
    h, w, c = image.shape
    return IMAGE_MAGIC + struct.pack("<III", h, w, c) + np.ascontiguousarray(image).tobytes()


def decode_image(blob: bytes) -> np.ndarray:
    if len(blob) < 16 or blob[:4] != IMAGE_MAGIC:
        raise DataFormatError("not an AO2I image (bad magic)")
    h, w, c = struct.unpack("<III", blob[4:16])
    expected = 16 + 8 * h * w * c
    if len(blob) != expected:
        raise DataFormatError(f"image payload is {len(blob)} bytes, expected {expected}")
    return np.frombuffer(blob, dtype="<f8", offset=16).reshape(h, w, c).astype(np.float64)


def write_image(path, image):
    atomic_write(path, encode_image(image))


def read_image(path):
    return decode_image(Path(path).read_bytes())


def format_labels(classes, boxes) -> str:
    lines = []
    for c, b in zip(classes, np.asarray(boxes).reshape(-1, 5)):
        lines.append(f"{int(c)} " + " ".join(repr(float(v)) for v in b))
    return "".join(line + "\n" for line in lines)


def parse_labels(text):
    classes, boxes = [], []
    for lineno, line in enumerate(text.splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 6:
            raise DataFormatError(f"label line {lineno}: expected 'class cx cy w h theta', got {line!r}")
        try:
            classes.append(int(parts[0]))
            boxes.append([float(v) for v in parts[1:]])
        except ValueError as exc:
            raise DataFormatError(f"label line {lineno}: {exc}") from None
    return np.array(classes, dtype=np.int64), np.array(boxes, dtype=np.float64).reshape(-1, 5)


def read_labels(path):
    return parse_labels(Path(path).read_text(encoding="utf-8"))


def write_labels(path, classes, boxes):
    atomic_write(path, format_labels(classes, boxes).encode("utf-8"))


# -- datasets ------------------------------------------------------------------
def _scene_name(i):
    return f"scene_{i:05d}"


def _write_one(args):
    out, i, seed, size, num_classes = args
    scene = make_scene(np.random.default_rng(seed), size, num_classes)
    write_image(out / f"{_scene_name(i)}.img", scene.image)
    write_labels(out / f"{_scene_name(i)}.txt", scene.classes, scene.boxes)


def gen_dataset(out, count, seed=0, size=128, num_classes=3, workers=1):
    """Write ``count`` scenes as ``scene_NNNNN.img`` / ``.txt`` pairs under ``out``."""
    if size % 64:
        raise ValueError(f"image size {size} must be divisible by 64")
    if count < 1:
        raise ValueError("count must be positive")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(seed).spawn(count)
    jobs = [(out, i, s, size, num_classes) for i, s in enumerate(seeds)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            list(pool.map(_write_one, jobs))
    else:
        for job in jobs:
            _write_one(job)
    return out


def load_dataset(path):
    """All scenes in ``path``, sorted by file name."""
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"dataset directory {path} does not exist")
    scenes = []
    for img in sorted(path.glob("*.img")):
        label = img.with_suffix(".txt")
        if not label.exists():
            raise DataFormatError(f"{img.name} has no label file {label.name}")
        classes, boxes = read_labels(label)
        scenes.append(Scene(read_image(img), boxes, classes))
    return scenes

