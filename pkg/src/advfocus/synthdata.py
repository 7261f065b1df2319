"""Deterministic synthetic detection scenes.

Images are flat noisy backgrounds with 0..4 filled shapes, one per grid
cell, sized and positioned so a fixed anchor box can match them at IoU 0.5.
A class id maps to a (shape, color) pair; with 4 shapes and a 5-color
palette that yields 20 distinct appearances, enough for up to 21 classes
including background. Everything derives from (seed, image index), so a
dataset is a pure function of its arguments.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import gradtape as gt
from .anchornet import DetectorConfig
from .errors import ConfigError, FormatError
from .gradtape import Tensor

SHAPE_KINDS = ("square", "disk", "triangle", "diamond")

PALETTE = (
    (0.85, 0.15, 0.15),
    (0.15, 0.75, 0.20),
    (0.20, 0.30, 0.85),
    (0.85, 0.80, 0.10),
    (0.80, 0.15, 0.80),
)

BACKGROUND_NOISE = 0.05
MAX_OBJECTS = 4
_COUNT_WEIGHTS = (0.10, 0.25, 0.30, 0.25, 0.10)  # P(number of objects)


def class_appearance(class_id: int) -> tuple[str, tuple[float, float, float]]:
    """Shape kind and base color for an object class (1-based)."""
    i = class_id - 1
    return SHAPE_KINDS[i % len(SHAPE_KINDS)], PALETTE[i % len(PALETTE)]


@dataclass(frozen=True)
class SceneObject:
    class_id: int
    cx: float
    cy: float
    size: float  # square bounding-box side, pixels
    color: tuple[float, float, float]

    @property
    def box(self) -> tuple[float, float, float, float]:
        h = self.size / 2.0
        return (self.cx - h, self.cy - h, self.cx + h, self.cy + h)


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    index: int
    image_size: int
    base_color: float
    objects: tuple[SceneObject, ...]


@dataclass(frozen=True)
class Annotation:
    """Ground-truth boxes for one image: (class_id, x_min, y_min, x_max, y_max)."""

    boxes: tuple[tuple[int, float, float, float, float], ...]


@dataclass(frozen=True)
class GridLabel:
    one_hot: Tensor  # (A, C), each row one-hot


@dataclass
class SyntheticDataset:
    config: DetectorConfig
    images: list[Tensor] = field(default_factory=list)
    annotations: list[Annotation] = field(default_factory=list)
    grid_labels: list[GridLabel] = field(default_factory=list)
    specs: list[SceneSpec] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.images)

    def samples(self) -> list[tuple[Tensor, Tensor]]:
        return [(img, lab.one_hot) for img, lab in zip(self.images, self.grid_labels)]

    def subset(self, indices: Sequence[int]) -> "SyntheticDataset":
        return SyntheticDataset(
            config=self.config,
            images=[self.images[i] for i in indices],
            annotations=[self.annotations[i] for i in indices],
            grid_labels=[self.grid_labels[i] for i in indices],
            specs=[self.specs[i] for i in indices],
        )


def annotation_to_grid(ann: Annotation, config: DetectorConfig) -> GridLabel:
    """One-hot grid labels: each object goes to the cell holding its box
    center (anchor 0 of that cell); when two centers share a cell the larger
    box wins. Everything else is background."""
    a, c = config.num_anchors, config.num_classes
    labels = np.zeros(a, dtype=np.int64)
    claimed_area = np.full(a, -1.0)
    cell = config.cell_size
    for class_id, x0, y0, x1, y1 in ann.boxes:
        if not (1 <= class_id < c):
            raise ConfigError(f"class id {class_id} outside 1..{c - 1}")
        if not (x0 < x1 and y0 < y1):
            raise ConfigError(f"degenerate box {(x0, y0, x1, y1)}")
        col = min(config.grid - 1, int(((x0 + x1) / 2.0) // cell))
        row = min(config.grid - 1, int(((y0 + y1) / 2.0) // cell))
        anchor = (row * config.grid + col) * config.anchors_per_cell
        area = (x1 - x0) * (y1 - y0)
        if area > claimed_area[anchor]:
            claimed_area[anchor] = area
            labels[anchor] = class_id
    one_hot = np.zeros((a, c))
    one_hot[np.arange(a), labels] = 1.0
    return GridLabel(one_hot=gt.tensor(one_hot))


def _render(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    n = spec.image_size
    img = np.empty((3, n, n))
    img[:] = spec.base_color
    img += rng.uniform(-BACKGROUND_NOISE, BACKGROUND_NOISE, size=(3, n, n))
    yy, xx = np.mgrid[0:n, 0:n]
    yy = yy + 0.5
    xx = xx + 0.5
    for obj in spec.objects:
        dx = xx - obj.cx
        dy = yy - obj.cy
        h = obj.size / 2.0
        if class_appearance(obj.class_id)[0] == "square":
            mask = (np.abs(dx) <= h) & (np.abs(dy) <= h)
        elif class_appearance(obj.class_id)[0] == "disk":
            mask = dx * dx + dy * dy <= h * h
        elif class_appearance(obj.class_id)[0] == "triangle":
            # upward triangle inscribed in the box
            mask = (dy <= h) & (np.abs(dx) <= (dy + h) / 2.0)
        else:  # diamond
            mask = np.abs(dx) + np.abs(dy) <= h
        for ch in range(3):
            img[ch][mask] = obj.color[ch]
    return np.clip(img, 0.0, 1.0)


def generate(seed: int, n_images: int, config: DetectorConfig) -> SyntheticDataset:
    """Deterministic dataset of n_images scenes for the given detector config.

    Object classes are dealt round-robin over 1..C-1 across the whole
    dataset, so class counts differ by at most one.
    """
    if n_images < 1:
        raise ConfigError("n_images must be >= 1")
    if config.grid < 4:
        raise ConfigError("generation needs grid >= 4 (interior cells)")
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    cell = config.cell_size
    anchor_side = cell * config.anchor_scales[0]
    lo_size, hi_size = 0.8 * anchor_side, 1.2 * anchor_side
    num_obj_classes = config.num_classes - 1
    interior = [(r, cc) for r in range(1, config.grid - 1)
                for cc in range(1, config.grid - 1)]

    ds = SyntheticDataset(config=config)
    class_cursor = 0
    for idx in range(n_images):
        rng = np.random.default_rng(np.random.SeedSequence([seed, idx]))
        count = int(rng.choice(len(_COUNT_WEIGHTS), p=_COUNT_WEIGHTS))
        cells = [interior[i] for i in
                 rng.choice(len(interior), size=count, replace=False)] if count else []
        objects = []
        for row, col in cells:
            class_id = class_cursor % num_obj_classes + 1
            class_cursor += 1
            _, base = class_appearance(class_id)
            color = tuple(float(np.clip(v + rng.uniform(-0.08, 0.08), 0.0, 1.0))
                          for v in base)
            objects.append(SceneObject(
                class_id=class_id,
                cx=(col + 0.5) * cell + rng.uniform(-1.5, 1.5),
                cy=(row + 0.5) * cell + rng.uniform(-1.5, 1.5),
                size=rng.uniform(lo_size, hi_size),
                color=color,
            ))
        spec = SceneSpec(seed=seed, index=idx, image_size=config.input_size,
                         base_color=float(rng.uniform(0.35, 0.55)),
                         objects=tuple(objects))
        ann = Annotation(boxes=tuple(
            (o.class_id, *o.box) for o in spec.objects))
        ds.specs.append(spec)
        ds.images.append(gt.tensor(_render(spec, rng)))
        ds.annotations.append(ann)
        ds.grid_labels.append(annotation_to_grid(ann, config))
    return ds


# ---------------------------------------------------------------------------
# P6 pixmap I/O (binary, 8-bit, maxval 255)


def write_image(image: Tensor, path) -> None:
    """Write a (3, H, W) tensor in [0,1] as a binary P6 pixmap."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise FormatError(f"image must be (3, H, W), got {image.shape}")
    _, h, w = image.shape
    data = np.clip(np.rint(image.data * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.transpose(1, 2, 0).tobytes())


def read_image(path, expected_size: tuple[int, int] | None = None) -> Tensor:
    """Read a binary P6 pixmap into a (3, H, W) tensor with values byte/255."""
    with open(path, "rb") as fh:
        blob = fh.read()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos:pos + 1] == b"#":  # comment line
            while pos < len(blob) and blob[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"malformed pixmap header in {path}")
        fields.append(blob[start:pos])
    if fields[0] != b"P6":
        raise FormatError(f"not a binary P6 pixmap: {path}")
    try:
        w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    except ValueError as exc:
        raise FormatError(f"malformed pixmap header in {path}") from exc
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval} in {path}")
    if w < 1 or h < 1:
        raise FormatError(f"bad pixmap dimensions {w}x{h} in {path}")
    if expected_size is not None and (h, w) != expected_size:
        raise FormatError(
            f"pixmap is {w}x{h}, expected {expected_size[1]}x{expected_size[0]}: {path}")
    pos += 1  # single whitespace after maxval
    payload = blob[pos:pos + 3 * w * h]
    if len(payload) != 3 * w * h:
        raise FormatError(f"truncated pixel payload in {path}")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return gt.tensor(arr.transpose(2, 0, 1) / 255.0)


# ---------------------------------------------------------------------------
# annotation text format: per image, a filename line then one
# "class,x_min,y_min,x_max,y_max" line per object, blank line between images


def write_annotations(names: Sequence[str], annotations: Sequence[Annotation],
                      path) -> None:
    if len(names) != len(annotations):
        raise ConfigError("one name per annotation record required")
    lines: list[str] = []
    for name, ann in zip(names, annotations):
        lines.append(name)
        for class_id, x0, y0, x1, y1 in ann.boxes:
            lines.append(f"{class_id},{x0:.4f},{y0:.4f},{x1:.4f},{y1:.4f}")
        lines.append("")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines))
        if lines:
            fh.write("\n")


def read_annotations(path) -> list[tuple[str, Annotation]]:
    with open(path, "r", encoding="ascii") as fh:
        blocks = fh.read().split("\n\n")
    out: list[tuple[str, Annotation]] = []
    for block in blocks:
        lines = [ln for ln in block.splitlines() if ln.strip()]
        if not lines:
            continue
        name = lines[0].strip()
        boxes = []
        for ln in lines[1:]:
            parts = ln.split(",")
            if len(parts) != 5:
                raise FormatError(f"bad annotation line {ln!r} in {path}")
            try:
                boxes.append((int(parts[0]), float(parts[1]), float(parts[2]),
                              float(parts[3]), float(parts[4])))
            except ValueError as exc:
                raise FormatError(f"bad annotation line {ln!r} in {path}") from exc
        out.append((name, Annotation(boxes=tuple(boxes))))
    return out
