"""Toy single-shot detector on an anchor grid.

A few stride-2 conv+relu stages shrink the image to a G x G grid, a 1x1 conv
head emits K*C channels, and a row softmax turns each of the A = G*G*K
anchors into a class probability distribution (class 0 is background).
There is no box regression: decoded boxes are fixed-size squares centered on
their grid cell, which matches how the synthetic scenes are generated.
"""

from __future__ import annotations

import io
import struct
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import gradtape as gt
from .errors import ConfigError, DimensionError, FormatError, TrainingError
from .gradtape import Tape, Tensor

WEIGHTS_MAGIC = b"FAW1"

# CLI / acceptance defaults; cmd_train documents these as the default recipe
DEFAULT_EPOCHS = 30
DEFAULT_LEARNING_RATE = 0.1


@dataclass(frozen=True)
class DetectorConfig:
    """Architecture description; every derived quantity hangs off this."""

    input_size: int = 64
    grid: int = 8
    anchors_per_cell: int = 1
    num_classes: int = 5  # includes background at index 0
    channels: tuple[int, ...] = (16, 32, 64)
    anchor_scales: tuple[float, ...] = (1.25,)

    def __post_init__(self):
        if self.input_size % self.grid != 0:
            raise ConfigError(
                f"input_size {self.input_size} not divisible by grid {self.grid}")
        if self.num_classes < 2:
            raise ConfigError("need at least background plus one object class")
        if self.anchors_per_cell < 1:
            raise ConfigError("anchors_per_cell must be >= 1")
        if len(self.anchor_scales) != self.anchors_per_cell:
            raise ConfigError(
                f"{len(self.anchor_scales)} anchor scales for "
                f"{self.anchors_per_cell} anchors per cell")
        if self.grid << len(self.channels) != self.input_size:
            raise ConfigError(
                f"{len(self.channels)} stride-2 stages map {self.input_size} px "
                f"to {self.input_size >> len(self.channels)}, expected grid {self.grid}")

    @property
    def num_anchors(self) -> int:
        return self.grid * self.grid * self.anchors_per_cell

    @property
    def cell_size(self) -> float:
        return self.input_size / self.grid

    def anchor_box(self, anchor_index: int) -> tuple[float, float, float, float]:
        """Fixed box (x_min, y_min, x_max, y_max) of an anchor, clipped to the image."""
        k = anchor_index % self.anchors_per_cell
        cell = anchor_index // self.anchors_per_cell
        row, col = divmod(cell, self.grid)
        cx = (col + 0.5) * self.cell_size
        cy = (row + 0.5) * self.cell_size
        half = 0.5 * self.cell_size * self.anchor_scales[k]
        return (max(0.0, cx - half), max(0.0, cy - half),
                min(float(self.input_size), cx + half),
                min(float(self.input_size), cy + half))


def _weight_shapes(config: DetectorConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    cin = 3
    for i, cout in enumerate(config.channels):
        shapes[f"conv{i}.weight"] = (cout, cin, 3, 3)
        shapes[f"conv{i}.bias"] = (cout,)
        cin = cout
    head = config.anchors_per_cell * config.num_classes
    shapes["head.weight"] = (head, cin, 1, 1)
    shapes["head.bias"] = (head,)
    return shapes


@dataclass(frozen=True)
class DetectorModel:
    """Config plus trained weights; treat as immutable once built."""

    config: DetectorConfig
    weights: dict[str, Tensor]

    def __post_init__(self):
        expected = _weight_shapes(self.config)
        if set(self.weights) != set(expected):
            missing = set(expected) - set(self.weights)
            extra = set(self.weights) - set(expected)
            raise ConfigError(f"weight names mismatch: missing {sorted(missing)}, "
                              f"unexpected {sorted(extra)}")
        for name, shape in expected.items():
            if self.weights[name].shape != shape:
                raise ConfigError(
                    f"weight {name} has shape {self.weights[name].shape}, "
                    f"expected {shape}")


def init_model(config: DetectorConfig, seed: int = 0) -> DetectorModel:
    """He-style init for the backbone; tiny head weights so the untrained map
    is close to a uniform distribution per row."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, 0x1217]))
    weights: dict[str, Tensor] = {}
    for name, shape in _weight_shapes(config).items():
        if name.endswith(".bias"):
            weights[name] = gt.zeros(shape)
        elif name.startswith("head"):
            weights[name] = gt.tensor(rng.normal(size=shape) * 0.01)
        else:
            fan_in = shape[1] * shape[2] * shape[3]
            weights[name] = gt.tensor(rng.normal(size=shape) * np.sqrt(2.0 / fan_in))
    return DetectorModel(config=config, weights=weights)


@dataclass(frozen=True)
class FeatureMap:
    """Per-anchor class probabilities, shape (A, C); rows sum to 1."""

    values: Tensor

    def __post_init__(self):
        if self.values.ndim != 2:
            raise DimensionError(f"feature map must be 2-D, got {self.values.shape}")


@dataclass(frozen=True)
class Detection:
    box: tuple[float, float, float, float]
    class_id: int
    score: float
    anchor_index: int


def forward(model: DetectorModel, image: Tensor, tape: Tape | None = None) -> FeatureMap:
    """Run the detector. Recording happens iff a tape is supplied (or active)."""
    cfg = model.config
    if image.shape != (3, cfg.input_size, cfg.input_size):
        raise DimensionError(
            f"image shape {image.shape}, expected (3, {cfg.input_size}, {cfg.input_size})")
    if tape is not None:
        with tape:
            return forward(model, image)

    x = image
    for i in range(len(cfg.channels)):
        x = gt.conv2d(x, model.weights[f"conv{i}.weight"], stride=2, padding=1)
        x = gt.bias_add(x, model.weights[f"conv{i}.bias"])
        x = gt.relu(x)
    x = gt.conv2d(x, model.weights["head.weight"], stride=1, padding=0)
    x = gt.bias_add(x, model.weights["head.bias"])
    # (K*C, G, G) -> anchors in row-major cell order, K fastest, classes last
    k, c, g = cfg.anchors_per_cell, cfg.num_classes, cfg.grid
    x = gt.reshape(x, (k, c, g, g))
    x = gt.transpose(x, (2, 3, 0, 1))
    x = gt.reshape(x, (cfg.num_anchors, c))
    return FeatureMap(values=gt.softmax_rows(x))


def _greedy_nms(dets: list[Detection], nms_iou: float) -> list[Detection]:
    from .metrics import iou  # local import; metrics has no heavy deps

    kept: list[Detection] = []
    for det in sorted(dets, key=lambda d: (-d.score, d.anchor_index)):
        if all(iou(det.box, k.box) <= nms_iou for k in kept):
            kept.append(det)
    return sorted(kept, key=lambda d: d.anchor_index)


def decode(feature_map: FeatureMap, config: DetectorConfig,
           confidence: float = 0.5, nms_iou: float = 0.5) -> list[Detection]:
    """Turn the map into detections: per-anchor best non-background class above
    the confidence bound, then greedy per-class NMS (IoU strictly above
    nms_iou suppresses)."""
    if not (0.0 < confidence < 1.0):
        raise ConfigError(f"confidence must lie in (0, 1), got {confidence}")
    if not (0.0 < nms_iou <= 1.0):
        raise ConfigError(f"nms_iou must lie in (0, 1], got {nms_iou}")
    values = feature_map.values.data
    if values.shape != (config.num_anchors, config.num_classes):
        raise DimensionError(
            f"map shape {values.shape} does not match config "
            f"({config.num_anchors}, {config.num_classes})")

    obj_scores = values[:, 1:]
    best = obj_scores.argmax(axis=1)
    candidates = [
        Detection(box=config.anchor_box(i), class_id=int(best[i]) + 1,
                  score=float(obj_scores[i, best[i]]), anchor_index=i)
        for i in np.flatnonzero(obj_scores[np.arange(len(best)), best] > confidence)
    ]
    out: list[Detection] = []
    for cls in sorted({d.class_id for d in candidates}):
        out.extend(_greedy_nms([d for d in candidates if d.class_id == cls], nms_iou))
    return sorted(out, key=lambda d: d.anchor_index)


# ---------------------------------------------------------------------------
# training


def _cross_entropy(fmap: FeatureMap, one_hot: Tensor) -> Tensor:
    """Mean per-anchor cross-entropy against one-hot rows."""
    picked = gt.mul(gt.log(fmap.values), one_hot)
    return gt.scale(gt.sum_all(picked), -1.0 / one_hot.shape[0])


@dataclass
class TrainResult:
    model: DetectorModel
    losses: list[float] = field(default_factory=list)  # mean loss per epoch
    val_map: float | None = None


def train(model: DetectorModel, samples: Sequence[tuple[Tensor, Tensor]],
          epochs: int, learning_rate: float, seed: int = 0) -> TrainResult:
    """Plain per-sample gradient descent, fixed learning rate, no state.

    samples are (image, one_hot grid label) pairs. The visit order is
    shuffled per epoch from the seed, so the run is bit-reproducible.
    Raises TrainingError with the epoch index if the loss goes non-finite.
    """
    if not samples:
        raise ConfigError("training needs a nonempty dataset")
    weights = dict(model.weights)
    names = list(weights)
    order_rng = np.random.default_rng(
        np.random.SeedSequence([int(seed) & 0xFFFFFFFF, 0x5215]))
    losses: list[float] = []
    for epoch in range(epochs):
        order = order_rng.permutation(len(samples))
        total = 0.0
        for idx in order:
            image, one_hot = samples[idx]
            current = DetectorModel(config=model.config, weights=dict(weights))
            with Tape() as tape:
                loss = _cross_entropy(forward(current, image), one_hot)
                value = loss.item()
                if not np.isfinite(value):
                    raise TrainingError(f"non-finite loss at epoch {epoch}")
                tape.backward(loss)
                for name in names:
                    g = tape.grad(weights[name])
                    weights[name] = gt.tensor(weights[name].data - learning_rate * g.data)
            total += value
        losses.append(total / len(samples))
    return TrainResult(model=DetectorModel(config=model.config, weights=weights),
                       losses=losses)


# ---------------------------------------------------------------------------
# persistence: magic "FAW1", record count, then per-record
# (u16 name length, name, u8 rank, u32 dims...), then float64 LE payloads


def save_weights(model: DetectorModel, path) -> None:
    buf = io.BytesIO()
    buf.write(WEIGHTS_MAGIC)
    buf.write(struct.pack("<I", len(model.weights)))
    names = list(model.weights)
    for name in names:
        raw = name.encode("utf-8")
        shape = model.weights[name].shape
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", len(shape)))
        buf.write(struct.pack(f"<{len(shape)}I", *shape))
    for name in names:
        buf.write(model.weights[name].data.astype("<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(f"truncated weights file while reading {what}")
    return data


def load_weights(model: DetectorModel, path) -> DetectorModel:
    """Read a FAW1 file and return a model with those weights.

    Any mismatch (magic, unknown tensor name, wrong shape, truncation,
    trailing bytes) raises FormatError and leaves no partial model behind.
    """
    expected = _weight_shapes(model.config)
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != WEIGHTS_MAGIC:
            raise FormatError("bad magic: not a FAW1 weights file")
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "record count"))
        records: list[tuple[str, tuple[int, ...]]] = []
        for _ in range(count):
            (nlen,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
            name = _read_exact(fh, nlen, "name").decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(fh, 1, "rank"))
            dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "dims"))
            if name not in expected:
                raise FormatError(f"unknown tensor name in weights file: {name!r}")
            if tuple(dims) != expected[name]:
                raise FormatError(
                    f"tensor {name!r} has shape {tuple(dims)}, expected {expected[name]}")
            records.append((name, tuple(dims)))
        if {n for n, _ in records} != set(expected):
            missing = set(expected) - {n for n, _ in records}
            raise FormatError(f"weights file is missing tensors: {sorted(missing)}")
        weights: dict[str, Tensor] = {}
        for name, dims in records:
            n = int(np.prod(dims, dtype=np.int64))
            raw = _read_exact(fh, 8 * n, f"payload of {name!r}")
            weights[name] = gt.tensor(np.frombuffer(raw, dtype="<f8").reshape(dims))
        if fh.read(1):
            raise FormatError("trailing bytes after weight payloads")
    return DetectorModel(config=model.config, weights=weights)


# ---------------------------------------------------------------------------
# feature-map sparsity


@dataclass(frozen=True)
class SparsityStats:
    thresholds: tuple[float, ...]
    fractions_le: tuple[float, ...]         # fraction of entries <= threshold
    hist_edges: tuple[float, ...]           # bin edges over the top subset
    hist_counts: tuple[int, ...]
    hist_fractions: tuple[float, ...]       # counts / subset size, sums to 1
    total_entries: int
    top_entries: int


def sparsity_stats(values, thresholds: Sequence[float],
                   top_fraction: float = 0.0002, bins: int = 20) -> SparsityStats:
    """How empty a feature map is: cumulative fractions at each threshold and
    a histogram of the most activated ``top_fraction`` of entries.

    ``values`` may be a FeatureMap, a Tensor, or a plain array; stacking
    several maps into one array aggregates over a dataset.
    """
    if isinstance(values, FeatureMap):
        values = values.values
    if isinstance(values, Tensor):
        values = values.data
    flat = np.asarray(values, dtype=np.float64).reshape(-1)
    if flat.size == 0:
        raise ConfigError("sparsity_stats on an empty map")
    thresholds = tuple(float(t) for t in thresholds)
    if list(thresholds) != sorted(thresholds):
        raise ConfigError("thresholds must be sorted ascending")
    fractions = tuple(float((flat <= t).mean()) for t in thresholds)

    m = max(1, int(np.ceil(flat.size * top_fraction)))
    top = np.sort(flat)[-m:]
    lo, hi = float(top[0]), float(top[-1])
    if hi <= lo:
        hi = lo + 1e-12
    counts, edges = np.histogram(top, bins=bins, range=(lo, hi))
    return SparsityStats(
        thresholds=thresholds,
        fractions_le=fractions,
        hist_edges=tuple(float(e) for e in edges),
        hist_counts=tuple(int(c) for c in counts),
        hist_fractions=tuple(float(c) / m for c in counts),
        total_entries=int(flat.size),
        top_entries=m,
    )


def timed_forward(model: DetectorModel, image: Tensor) -> tuple[FeatureMap, float]:
    start = time.perf_counter()
    fmap = forward(model, image)
    return fmap, time.perf_counter() - start
