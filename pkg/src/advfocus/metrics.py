"""Detection quality and perceptibility metrics.

Average precision is Pascal-style at a single IoU threshold with continuous
(all-points) interpolation: greedy score-ordered matching, then the area
under the precision envelope. This is deliberately not the COCO 0.5:0.95
protocol; numbers here are only compared with each other.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, DimensionError
from .gradtape import Tensor

Box = tuple[float, float, float, float]

EVAL_CSV_HEADER = ("model", "attack", "epsilon", "steps", "focus",
                   "map", "mean_l1", "linf", "psnr", "ms_per_image")


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two (x_min, y_min, x_max, y_max) boxes."""
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


@dataclass(frozen=True)
class ScoredDetection:
    """One detection for AP evaluation; image_id scopes the matching."""

    image_id: int
    score: float
    box: Box


@dataclass(frozen=True)
class GroundTruth:
    image_id: int
    box: Box


def match_detections(dets: Sequence[ScoredDetection], gts: Sequence[GroundTruth],
                     iou_thresh: float) -> list[bool]:
    """Greedy matching by descending score (ties broken by input order).

    Each ground truth is matched at most once; a detection matches the
    unmatched ground truth with the highest IoU >= iou_thresh in its image.
    Returns one true/false flag per detection, in descending-score order.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    by_image: dict[int, list[int]] = {}
    for j, gtr in enumerate(gts):
        by_image.setdefault(gtr.image_id, []).append(j)
    taken = [False] * len(gts)
    flags: list[bool] = []
    for i in order:
        det = dets[i]
        best_j, best_iou = -1, -1.0
        for j in by_image.get(det.image_id, ()):
            if taken[j]:
                continue
            ov = iou(det.box, gts[j].box)
            if ov >= iou_thresh and ov > best_iou:
                best_j, best_iou = j, ov
        if best_j >= 0:
            taken[best_j] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def average_precision(dets: Sequence[ScoredDetection],
                      gts: Sequence[GroundTruth], iou_thresh: float = 0.5) -> float:
    """Area under the precision-recall curve for one class.

    Raises ConfigError when there are no ground truths (the class must be
    excluded from the mAP mean instead).
    """
    if not gts:
        raise ConfigError("average_precision needs at least one ground truth")
    if not dets:
        return 0.0
    flags = np.array(match_detections(dets, gts, iou_thresh), dtype=bool)
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / len(gts)
    precision = tp / (tp + fp)
    # precision envelope (right-to-left running max), integrate over recall steps
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev_r = 0.0
    area = 0.0
    for r, p in zip(recall, envelope):
        if r > prev_r:
            area += (r - prev_r) * p
            prev_r = r
    return float(area)


def mean_average_precision(
        per_class_dets: dict[int, list[ScoredDetection]],
        per_class_gts: dict[int, list[GroundTruth]],
        iou_thresh: float = 0.5) -> tuple[float, dict[int, float]]:
    """Mean of per-class AP over classes with at least one ground truth."""
    aps: dict[int, float] = {}
    for cls, gts in per_class_gts.items():
        if not gts:
            continue
        aps[cls] = average_precision(per_class_dets.get(cls, []), gts, iou_thresh)
    if not aps:
        raise ConfigError("no ground-truth instances in the dataset")
    return float(np.mean(list(aps.values()))), aps


def map_score(model, dataset, confidence: float = 0.5, nms_iou: float = 0.5,
              iou_thresh: float = 0.5,
              images: Sequence[Tensor] | None = None) -> tuple[float, dict[int, float]]:
    """mAP of a detector over a dataset (optionally with substituted images,
    e.g. adversarial versions of the same scenes)."""
    from .anchornet import decode, forward

    if len(dataset) == 0:
        raise ConfigError("map_score over an empty dataset")
    if images is None:
        images = dataset.images
    if len(images) != len(dataset):
        raise DimensionError("images list must align with the dataset")
    per_class_dets: dict[int, list[ScoredDetection]] = {}
    per_class_gts: dict[int, list[GroundTruth]] = {}
    for img_id, (image, ann) in enumerate(zip(images, dataset.annotations)):
        fmap = forward(model, image)
        for det in decode(fmap, model.config, confidence, nms_iou):
            per_class_dets.setdefault(det.class_id, []).append(
                ScoredDetection(image_id=img_id, score=det.score, box=det.box))
        for class_id, x0, y0, x1, y1 in ann.boxes:
            per_class_gts.setdefault(class_id, []).append(
                GroundTruth(image_id=img_id, box=(x0, y0, x1, y1)))
    return mean_average_precision(per_class_dets, per_class_gts, iou_thresh)


# ---------------------------------------------------------------------------
# perceptibility


def _paired(x: Tensor, x_adv: Tensor) -> tuple[np.ndarray, np.ndarray]:
    if x.shape != x_adv.shape:
        raise DimensionError(f"shape mismatch: {x.shape} vs {x_adv.shape}")
    return x.data, x_adv.data


def mean_l1(x: Tensor, x_adv: Tensor) -> float:
    """Mean absolute per-channel-pixel difference."""
    a, b = _paired(x, x_adv)
    return float(np.abs(a - b).mean())


def linf(x: Tensor, x_adv: Tensor) -> float:
    a, b = _paired(x, x_adv)
    return float(np.abs(a - b).max())


PSNR_CAP = 100.0


def psnr(x: Tensor, x_adv: Tensor) -> float:
    """Peak signal-to-noise ratio in dB for [0,1] images, capped at 100."""
    a, b = _paired(x, x_adv)
    mse = float(((a - b) ** 2).mean())
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, float(20.0 * np.log10(1.0 / np.sqrt(mse))))


@dataclass
class EvalReport:
    """One attack-evaluation row; serialized with EVAL_CSV_HEADER order."""

    map: float
    per_class_ap: dict[int, float]
    mean_l1: float
    linf: float
    psnr: float
    ms_per_image: float

    def csv_row(self, model: str, attack: str, epsilon: float, steps: int,
                focus: float | None) -> list[str]:
        return [model, attack, f"{epsilon:.6g}", str(steps),
                "" if focus is None else f"{focus:.6g}",
                f"{self.map:.6f}", f"{self.mean_l1:.8f}", f"{self.linf:.8f}",
                f"{self.psnr:.4f}", f"{self.ms_per_image:.3f}"]


class Stopwatch:
    def __enter__(self):
        self._start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self._start
