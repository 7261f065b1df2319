"""Gradient-sign attacks against the toy detector.

All three attacks split an L-infinity budget over S equal steps and clamp to
the valid pixel box after every step, so the final image always satisfies
||x' - x||_inf <= budget and x' in [0, 1].

The focused attack minimizes the focused activation of the current map, so
its update is x' <- clamp(x' - eps * sign(grad)). The ascend flag flips the
update sign for both focused and baseline objectives (the baseline
cross-entropy objective is maximized, i.e. ascended, by default).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import gradtape as gt
from .anchornet import DetectorModel, forward
from .errors import ConfigError, DimensionError
from .gradtape import Tape, Tensor

ATTACK_KINDS = ("fgsm", "pgd", "fa")
FA_VARIANTS = ("indexed", "parallel", "hinge")


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "fa"
    budget: float = 0.02        # total L-infinity radius
    steps: int = 5
    focus: float = 0.5          # focused attack only
    fa_variant: str = "indexed"
    clamp: bool = True
    fa_descend: bool = True     # False replays the raw "+" update rule

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ConfigError(f"unknown attack kind {self.kind!r}")
        if not (0.0 <= self.budget <= 1.0):
            raise ConfigError(f"budget must lie in [0, 1], got {self.budget}")
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.kind == "fgsm" and self.steps != 1:
            raise ConfigError("fgsm is single-step; use pgd for steps > 1")
        if self.kind == "fa":
            if not (0.0 <= self.focus < 1.0):
                raise ConfigError(f"focus must lie in [0, 1), got {self.focus}")
            if self.fa_variant not in FA_VARIANTS:
                raise ConfigError(f"unknown fa variant {self.fa_variant!r}")

    @property
    def step_size(self) -> float:
        return self.budget / self.steps


@dataclass
class PerturbationResult:
    x_adv: Tensor
    delta: Tensor                      # x_adv - x
    step_signs: list[np.ndarray] = field(default_factory=list)  # int8, in {-1,0,+1}
    objective_trace: list[float] = field(default_factory=list)
    wall_time_s: float = 0.0
    no_op: bool = False


def _check_image(model: DetectorModel, image: Tensor) -> None:
    size = model.config.input_size
    if image.shape != (3, size, size):
        raise DimensionError(f"image shape {image.shape}, expected (3, {size}, {size})")


def _fa_objective(fmap, cfg: AttackConfig):
    if cfg.fa_variant == "indexed":
        value, mask = gt.fa_indexed(fmap.values, cfg.focus)
        return value, len(mask)
    if cfg.fa_variant == "parallel":
        value = gt.fa_parallel(fmap.values, cfg.focus)
    else:
        value = gt.fa_hinge(fmap.values, cfg.focus)
    return value, int(np.count_nonzero(fmap.values.data > cfg.focus))


def focused_attack(model: DetectorModel, image: Tensor,
                   cfg: AttackConfig) -> PerturbationResult:
    """Iterated focused attack: at each step, recompute the focus mask on the
    current image, take one sign step against the focused activation, clamp.

    If nothing exceeds the focus threshold at step 1 the gradient is zero
    everywhere; the attack returns the unchanged image flagged no_op.
    """
    if cfg.kind != "fa":
        raise ConfigError(f"focused_attack got kind {cfg.kind!r}")
    _check_image(model, image)
    start = time.perf_counter()
    eps = cfg.step_size
    direction = -1.0 if cfg.fa_descend else 1.0
    x_adv = image.data
    result = PerturbationResult(x_adv=image, delta=gt.zeros(image.shape))
    for step in range(cfg.steps):
        current = gt.tensor(x_adv)
        with Tape() as tape:
            value, mask_size = _fa_objective(forward(model, current), cfg)
            result.objective_trace.append(value.item())
            tape.backward(value)
            grad = tape.grad(current).data
        if step == 0 and mask_size == 0:
            result.step_signs.append(np.zeros(image.shape, dtype=np.int8))
            result.no_op = True
            break
        signs = np.sign(grad).astype(np.int8)
        result.step_signs.append(signs)
        x_adv = x_adv + (direction * eps) * signs
        if cfg.clamp:
            x_adv = np.clip(x_adv, 0.0, 1.0)
    final = gt.tensor(x_adv)
    if not result.no_op:
        with Tape() as tape:
            value, _ = _fa_objective(forward(model, final), cfg)
        result.objective_trace.append(value.item())
    result.x_adv = final
    result.delta = gt.tensor(final.data - image.data)
    result.wall_time_s = time.perf_counter() - start
    return result


def _baseline_objective(model: DetectorModel, current: Tensor,
                        labels_one_hot: np.ndarray | None):
    """Cross-entropy of the map against the clean argmax labels, summed over
    anchors. On the first call (labels unknown) the labels come from the same
    forward pass, so no extra inference is spent."""
    fmap = forward(model, current)
    if labels_one_hot is None:
        values = fmap.values.data
        labels = values.argmax(axis=1)
        labels_one_hot = np.zeros_like(values)
        labels_one_hot[np.arange(values.shape[0]), labels] = 1.0
    picked = gt.mul(gt.log(fmap.values), gt.tensor(labels_one_hot))
    return gt.scale(gt.sum_all(picked), -1.0), labels_one_hot


def _baseline_attack(model: DetectorModel, image: Tensor,
                     cfg: AttackConfig) -> PerturbationResult:
    _check_image(model, image)
    start = time.perf_counter()
    eps = cfg.step_size
    direction = 1.0 if cfg.fa_descend else -1.0  # ascend the loss by default
    x_adv = image.data
    x_orig = image.data
    labels = None
    result = PerturbationResult(x_adv=image, delta=gt.zeros(image.shape))
    for _ in range(cfg.steps):
        current = gt.tensor(x_adv)
        with Tape() as tape:
            loss, labels = _baseline_objective(model, current, labels)
            result.objective_trace.append(loss.item())
            tape.backward(loss)
            grad = tape.grad(current).data
        signs = np.sign(grad).astype(np.int8)
        result.step_signs.append(signs)
        x_adv = x_adv + (direction * eps) * signs
        # project onto the budget ball, then the valid pixel box
        x_adv = x_orig + np.clip(x_adv - x_orig, -cfg.budget, cfg.budget)
        if cfg.clamp:
            x_adv = np.clip(x_adv, 0.0, 1.0)
    final = gt.tensor(x_adv)
    result.x_adv = final
    result.delta = gt.tensor(final.data - image.data)
    result.wall_time_s = time.perf_counter() - start
    return result


def fgsm(model: DetectorModel, image: Tensor, cfg: AttackConfig) -> PerturbationResult:
    """Single ascent step on the baseline objective."""
    if cfg.kind != "fgsm":
        raise ConfigError(f"fgsm got kind {cfg.kind!r}")
    return _baseline_attack(model, image, cfg)


def pgd(model: DetectorModel, image: Tensor, cfg: AttackConfig) -> PerturbationResult:
    """S ascent steps of budget/S on the baseline objective with projection
    onto the budget ball and the valid pixel box."""
    if cfg.kind != "pgd":
        raise ConfigError(f"pgd got kind {cfg.kind!r}")
    return _baseline_attack(model, image, cfg)


def run_attack(model: DetectorModel, image: Tensor,
               cfg: AttackConfig) -> PerturbationResult:
    if cfg.kind == "fa":
        return focused_attack(model, image, cfg)
    if cfg.kind == "fgsm":
        return fgsm(model, image, cfg)
    return pgd(model, image, cfg)


def quantize_image(image: Tensor) -> Tensor:
    """Round to the 8-bit grid used by the pixmap files."""
    return gt.tensor(np.rint(np.clip(image.data, 0.0, 1.0) * 255.0) / 255.0)


def perturbation_heat(results: list[PerturbationResult]) -> np.ndarray:
    """Per-pixel mean absolute perturbation (H, W), averaged over channels
    and results."""
    if not results:
        raise ConfigError("perturbation_heat needs at least one result")
    acc = np.zeros(results[0].delta.shape[1:])
    for res in results:
        if res.delta.shape[1:] != acc.shape:
            raise DimensionError("mixed image sizes in perturbation_heat")
        acc += np.abs(res.delta.data).mean(axis=0)
    return acc / len(results)
