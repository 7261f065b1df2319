"""Toy anchor-grid detector with focused / FGSM / PGD adversarial attacks.

Submodules:
    gradtape  - float64 tensors with tape-based reverse-mode autodiff
    synthdata - deterministic synthetic shape scenes with grid labels
    anchornet - the toy single-shot detector (train / decode / persist)
    attacks   - FGSM, PGD and the focused attack with budget accounting
    metrics   - IoU, average precision, mAP, perceptibility metrics
    harness   - CLI: generate / train / attack / sweep / bench / sparsity / eval
"""

from .errors import (ConfigError, DimensionError, FormatError, TapeUsageError,
                     TrainingError)
from .gradtape import FocusMask, Tape, Tensor, tensor

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DimensionError", "FormatError", "TapeUsageError",
    "TrainingError", "FocusMask", "Tape", "Tensor", "tensor", "__version__",
]
