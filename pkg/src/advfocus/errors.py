"""Shared exception types. Every CLI-visible failure maps to one of these."""


class DimensionError(ValueError):
    """Tensor shapes incompatible with the requested operation."""


class ConfigError(ValueError):
    """A parameter outside its legal range, or an inconsistent configuration."""


class TapeUsageError(RuntimeError):
    """A Tape used outside its record-once / backward-once lifecycle."""


class FormatError(ValueError):
    """A file (weights, image, annotations) that does not parse or does not match."""


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss)."""
