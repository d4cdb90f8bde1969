"""Exceptions raised by the celestial_uda toolkit."""

from __future__ import annotations


class UdaError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(UdaError):
    """Invalid or unknown configuration."""


class ShapeMismatchError(UdaError, ValueError):
    """Two tensors that must agree in shape do not."""


class DegenerateEmbeddingError(UdaError, ValueError):
    """Cosine distance requested between two all-zero vectors."""


class DatasetFormatError(UdaError):
    """Malformed label file or manifest."""


class DatasetIOError(UdaError):
    """Reading or writing a dataset file failed."""


class TrainingDivergedError(UdaError):
    """A non-finite loss was produced during training."""

    def __init__(self, step: int, batch_index: int, dump_path: str | None = None):
        self.step = step
        self.batch_index = batch_index
        self.dump_path = dump_path
        msg = f"Non-finite loss at step {step} (batch index {batch_index})"
        if dump_path:
            msg += f"; diagnostics written to {dump_path}"
        super().__init__(msg)
