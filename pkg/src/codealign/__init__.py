"""Codebook code spaces and code-to-code translation for modality-isolated collaborative perception.

A desk-scale simulator: synthetic multi-modality worlds, per-modality (or
per-group) discrete code spaces, translators that map a neighbour's features
into the ego's codebook, a bit-packed wire format, and the evaluation harness.
"""
from .core import (CodeAlignError, ConfigError, ConstraintError, CorruptionError, DataError, IsolationViolation,
                   MissingArtifactError, NumericError, Pose, ShapeError)

__version__ = "0.1.0"

__all__ = ["CodeAlignError", "ConfigError", "ConstraintError", "CorruptionError", "DataError",
           "IsolationViolation", "MissingArtifactError", "NumericError", "Pose", "ShapeError", "__version__"]
