"""Evidential low-rank prompting for multimodal models with missing modalities."""

from ._core import *  # noqa: F401,F403
from ._core import Error, ShapeError, DomainError, ConfigError, PatternError, ProtocolError, MetricError  # noqa: F401
