"""Token pruning, routing and merging for ViT segmentation (C++ core)."""

from ._core import *  # noqa: F401,F403
from ._core import RunConfig, Model, ConfigError, NumericError

__all__ = [name for name in dir() if not name.startswith("_")]
