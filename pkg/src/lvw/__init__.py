"""Interpretable image classification with shared, class-agnostic visual words."""

__version__ = "0.1.0"

from .core import Backbone, LVWModel, combine_topk, init_head, similarity_scores  # noqa: E402
from .errors import ConfigError, DataError, LVWError, NumericError, StaleCacheError  # noqa: E402
from .objectives import LossWeights  # noqa: E402
from .train import TrainingConfig, full_protocol  # noqa: E402

__all__ = ["Backbone", "LVWModel", "combine_topk", "init_head", "similarity_scores", "ConfigError",
           "DataError", "LVWError", "NumericError", "StaleCacheError", "LossWeights", "TrainingConfig",
           "full_protocol", "__version__"]
