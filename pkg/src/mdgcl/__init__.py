"""Multi-domain graph contrastive pre-training and few-shot transfer."""

from .errors import FormatError, MdgclError, NumericError, ValidationError
from .graph import FeatureGraph

__version__ = "0.1.0"

__all__ = ["FeatureGraph", "FormatError", "MdgclError", "NumericError", "ValidationError", "__version__"]
