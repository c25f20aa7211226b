"""Feature-fusion single-shot detector built on a small numpy autograd core."""

from .model import FSSD, ModelConfig, PriorConfig

__version__ = "0.1.0"

__all__ = ["FSSD", "ModelConfig", "PriorConfig", "__version__"]
