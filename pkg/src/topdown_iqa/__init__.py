"""Top-down multi-scale image quality assessment."""
__version__ = "0.1.0"

from .estimator import CFANetRegressor, LPIPSPlus  # noqa: E402
from .model import CFANet, ModelConfig  # noqa: E402

__all__ = ["CFANet", "CFANetRegressor", "LPIPSPlus", "ModelConfig", "__version__"]
