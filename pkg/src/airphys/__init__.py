"""Air-quality panel analysis and physics-regularized next-day forecasting."""
from .errors import AirPhysError

__version__ = "0.1.0"

__all__ = ["AirPhysError", "__version__"]
