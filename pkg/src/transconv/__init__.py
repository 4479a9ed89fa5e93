"""Denoising diffusion for multichannel time series, with evaluation and ablation tooling."""
from .errors import ConfigError, DataError, NumericalError, ShapeError, TransConvError

__version__ = "0.1.0"

__all__ = ["ConfigError", "DataError", "NumericalError", "ShapeError", "TransConvError", "__version__"]
