"""Differentiable input smoothing (WEAM, R-WEAM, M-WEAM) for a variational
encoder-decoder with attention, on a small numpy autodiff engine."""

from .errors import WeamError

__version__ = "0.1.0"

__all__ = ["WeamError", "__version__"]
