"""Adversarial multi-sequence cardiac MR segmentation at desk scale.

A dilated residual U-shape generator and a conditional mask discriminator,
trained jointly with mixed expert / pseudo-mask supervision, on a
from-scratch reverse-mode autodiff engine. Includes the full preprocessing,
weak cross-modality mask transfer, training, and evaluation pipeline plus a
synthetic phantom generator standing in for the (non-redistributable)
challenge data.
"""

__version__ = "0.1.0"

from .autodiff import Tape, Tensor, backward, no_grad
from .errors import ConfigError, DataError, NumericalError, ShapeError

__all__ = [
    "Tape", "Tensor", "backward", "no_grad",
    "ConfigError", "DataError", "NumericalError", "ShapeError",
    "__version__",
]
