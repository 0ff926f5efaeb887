"""Desk-scale latent-diffusion virtual try-off.

Subpackages follow the pipeline: `tensor`/`optim`/`checkpoint` (autodiff
engine), `attention` (hybrid reference-injection blocks), `networks` (VAE,
token encoder, parallel U-Nets), `diffusion` (schedule + sampler), `losses`
and `metrics` (training objectives and the evaluation suite), `synthdata`
(paired garment generator), `training` and `cli` (orchestration).
"""

from .errors import (ConfigError, ContractError, DataError, DimensionError,
                     NumericalError, PairingError, RangeError, SizeError,
                     StateError, TryoffError)
from .tensor import Parameter, Tensor, backward, no_grad

__version__ = "0.1.0"

__all__ = [
    "Tensor", "Parameter", "backward", "no_grad",
    "TryoffError", "DimensionError", "ConfigError", "ContractError",
    "RangeError", "StateError", "NumericalError", "SizeError",
    "PairingError", "DataError",
    "__version__",
]
