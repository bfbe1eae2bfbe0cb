"""Semi-supervised deep generative modeling on 2-d point clouds.

The package trains a latent-variable generative model whose classifier sees
both the input and its latent code, supports a point-estimate or Bayesian
treatment of the classifier weights, and predicts labels for new points by
Gibbs sampling. Everything runs on numpy float64 with a small reverse-mode
tape; no GPU framework is involved.
"""

__version__ = "0.1.0"

from .errors import (DataFormatError, DimensionError, NumericError,
                     UsageError)

__all__ = [
    "DataFormatError",
    "DimensionError",
    "NumericError",
    "UsageError",
    "__version__",
]
