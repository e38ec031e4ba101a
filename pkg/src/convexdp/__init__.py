"""Differentially private training of convexified two-layer ReLU networks.

Subpackages:

* ``accountant`` -- numerical (epsilon, delta) accounting: PLD/FFT
  composition for subsampled DP-SGD and the closed-form GDP bound for
  noisy cyclic mini-batch GD.
* ``convex_dual`` -- the gated linear (convex dual) model: arrangements,
  masks, losses, per-sample gradients, tiny-scale duality checks.
* ``optimizers`` -- DP-SGD, NoisyCGD, projected DP-GD, clipping and
  projection operators.
* ``baseline_relu`` -- one-hidden-layer ReLU network baseline.
* ``data`` -- IDX/CSV loading, synthetic data, batching.
* ``cli`` -- the experiment harness.
"""

from . import accountant, baseline_relu, convex_dual, data, optimizers
from .errors import (
    ConfigError,
    DomainError,
    FormatError,
    NumericError,
    ResourceError,
)

__all__ = [
    "accountant",
    "baseline_relu",
    "convex_dual",
    "data",
    "optimizers",
    "ConfigError",
    "DomainError",
    "FormatError",
    "NumericError",
    "ResourceError",
]

__version__ = "0.1.0"
