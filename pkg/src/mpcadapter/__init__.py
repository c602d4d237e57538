"""Two-party secret-sharing inference engine for low-rank adapter
pipelines, with closed-form cost models and a latency-constrained
architecture search."""

from .nn import AdapterConfig, private_inference
from .ring import DEFAULT_CONFIG, FixedPointConfig, FixedTensor

__version__ = "0.1.0"

__all__ = [
    "AdapterConfig",
    "DEFAULT_CONFIG",
    "FixedPointConfig",
    "FixedTensor",
    "private_inference",
    "__version__",
]
