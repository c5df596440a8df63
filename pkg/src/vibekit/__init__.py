"""vibekit: a desk-scale flow-matching toolkit.

Everything runs on a float64 numpy substrate with seeded, portable
randomness and a per-pass autodiff tape. The interesting parts:
low-rank adapter algebra with a two-stage relay protocol, attention
that combines an inward-shifted local window with pooled coarse global
tokens, a degradation-reconstruction training objective, and a
two-resolution coarse-to-fine sampler. Every numeric path has an
independent oracle in the test suite.
"""

__version__ = "0.1.0"

from .autodiff import Tape, grad_check
from .checkpoint import Checkpoint, load, read_header, save
from .config import RunConfig
from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    EmptyAttentionRowError,
    IntegrationDivergedError,
    RelayViolationError,
    ShapeError,
    TrainingDivergedError,
    VibekitError,
)
from .rng import Rng
from .tensor import Tensor, eye, full, ones, zeros

__all__ = [
    "Checkpoint", "CheckpointError", "ConfigError", "ContractError",
    "EmptyAttentionRowError", "IntegrationDivergedError", "RelayViolationError",
    "Rng", "RunConfig", "ShapeError", "Tape", "Tensor", "TrainingDivergedError",
    "VibekitError", "__version__", "eye", "full", "grad_check", "load", "ones",
    "read_header", "save", "zeros",
]
