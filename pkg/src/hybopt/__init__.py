"""Memory-lean diffusion personalization: low-resolution backprop mixed with
high-resolution zeroth-order steps, chosen per step by a timestep-aware
probability."""

__version__ = "0.1.0"

from .errors import (ConfigError, HybOptError, InvalidTimestep, NonFiniteValue, ShapeError,
                     TapeCorrupt, TrainingAborted, UnknownLayer)
from .params import ParameterSet, load_checkpoint, save_checkpoint
from .scheduler import Branch, Mode, SelectorConfig
from .tensor import ActivationLedger, Tensor, backward, forward
