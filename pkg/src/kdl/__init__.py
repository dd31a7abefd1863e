"""Neural networks with kernelized dense layers, built on numpy."""

__version__ = "0.1.0"

from .errors import (ConfigError, DataError, DimensionError, FormatError, KDLError,
                     KernelOverflowError, NumericOverflowError, ParameterError, StateError,
                     WeightsIOError)
from .kernels import KernelSpec, kernel_eval, kernel_grad
from .model import ModelConfig, HeadConfig, build_model, load_weights, save_weights
