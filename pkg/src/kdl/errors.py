"""Exception hierarchy shared by every module."""


class KDLError(Exception):
    pass


class DimensionError(KDLError, ValueError):
    pass


class ParameterError(KDLError, ValueError):
    pass


class ConfigError(KDLError, ValueError):
    pass


class DataError(KDLError, ValueError):
    pass


class FormatError(KDLError, ValueError):
    pass


class StateError(KDLError, RuntimeError):
    pass


class WeightsIOError(KDLError, OSError):
    pass


class NumericOverflowError(KDLError, ArithmeticError):
    """A NaN or Inf appeared, or was about to."""


class KernelOverflowError(NumericOverflowError):
    def __init__(self, kind, degree, magnitude, batch_index=None, unit_index=None):
        self.kind = kind
        self.degree = degree
        self.magnitude = float(magnitude)
        self.batch_index = batch_index
        self.unit_index = unit_index
        where = ""
        if batch_index is not None:
            where = f" at batch row {batch_index}, unit {unit_index}"
        super().__init__(
            f"{kind} kernel of degree {degree} overflows: |x.w+b| = {self.magnitude:.4g}{where}"
        )
