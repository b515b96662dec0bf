"""Exception hierarchy shared by every module."""


class CtxFusionError(Exception):
    pass


class DimensionError(CtxFusionError, ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(CtxFusionError, ValueError):
    """A configuration or spec value is invalid or infeasible."""


class ContractError(CtxFusionError, ValueError):
    """An operation was called outside its contract (e.g. backward on a non-scalar)."""


class InputError(CtxFusionError, ValueError):
    pass


class NonFiniteError(CtxFusionError, FloatingPointError):
    pass


class GenerationError(CtxFusionError, RuntimeError):
    pass


class TrainingError(CtxFusionError, RuntimeError):
    pass


class FormatError(CtxFusionError, ValueError):
    """A dataset or checkpoint file is corrupt, truncated or of the wrong version."""
