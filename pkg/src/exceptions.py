"""
Exceptions for WeakGround
=========================

Every error raised on purpose by the package derives from WeakGroundError so
entry points can tell runtime failures apart from programming mistakes.
"""


class WeakGroundError(Exception):
    """Base class of all package errors"""


class ContractError(WeakGroundError, ValueError):
    """A documented precondition was violated"""


class DimensionError(ContractError):
    """Operand shapes do not agree"""


class GenerationError(WeakGroundError):
    """A synthetic scene could not be produced"""


class QueryGenerationError(GenerationError):
    """No truthful, discriminative query exists for a scene"""


class ParseError(WeakGroundError, ValueError):
    """A query contains no vocabulary noun phrase"""


class CheckpointError(WeakGroundError):
    """A checkpoint file is missing or malformed"""


class DatasetError(WeakGroundError):
    """A dataset file is missing, empty or cannot be written"""


class TrainingError(WeakGroundError):
    """Training diverged"""


class UsageError(WeakGroundError):
    """Command-line usage problem"""
