"""Exception hierarchy.

Every error raised on purpose by the package derives from
:class:`SphereLMError`, which is itself a :class:`ValueError` so callers
that already guard against bad input keep working.
"""


class SphereLMError(ValueError):
    """Base class for all package errors."""


# geometry
class ZeroVector(SphereLMError):
    pass


class DimensionMismatch(SphereLMError):
    pass


class NotTangent(SphereLMError):
    pass


class AntipodalPoints(SphereLMError):
    pass


class ParameterOutOfRange(SphereLMError):
    pass


class AlphaAtOne(SphereLMError):
    pass


# schedules
class DimensionTooSmall(SphereLMError):
    pass


class NonFiniteLoss(SphereLMError, ArithmeticError):
    pass


class InsufficientData(SphereLMError):
    pass


# codebook / denoiser
class IndexOutOfRange(SphereLMError, IndexError):
    pass


class NonFiniteLogits(SphereLMError, ArithmeticError):
    pass


class ShapeMismatch(SphereLMError):
    pass


class NonFiniteActivation(SphereLMError, ArithmeticError):
    pass


class MissingForwardCache(SphereLMError, RuntimeError):
    pass


# sampler
class StepBudgetZero(SphereLMError):
    pass


# analysis
class EmptySequence(SphereLMError):
    pass


class EmptyInput(SphereLMError):
    pass


# tasks
class UnreachableDifficulty(SphereLMError, RuntimeError):
    pass


class MalformedSequence(SphereLMError):
    pass


class IncompleteGrid(SphereLMError):
    pass


# cli / checkpoints
class IncompatibleCheckpoint(SphereLMError):
    pass


class ConfigError(SphereLMError):
    pass
