"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Shapes, geometry or settings that cannot work together."""


class ValidationError(ValueError):
    """A manifest or config file failed validation.

    ``fields`` lists the offending field names.
    """

    def __init__(self, message, fields=()):
        super().__init__(message)
        self.fields = list(fields)


class StateError(RuntimeError):
    """An object was used in the wrong lifecycle state."""


class NonFiniteError(ArithmeticError):
    """A NaN or Inf reached a loss, gradient or parameter."""


class PlanningError(RuntimeError):
    """No eligible donor exists for a combination plan."""


class EvaluationError(ValueError):
    """Metrics requested on a set missing a required class."""


class BatchError(RuntimeError):
    """The training pool cannot fill a mini-batch."""
