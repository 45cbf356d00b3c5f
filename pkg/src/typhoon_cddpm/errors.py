"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument lies outside the domain an operation is defined on."""


class MissingVariableError(KeyError):
    def __init__(self, variable, path=None):
        self.variable = variable
        self.path = path
        where = f" in {path}" if path is not None else ""
        super().__init__(f"variable {variable!r} not found{where}")

    def __str__(self):
        return self.args[0]


class EmptyDatasetError(ValueError):
    """Nothing usable survived a read, cleaning or alignment stage."""


class DegenerateChannelError(ValueError):
    """A channel is constant over the fitting set, so min-max scaling is undefined."""


class SplitError(ValueError):
    pass


class ScheduleError(ValueError):
    pass


class NumericalFailure(FloatingPointError):
    """Non-finite values appeared during training or sampling.

    ``step`` carries the diffusion step index involved, when known.
    """

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class CheckpointMismatchError(ValueError):
    pass
