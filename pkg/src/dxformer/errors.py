"""Exception types shared across the package.

The CLI maps these onto process exit codes, so keep the hierarchy flat.
"""


class ShapeError(ValueError):
    """Raised when tensor extents do not line up."""


class ContractError(ValueError):
    """Raised when a caller violates a documented precondition."""


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


class NumericalFailure(RuntimeError):
    """Non-finite loss, gradient or output.

    ``detail`` carries whatever the raiser knew (parameter name, batch index).
    """

    def __init__(self, message, detail=None):
        super().__init__(message)
        self.detail = detail or {}
