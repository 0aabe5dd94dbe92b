"""Exception types raised across the toolkit."""


class TrojanScopeError(Exception):
    """Base class for all toolkit errors."""


class InputShapeError(TrojanScopeError, ValueError):
    pass


class ClassIndexError(TrojanScopeError, IndexError):
    pass


class DatasetError(TrojanScopeError, ValueError):
    """Empty dataset, bad labels, or malformed dataset files."""


class ModelFormatError(TrojanScopeError, ValueError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ModelVersionError(TrojanScopeError, ValueError):
    pass


class IdxFormatError(DatasetError):
    pass


class TriggerSpecError(TrojanScopeError, ValueError):
    pass


class PoisoningDegenerateError(TrojanScopeError, ValueError):
    pass


class NumericalError(TrojanScopeError, ArithmeticError):
    def __init__(self, message, iteration=None):
        if iteration is not None:
            message = f"{message} (iteration {iteration})"
        super().__init__(message)
        self.iteration = iteration


class ConvergenceError(NumericalError):
    pass


class ProjectionError(TrojanScopeError, RuntimeError):
    """No usable boundary projections (all samples failed to cross)."""


class DegenerateDirectionError(NumericalError):
    pass


class ConfigError(TrojanScopeError, ValueError):
    pass
