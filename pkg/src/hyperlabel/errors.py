"""Exception hierarchy shared by every module."""


class HyperLabelError(Exception):
    """Base class for all library errors."""


class ContractViolation(HyperLabelError, ValueError):
    """Inputs broke a precondition (shape, alphabet, range)."""


class LabelParseError(HyperLabelError, ValueError):
    def __init__(self, message, row=None, column=None):
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.row = row
        self.column = column


class NonFiniteError(HyperLabelError, ArithmeticError):
    """A numeric op produced NaN or Inf."""


class EnumerationCapError(HyperLabelError):
    pass


class NoValidLabelingError(HyperLabelError):
    """The valid set U_y(X) is empty, so its mean is undefined."""


class ValidSetTooSparseError(HyperLabelError):
    pass


class GenerationError(HyperLabelError):
    pass


class ModelFileError(HyperLabelError):
    pass


class ModelVersionError(ModelFileError):
    pass


class ModelShapeError(ModelFileError):
    pass


class CorruptModelError(ModelFileError):
    pass


class TrainingError(HyperLabelError):
    def __init__(self, message, reports=None):
        super().__init__(message)
        self.reports = reports or []
