"""Exception hierarchy. CLI exit codes are derived from these classes."""


class EgainError(Exception):
    exit_code = 1


class ValidationError(EgainError, ValueError):
    exit_code = 2


class DegenerateInputError(ValidationError):
    """Input has no usable signal (zero-norm embedding, constant image)."""


class NumericDivergenceError(EgainError, ArithmeticError):
    exit_code = 3

    def __init__(self, term, value):
        super().__init__(f"non-finite loss term {term!r}: {value}")
        self.term = term
        self.value = value


class CheckpointVersionError(EgainError):
    exit_code = 2


class CheckpointCorruptError(EgainError):
    exit_code = 1
