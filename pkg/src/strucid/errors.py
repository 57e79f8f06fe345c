"""Exception types shared by every layer of the toolkit."""


class StrucidError(Exception):
    """Base class. ``code`` is the stable machine-readable name."""

    code = "Error"
    exit_code = 1

    def to_dict(self):
        out = {"error": self.code, "message": str(self)}
        out.update(getattr(self, "details", {}) or {})
        return out


class ParseError(StrucidError, ValueError):
    code = "ParseError"
    exit_code = 2

    def __init__(self, message, offset, text=None):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset
        self.text = text
        self.details = {"offset": offset}


class ModelValidationError(StrucidError, ValueError):
    code = "ModelValidationError"
    exit_code = 2

    def __init__(self, message, **details):
        super().__init__(message)
        self.details = details


class UnknownModel(ModelValidationError):
    code = "UnknownModel"


class NonAffineOutput(ModelValidationError):
    code = "NonAffineOutput"


class EvaluationError(StrucidError, ArithmeticError):
    """A point where an expression cannot be evaluated; callers resample."""

    code = "EvaluationError"
    exit_code = 3

    def __init__(self, message, **details):
        super().__init__(message)
        self.details = details


class DivisionByZero(EvaluationError):
    code = "DivisionByZero"


class DomainError(EvaluationError):
    code = "DomainError"


class AlgorithmError(StrucidError, RuntimeError):
    """Caps, inconclusive rank decisions and other algorithm aborts."""

    code = "AlgorithmError"
    exit_code = 3

    def __init__(self, message, **details):
        super().__init__(message)
        self.details = details


class InconclusiveSingular(AlgorithmError):
    code = "InconclusiveSingular"


class SingularSigma(AlgorithmError):
    code = "SingularSigma"


class PivotDegeneracy(AlgorithmError):
    code = "PivotDegeneracy"


class MissingPotentials(AlgorithmError):
    code = "MissingPotentials"


class RankDeficient(AlgorithmError):
    code = "RankDeficient"


class SingularMu(AlgorithmError):
    code = "SingularMu"


class NonConvergence(AlgorithmError):
    code = "NonConvergence"


class IterationCap(AlgorithmError):
    code = "IterationCap"


class ExpressionTooLarge(AlgorithmError):
    code = "ExpressionTooLarge"


class FlowBlowup(AlgorithmError):
    code = "FlowBlowup"


class MultipleSymmetries(AlgorithmError):
    code = "MultipleSymmetries"


class NoSensitivity(AlgorithmError):
    code = "NoSensitivity"
