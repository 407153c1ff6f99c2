"""Exception hierarchy shared by every module."""


class LabError(Exception):
    """Base class for all errors raised by gradleak."""


class InvalidToken(LabError):
    pass


class SequenceTooLong(LabError):
    pass


class SequenceTooShort(LabError):
    pass


class ShapeError(LabError):
    pass


class NumericalError(LabError):
    pass


class TrainingDiverged(NumericalError):
    pass


class TemplateOverflow(LabError):
    pass


class CorpusTooSmall(LabError):
    pass


class ParseError(LabError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NoCandidates(LabError):
    pass


class ComposerUnavailable(LabError):
    pass


class ExtractionEmpty(LabError):
    pass


class InvalidDenominator(LabError):
    pass
