"""Exception hierarchy shared across the package."""


class ConceptNormError(Exception):
    """Base class for every error raised by conceptnorm."""


# preprocessing
class MissingLexicon(ConceptNormError):
    pass


class LexiconError(ConceptNormError):
    pass


# data
class FormatError(ConceptNormError):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)


class UnknownConcept(FormatError):
    pass


class EmptyDataset(ConceptNormError):
    pass


class TooSmall(ConceptNormError):
    pass


class InvalidParams(ConceptNormError):
    pass


# model
class NotInitialized(ConceptNormError):
    pass


class InvalidDims(ConceptNormError):
    pass


class DimMismatch(ConceptNormError):
    pass


class InvalidLabel(ConceptNormError):
    pass


class DegenerateNorm(ConceptNormError):
    pass


# training
class ConfigError(ConceptNormError):
    def __init__(self, message, key=None):
        self.key = key
        super().__init__(message)


class Diverged(ConceptNormError):
    def __init__(self, message, report=None):
        self.report = report
        super().__init__(message)


class CorruptCheckpoint(ConceptNormError):
    pass


class InventoryMismatch(ConceptNormError):
    pass


# evaluation
class EmptyEval(ConceptNormError):
    pass
