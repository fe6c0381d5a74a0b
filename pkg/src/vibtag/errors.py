"""Exception hierarchy. CLI exit codes: usage 1, data 2, numeric 3."""


class VibtagError(Exception):
    """Base class for all package errors."""


class DataError(VibtagError):
    """Malformed or inconsistent input data (CLI exit code 2)."""


class ConlluParseError(DataError):
    def __init__(self, message, line_number=None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class EmbeddingFormatError(DataError):
    """Bad magic/version or header arithmetic in an EMB1 file."""


class TruncationError(EmbeddingFormatError):
    """EMB1 file shorter than its header arithmetic promises."""


class AlignmentError(DataError):
    """Treebank and embedding store disagree on a shared sentence."""


class VocabularyError(DataError):
    """A label/tag outside the known vocabulary."""


class ConfigError(VibtagError):
    """Invalid configuration (CLI exit code 1)."""


class NumericError(VibtagError):
    """Numeric failure: divergence, singular system, non-finite loss
    (CLI exit code 3)."""


class TrainingError(NumericError):
    pass
