"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration or specification."""


class ContractError(ValueError):
    """An argument violates an operation's precondition (shape, id range, ...)."""


class InfeasibleSplitError(ValueError):
    """The requested labeled/unlabeled split cannot be built."""


class ManifestParseError(ValueError):
    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = path
        self.line_no = line_no


class FormatError(ValueError):
    """A binary file does not match its expected header or size."""


class EmbedderError(RuntimeError):
    """Failure inside an embedder, annotated with the prompt being encoded."""


class PipelineError(RuntimeError):
    """A batch job produced no usable output."""


class UndefinedMetricError(ValueError):
    """Metric requested on an empty confusion matrix."""


class SweepError(RuntimeError):
    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial
