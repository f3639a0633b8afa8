"""Exception types raised across the package."""


class PipelineError(Exception):
    """Base class for all package errors."""


class ShapeError(PipelineError, ValueError):
    pass


class DeterminismError(PipelineError):
    pass


class ParameterError(PipelineError, ValueError):
    pass


class FormatError(PipelineError, ValueError):
    """Malformed input file; message carries file and line where known."""


class SelectionError(PipelineError, IndexError):
    pass


class LabelError(PipelineError, ValueError):
    pass


class DomainError(PipelineError, ValueError):
    pass


class ResamplingError(PipelineError):
    pass


class SplitError(PipelineError):
    pass


class MissingSubjectError(PipelineError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "missing subject"


class CompatibilityError(PipelineError):
    pass


class DivergenceError(PipelineError, FloatingPointError):
    pass


class InputError(PipelineError, ValueError):
    pass
