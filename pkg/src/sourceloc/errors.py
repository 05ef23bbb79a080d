"""Exception types raised across the package."""


class SourceLocError(Exception):
    """Base class for all package errors."""


class InputError(SourceLocError, ValueError):
    """Malformed or out-of-range input data.

    ``line`` carries the 1-based line number of the offending row when the
    error came from a file.
    """

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        prefix = ""
        if path is not None:
            prefix += f"{path}:"
        if line is not None:
            prefix += f"{line}: " if path is not None else f"line {line}: "
        elif prefix:
            prefix += " "
        super().__init__(prefix + message)


class CalibrationError(SourceLocError):
    """Too few usable replicates to fit a source model."""

    def __init__(self, source, n_used, n_censored):
        self.source = source
        self.n_used = n_used
        self.n_censored = n_censored
        super().__init__(
            f"source {source}: only {n_used} usable replicates "
            f"({n_censored} censored); need at least 2"
        )


class CensoredArrivalError(SourceLocError, ValueError):
    """Inference was attempted on an arrival vector with censored entries."""

    def __init__(self, observers=()):
        self.observers = tuple(observers)
        msg = "inference requires all observers infected"
        if self.observers:
            msg += f" (censored: {', '.join(str(o) for o in self.observers)})"
        super().__init__(msg)
