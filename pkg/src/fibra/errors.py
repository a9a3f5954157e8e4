"""Exception and warning types raised across the pipeline."""


class FibraError(Exception):
    """Base class for all package errors."""


class ValidationError(FibraError, ValueError):
    """Invalid parameters or inconsistent inputs."""


class InputFormatError(ValidationError):
    """A file on disk could not be parsed.

    Carries the offending path and (1-based) line number when known.
    """

    def __init__(self, path, message, line=None):
        self.path = str(path)
        self.line = line
        where = self.path if line is None else f"{self.path}:{line}"
        super().__init__(f"{where}: {message}")


class NearZeroVector(ValidationError):
    pass


class EmptyWindow(ValidationError):
    pass


class TooFewPoints(ValidationError):
    pass


class NoValidWindows(FibraError):
    pass


class TooFewWindows(ValidationError):
    pass


class GridMismatch(ValidationError):
    pass


class JammedBeforeTarget(FibraError):
    """RSA ran out of attempts below 90% of the requested volume fraction."""

    def __init__(self, system, achieved, target):
        self.system = system
        self.achieved = achieved
        self.target = target
        super().__init__(
            f"RSA jammed at volume fraction {achieved:.4f} (target {target:.4f})"
        )


class DegenerateWindow(UserWarning):
    """More than half of the nearest-neighbour distances hit the clamp."""


class DegeneratePair(UserWarning):
    pass
