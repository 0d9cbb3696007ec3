"""
Exception taxonomy for dipwell.
Physics code raises these; only the command line maps them to exit codes.
"""


class DipwellError(Exception):
    """Base class for all dipwell failures."""


class ConfigError(DipwellError, ValueError):
    """Invalid or unknown configuration entry."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class FieldFormatError(DipwellError, ValueError):
    """Binary field dump or state file does not match the expected layout."""


class CollapseError(DipwellError):
    """Propagation diverged (NaN, runaway density or energy)."""

    def __init__(self, message, time=None, step=None):
        super().__init__(message)
        self.time = time
        self.step = step


class IllConditionedAnsatzError(DipwellError):
    """TDVP matrix is singular beyond the pseudo-inverse floor."""

    def __init__(self, message, conditioning=None):
        super().__init__(message)
        self.conditioning = conditioning


class QuadratureError(DipwellError):
    """Adaptive quadrature of a dipolar matrix element did not converge."""

    def __init__(self, message, pair=None):
        super().__init__(message)
        self.pair = pair


class NewtonError(DipwellError):
    """Newton iteration for a fixed point did not converge."""

    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class BranchLostError(NewtonError):
    """Continuation could not place a new point even at the minimum step."""


# Process exit codes used by the command line
class ExitCode:
    OK = 0
    USAGE = 1
    PLATEAU = 2
    COLLAPSE = 3
    NEWTON = 4
