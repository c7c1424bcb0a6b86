"""
Exception types raised by windmpm.  Each family maps to one command-line exit code (see :mod:`windmpm.cli`).
"""

from typing import Optional, Sequence


class WindMpmError(Exception):
    exit_code = 1


class ValidationError(WindMpmError):
    """
    Bad input: scene configuration, material, shapes, observation files.  When several invariants are violated
    at once, ``problems`` holds every message.
    """
    exit_code = 2

    def __init__(self, message: str, problems: Optional[Sequence[str]] = None):
        super().__init__(message)
        self.problems = list(problems) if problems else [message]


class MaterialError(ValidationError):
    pass


class FormatError(ValidationError):
    pass


class SimulationError(WindMpmError):
    exit_code = 3


class InversionError(SimulationError):

    def __init__(self, message: str, particles: Sequence[int] = ()):
        super().__init__(message)
        self.particles = list(particles)


class InstabilityError(SimulationError):

    def __init__(self, message: str, nodes: Sequence[tuple] = ()):
        super().__init__(message)
        self.nodes = list(nodes)


class OptimizationError(WindMpmError):
    """
    Raised when a loss or gradient turns non-finite.  ``partial`` carries whatever was completed (an optimization
    trace or a partial reconstruction report).
    """
    exit_code = 4

    def __init__(self, message: str, partial=None):
        super().__init__(message)
        self.partial = partial


class GradcheckError(WindMpmError):
    exit_code = 5
