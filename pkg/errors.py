"""
QSMC - Error Types

Exception hierarchy shared by the simulation modules and the command line.
Each top-level category maps to a distinct process exit code in main.py.
"""

from typing import Any, Dict, Optional


class QsmcError(Exception):
    """Base class for all errors raised by the package"""

    exit_code = 1


class ConfigError(QsmcError):
    """Invalid or unresolvable configuration"""

    exit_code = 2


class DataError(QsmcError):
    """Dataset could not be loaded or does not match the model schema"""

    exit_code = 3


class NumericFault(QsmcError):
    """
    A numerical invariant was broken during simulation.

    The diagnostics dict carries the state needed to reproduce the fault.
    """

    exit_code = 4

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})

    def __str__(self) -> str:
        base = super().__str__()
        if not self.diagnostics:
            return base
        details = ", ".join(f"{key}={value!r}" for key, value in sorted(self.diagnostics.items()))
        return f"{base} ({details})"


class SamplerFault(NumericFault):
    """A rejection or refinement loop exceeded its iteration cap"""


class BoundViolation(NumericFault):
    """A killing-rate value fell outside the bounds of its layer"""
