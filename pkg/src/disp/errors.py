"""
Exception hierarchy for the pruning pipeline.

The CLI maps these onto exit codes: usage/config problems exit 2,
everything that breaks a contract of the math exits 1.
"""

from typing import Any, Dict, Optional


class DispError(Exception):
    """Base class for every error raised by the package"""


class DimensionError(DispError, ValueError):
    """Tensor shapes do not agree for the requested operation"""


class ContractViolation(DispError):
    """A pre- or postcondition of an operation was broken"""


class ConfigError(DispError, ValueError):
    """A configuration value is invalid"""


class UsageError(DispError):
    """The caller asked for something that cannot be done with the given input"""


class NonFiniteLossError(DispError):
    """Training produced a NaN or infinite loss"""

    def __init__(self, message: str, iteration: int, diagnostics: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.iteration = iteration
        self.diagnostics = diagnostics or {}

    def __str__(self) -> str:
        base = super().__str__()
        if not self.diagnostics:
            return f"{base} (iteration {self.iteration})"
        details = ", ".join(f"{k}={v}" for k, v in self.diagnostics.items())
        return f"{base} (iteration {self.iteration}; {details})"
