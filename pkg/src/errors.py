"""
Exception hierarchy shared by every module of the power-aware serving runtime.
"""

from __future__ import annotations

from typing import Any


class ServingError(Exception):
    """Base class for all runtime errors."""


class ConfigError(ServingError):
    """Invalid configuration: scenario, grid, profile or operating point."""


class RangeError(ConfigError):
    """A power cap or knob value outside the platform range."""


class DataError(ServingError):
    """Empty, malformed or incompatible dataset or model file."""


class BackendError(ServingError):
    """A measurement backend failed while sweeping."""


class SimulationError(ServingError):
    """Failure while running a scenario."""


class CalibrationError(ServingError):
    """Calibration did not reach tolerance within its iteration budget."""

    def __init__(self, message: str, residuals: dict[str, Any] | None = None):
        super().__init__(message)
        self.residuals = residuals or {}


# CLI exit codes per error class
EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, DataError):
        return EXIT_DATA
    return EXIT_RUNTIME
