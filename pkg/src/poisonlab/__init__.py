"""Budgeted data poisoning of offline RL datasets: environments, victims,
TD-error sensitivity, global budget allocation, attacks, detectors and an
experiment harness."""

__version__ = "0.1.0"

from .errors import ConfigError, DataError, NumericalError, PoisonLabError, UnsupportedSurfaceError  # noqa: E402,F401
