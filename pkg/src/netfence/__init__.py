"""Congestion-policing DoS defense: protocol library and discrete-event simulator."""

from .params import DEFAULTS, Parameters

__version__ = "0.1.0"

__all__ = ["DEFAULTS", "Parameters", "__version__"]
