"""Fiducial marker localization and residual-motion analysis for CBCT projection stacks."""

__version__ = "0.1.0"

from .errors import AdapterError, FidtrackError, GeometryError, InputError, PipelineError

__all__ = [
    "__version__",
    "FidtrackError",
    "InputError",
    "PipelineError",
    "GeometryError",
    "AdapterError",
]
