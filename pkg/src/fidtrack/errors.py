"""Exception hierarchy shared across the pipeline.

The CLI maps these onto exit codes: InputError -> 2, PipelineError -> 3,
AdapterError -> 4.
"""


class FidtrackError(Exception):
    """Base class for all errors raised by this package."""


class InputError(FidtrackError):
    """Malformed or missing input: manifests, plans, scenes, parameter ranges."""


class PipelineError(FidtrackError):
    """A processing stage could not produce a valid result from valid inputs."""


class GeometryError(PipelineError):
    """Degenerate projection geometry (point at or behind the source)."""


class AdapterError(FidtrackError):
    """External segmenter transport failure (spawn, protocol, or unexpected exit)."""
