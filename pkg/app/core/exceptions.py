from typing import Optional


class SegmentationError(Exception):
    """Base error for the training engine.

    Mirrors the ``detail`` + code pairing of HTTP exceptions so that the
    command line can turn any failure into a one-line diagnostic.
    """

    code = "error"

    def __init__(self, detail: str, code: Optional[str] = None):
        super().__init__(detail)
        self.detail = detail
        if code is not None:
            self.code = code

    def to_dict(self) -> dict:
        return {"error": self.code, "detail": self.detail}


class DomainError(SegmentationError, ValueError):
    code = "domain_error"


class InfiniteDivergenceError(DomainError):
    code = "infinite_divergence"


class RootNotBracketedError(DomainError):
    code = "root_not_bracketed"


class ShapeError(SegmentationError, ValueError):
    code = "shape_error"


class ConfigError(SegmentationError):
    code = "config_error"


class InfeasibleSpecError(ConfigError):
    code = "infeasible_spec"


class EmptyClassError(SegmentationError):
    code = "empty_class"


class BufferNotReady(SegmentationError):
    """Raised when a batch is requested from an under-filled buffer. Callers retry."""

    code = "buffer_not_ready"


class CheckpointError(SegmentationError):
    code = "checkpoint_error"


class PipelineError(SegmentationError):
    code = "pipeline_error"
