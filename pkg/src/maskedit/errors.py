"""Exception hierarchy shared across the toolkit."""


class MaskEditError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(MaskEditError):
    """Operand shapes are incompatible."""


class EmptyMaskError(MaskEditError):
    """A key mask admits no keys (or a resolved mask is empty)."""


class CoverageError(MaskEditError):
    """Index lists overlap or leave gaps when reassembling token rows."""


class InvalidMaskError(MaskEditError):
    """A mask is unusable for the requested edit (e.g. no background left)."""


class MaskPolicyError(MaskEditError):
    """Target-mask policy could not be evaluated (missing inputs)."""


class DegenerateMapError(MaskEditError):
    """Aggregated attention map has no contrast to threshold."""


class InversionError(MaskEditError):
    """Inversion produced a non-finite latent."""

    def __init__(self, message: str, step_index: int | None = None):
        super().__init__(message)
        self.step_index = step_index


class InterventionError(MaskEditError):
    """An attention hook misbehaved at a named site."""


class InstrumentationError(MaskEditError):
    """A declared attention site was not captured."""


class ScheduleError(MaskEditError):
    """Noise-schedule lookup failed."""


class SegmentationError(MaskEditError):
    """The promptable-segmentation client failed or returned nothing usable."""


class MetricError(MaskEditError):
    """A metric client failed; the sample stays unscored."""


class DatasetError(MaskEditError):
    """Benchmark directory or manifest is malformed."""


class ReportError(MaskEditError):
    """Report generation was asked to summarize nothing."""
