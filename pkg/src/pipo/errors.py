class PipoError(Exception):
    """Base class for all runtime errors raised by this package."""


class InfeasibleError(PipoError):
    """No offload/pipeline configuration fits the given hardware."""


class OutOfMemory(PipoError):
    """An arena allocation would exceed its capacity."""

    def __init__(self, arena, requested, occupancy, capacity):
        super().__init__(
            f"{arena}: cannot allocate {requested} bytes "
            f"(occupancy {occupancy} / capacity {capacity})"
        )
        self.arena = arena
        self.requested = requested
        self.occupancy = occupancy
        self.capacity = capacity


class IoError(PipoError, OSError):
    """A tier read/write failed. ``stage`` and ``offset`` locate the failure."""

    def __init__(self, message, stage=None, offset=None):
        detail = message
        if stage is not None:
            detail += f" [stage={stage}"
            if offset is not None:
                detail += f", offset={offset}"
            detail += "]"
        super().__init__(detail)
        self.stage = stage
        self.offset = offset


class FormatError(PipoError, ValueError):
    """Malformed blob file or trace."""


class LayoutError(PipoError, ValueError):
    """Inconsistent tensor directory for a merged layer."""


class ShapeError(PipoError, ValueError):
    """Operand dimensions do not match."""
