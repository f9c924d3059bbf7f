"""Exception hierarchy shared by all solver and diagnostic modules."""


class CaloricflowError(Exception):
    """Base class for all package errors."""


class ConfigError(CaloricflowError):
    """Malformed target/data specification or run configuration."""


class ChartOverflow(CaloricflowError):
    """Chart evaluation requested outside the admissible chart domain."""


class RetractFailure(CaloricflowError):
    """Point left the retraction radius of the target manifold."""


class NonTangentInput(CaloricflowError):
    """Vector argument is not tangent to the target at the given point."""


class NonTangentSection(CaloricflowError):
    """Section handed to a covariant derivative is not tangent along the map."""


class ZeroInput(CaloricflowError):
    """Operation undefined on the zero field."""


class StepDiverged(CaloricflowError):
    """Time step produced a non-finite or non-retractable state."""


class BlowupSuspected(CaloricflowError):
    """Gradient ceiling exceeded; continuation criterion monitor tripped."""


class BumpTooWide(CaloricflowError):
    """Bump support does not fit inside the central half of the box."""


class ScaleOutOfRange(CaloricflowError):
    """Stereographic scale incompatible with the cap radii or the box."""


class IncommensurateScale(CaloricflowError):
    """Rescaling/translation parameters are not grid-commensurate."""


class InsufficientHistory(CaloricflowError):
    """Not enough stored consecutive slices for a centered time stencil."""


class InsufficientSpan(CaloricflowError):
    """Sample schedule does not cover the span required by a fit."""


class DegenerateFrame(CaloricflowError):
    """Frame orthonormalization failed (near-degenerate projected axes)."""


class NotConverged(CaloricflowError):
    """Flow did not meet the energy criterion required for normalization."""


class ScheduleMismatch(CaloricflowError):
    """Two resolutions sampled on different grids or s-schedules."""
