"""Exception types shared across the package."""


class CountgenError(Exception):
    """Base class for all countgen errors."""


class ParseError(CountgenError):
    """Malformed annotation text (carries the offending line number)."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class BoundsError(CountgenError):
    """A dot coordinate lies outside the scene."""


class FormatError(CountgenError):
    """Bad magic, truncated payload, or inconsistent dimensions in a binary file."""


class ConfigError(CountgenError):
    """Invalid configuration value."""


class ShapeError(CountgenError):
    """Array arguments have inconsistent shapes."""


class OrderingError(CountgenError):
    """Timestep arguments violate t > t_prev >= 0."""


class SamplingError(CountgenError):
    """Non-finite values encountered during sampling (carries the timestep)."""

    def __init__(self, t: int, message: str):
        super().__init__(f"t={t}: {message}")
        self.t = t


class StalenessError(CountgenError):
    """A pipeline step checkpoint exists but its provenance cannot be verified."""


class PipelineStepError(CountgenError):
    """A pipeline step failed (carries the step name)."""

    def __init__(self, step: str, message: str):
        super().__init__(f"step '{step}': {message}")
        self.step = step
