"""Exception types shared across the package."""


class HmemError(Exception):
    """Base class for all package-specific errors."""


class ParseError(HmemError):
    """A data file line could not be parsed."""

    def __init__(self, message: str, path=None, line_no: int | None = None):
        loc = ""
        if path is not None:
            loc = f" ({path}" + (f":{line_no}" if line_no is not None else "") + ")"
        super().__init__(message + loc)
        self.path = path
        self.line_no = line_no


class VocabError(HmemError):
    """A symbol is missing from an explicitly supplied vocabulary."""


class ShapeError(HmemError):
    """Operands have incompatible shapes or binding kinds."""


class StabilityError(HmemError):
    """The harmony objective is not strictly concave for the given weights."""


class NumericError(HmemError):
    """A non-finite value appeared where finite numbers are required."""


class CheckpointFormatError(HmemError):
    """A checkpoint file is corrupt, truncated, or of an unknown version."""


class ProtocolError(HmemError):
    """An evaluation query violates the ranking protocol."""


class ConfigError(HmemError):
    """A configuration value is invalid or inconsistent."""
