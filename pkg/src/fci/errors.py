"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigError(ValueError):
    """A configuration value is out of its legal range or inconsistent."""


class ContractError(ValueError):
    """A caller violated an operation's precondition."""


class NumericError(ArithmeticError):
    """A numeric routine produced or encountered non-finite values."""


class ParseError(ValueError):
    """A file could not be parsed; message carries location where known."""


class ChecksumError(ParseError):
    """Payload checksum does not match the stored digest."""


class VersionError(ParseError):
    """File format version is not supported by this build."""
