"""Exception types shared across the package."""


class HCTError(Exception):
    pass


class DimensionError(HCTError, ValueError):
    """Array shapes or sizes violate an operation's contract."""


class ConfigError(HCTError, ValueError):
    """Invalid model, training or run configuration."""


class DataError(HCTError, ValueError):
    """Input values are unusable (NaN, out of domain)."""


class FormatError(HCTError, ValueError):
    """An on-disk dataset or checkpoint is malformed."""


class NumericalError(HCTError, RuntimeError):
    """Training produced a non-finite loss."""
