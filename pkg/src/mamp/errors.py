class ConfigError(ValueError):
    """Invalid or unknown configuration."""

    exit_code = 2


class DataError(ValueError):
    """A corpus, manifest or sequence file could not be parsed."""

    exit_code = 3


class NumericalError(RuntimeError):
    """Training produced a non-finite value."""

    exit_code = 4
