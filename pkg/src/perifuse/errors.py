"""Error taxonomy shared by the library and the CLI exit-code mapping."""


class PerifuseError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(PerifuseError):
    """Invalid or inconsistent run configuration."""


class DataError(PerifuseError):
    """Malformed or incomplete input data (manifests, images, score files)."""


class NumericError(PerifuseError):
    """Numeric degeneracy: non-finite values, zero-norm templates, failed fits."""
