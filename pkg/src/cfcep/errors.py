"""Exception and warning types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration file, key, or value."""


class NumericalError(ArithmeticError):
    """A numerical routine diverged or hit an unstable regime."""


class FormatError(ValueError):
    """A binary model/dataset file is malformed or incompatible."""


class WarmupError(RuntimeError):
    """Insufficient estimate history to build predictor features."""


class UnsupportedDopplerError(ValueError):
    """Normalized Doppler value outside the supported mobility range."""


class StatisticsWarning(UserWarning):
    """Monte-Carlo estimate based on fewer samples than contracted."""
