"""Exception types shared across the toolkit."""


class SegShieldError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(SegShieldError):
    """Shapes of paired fields/masks/images do not agree."""


class ConfigurationError(SegShieldError):
    """A config value is out of its valid range or inconsistent."""


class IngestionError(SegShieldError):
    """A dataset on disk is missing files or malformed."""


class MissingPerturbationError(SegShieldError):
    """A per-sample perturbation table has no entry for the requested id."""


class NonFiniteLossError(SegShieldError):
    """Training produced a NaN/Inf loss; carries a diagnostic snapshot."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
