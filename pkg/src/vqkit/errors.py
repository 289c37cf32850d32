class VQKitError(Exception):
    """Base class for all vqkit errors."""


class ContractViolation(VQKitError):
    """An operation was called with arguments that violate its contract."""


class NumericFailure(VQKitError):
    """A computation produced NaN/Inf or otherwise failed numerically."""


class DegenerateInput(VQKitError):
    """Input is degenerate for the requested operation (e.g. zero-norm vector under cosine)."""


class ConfigError(VQKitError):
    """Experiment configuration is malformed or contains unknown keys."""
