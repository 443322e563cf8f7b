"""Shared exception hierarchy. Exit-code mapping lives in the CLI."""


class PoisonforgeError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(PoisonforgeError):
    """Invalid configuration, input file, or schema violation."""


class GenerationError(PoisonforgeError):
    """A generator client failed after exhausting retries."""


class OfflineViolation(GenerationError):
    """A network call was attempted while running in offline mode."""


class PoisonSkip(PoisonforgeError):
    """Signal that one example could not be poisoned and should stay benign."""

    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason
