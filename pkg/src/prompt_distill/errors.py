"""Exception hierarchy shared by every module of the package."""


class PromptDistillError(Exception):
    """Base class for all package errors."""


class DomainError(PromptDistillError, ValueError):
    """An argument lies outside the domain of a numerical operation."""


class ShapeError(PromptDistillError, ValueError):
    """Tensor dimensions do not line up."""


class ConfigError(PromptDistillError, ValueError):
    """A configuration field is missing, unknown or violates an invariant."""


class DataError(PromptDistillError, ValueError):
    """A dataset cannot satisfy the request (empty, too few samples, ...)."""


class TokenizationError(PromptDistillError, KeyError):
    """A word is not in the closed vocabulary."""

    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class CacheIntegrityError(PromptDistillError, ValueError):
    """A persisted artifact is corrupt, stale or from an unknown format."""


class StageError(PromptDistillError, RuntimeError):
    """A pipeline stage failed."""
