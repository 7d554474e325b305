"""Exception taxonomy shared by all conceptwm modules."""


class ConceptWMError(Exception):
    """Base class for all conceptwm errors."""


class DimensionError(ConceptWMError, ValueError):
    """Array/tensor shape does not match the operation's contract."""


class PayloadError(ConceptWMError, ValueError):
    """Watermark message length or content is invalid."""


class ConfigError(ConceptWMError, ValueError):
    """Configuration value out of range or unknown."""


class ValidationError(ConceptWMError, ValueError):
    """Input data fails a precondition (non-finite pixels, empty dataset, ...)."""


class TrainingError(ConceptWMError, RuntimeError):
    """Training diverged or otherwise failed; carries the failing step index."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class AttackError(ConceptWMError, RuntimeError):
    """PGD produced a non-finite gradient; carries the failing step index."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class ProtocolError(ConceptWMError, RuntimeError):
    """Experimental protocol violated (e.g. concept and reference pools overlap)."""


class ContractViolationError(ConceptWMError, RuntimeError):
    """A frozen artifact was mutated."""


class VocabularyError(ConceptWMError, KeyError):
    """Prompt token missing from the embedding table."""


class InfeasibleFprError(ConceptWMError, ValueError):
    """Requested FPR is below the minimum achievable for the message length."""

    def __init__(self, message: str, min_achievable_fpr: float):
        super().__init__(message)
        self.min_achievable_fpr = min_achievable_fpr


class DependencyError(ConceptWMError, RuntimeError):
    """Pipeline stage inputs missing; carries the ordered list of required stages."""

    def __init__(self, message: str, missing_stages: list[str]):
        super().__init__(message)
        self.missing_stages = list(missing_stages)
