"""Exception hierarchy shared across the package."""


class AmbiRephraseError(Exception):
    """Base class for all package errors."""


class ConfigurationError(AmbiRephraseError, ValueError):
    pass


class DomainError(AmbiRephraseError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class ShapeError(AmbiRephraseError, ValueError):
    pass


class ParseError(AmbiRephraseError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class IntegrityError(AmbiRephraseError):
    pass


class CorruptionError(AmbiRephraseError):
    """Checkpoint contents do not match the digests in its manifest."""


class ContractError(AmbiRephraseError):
    """A caller broke a usage contract, e.g. passing an unfrozen VQA model."""


class StrategyError(AmbiRephraseError):
    pass


class TrainingError(AmbiRephraseError):
    def __init__(self, message, iteration=None):
        self.iteration = iteration
        if iteration is not None:
            message = f"{message} (iteration {iteration})"
        super().__init__(message)
