"""Exception hierarchy; each class carries the CLI exit code it maps to."""


class ConceptOPEError(Exception):
    exit_code = 1


class ConfigError(ConceptOPEError, ValueError):
    exit_code = 2


class EnumerationBudgetError(ConceptOPEError, ValueError):
    exit_code = 2


class DataError(ConceptOPEError):
    exit_code = 3


class CoverageError(DataError, ValueError):
    """A behaviour probability is zero where the batch took the action."""


class DegenerateBatchError(DataError, ValueError):
    pass


class IntegrityError(DataError):
    pass


class DivergenceError(ConceptOPEError, FloatingPointError):
    exit_code = 4
