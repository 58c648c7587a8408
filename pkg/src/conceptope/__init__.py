"""Concept-based off-policy evaluation."""

from conceptope.core import (
    Batch,
    MDPSpec,
    TabularPolicy,
    Trajectory,
    Transition,
    enumerate_value,
    rollout,
    rollout_batch,
)
from conceptope.errors import (
    ConceptOPEError,
    ConfigError,
    CoverageError,
    DataError,
    DegenerateBatchError,
    DivergenceError,
    IntegrityError,
)
from conceptope.estimators import EstimateReport, RatioTables, estimate

__version__ = "0.1.0"
