"""Model-based recursive partitioning for subgroup identification in dose-finding trials."""

from .dose_models import (DoseResponseSpec, Family, FitError, FittedDoseModel, TrialData,
                          estimate_med, fit_model, log_likelihood, treatment_effect)
from .stability import InstabilityResult, ParmRestriction, instability_tests
from .tree import MobControl, MobTree, deserialize, dumps, grow, loads, predict, route, serialize

__all__ = [
    "DoseResponseSpec", "Family", "FitError", "FittedDoseModel", "TrialData",
    "estimate_med", "fit_model", "log_likelihood", "treatment_effect",
    "InstabilityResult", "ParmRestriction", "instability_tests",
    "MobControl", "MobTree", "deserialize", "dumps", "grow", "loads", "predict", "route",
    "serialize",
]
