"""Principal stratification tools for outcomes truncated by death."""

from .errors import IdentificationError, InfeasibleError, SacekitError, UndefinedEstimateError
from .estimators import (
    ArmObservation,
    AssumptionSet,
    BoundOptions,
    BoundsResult,
    bounds_oracle,
    ive_zero_imputation,
    naive_survivor_contrast,
    sace_bounds,
    trimmed_mean,
)
from .covariate import BinningRule, group_by_covariate, recover_principal_table
from .mixture import EmOptions, MixtureFit, em_fit, identify_strata, sace_candidates
from .strata import (
    Arm,
    OutcomeLaw,
    PopulationSpec,
    PrincipalStratum,
    StratumSpec,
    table1_population,
    true_sace,
    true_survival_rate,
    validate,
)
from .trial import (
    ObservedSummary,
    RecordTable,
    UnitRecord,
    assign_and_observe,
    classify_group,
    empirical_summary,
    expected_observed_summary,
)

__version__ = "0.1.0"
