from .bounds import (
    BoundReport,
    appendixF_bounds,
    appendixF_coverage_test,
    constant_policy_class,
    enumerated_in_sample_regret,
    pointwise_in_sample_regret,
    theorem1_check,
    theorem2_bound,
    theorem2_empirical_check,
)
from .constructions import (
    dr_equivalence_check,
    nn_policy_value_1d,
    theorem3_experiment,
    theorem6_identity_check,
    voronoi_masses,
)
from .decomposition import DecompositionReport, GaussianLinearFactory, regret_decomposition
from .values import in_sample_value, true_value
