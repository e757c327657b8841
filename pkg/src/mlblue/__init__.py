"""Multilevel best linear unbiased estimators (MLBLUE).

Estimators of expectations, variances and covariance matrices that combine
coupled samples of a hierarchy of models with different costs, together
with sample allocation and synthetic Gaussian oracles for verification.
"""

__version__ = "0.1.0"

from .allocation import (
    Allocation,
    AllocationProblem,
    CovarianceVariance,
    MeanVariance,
    allocate,
    allocate_budget,
    allocate_target,
    mlmc_cov_allocation,
    mlmc_covariance_bounds,
)
from .coupling import (
    CouplingStructure,
    GroupMomentSet,
    WeightSet,
    apply_scalar_estimator,
    extend,
    kkt_solve,
    mlblue_variance,
    mlmc_structure,
    mlmc_weights,
    optimal_scalar_weights,
    restrict,
    validate,
)
from .covmat import (
    CovMatrixEstimate,
    EquivalenceClassPartition,
    LocalizationMap,
    apply_localized_estimator,
    asy2sample_coefficients,
    covmat_entrywise_weights,
    covmat_scalar_weights,
    optimal_localization,
)
from .estimators import (
    CovarianceMatrixMLBLUE,
    LocalizedCovarianceMLBLUE,
    MLBLUECovariance,
    MLBLUEMean,
    VectorMLBLUE,
)
from .exceptions import (
    DimensionMismatch,
    InfeasibleAllocation,
    InvalidStructureError,
    MLBLUEError,
    SingularGroupCovariance,
    SingularPhi,
    SingularSaddlePoint,
    UnreachableTarget,
)
from .moments import (
    CovCovMatrix,
    CovCovTerms,
    Ensemble,
    averaged_covcov_terms,
    covcov_matrix_averaged,
    covcov_scalar,
    mc_cov,
    mc_fourth,
    mc_mean,
)
from .synthetic import (
    FieldHierarchySpec,
    GaussianHierarchySpec,
    analytic_moments,
    replicate_estimator,
    sample_ensemble,
)
from .vector import (
    OrthonormalBasis,
    VectorWeightSet,
    apply_vector_estimator,
    field_weights_nd,
    matrix_weights,
    scalar_weights_nd,
    wfield_weights,
)
