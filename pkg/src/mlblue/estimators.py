"""Estimator objects in the scikit-learn style.

Each estimator is configured by constructor parameters, learns its weights
from calibration data in :meth:`fit` and combines the Monte Carlo
statistics of an independent :class:`~mlblue.moments.Ensemble` in
:meth:`estimate`.  Calibration data are either samples coupled across all
levels, shape (ne, L) or (ne, L, n), or exact moments of a synthetic model.

Reusing the combined ensemble for calibration correlates weights and
statistics; :meth:`fit_estimate` does so on request and flags the weights
as biased.
"""

from dataclasses import replace

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .coupling import (
    COND_CAP,
    GroupMomentSet,
    apply_scalar_estimator,
    check_structure,
    optimal_scalar_weights,
    solve_weights,
)
from .covmat import (
    CovMatrixEstimate,
    EquivalenceClassPartition,
    apply_covmat_scalar_estimator,
    apply_entrywise_estimator,
    apply_localized_estimator,
    class_systems,
    covmat_entrywise_weights,
    covmat_scalar_weights,
    localization_from_systems,
    product_of_covariances,
)
from .moments import (
    Ensemble,
    averaged_covcov_terms,
    covcov_scalar_from_samples,
    entry_covcov_terms_from_samples,
    mc_cov,
)
from .synthetic import FieldMoments, GaussianMoments
from .vector import (
    OrthonormalBasis,
    apply_vector_estimator,
    field_weights_nd,
    matrix_weights,
    scalar_weights_nd,
    wfield_weights,
)


def _coupled(calibration, L, vector):
    x = np.asarray(calibration, dtype=float)
    want = 3 if vector else 2
    if x.ndim != want or x.shape[1] != L:
        shape = "(ne, L, n)" if vector else "(ne, L)"
        raise ValueError(f"calibration samples must have shape {shape} with L={L}, got {x.shape}")
    if x.shape[0] < 2:
        raise ValueError("calibration needs at least 2 members")
    return x


def _check_ensemble(ensemble, structure):
    if not isinstance(ensemble, Ensemble):
        raise TypeError("estimate() expects an Ensemble")
    if ensemble.structure.groups != structure.groups:
        raise ValueError("ensemble coupling groups differ from the estimator's structure")
    return ensemble


class _MultilevelEstimator(BaseEstimator):
    """Shared fit/estimate plumbing."""

    def _structure_for(self, ensemble):
        s = self.structure
        return s.with_m(ensemble.m) if s.m is None or s.m != ensemble.m else s

    def fit_estimate(self, ensemble):
        """Fit on the samples of ``ensemble`` itself and combine them (biased weights)."""
        self.fit(self._self_calibration(ensemble), structure=self._structure_for(ensemble))
        self.weights_ = replace(self.weights_, biased=True)
        return self.estimate(ensemble)


class MLBLUEMean(_MultilevelEstimator):
    """Multilevel BLUE of alpha^T E[Z] for scalar outputs.

    Parameters
    ----------
    structure : CouplingStructure
        Coupling groups with the sample sizes used for estimation.
    alpha : array-like of shape (L,), optional
        Target combination of levels; e_L by default.
    cond_cap : float
        Largest accepted condition number of a group covariance.

    Attributes
    ----------
    weights_ : WeightSet
    variance_ : float
        Predicted variance alpha^T phi^-1 alpha.
    moments_ : GroupMomentSet
    """

    def __init__(self, structure, alpha=None, cond_cap=COND_CAP):
        self.structure = structure
        self.alpha = alpha
        self.cond_cap = cond_cap

    def fit(self, calibration, structure=None):
        s = structure or self.structure
        check_structure(s, need_m=True)
        if isinstance(calibration, GaussianMoments):
            moments = calibration.group_moments(s)
        elif isinstance(calibration, GroupMomentSet):
            moments = calibration
        else:
            x = _coupled(calibration, s.L, vector=False)
            moments = GroupMomentSet.from_full(np.atleast_2d(np.cov(x, rowvar=False)), s)
        self.moments_ = moments
        self.weights_ = optimal_scalar_weights(s, moments, self.alpha, self.cond_cap)
        self.variance_ = self.weights_.variance
        return self

    def estimate(self, ensemble):
        check_is_fitted(self, "weights_")
        _check_ensemble(ensemble, self.structure)
        return float(apply_scalar_estimator(self.weights_, ensemble.group_means()))

    def _self_calibration(self, ensemble):
        mats = tuple(np.atleast_2d(np.cov(g, rowvar=False)) for g in ensemble.groups)
        return GroupMomentSet(mats, "sample")


class MLBLUECovariance(_MultilevelEstimator):
    """Multilevel BLUE of the variance of the finest level (scalar outputs).

    The weights come from the covariance of the MC variance estimators,
    which involves fourth moments; ``fit`` takes coupled samples (ne, L)
    or exact :class:`GaussianMoments`.
    """

    def __init__(self, structure, alpha=None, cond_cap=COND_CAP):
        self.structure = structure
        self.alpha = alpha
        self.cond_cap = cond_cap

    def fit(self, calibration, structure=None):
        s = structure or self.structure
        check_structure(s, need_m=True)
        if any(v < 2 for v in s.m):
            raise ValueError("covariance estimation needs m >= 2 in every group")
        if isinstance(calibration, GaussianMoments):
            terms = calibration.variance_covcov_terms()
        else:
            terms = covcov_scalar_from_samples(_coupled(calibration, s.L, vector=False))
        self.terms_ = terms
        self.weights_ = solve_weights(s, terms.group_matrices(s), self.alpha, self.cond_cap)
        self.variance_ = self.weights_.variance
        return self

    def estimate(self, ensemble):
        check_is_fitted(self, "weights_")
        _check_ensemble(ensemble, self.structure)
        return float(apply_scalar_estimator(self.weights_, [mc_cov(g) for g in ensemble.groups]))

    def fit_estimate(self, ensemble):
        raise NotImplementedError(
            "fourth moments need a coupled calibration ensemble spanning all levels")


class VectorMLBLUE(_MultilevelEstimator):
    """Multilevel BLUE of the mean of a vector quantity.

    Parameters
    ----------
    structure : CouplingStructure
    flavor : {"scalar", "field", "wfield", "matrix"}
    basis : {"identity", "dct"} or OrthonormalBasis
        Basis of the W-field flavor.
    alpha : array-like of shape (L,), optional
    """

    def __init__(self, structure, flavor="field", basis="dct", alpha=None, cond_cap=COND_CAP):
        self.structure = structure
        self.flavor = flavor
        self.basis = basis
        self.alpha = alpha
        self.cond_cap = cond_cap

    def _basis(self, n):
        if isinstance(self.basis, OrthonormalBasis):
            return self.basis
        return OrthonormalBasis.from_name(self.basis, n)

    def fit(self, calibration, structure=None):
        s = structure or self.structure
        check_structure(s, need_m=True)
        if isinstance(calibration, FieldMoments):
            moments = calibration
        else:
            x = _coupled(calibration, s.L, vector=True)
            xt = x - x.mean(axis=0)
            cov = np.einsum("sai,sbj->abij", xt, xt) / (x.shape[0] - 1)
            moments = FieldMoments(x.mean(axis=0), cov)
        self.moments_ = moments
        if self.flavor == "scalar":
            w = scalar_weights_nd(s, moments.group_elementwise(s), self.alpha, self.cond_cap)
        elif self.flavor == "field":
            w = field_weights_nd(s, moments.group_elementwise(s), self.alpha, self.cond_cap)
        elif self.flavor == "wfield":
            basis = self._basis(moments.n)
            w = wfield_weights(s, moments.group_elementwise(s, basis), self.alpha, basis,
                               self.cond_cap)
        elif self.flavor == "matrix":
            blocks = [moments.group_block(s, k) for k in range(1, s.K + 1)]
            w = matrix_weights(s, blocks, self.alpha, cond_cap=self.cond_cap)
        else:
            raise ValueError(f"unknown flavor {self.flavor!r}")
        self.weights_ = w
        self.variance_ = w.variance
        return self

    def estimate(self, ensemble):
        check_is_fitted(self, "weights_")
        _check_ensemble(ensemble, self.structure)
        if ensemble.is_scalar:
            raise ValueError("VectorMLBLUE needs a vector ensemble (m, p, n)")
        return apply_vector_estimator(self.weights_, ensemble.group_means())


class CovarianceMatrixMLBLUE(_MultilevelEstimator):
    """Multilevel estimator of the finest-level covariance matrix.

    Parameters
    ----------
    structure : CouplingStructure
    weights : {"scalar", "entrywise"}
        One weight per (group, level), or one per matrix entry as well.
    """

    def __init__(self, structure, weights="scalar", alpha=None, cond_cap=COND_CAP):
        self.structure = structure
        self.weights = weights
        self.alpha = alpha
        self.cond_cap = cond_cap

    def fit(self, calibration, structure=None):
        s = structure or self.structure
        check_structure(s, need_m=True)
        exact = isinstance(calibration, FieldMoments)
        if not exact:
            calibration = _coupled(calibration, s.L, vector=True)
        if self.weights == "scalar":
            terms = calibration.averaged_covcov_terms() if exact else averaged_covcov_terms(calibration)
            w = covmat_scalar_weights(s, terms, self.alpha, self.cond_cap)
        elif self.weights == "entrywise":
            terms = (calibration.entry_covcov_terms() if exact
                     else entry_covcov_terms_from_samples(calibration))
            w = covmat_entrywise_weights(s, terms, self.alpha, cond_cap=self.cond_cap)
        else:
            raise ValueError(f"unknown weights {self.weights!r}")
        self.weights_ = w
        self.variance_ = w.variance
        return self

    def estimate(self, ensemble):
        check_is_fitted(self, "weights_")
        _check_ensemble(ensemble, self.structure)
        covs = ensemble.group_covariance_matrices()
        if self.weights == "scalar":
            return apply_covmat_scalar_estimator(self.weights_, covs)
        return CovMatrixEstimate(apply_entrywise_estimator(self.weights_, covs), False,
                                 {"weights": "entrywise"})

    def fit_estimate(self, ensemble):
        raise NotImplementedError(
            "fourth moments need a coupled calibration ensemble spanning all levels")


class LocalizedCovarianceMLBLUE(_MultilevelEstimator):
    """Optimally localized multilevel covariance-matrix estimator.

    ``fit`` takes an independent calibration ensemble coupling all levels
    (m >= 4, shape (m, L, n)); it estimates the products of true
    covariances.  ``estimate`` solves one small system per equivalence
    class using the ensemble being combined, then applies the resulting
    Schur-product localization.  The estimate is biased.

    Parameters
    ----------
    structure : CouplingStructure
    partition : EquivalenceClassPartition, optional
        Periodic distance classes by default.
    subset : int, optional
        Pairs sampled per class; the full class by default.
    clip : bool
        Clip localization weights to [0, 1.5].
    seed : int
        Seed of the class-subset sampling.
    """

    def __init__(self, structure, partition=None, subset=None, clip=False, seed=0):
        self.structure = structure
        self.partition = partition
        self.subset = subset
        self.clip = clip
        self.seed = seed

    def fit(self, calibration, structure=None):
        s = structure or self.structure
        check_structure(s, need_m=True)
        x = np.asarray(calibration, dtype=float)
        if x.ndim != 3 or x.shape[1] != s.L:
            raise ValueError(f"calibration must have shape (m, L, n), got {x.shape}")
        if x.shape[0] < 4:
            raise ValueError(f"the calibration ensemble needs m >= 4, got {x.shape[0]}")
        self.products_ = product_of_covariances(x)
        self.partition_ = (self.partition if self.partition is not None
                           else EquivalenceClassPartition.periodic_distance(x.shape[2]))
        return self

    def estimate(self, ensemble):
        check_is_fitted(self, "products_")
        _check_ensemble(ensemble, self.structure)
        s = ensemble.structure
        covs = ensemble.group_covariance_matrices()
        lhs, rhs = class_systems(s, self.partition_, covs, self.products_, self.subset,
                                 self.seed)
        self.localization_ = localization_from_systems(s, self.partition_, lhs, rhs, self.clip)
        return apply_localized_estimator(self.localization_, self.partition_, s, covs)
