from fractions import Fraction

import numpy as np
import pytest

from mlblue.coupling import CouplingStructure, WeightSet, mlmc_structure, mlmc_weights
from mlblue.covmat import (
    CovMatrixEstimate,
    EquivalenceClassPartition,
    LocalizationMap,
    apply_covmat_scalar_estimator,
    apply_entrywise_estimator,
    apply_localized_estimator,
    asy2sample_coefficients,
    class_systems,
    covmat_entrywise_weights,
    covmat_scalar_weights,
    exact_class_systems,
    localization_from_systems,
    localization_from_weights,
    optimal_localization,
    pair_keys,
    product_of_covariances,
    solve_class_systems,
)
from mlblue.exceptions import DimensionMismatch
from mlblue.moments import CovCovTerms
from mlblue.synthetic import FieldHierarchySpec, analytic_moments, sample_coupled, sample_ensemble

SPEC = FieldHierarchySpec(8, cutoffs=(2, np.inf), noise=(0.3, 0.05), length_scale=2.0)


@pytest.fixture(scope="module")
def moments():
    return analytic_moments(SPEC)


class TestCoefficients:
    def test_m4_exact(self):
        assert asy2sample_coefficients(4, exact=True) == (Fraction(15, 8), Fraction(3, 8), -2)

    def test_large_m_limit(self):
        p1, p2, p3 = asy2sample_coefficients(10**6)
        assert p1 == pytest.approx(1.0, rel=1e-5) and abs(p2) < 1e-11 and abs(p3) < 1e-5

    def test_needs_four(self):
        with pytest.raises(ValueError):
            asy2sample_coefficients(3)

    def test_products_unbiased(self, moments):
        # average over many calibration ensembles of size 6
        R, m = 3000, 6
        x = sample_coupled(SPEC, R * m, 11).reshape(R, m, 2, 8)
        est = np.mean([product_of_covariances(xr) for xr in x], axis=0)
        B = np.einsum("llij->lij", moments.cov)
        exact = B[-1] * B
        err = np.abs(est - exact).max() / np.abs(exact).max()
        assert err < 0.06


class TestScalarAndEntrywise:
    def test_scalar_weights_mlmc_nobias(self, moments):
        s = mlmc_structure(2, m=(40, 10))
        w = covmat_scalar_weights(s, moments.averaged_covcov_terms())
        assert w.no_bias_residual(s) < 1e-12 and w.variance > 0

    def test_terms_type_checked(self):
        with pytest.raises(TypeError):
            covmat_scalar_weights(mlmc_structure(2, m=(4, 4)), np.eye(2))

    def test_homogeneous_entrywise_equals_scalar(self):
        s = mlmc_structure(2, m=(30, 6))
        a = np.array([[2.0, 1.6], [1.6, 2.1]])
        b = np.array([[1.0, 0.7], [0.7, 1.2]])
        n = 3
        first = np.broadcast_to(a, (n, n, 2, 2)).copy()
        second = np.broadcast_to(b, (n, n, 2, 2)).copy()
        ew = covmat_entrywise_weights(s, (first, second))
        sw = covmat_scalar_weights(s, CovCovTerms(a * n * n, b * n * n))
        for be, bs in zip(ew.betas, sw.betas):
            np.testing.assert_allclose(be, np.broadcast_to(bs, be.shape), rtol=1e-10)
        assert ew.variance == pytest.approx(sw.variance, rel=1e-10)
        assert ew.no_bias_residual(s) < 1e-12

    def test_entrywise_cap(self):
        s = mlmc_structure(1, m=(4,))
        t = np.ones((3, 3, 1, 1))
        with pytest.raises(ValueError, match="cap"):
            covmat_entrywise_weights(s, (t, t), cap=2)

    def test_entrywise_needs_m2(self):
        s = mlmc_structure(1, m=(1,))
        t = np.ones((2, 2, 1, 1))
        with pytest.raises(ValueError):
            covmat_entrywise_weights(s, (t, t))

    def test_apply_mlmc(self, rng):
        s = mlmc_structure(2, m=(5, 5))
        w = mlmc_weights(s)
        c1 = rng.standard_normal((1, 3, 3))
        c2 = rng.standard_normal((2, 3, 3))
        c1, c2 = c1 + c1.transpose(0, 2, 1), c2 + c2.transpose(0, 2, 1)
        est = apply_covmat_scalar_estimator(w, [c1, c2])
        np.testing.assert_allclose(est.matrix, c1[0] - c2[0] + c2[1], atol=1e-14)
        assert isinstance(est, CovMatrixEstimate) and not est.biased

    def test_apply_entrywise_shape(self, rng):
        s = mlmc_structure(1, m=(4,))
        t = np.ones((2, 2, 1, 1))
        w = covmat_entrywise_weights(s, (t, t))
        with pytest.raises(DimensionMismatch):
            apply_entrywise_estimator(w, [np.zeros((1, 3, 3))])

    def test_psd_flag(self):
        assert CovMatrixEstimate(np.eye(2), False).is_psd
        assert not CovMatrixEstimate(np.diag([1.0, -1.0]), False).is_psd


class TestPartition:
    def test_periodic(self):
        p = EquivalenceClassPartition.periodic_distance(6)
        np.testing.assert_array_equal(p.classes, [0, 1, 2, 3])
        np.testing.assert_array_equal(p.sizes, [6, 12, 12, 6])
        assert p.labels[0, 5] == 1

    def test_roundtrip(self):
        p = EquivalenceClassPartition.periodic_distance(5)
        q = EquivalenceClassPartition.from_dict(p.to_dict())
        np.testing.assert_array_equal(p.labels, q.labels)
        c = EquivalenceClassPartition(np.array([[0, 1], [1, 0]]))
        np.testing.assert_array_equal(EquivalenceClassPartition.from_dict(c.to_dict()).labels,
                                      c.labels)

    def test_invalid(self):
        with pytest.raises(ValueError):
            EquivalenceClassPartition(np.array([[0, 1], [2, 0]]))
        with pytest.raises(TypeError):
            EquivalenceClassPartition(np.zeros((2, 2)))

    def test_pair_keys(self, three_level):
        assert pair_keys(three_level) == [(1, 1), (2, 1), (2, 2), (3, 2), (3, 3)]


def constant_map(structure, partition, value):
    p = sum(structure.sizes)
    return LocalizationMap(partition.classes, tuple(pair_keys(structure)),
                           np.full((partition.classes.size, p), value, dtype=float))


class TestApplyLocalized:
    def test_all_ones_mlmc_is_plain_combination(self, rng):
        s = mlmc_structure(2, m=(5, 5))
        part = EquivalenceClassPartition.periodic_distance(4)
        covs = [rng.standard_normal((p, 4, 4)) for p in s.sizes]
        covs = [c + c.transpose(0, 2, 1) for c in covs]
        # weights (1), (-1, 1) as a localization map constant in space
        loc = localization_from_weights(s, part, mlmc_weights(s))
        est = apply_localized_estimator(loc, part, s, covs)
        np.testing.assert_allclose(est.matrix, covs[0][0] - covs[1][0] + covs[1][1], atol=1e-14)
        assert est.biased

    def test_zero_map(self, rng):
        s = mlmc_structure(2, m=(5, 5))
        part = EquivalenceClassPartition.periodic_distance(4)
        covs = [rng.standard_normal((p, 4, 4)) for p in s.sizes]
        est = apply_localized_estimator(constant_map(s, part, 0.0), part, s, covs)
        np.testing.assert_array_equal(est.matrix, 0.0)

    def test_diagonal_mask(self, rng):
        s = CouplingStructure(1, [(1,)], m=(5,))
        part = EquivalenceClassPartition.periodic_distance(5)
        w = np.zeros((3, 1))
        w[0] = 1.0  # only distance-0 pairs survive
        loc = LocalizationMap(part.classes, tuple(pair_keys(s)), w)
        c = rng.standard_normal((5, 5))
        c = c + c.T
        est = apply_localized_estimator(loc, part, s, [c[None]])
        np.testing.assert_allclose(est.matrix, np.diag(np.diag(c)))


class TestClassSystems:
    def test_single_level_closed_form(self):
        # L = 1: w_c = sum b~ b / sum b~^2 over the class
        s = CouplingStructure(1, [(1,)], m=(6,))
        part = EquivalenceClassPartition.periodic_distance(4)
        rng = np.random.default_rng(0)
        b = rng.standard_normal((4, 4))
        b = b + b.T
        products = rng.uniform(0.5, 1.5, (1, 4, 4))
        products = products + products.transpose(0, 2, 1)
        lhs, rhs = class_systems(s, part, [b[None]], products)
        loc = localization_from_systems(s, part, lhs, rhs)
        for c in range(part.classes.size):
            idx = part.members(c)
            expect = products.ravel()[idx].mean() / (b.ravel()[idx] ** 2).mean()
            assert loc.weights[c, 0] == pytest.approx(expect)

    def test_single_realization_lhs_is_unbiased(self, moments):
        s = mlmc_structure(2, m=(6, 4))
        part = EquivalenceClassPartition.periodic_distance(8)
        lhs_exact, rhs_exact = exact_class_systems(s, part, moments.cov,
                                                   moments.entry_covcov_terms())
        B = np.einsum("llij->lij", moments.cov)
        products = B[-1] * B
        acc = np.zeros_like(lhs_exact)
        R = 1500
        for r in range(R):
            e = sample_ensemble(SPEC, s, 5, r)
            lhs, rhs = class_systems(s, part, e.group_covariance_matrices(), products)
            acc += lhs
        np.testing.assert_allclose(rhs, rhs_exact, rtol=1e-12)
        rel = np.abs(acc / R - lhs_exact).max() / np.abs(lhs_exact).max()
        assert rel < 0.05

    def test_exact_solution_is_class_optimal(self, moments):
        s = mlmc_structure(2, m=(10, 5))
        part = EquivalenceClassPartition.periodic_distance(8)
        lhs, rhs = exact_class_systems(s, part, moments.cov, moments.entry_covcov_terms())
        w, _, _ = solve_class_systems(lhs, rhs)
        rng = np.random.default_rng(3)
        for c in range(part.classes.size):
            def mse(v):
                return v @ lhs[c] @ v - 2 * rhs[c] @ v
            base = mse(w[c])
            for _ in range(50):
                v = w[c] * (1 + 0.01 * rng.choice([-1.0, 1.0], w.shape[1]))
                assert mse(v) >= base - 1e-14 * abs(base)

    def test_ill_conditioned_class_reuses_neighbour(self):
        lhs = np.stack([np.eye(2), np.array([[1.0, 1.0], [1.0, 1.0]]), 2 * np.eye(2)])
        rhs = np.array([[1.0, 2.0], [5.0, 5.0], [2.0, 2.0]])
        with pytest.warns(RuntimeWarning, match="ill-conditioned"):
            w, conds, replaced = solve_class_systems(lhs, rhs, np.array([0, 1, 3]))
        assert replaced == {1: 0}
        np.testing.assert_allclose(w[1], w[0])

    def test_all_ill_conditioned(self):
        with pytest.raises(np.linalg.LinAlgError):
            solve_class_systems(np.zeros((2, 1, 1)), np.ones((2, 1)))

    def test_clip(self, rng):
        s = mlmc_structure(2, m=(10, 5))
        part = EquivalenceClassPartition.periodic_distance(8)
        cal = sample_coupled(SPEC, 8, 1)
        e = sample_ensemble(SPEC, s, 2)
        loc = optimal_localization(s, part, e.group_covariance_matrices(), cal, clip=True)
        assert loc.weights.min() >= 0.0 and loc.weights.max() <= 1.5

    def test_subset_deterministic_in_seed(self):
        s = mlmc_structure(2, m=(10, 5))
        part = EquivalenceClassPartition.periodic_distance(8)
        cal = sample_coupled(SPEC, 8, 1)
        covs = sample_ensemble(SPEC, s, 2).group_covariance_matrices()
        a = optimal_localization(s, part, covs, cal, subset=6, seed=0)
        b = optimal_localization(s, part, covs, cal, subset=6, seed=0)
        c = optimal_localization(s, part, covs, cal, subset=6, seed=1)
        np.testing.assert_array_equal(a.weights, b.weights)
        assert not np.array_equal(a.weights, c.weights)

    def test_calibration_size_checked(self):
        s = mlmc_structure(2, m=(10, 5))
        part = EquivalenceClassPartition.periodic_distance(8)
        covs = sample_ensemble(SPEC, s, 2).group_covariance_matrices()
        with pytest.raises(ValueError, match="m >= 4"):
            optimal_localization(s, part, covs, sample_coupled(SPEC, 3, 1))

    def test_map_dict(self):
        s = mlmc_structure(2, m=(4, 4))
        part = EquivalenceClassPartition.periodic_distance(4)
        d = constant_map(s, part, 0.5).to_dict()
        assert d["2"]["2,1"] == 0.5 and set(d) == {"0", "1", "2"}

    def test_scalar_weight_map_type(self):
        s = mlmc_structure(2, m=(4, 4))
        part = EquivalenceClassPartition.periodic_distance(4)
        loc = localization_from_weights(s, part, WeightSet((np.ones(1), np.ones(2)), np.eye(2)[1]))
        assert loc.weights.shape == (3, 3)
