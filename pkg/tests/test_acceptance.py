"""Acceptance criteria 1-11, each recorded as one PASS/FAIL line in the terminal summary."""

import json
import time

import numpy as np
import pytest

from mlblue.allocation import (
    AllocationProblem,
    MeanVariance,
    allocate_budget,
    mlmc_cov_allocation,
    mlmc_covariance_bounds,
)
from mlblue.cli import main
from mlblue.coupling import (
    CouplingStructure,
    GroupMomentSet,
    kkt_solve,
    mlmc_structure,
    optimal_scalar_weights,
)
from mlblue.covmat import asy2sample_coefficients
from mlblue.estimators import (
    CovarianceMatrixMLBLUE,
    MLBLUECovariance,
    MLBLUEMean,
    VectorMLBLUE,
)
from mlblue.moments import averaged_covcov_naive, averaged_covcov_terms, covcov_scalar
from mlblue.synthetic import (
    FieldHierarchySpec,
    GaussianHierarchySpec,
    analytic_moments,
    sample_coupled,
    sample_ensemble,
    summarize,
)
from mlblue.vector import (
    OrthonormalBasis,
    field_weights_nd,
    matrix_weights,
    scalar_weights_nd,
    wfield_weights,
)

from conftest import hetero_field_spec, random_instance

R = 10_000
GAUSS = GaussianHierarchySpec(mu=(1.0, 1.5, 2.0), sigma=(1.0, 1.2, 1.5), rho=(0.9, 0.95, 0.97))
NESTED = CouplingStructure(3, [(1,), (1, 2), (2, 3), (3,)], m=(40, 20, 10, 5))
THREE_LEVEL = CouplingStructure(3, [(1,), (1, 2), (2, 3)], m=(64, 32, 16))


def test_criterion_1_weights_match_kkt(acceptance):
    rng = np.random.default_rng(1)
    instances = [random_instance(rng, int(rng.integers(1, 5)), int(rng.integers(1, 6)))
                 for _ in range(50)]
    worst = 0.0
    start = time.perf_counter()
    for s, covs in instances:
        moments = GroupMomentSet(covs)
        alpha = rng.standard_normal(s.L)
        w = optimal_scalar_weights(s, moments, alpha)
        wk, _ = kkt_solve(s, moments, alpha)
        worst = max(worst, np.abs(w.flat - wk.flat).max() / np.abs(wk.flat).max())
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-10 and elapsed < 1.0
    acceptance(1, ok, f"max rel diff {worst:.2e}, {elapsed:.3f} s for 50 instances")
    assert ok


@pytest.fixture(scope="module")
def scalar_replications():
    """R ensembles of the scalar Gaussian model; mean and variance estimators share them."""
    mom = analytic_moments(GAUSS)
    mean_est = MLBLUEMean(THREE_LEVEL).fit(mom)
    var_est = MLBLUECovariance(THREE_LEVEL).fit(mom)
    start = time.perf_counter()
    means, variances = [], []
    cache = {}
    for r in range(R):
        ens = sample_ensemble(GAUSS, THREE_LEVEL, 2024, r, cache)
        means.append(mean_est.estimate(ens))
        variances.append(var_est.estimate(ens))
    elapsed = time.perf_counter() - start
    return {
        "scalar mean": (summarize(np.array(means), GAUSS.mu[-1]), GAUSS.mu[-1],
                        mean_est.variance_),
        "scalar covariance": (summarize(np.array(variances), GAUSS.sigma[-1] ** 2),
                              GAUSS.sigma[-1] ** 2, var_est.variance_),
    }, elapsed


@pytest.fixture(scope="module")
def field_replications():
    """R ensembles of the n=16 field model; all vector flavors and the covmat estimator."""
    spec = hetero_field_spec()
    mom = analytic_moments(spec)
    estimators = {f"vector mean {f}": VectorMLBLUE(NESTED, flavor=f).fit(mom)
                  for f in ("scalar", "field", "wfield", "matrix")}
    estimators["covariance matrix scalar"] = CovarianceMatrixMLBLUE(NESTED).fit(mom)
    targets = {k: mom.mean[-1] for k in estimators}
    targets["covariance matrix scalar"] = mom.cov[-1, -1]
    values = {k: [] for k in estimators}
    start = time.perf_counter()
    cache = {}
    for r in range(R):
        ens = sample_ensemble(spec, NESTED, 4048, r, cache)
        for k, est in estimators.items():
            out = est.estimate(ens)
            values[k].append(getattr(out, "matrix", out))
    elapsed = time.perf_counter() - start
    return {k: (summarize(np.array(values[k]), targets[k]), targets[k], estimators[k].variance_)
            for k in estimators}, elapsed


@pytest.mark.slow
def test_criterion_2_unbiasedness(acceptance, scalar_replications, field_replications):
    lines, ok = [], True
    for results, _ in (scalar_replications, field_replications):
        for name, (res, target, _) in results.items():
            z = np.max(np.abs(np.asarray(res.mean) - target) / np.asarray(res.se_mean))
            ok &= bool(z <= 4.0)
            lines.append(f"{name} max|z|={z:.2f}")
    acceptance(2, ok, f"R={R}; " + ", ".join(lines))
    assert ok


@pytest.mark.slow
def test_criterion_3_variance_prediction(acceptance, scalar_replications, field_replications):
    lines, ok = [], True
    for results, elapsed in (scalar_replications, field_replications):
        per_flavor = elapsed / len(results)
        ok &= per_flavor < 60.0
        for name, (res, _, predicted) in results.items():
            rel = (res.variance - predicted) / predicted
            ok &= bool(abs(rel) <= 0.05)
            lines.append(f"{name} {100 * rel:+.2f}%")
    acceptance(3, ok, f"R={R}; " + ", ".join(lines))
    assert ok


def test_criterion_4_class_nesting(acceptance):
    mom = analytic_moments(hetero_field_spec())
    s = NESTED
    basis = OrthonormalBasis.dct(mom.n)
    v = {
        "scalar": scalar_weights_nd(s, mom.group_elementwise(s)).variance,
        "field": field_weights_nd(s, mom.group_elementwise(s)).variance,
        "wfield": wfield_weights(s, mom.group_elementwise(s, basis), basis=basis).variance,
        "matrix": matrix_weights(s, [mom.group_block(s, k) for k in range(1, 5)]).variance,
    }
    tol = 1e-12 * v["scalar"]
    gaps = [v["wfield"] - v["matrix"], v["field"] - v["wfield"], v["scalar"] - v["field"]]
    ok = all(g >= -tol for g in gaps)
    acceptance(4, ok, "matrix {matrix:.5f} <= wfield {wfield:.5f} <= field {field:.5f} "
                      "<= scalar {scalar:.5f}".format(**v))
    assert ok


def test_criterion_5_identity_basis_and_last_block(acceptance):
    mom = analytic_moments(hetero_field_spec())
    identity = OrthonormalBasis.identity(mom.n)
    a = wfield_weights(NESTED, mom.group_elementwise(NESTED, identity), basis=identity)
    b = field_weights_nd(NESTED, mom.group_elementwise(NESTED))
    same = all(np.array_equal(x, y) for x, y in zip(a.betas, b.betas))
    s = mlmc_structure(3, m=(40, 20, 10))
    w = matrix_weights(s, [mom.group_block(s, k) for k in (1, 2, 3)])
    last = np.array_equal(w.betas[-1][:, -mom.n:], np.eye(mom.n))
    ok = same and last
    acceptance(5, ok, f"W=I bit-identical: {same}; MLMC last block == I exactly: {last}")
    assert ok


def test_criterion_6_covariance_of_covariance(acceptance):
    # analytic single level: 2 sigma^4 / (m - 1), equal up to floating rounding
    worst_ulps = 0.0
    for s2 in (0.5, 1.0, 2.25, 3.0):
        for m in (2, 3, 5, 10, 64):
            got = covcov_scalar(np.array([[3 * s2**2]]), np.array([[s2]]), m).matrix[0, 0]
            exact = 2 * s2**2 / (m - 1)
            worst_ulps = max(worst_ulps, abs(got - exact) / np.spacing(exact))
    # replication check, two coupled levels
    spec = GaussianHierarchySpec(mu=(0.0, 1.0), sigma=(1.0, 1.3), rho=(0.8, 1.0))
    m, reps = 6, 100_000
    x = sample_coupled(spec, reps * m, 99).reshape(reps, m, 2)
    v = x.var(axis=1, ddof=1)
    measured = np.cov(v, rowvar=False)
    predicted = analytic_moments(spec).variance_covcov_terms().matrix(m)
    rel = np.abs(measured - predicted) / np.abs(predicted)
    ok = worst_ulps <= 2 and rel.max() <= 0.03
    acceptance(6, ok, f"closed form within {worst_ulps:.0f} ulp; R=1e5 max rel diff "
                      f"{100 * rel.max():.2f}%")
    assert ok


@pytest.mark.slow
def test_criterion_7_gamma_fast_path(acceptance, tmp_path):
    x = np.random.default_rng(7).standard_normal((8, 3, 20))
    fast, naive = averaged_covcov_terms(x), averaged_covcov_naive(x)
    diff = max(np.abs(a - b).max() / np.abs(b).max()
               for a, b in ((fast.first, naive.first), (fast.second, naive.second)))
    assert main(["bench", "--out", str(tmp_path), "--sizes", "1000,10000,100000",
                 "--naive-sizes", ""]) == 0
    slope = json.loads((tmp_path / "bench.json").read_text())["slope"]
    ok = diff <= 1e-10 and 0.8 <= slope <= 1.2
    acceptance(7, ok, f"fast vs naive rel diff {diff:.1e}; bench slope {slope:.3f}")
    assert ok


def _uniform_allocation(problem):
    """Equal budget share per group, rounded down."""
    c, b = problem.costs, problem.budget
    return np.floor(b / (c.size * c))


def test_criterion_8_allocation(acceptance):
    rng = np.random.default_rng(8)
    worst_ratio, feasible = 0.0, True
    count = 0
    while count < 20:
        s, covs = random_instance(rng)
        s = CouplingStructure(s.L, s.groups, costs=tuple(rng.uniform(0.05, 2.0, s.K)))
        b = 20.0 * sum(s.costs)
        problem = AllocationProblem(s, MeanVariance(s, GroupMomentSet(covs)), budget=b)
        uniform = _uniform_allocation(problem)
        v_uniform = problem.objective.value(uniform)
        if not np.isfinite(v_uniform):
            continue
        a = allocate_budget(problem)
        m = np.asarray(a.m, dtype=float)
        feasible &= bool(m.min() >= 0 and problem.costs @ m <= b * (1 + 1e-12)
                         and problem.h @ m >= 1)
        worst_ratio = max(worst_ratio, a.variance / v_uniform)
        count += 1
    exact = True
    for b, c in ((20.0, 2.0), (10.5, 2.0), (7.0, 0.3), (1.0, 1.0)):
        s = CouplingStructure(1, [(1,)], costs=(c,))
        a = allocate_budget(AllocationProblem(s, MeanVariance(s, (np.eye(1),)), budget=b))
        exact &= a.m == (int(np.floor(b / c)),)
    ok = feasible and worst_ratio <= 1.0 and exact
    acceptance(8, ok, f"20 instances feasible: {feasible}; max optimized/uniform variance "
                      f"{worst_ratio:.3f}; L=1 floor(b/c): {exact}")
    assert ok


def test_criterion_9_bound_dominates(acceptance):
    spec = FieldHierarchySpec(32, cutoffs=(3, 6, np.inf), noise=(0.4, 0.2, 0.05))
    mom = analytic_moments(spec)
    s = mlmc_structure(3, costs=(1.0, 4.0, 16.0))

    def diff(l, sign):
        w = np.zeros(3)
        w[l] = 1.0
        if l:
            w[l - 1] = sign
        return w

    d = np.stack([mom.pointwise_fourth(diff(l, -1.0)) for l in range(3)])
    sm = np.stack([mom.pointwise_fourth(diff(l, 1.0)) for l in range(3)])
    a = mlmc_cov_allocation(s, mlmc_covariance_bounds(d, sm), 400.0, mom.averaged_covcov_terms())
    bounds, exact = np.array(a.details["bounds"]), np.array(a.details["exact"])
    ok = bool(np.all(bounds > exact))
    acceptance(9, ok, "bound/exact per group " + ", ".join(f"{r:.2f}" for r in bounds / exact))
    assert ok


LOCALIZE_MODEL = {"type": "field", "n": 64, "cutoffs": [6, "inf"], "noise": [0.3, 0.05],
                  "length_scale": 4.0}


def _localize(tmp_path, m, replications, out):
    cfg = {"schema_version": 1, "task": "localize", "model": LOCALIZE_MODEL,
           "structure": {"L": 2, "groups": [[1], [1, 2]], "m": list(m)},
           "localization": {"calibration_size": 16}, "replications": replications, "seed": 5}
    path = tmp_path / f"localize_{m[0]}_{m[1]}.json"
    path.write_text(json.dumps(cfg))
    assert main(["replicate", "--config", str(path), "--out", str(out)]) == 0
    return json.loads((out / "replicate.json").read_text())


@pytest.mark.slow
def test_criterion_10_localization(acceptance, tmp_path):
    exact = asy2sample_coefficients(4, exact=True)
    coefficients = (tuple(map(str, exact)) == ("15/8", "3/8", "-2"))
    lines, ok = [], coefficients
    for m in ((5, 5), (5, 10), (10, 5), (10, 10)):
        doc = _localize(tmp_path, m, 1000, tmp_path / f"out_{m[0]}_{m[1]}")
        better = doc["mse_localized"] < doc["mse_unlocalized"]
        ok &= better
        lines.append(f"m={m}: {doc['mse_localized']:.0f}+-{doc['se_mse_localized']:.0f} vs "
                     f"{doc['mse_unlocalized']:.0f}+-{doc['se_mse_unlocalized']:.0f}")
    acceptance(10, ok, f"P(4) exact: {coefficients}; R=1000 localized vs unlocalized MSE: "
                       + "; ".join(lines))
    assert ok


def test_criterion_11_determinism(acceptance, tmp_path):
    cfg = tmp_path / "mean.json"
    cfg.write_text(json.dumps({
        "schema_version": 1, "task": "mean-scalar", "model": GAUSS.to_dict(),
        "structure": THREE_LEVEL.to_dict(), "replications": 500, "seed": 17}))
    payloads = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert main(["replicate", "--config", str(cfg), "--out", str(out)]) == 0
        payloads.append((out / "replicate.json").read_bytes())
    loc = [_localize(tmp_path, (5, 5), 20, tmp_path / f"loc_{run}") for run in ("a", "b")]
    ok = payloads[0] == payloads[1] and loc[0] == loc[1]
    acceptance(11, ok, f"replicate payloads identical: {payloads[0] == payloads[1]}; "
                       f"localize payloads identical: {loc[0] == loc[1]}")
    assert ok
