"""Sample allocation: choose m^(k) to minimize variance under a budget.

The continuous relaxation is solved with a log-barrier interior-point
method (damped Newton inner iterations); the result is rounded down and
the leftover budget is refilled greedily, one sample at a time, by best
variance decrease per unit cost.
"""

from dataclasses import dataclass, field

import numpy as np

from .coupling import (
    COND_CAP,
    GroupMomentSet,
    check_structure,
    is_mlmc_pattern,
    mlmc_weights,
)
from ._validation import check_alpha
from .exceptions import InfeasibleAllocation, UnreachableTarget
from .moments import CovCovTerms

REL_TOL = 1e-12


class MeanVariance:
    """alpha^T phi(m)^-1 alpha with phi(m) = sum_k m_k P^(k) (C^(k))^-1 R^(k).

    phi is linear in m, so the variance is convex on m > 0.
    """

    min_samples = 0

    def __init__(self, structure, moments, alpha=None):
        check_structure(structure)
        if isinstance(moments, GroupMomentSet):
            if moments.kind != "sample":
                raise ValueError("mean-case allocation needs per-sample covariances")
            moments = moments.check(structure).matrices
        self.structure = structure
        self.alpha = check_alpha(alpha, structure.L)
        L = structure.L
        self._g = np.zeros((structure.K, L, L))
        for k, c in enumerate(moments, start=1):
            idx = structure.index(k)
            self._g[k - 1][np.ix_(idx, idx)] = np.linalg.inv(c)

    def _phi(self, m):
        return np.tensordot(m, self._g, axes=(0, 0))

    def value(self, m):
        return _restricted_variance(self.structure, self._phi, self.alpha, m, self.min_samples)

    def _u(self, m):
        return np.linalg.solve(self._phi(m), self.alpha)

    def grad(self, m):
        u = self._u(m)
        return -np.einsum("i,kij,j->k", u, self._g, u)

    def hess(self, m):
        phi = self._phi(m)
        u = np.linalg.solve(phi, self.alpha)
        gu = self._g @ u
        return 2.0 * gu @ np.linalg.solve(phi, gu.T)


class CovarianceVariance:
    """alpha^T phi(m)^-1 alpha for covariance estimators.

    Here phi(m) = sum_k P^(k) CC^(k)(m_k)^-1 R^(k) with
    CC^(k)(m) = A_k / m + B_k / (m (m - 1)), which is not linear in m.
    Every sampled group needs m^(k) >= 2.
    """

    min_samples = 2

    def __init__(self, structure, terms, alpha=None):
        check_structure(structure)
        if isinstance(terms, CovCovTerms):
            terms = terms.group_terms(structure)
        if len(terms) != structure.K:
            raise ValueError(f"{len(terms)} covcov terms for {structure.K} groups")
        self.structure = structure
        self.terms = tuple(terms)
        self.alpha = check_alpha(alpha, structure.L)

    def _phi(self, m):
        s = self.structure
        phi = np.zeros((s.L, s.L))
        for k, (t, mk) in enumerate(zip(self.terms, m), start=1):
            if mk >= self.min_samples:
                idx = s.index(k)
                phi[np.ix_(idx, idx)] += np.linalg.inv(t.matrix(mk))
        return phi

    def value(self, m):
        return _restricted_variance(self.structure, self._phi, self.alpha, m, self.min_samples)

    def grad(self, m):
        s = self.structure
        u = np.linalg.solve(self._phi(m), self.alpha)
        out = np.empty(s.K)
        for k, (t, mk) in enumerate(zip(self.terms, m), start=1):
            w = u[s.index(k)]
            inv = np.linalg.inv(t.matrix(mk))
            v = inv @ w
            out[k - 1] = v @ t.derivative(mk) @ v
        return out

    def hess(self, m):
        m = np.asarray(m, dtype=float)
        h = np.empty((m.size, m.size))
        for k in range(m.size):
            step = 1e-5 * max(m[k] - self.min_samples, 1e-3)
            e = np.zeros(m.size)
            e[k] = step
            h[:, k] = (self.grad(m + e) - self.grad(m - e)) / (2 * step)
        return 0.5 * (h + h.T)


def _restricted_variance(structure, phi_fn, alpha, m, min_samples):
    """Variance with unsampled groups dropped; inf if alpha needs a dropped level."""
    m = np.asarray(m, dtype=float)
    used = m >= max(min_samples, 1e-300) if min_samples else m > 0
    if not np.any(used):
        return np.inf
    covered = np.zeros(structure.L, dtype=bool)
    for k in np.flatnonzero(used):
        covered[structure.index(k + 1)] = True
    if np.any(alpha[~covered] != 0):
        return np.inf
    phi = phi_fn(np.where(used, m, 0.0))[np.ix_(covered, covered)]
    try:
        s = np.linalg.svd(phi, compute_uv=False)
    except np.linalg.LinAlgError:
        return np.inf
    if s[-1] <= s[0] / COND_CAP**1.5:
        return np.inf
    return float(alpha[covered] @ np.linalg.solve(phi, alpha[covered]))


@dataclass(frozen=True)
class AllocationProblem:
    """A sample-allocation problem in budget or target-variance mode.

    ``objective`` is a :class:`MeanVariance` or :class:`CovarianceVariance`;
    costs come from ``structure.costs``.  Exactly one of ``budget`` and
    ``target`` (the standard deviation epsilon) must be given.
    """

    structure: object
    objective: object
    budget: float = None
    target: float = None

    def __post_init__(self):
        check_structure(self.structure)
        if self.structure.costs is None:
            raise ValueError("allocation needs per-group costs")
        if (self.budget is None) == (self.target is None):
            raise ValueError("give exactly one of budget and target")
        if self.budget is not None and not self.budget > 0:
            raise ValueError("budget must be positive")
        if self.target is not None and not self.target > 0:
            raise ValueError("target accuracy must be positive")

    @property
    def costs(self):
        return np.asarray(self.structure.costs)

    @property
    def h(self):
        return self.structure.high_fidelity_indicator()

    @property
    def mode(self):
        return "budget" if self.budget is not None else "target"


@dataclass(frozen=True)
class Allocation:
    """Integer sample sizes with their variance, cost and relaxation gap."""

    m: tuple
    variance: float
    cost: float
    continuous_m: np.ndarray
    continuous_variance: float
    gap: float
    kkt_residual: float = None
    details: dict = field(default_factory=dict, compare=False)

    def to_dict(self):
        out = {"m": list(self.m), "variance": self.variance, "cost": self.cost,
               "gap": self.gap, "continuous_m": [float(v) for v in self.continuous_m],
               "continuous_variance": self.continuous_variance}
        if self.kkt_residual is not None:
            out["kkt_residual"] = self.kkt_residual
        out.update(self.details)
        return out


class _Constraint:
    """Affine constraint a.m - b > 0."""

    def __init__(self, a, b):
        self.a = np.asarray(a, dtype=float)
        self.b = float(b)

    def value(self, m):
        return self.a @ m - self.b


def _barrier_minimize(fun, grad, hess, affine, nonlinear, m0, max_outer=40, gap_tol=1e-11):
    """Minimize fun(m) subject to affine constraints and nonlinear ones g(m) > 0.

    ``nonlinear`` is a list of (value, grad, hess) callables.  ``fun`` should
    be normalized to O(1) at the starting point.
    """
    m = np.asarray(m0, dtype=float)
    n_con = len(affine) + len(nonlinear)
    t = 1.0

    def feasible(x):
        return (all(c.value(x) > 0 for c in affine)
                and all(g[0](x) > 0 for g in nonlinear) and np.isfinite(fun(x)))

    def phi(x, t):
        val = t * fun(x)
        val -= sum(np.log(c.value(x)) for c in affine)
        val -= sum(np.log(g[0](x)) for g in nonlinear)
        return val

    for _ in range(max_outer):
        for _ in range(200):
            g = t * grad(m)
            H = t * hess(m)
            for c in affine:
                s = c.value(m)
                g -= c.a / s
                H += np.outer(c.a, c.a) / s**2
            for gv, gg, gh in nonlinear:
                s = gv(m)
                d = gg(m)
                g -= d / s
                H += np.outer(d, d) / s**2 - gh(m) / s
            H = 0.5 * (H + H.T)
            step = _newton_step(H, g)
            decrement = -g @ step
            if decrement < 1e-14:
                break
            alpha = 1.0
            f0 = phi(m, t)
            while alpha > 1e-16:
                trial = m + alpha * step
                if feasible(trial) and phi(trial, t) <= f0 - 0.25 * alpha * decrement:
                    break
                alpha *= 0.5
            else:
                break
            m = trial
            if 0.5 * decrement < 1e-12:
                break
        if n_con / t < gap_tol:
            break
        t *= 8.0
    return m, t


def _newton_step(H, g):
    scale = max(np.max(np.abs(np.diag(H))), 1e-300)
    shift = 0.0
    for _ in range(60):
        try:
            c = np.linalg.cholesky(H + shift * np.eye(len(g)))
            return -np.linalg.solve(c.T, np.linalg.solve(c, g))
        except np.linalg.LinAlgError:
            shift = max(2.0 * shift, 1e-12 * scale)
    return -g / scale


def _next_value(mk, lo):
    return lo if (lo > 1 and mk < lo) else mk + 1


def _kkt_residual(grad_f, active_grads):
    """Scaled stationarity residual with non-negative multipliers on active constraints."""
    norm = np.linalg.norm(grad_f)
    if norm == 0:
        return 0.0
    if not active_grads:
        return float(norm / norm)
    A = np.column_stack(active_grads)
    from scipy.optimize import nnls
    mu, res = nnls(A, grad_f)
    return float(res / norm)


def _budget_start(problem, lo):
    c, b, h = problem.costs, problem.budget, problem.h
    K = c.size
    m = 0.9 * b / (K * c)
    if lo:
        m = np.maximum(m, lo + 0.5 * (b - lo * c.sum()) / (K * c))
    if h @ m > 1 + 1e-9 and c @ m < b and np.all(m > lo):
        return m
    j = np.flatnonzero(h)[np.argmin(c[h > 0])]
    slack = b - c[j] - lo * (c.sum() - c[j])
    m = np.full(K, lo, dtype=float) + 0.4 * slack / (max(K - 1, 1) * c)
    m[j] = max(lo, 1.0) + 0.5 * slack / c[j]
    return m


def allocate_budget(problem):
    """Minimize the variance subject to m.c <= b, m.h >= 1, m >= 0 (>= 2 for covariances)."""
    if problem.mode != "budget":
        raise ValueError("allocate_budget needs a budget problem")
    obj = problem.objective
    c, b, h = problem.costs, problem.budget, problem.h
    lo = obj.min_samples
    K = c.size
    cheapest_hf = np.min(c[h > 0]) if np.any(h > 0) else np.inf
    if lo:
        need = lo * c.sum()
        if need >= b:
            raise InfeasibleAllocation(f"budget {b} below {lo} samples per group ({need})")
    elif cheapest_hf > b:
        raise InfeasibleAllocation(
            f"budget {b} cannot pay one high-fidelity coupled sample (cost {cheapest_hf})")

    affine = [_Constraint(np.eye(K)[k], lo) for k in range(K)]
    affine.append(_Constraint(-c, -b))
    if not lo:
        affine.append(_Constraint(h, 1.0))
    interior = (b - lo * c.sum() > 0) and (lo or cheapest_hf < b)
    if interior:
        m0 = _budget_start(problem, lo)
        f0 = obj.value(m0)
        m_cont, _ = _barrier_minimize(lambda x: obj.value(x) / f0, lambda x: obj.grad(x) / f0,
                                      lambda x: obj.hess(x) / f0, affine, [], m0)
    else:
        m_cont = np.where(h > 0, 0.0, 0.0)
        m_cont[np.flatnonzero((h > 0) & (c == cheapest_hf))[0]] = b / cheapest_hf
    f_cont = obj.value(m_cont)

    active = []
    gf = obj.grad(m_cont)
    if b - c @ m_cont < 1e-6 * b:
        active.append(-c)
    for k in range(K):
        if (m_cont[k] - lo) * c[k] < 1e-6 * b:
            active.append(np.eye(K)[k])
    if not lo and h @ m_cont - 1 < 1e-6:
        active.append(h)
    kkt = _kkt_residual(-gf, [-a for a in active])

    m_int = _round_budget(obj, m_cont, c, b, h, lo)
    f_int = obj.value(m_int)
    return Allocation(tuple(int(v) for v in m_int), float(f_int), float(c @ m_int),
                      m_cont, float(f_cont), float(f_int - f_cont), kkt)


def _round_budget(obj, m_cont, c, b, h, lo):
    m = np.floor(m_cont + 1e-9 * np.maximum(m_cont, 1.0))
    if lo:
        m = np.maximum(m, lo)
    while c @ m > b:
        k = np.argmax(np.where(m > max(lo, 0), c, -np.inf))
        m[k] -= 1
    if not lo and h @ m < 1:
        j = np.flatnonzero(h)[np.argmin(np.where(h > 0, c, np.inf)[h > 0])]
        m[j] = 1
        while c @ m > b:
            best, best_loss = None, np.inf
            for k in np.flatnonzero((m > 0) & (np.arange(m.size) != j)):
                trial = m.copy()
                trial[k] -= 1
                loss = (obj.value(trial) - obj.value(m)) / c[k]
                if loss < best_loss:
                    best, best_loss = k, loss
            m[best] -= 1
    return _greedy_refill(obj.value, m, c, b, lo)


def _greedy_refill(value, m, c, b, lo):
    m = m.copy()
    current = value(m)
    while True:
        left = b - c @ m
        best, best_gain, best_val, best_next = None, 0.0, None, None
        for k in range(m.size):
            nxt = _next_value(m[k], lo)
            dc = (nxt - m[k]) * c[k]
            if dc > left * (1 + 1e-12):
                continue
            trial = m.copy()
            trial[k] = nxt
            val = value(trial)
            gain = (current - val) / dc if np.isfinite(current) else (np.inf if np.isfinite(val) else 0.0)
            if gain > best_gain:
                best, best_gain, best_val, best_next = k, gain, val, nxt
        if best is None or (np.isfinite(current) and best_gain * c[best] <= REL_TOL * current):
            return m
        m[best] = best_next
        current = best_val


def allocate_target(problem):
    """Minimize m.c subject to variance <= target^2, m.h >= 1, m >= 0."""
    if problem.mode != "target":
        raise ValueError("allocate_target needs a target-accuracy problem")
    obj = problem.objective
    c, h = problem.costs, problem.h
    eps2 = problem.target**2
    lo = obj.min_samples
    K = c.size
    m0 = np.full(K, lo + 1.0)
    while not obj.value(m0) < 0.5 * eps2:
        m0 *= 2.0
        if m0[0] > 1e15:
            raise UnreachableTarget(f"variance {eps2} is out of reach of this coupling structure")
    cost0 = c @ m0
    affine = [_Constraint(np.eye(K)[k], lo) for k in range(K)]
    if not lo:
        affine.append(_Constraint(h, 1.0))
    nonlinear = [(lambda x: 1.0 - obj.value(x) / eps2,
                  lambda x: -obj.grad(x) / eps2,
                  lambda x: -obj.hess(x) / eps2)]
    m_cont, _ = _barrier_minimize(lambda x: c @ x / cost0, lambda x: c / cost0,
                                  lambda x: np.zeros((K, K)), affine, nonlinear, m0)
    f_cont = obj.value(m_cont)

    m = np.floor(m_cont + 1e-9 * np.maximum(m_cont, 1.0))
    if lo:
        m = np.maximum(m, lo)
    if not lo and h @ m < 1:
        m[np.flatnonzero(h)[np.argmin(c[h > 0])]] = 1
    current = obj.value(m)
    while current > eps2 * (1 + REL_TOL):
        best, best_gain, best_val, best_next = None, -np.inf, None, None
        for k in range(K):
            nxt = _next_value(m[k], lo)
            trial = m.copy()
            trial[k] = nxt
            val = obj.value(trial)
            gain = ((current - val) / ((nxt - m[k]) * c[k]) if np.isfinite(current)
                    else (np.inf if np.isfinite(val) else -np.inf))
            if gain > best_gain:
                best, best_gain, best_val, best_next = k, gain, val, nxt
        m[best] = best_next
        current = best_val
    return Allocation(tuple(int(v) for v in m), float(current), float(c @ m), m_cont,
                      float(f_cont), float(current - f_cont),
                      details={"cost_gap": float(c @ m - c @ m_cont)})


def allocate(problem):
    return allocate_budget(problem) if problem.mode == "budget" else allocate_target(problem)


def mlmc_covariance_bounds(fourth_delta, fourth_sum):
    """Per-level bound factors (sum_i sqrt M4[Delta_l,i]) (sum_i sqrt M4[Sigma_l,i]).

    ``fourth_delta`` and ``fourth_sum`` have shape (L, n): pointwise fourth
    centered moments of X_l - X_{l-1} and X_l + X_{l-1} (X_0 = 0).
    """
    d = np.atleast_2d(np.asarray(fourth_delta, dtype=float))
    s = np.atleast_2d(np.asarray(fourth_sum, dtype=float))
    if np.any(d < 0) or np.any(s < 0):
        raise ValueError("fourth moments must be non-negative; check the moment estimates")
    bounds = np.sqrt(d).sum(axis=1) * np.sqrt(s).sum(axis=1)
    if np.any(bounds < 0):
        raise ValueError("negative variance bound")
    return bounds


def pointwise_fourth_moments(samples):
    """Pointwise M4 of level differences and sums from coupled samples (ne, L, n)."""
    from .moments import mc_fourth

    x = np.asarray(samples, dtype=float)
    if x.ndim == 2:
        x = x[:, :, None]
    prev = np.concatenate([np.zeros_like(x[:, :1]), x[:, :-1]], axis=1)
    return mc_fourth(x - prev), mc_fourth(x + prev)


def _waterfill(bounds, c, budget):
    """argmin sum bound_k / n_k s.t. sum n_k c_k = budget, n_k >= 1."""
    K = c.size
    free = np.ones(K, dtype=bool)
    n = np.ones(K)
    for _ in range(K + 1):
        rest = budget - c[~free].sum()
        w = np.sqrt(bounds[free] / c[free])
        if rest <= c[free].sum() or w.sum() == 0:
            n[free] = np.maximum(1.0, rest / max(c[free].sum(), 1e-300))
            if w.sum() == 0:
                n[free] = 1.0
            break
        n[free] = rest * w / (np.sqrt(bounds[free] * c[free]).sum())
        low = free & (n < 1.0)
        if not np.any(low):
            break
        n[low] = 1.0
        free &= ~low
    return n


def mlmc_cov_allocation(structure, bounds, budget, covcov_terms=None):
    """Analytic MLMC allocation for covariance matrices from the upper bound.

    Minimizes sum_k bounds_k / (m_k - 1) subject to sum_k m_k c_k <= budget
    and m_k >= 2, which gives m_k - 1 proportional to sqrt(bounds_k / c_k).
    When ``covcov_terms`` (all-levels :class:`CovCovTerms`) is given, the
    exact variance contribution of each group at the chosen m is reported
    next to its bound.
    """
    check_structure(structure)
    if not is_mlmc_pattern(structure):
        raise ValueError("the bound-based allocation needs the MLMC coupling pattern")
    if structure.costs is None:
        raise ValueError("allocation needs per-group costs")
    bounds = np.asarray(bounds, dtype=float)
    if bounds.shape != (structure.K,):
        raise ValueError(f"need one bound per group, got {bounds.shape}")
    if np.any(bounds < 0):
        raise ValueError("negative variance bound: the moment estimates are inconsistent")
    c = np.asarray(structure.costs)
    if 2 * c.sum() > budget:
        raise InfeasibleAllocation(f"budget {budget} below two samples per group")
    n = _waterfill(bounds, c, budget - c.sum())
    m_cont = 1.0 + n

    def value(m):
        return float(np.sum(bounds / (np.asarray(m) - 1.0)))

    m = np.maximum(np.floor(m_cont + 1e-9 * m_cont), 2.0)
    while c @ m > budget:
        m[np.argmax(np.where(m > 2, c, -np.inf))] -= 1
    m = _greedy_refill(value, m, c, budget, 2)
    details = {"bounds": (bounds / (m - 1.0)).tolist()}
    if covcov_terms is not None:
        betas = mlmc_weights(structure).betas
        exact = [float(bk @ t.matrix(mk) @ bk) for bk, t, mk
                 in zip(betas, covcov_terms.group_terms(structure), m)]
        details["exact"] = exact
        details["exact_variance"] = float(sum(exact))
    return Allocation(tuple(int(v) for v in m), value(m), float(c @ m), m_cont,
                      value(m_cont), value(m) - value(m_cont), details=details)
