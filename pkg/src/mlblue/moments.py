"""Monte Carlo moment estimators and covariances of covariance estimators.

The covariance of sample-covariance estimators across levels depends on the
sample size m only through two coefficients, 1/m and 1/(m(m-1)).
:class:`CovCovTerms` keeps the two m-independent matrices so that the same
moments can be evaluated at any allocation.
"""

from dataclasses import dataclass, field

import numpy as np

from ._validation import check_positive_int, check_square
from .coupling import CouplingStructure, check_structure
from .exceptions import DimensionMismatch


@dataclass(frozen=True)
class Ensemble:
    """Coupled samples, one array per coupling group.

    ``groups[k-1]`` has shape ``(m_k, p_k)`` for scalar quantities or
    ``(m_k, p_k, n)`` for vectors of n elements; axis 1 follows the sorted
    levels of group k.  Members of one group share their stochastic input
    across levels; different groups are independent.
    """

    structure: CouplingStructure
    groups: tuple
    seed: int = None
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        groups = tuple(np.asarray(g, dtype=float) for g in self.groups)
        object.__setattr__(self, "groups", groups)
        s = self.structure
        if len(groups) != s.K:
            raise DimensionMismatch(f"{len(groups)} sample arrays for {s.K} groups")
        ndims = {g.ndim for g in groups}
        if not ndims <= {2, 3} or len(ndims) != 1:
            raise DimensionMismatch("group arrays must all be (m, p) or all be (m, p, n)")
        for k, (g, p) in enumerate(zip(groups, s.sizes), start=1):
            if g.shape[1] != p:
                raise DimensionMismatch(f"group {k} holds {g.shape[1]} levels, expected {p}")
        if groups[0].ndim == 3 and len({g.shape[2] for g in groups}) != 1:
            raise DimensionMismatch("all groups must share the element count n")
        if s.m is not None and tuple(g.shape[0] for g in groups) != s.m:
            raise DimensionMismatch(
                f"member counts {[g.shape[0] for g in groups]} differ from m={list(s.m)}")

    @property
    def m(self):
        return tuple(g.shape[0] for g in self.groups)

    @property
    def n(self):
        """Number of elements per level (1 for scalar ensembles)."""
        g = self.groups[0]
        return 1 if g.ndim == 2 else g.shape[2]

    @property
    def is_scalar(self):
        return self.groups[0].ndim == 2

    def group(self, k):
        return self.groups[k - 1]

    def group_means(self):
        """Per-group Monte Carlo means, shape (p_k,) or (p_k, n)."""
        return [mc_mean(g) for g in self.groups]

    def group_variances(self):
        """Per-group unbiased variances of every level (and element)."""
        return [mc_cov(g, g) for g in self.groups]

    def group_covariance_matrices(self):
        """Per-group MC covariance matrices of each level, shape (p_k, n, n)."""
        if self.is_scalar:
            raise ValueError("covariance matrices need a vector ensemble")
        return [sample_covariance_matrix(g) for g in self.groups]


def mc_mean(samples, axis=0):
    """Arithmetic mean over the sample axis."""
    samples = np.asarray(samples, dtype=float)
    if samples.ndim == 0 or samples.shape[axis] < 1:
        raise ValueError("mc_mean needs at least one sample")
    return np.mean(samples, axis=axis)


def _centered(x, axis):
    return x - np.mean(x, axis=axis, keepdims=True)


def mc_cov(x, y=None, axis=0):
    """Unbiased sample covariance 1/(m-1) sum (x - xbar)(y - ybar), elementwise."""
    x = np.asarray(x, dtype=float)
    y = x if y is None else np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise DimensionMismatch(f"mc_cov arguments differ in shape: {x.shape} vs {y.shape}")
    m = x.shape[axis] if x.ndim else 0
    if m < 2:
        raise ValueError(f"mc_cov needs at least 2 samples, got {m}")
    xc = _centered(x, axis)
    yc = xc if y is x else _centered(y, axis)
    return np.sum(xc * yc, axis=axis) / (m - 1)


def mc_fourth(x1, x2=None, x3=None, x4=None, axis=0):
    """Biased sample fourth centered moment 1/m sum x1~ x2~ x3~ x4~.

    Missing arguments repeat the first one, so ``mc_fourth(x)`` is the
    sample fourth central moment of x.
    """
    args = [np.asarray(a, dtype=float) for a in (x1, x2, x3, x4) if a is not None]
    args += [args[0]] * (4 - len(args))
    if len({a.shape for a in args}) != 1:
        raise DimensionMismatch("mc_fourth arguments differ in shape")
    if args[0].ndim == 0 or args[0].shape[axis] < 1:
        raise ValueError("mc_fourth needs at least one sample")
    c = [_centered(a, axis) for a in args]
    return np.mean(c[0] * c[1] * c[2] * c[3], axis=axis)


def sample_covariance_matrix(samples):
    """Unbiased covariance matrices along the last axis.

    ``samples`` of shape (m, ..., n) gives (..., n, n).
    """
    x = np.asarray(samples, dtype=float)
    m = x.shape[0]
    if m < 2:
        raise ValueError(f"covariance matrix needs at least 2 samples, got {m}")
    xc = x - x.mean(axis=0)
    cov = np.einsum("s...i,s...j->...ij", xc, xc) / (m - 1)
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


@dataclass(frozen=True)
class CovCovMatrix:
    """Covariance matrix of covariance estimators for one group at sample size m."""

    matrix: np.ndarray
    m: int


@dataclass(frozen=True)
class CovCovTerms:
    """The two m-independent parts of a covariance-of-covariance matrix.

    CC(m) = first / m + second / (m (m - 1)).
    """

    first: np.ndarray
    second: np.ndarray

    def __post_init__(self):
        first = check_square(self.first, "first", symmetric=False)
        second = check_square(self.second, "second", size=first.shape[0], symmetric=False)
        object.__setattr__(self, "first", 0.5 * (first + first.T))
        object.__setattr__(self, "second", 0.5 * (second + second.T))

    def matrix(self, m):
        m = float(m)
        if m <= 1:
            raise ValueError(f"covariance estimators need m >= 2, got {m}")
        return self.first / m + self.second / (m * (m - 1.0))

    def derivative(self, m):
        """d CC / d m, used by the sample-allocation solvers."""
        m = float(m)
        return -self.first / m**2 - self.second * (2.0 * m - 1.0) / (m * (m - 1.0)) ** 2

    def at(self, m):
        m = check_positive_int(m, "m", minimum=2)
        return CovCovMatrix(self.matrix(m), m)

    def restrict(self, idx):
        idx = np.asarray(idx)
        return CovCovTerms(self.first[np.ix_(idx, idx)], self.second[np.ix_(idx, idx)])

    def scaled(self, factor):
        return CovCovTerms(self.first * factor, self.second * factor)

    def group_terms(self, structure):
        """Per-group restriction of full-level terms."""
        check_structure(structure)
        return tuple(self.restrict(structure.index(k)) for k in range(1, structure.K + 1))

    def group_matrices(self, structure):
        """Estimator covariances CC^(k) at the structure's sample sizes."""
        check_structure(structure, need_m=True)
        return tuple(t.matrix(mk) for t, mk in zip(self.group_terms(structure), structure.m))


def covcov_scalar_terms(m4, cov_x, cov_y=None, cov_xy=None):
    """m-independent parts of the covariance of MC covariance estimators.

    Parameters
    ----------
    m4 : array of shape (p, p)
        ``m4[l, l']`` is the fourth centered moment E[X~_l X~_l' Y~_l Y~_l'].
    cov_x, cov_y : arrays of shape (p, p)
        Covariances across levels of X and of Y.  ``cov_y`` defaults to
        ``cov_x`` (variance estimation, X = Y).
    cov_xy : array of shape (p, p), optional
        ``cov_xy[l, l'] = C(X_l, Y_l')``; defaults to ``cov_x``.
    """
    m4 = check_square(m4, "m4", symmetric=False)
    p = m4.shape[0]
    cov_x = check_square(cov_x, "cov_x", p)
    cov_y = cov_x if cov_y is None else check_square(cov_y, "cov_y", p)
    cov_xy = cov_x if cov_xy is None else check_square(cov_xy, "cov_xy", p, symmetric=False)
    c = np.diag(cov_xy)
    first = m4 - np.outer(c, c)
    second = cov_xy * cov_xy.T + cov_x * cov_y
    return CovCovTerms(first, second)


def covcov_scalar(m4, cov_x, m, cov_y=None, cov_xy=None):
    """Covariance across levels of the unbiased MC covariance estimators at size m."""
    return covcov_scalar_terms(m4, cov_x, cov_y, cov_xy).at(m)


def covcov_scalar_from_samples(x, y=None):
    """Plug-in :class:`CovCovTerms` from coupled samples of shape (m, p)."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2:
        raise DimensionMismatch("expected samples of shape (m, p)")
    y = x if y is None else np.asarray(y, dtype=float)
    xc = _centered(x, 0)
    yc = _centered(y, 0)
    m = x.shape[0]
    if m < 2:
        raise ValueError("need at least 2 samples")
    cov_x = xc.T @ xc / (m - 1)
    cov_y = yc.T @ yc / (m - 1)
    cov_xy = xc.T @ yc / (m - 1)
    m4 = np.einsum("si,sj,si,sj->ij", xc, xc, yc, yc) / m
    return covcov_scalar_terms(m4, cov_x, cov_y, cov_xy)


def _as_calibration(samples):
    x = np.asarray(samples, dtype=float)
    if x.ndim == 2:
        x = x[:, :, None]
    if x.ndim != 3:
        raise DimensionMismatch("calibration samples must have shape (ne, L, n)")
    if x.shape[0] < 4:
        raise ValueError(f"need at least 4 calibration members, got {x.shape[0]}")
    return x


def gamma_space_averages(samples):
    """gamma[l, s, l', s'] = sum_i X~^s_{l,i} X~^s'_{l',i}.

    ``samples`` has shape (ne, L, n).  Perturbations are taken about one
    ensemble mean per level.  The result is exactly symmetric under
    (l, s) <-> (l', s'): only the upper triangle is computed and mirrored.
    """
    x = _as_calibration(samples)
    ne, L, n = x.shape
    xt = x - x.mean(axis=0)
    flat = np.ascontiguousarray(xt.transpose(1, 0, 2)).reshape(L * ne, n)
    g = flat @ flat.T
    iu = np.triu_indices(L * ne, 1)
    g[(iu[1], iu[0])] = g[iu]
    return g.reshape(L, ne, L, ne)


def averaged_covcov_terms(samples):
    """sum_ij CC^(ij) of the covariance estimators, as m-independent terms.

    Cost O(ne^2 L^2 n) through the gamma space averages.  ``samples`` holds
    ne members coupled across all L levels, shape (ne, L, n).  The plug-in
    moments are biased for finite ne.
    """
    g = gamma_space_averages(samples)
    ne = g.shape[1]
    diag = np.einsum("asbs->abs", g)
    t1 = np.einsum("abs,abs->ab", diag, diag) / ne
    t2 = np.einsum("asbt,asbt->ab", g, g) / (ne - 1) ** 2
    # gamma(l', s, l, s') = gamma(l, s', l', s)
    t3 = np.einsum("asbt,atbs->ab", g, g) / (ne - 1) ** 2
    t4 = diag.sum(axis=2) ** 2 / (ne - 1) ** 2
    return CovCovTerms(t1 - t2, t3 + t4)


def covcov_matrix_averaged(samples, m):
    """Averaged covariance-of-covariance matrix for the all-levels group at size m."""
    return averaged_covcov_terms(samples).at(m)


def averaged_covcov_naive(samples):
    """Direct O(ne n^2 L^2) double sum over element pairs; reference path."""
    x = _as_calibration(samples)
    ne, L, n = x.shape
    xt = x - x.mean(axis=0)
    first = np.zeros((L, L))
    second = np.zeros((L, L))
    for a in range(L):
        for b in range(L):
            for i in range(n):
                for j in range(n):
                    ai, bi, aj, bj = xt[:, a, i], xt[:, b, i], xt[:, a, j], xt[:, b, j]
                    m4 = np.sum(ai * bi * aj * bj) / ne
                    c_aa = np.sum(ai * aj) / (ne - 1)
                    c_bb = np.sum(bi * bj) / (ne - 1)
                    c_ab_ij = np.sum(ai * bj) / (ne - 1)
                    c_ab_ji = np.sum(aj * bi) / (ne - 1)
                    c_ab_ii = np.sum(ai * bi) / (ne - 1)
                    c_ab_jj = np.sum(aj * bj) / (ne - 1)
                    first[a, b] += m4 - c_aa * c_bb
                    second[a, b] += c_ab_ij * c_ab_ji + c_ab_ii * c_ab_jj
    return CovCovTerms(first, second)


def entry_covcov_terms_from_samples(samples):
    """Plug-in per-entry terms (first, second), each (n, n, L, L), from (ne, L, n) samples."""
    x = _as_calibration(samples)
    ne = x.shape[0]
    xt = x - x.mean(axis=0)
    c = np.einsum("sai,sbj->abij", xt, xt) / (ne - 1)
    m4 = np.einsum("sai,sbi,saj,sbj->ijab", xt, xt, xt, xt, optimize=True) / ne
    same = np.einsum("aaij->aij", c)  # C(Z_a,i, Z_a,j)
    first = m4 - np.einsum("aij,bij->ijab", same, same)
    diag = np.einsum("abii->abi", c)
    second = (np.einsum("abij,abji->ijab", c, c)
              + np.einsum("abi,abj->ijab", diag, diag))
    return first, second
