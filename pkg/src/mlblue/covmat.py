"""Multilevel estimation of covariance matrices.

Three estimators of the n x n covariance matrix of the finest level:

* scalar weights, solved on the element-summed covariance of the
  covariance estimators;
* entrywise weights, one scalar problem per matrix entry (small n only);
* localized estimators sum_k sum_l L_l^(k) o B~_l^(k), where the
  localization weights minimize the mean squared error per class of
  equivalent index pairs.
"""

import warnings
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from ._validation import check_alpha, check_positive_int
from .coupling import COND_CAP, WeightSet, apply_scalar_estimator, check_structure, solve_weights
from .exceptions import DimensionMismatch
from .moments import CovCovTerms
from .vector import batched_weights, fill_singular

ENTRYWISE_CAP = 64
CLASS_COND_CAP = 1e10
CLIP_RANGE = (0.0, 1.5)
DEFAULT_CALIBRATION_SIZE = 8


def covmat_scalar_weights(structure, terms, alpha=None, cond_cap=COND_CAP):
    """Scalar weights for the covariance-matrix estimator.

    ``terms`` are the element-summed covariance-of-covariance terms across
    all levels (:func:`moments.averaged_covcov_terms` from a calibration
    ensemble, or the closed form of a Gaussian model).  The returned
    variance is the total (Frobenius) variance of the estimated matrix.
    """
    check_structure(structure, need_m=True)
    if not isinstance(terms, CovCovTerms):
        raise TypeError("terms must be CovCovTerms across all levels")
    if terms.first.shape[0] != structure.L:
        raise DimensionMismatch(f"terms cover {terms.first.shape[0]} levels, need {structure.L}")
    return solve_weights(structure, terms.group_matrices(structure), alpha, cond_cap)


@dataclass(frozen=True)
class EntrywiseWeightSet:
    """One weight per (group, level, entry): ``betas[k-1]`` has shape (n, n, p_k)."""

    betas: tuple
    alpha: np.ndarray
    n: int
    variance: float
    extras: dict = field(default_factory=dict, compare=False, repr=False)

    def no_bias_residual(self, structure):
        total = np.zeros((self.n, self.n, structure.L))
        for k, b in enumerate(self.betas, 1):
            total[..., structure.index(k)] += b
        return float(np.max(np.abs(total - self.alpha)))

    def to_dict(self):
        return {"flavor": "entrywise", "n": self.n, "alpha": self.alpha.tolist(),
                "betas": [b.tolist() for b in self.betas], "variance": self.variance}


def covmat_entrywise_weights(structure, entry_terms, alpha=None, cap=ENTRYWISE_CAP,
                             cond_cap=COND_CAP):
    """n^2 independent scalar covariance problems, one per matrix entry.

    ``entry_terms`` is a pair (first, second) of arrays (n, n, L, L): the
    m-independent covariance-of-covariance terms of each entry across
    levels.  Singular entries fall back to the scalar weights.
    """
    check_structure(structure, need_m=True)
    alpha = check_alpha(alpha, structure.L)
    first, second = (np.asarray(t, dtype=float) for t in entry_terms)
    n = first.shape[0]
    if first.shape != (n, n, structure.L, structure.L) or second.shape != first.shape:
        raise DimensionMismatch(f"entry terms must have shape (n, n, L, L), got {first.shape}")
    if n > cap:
        raise ValueError(f"entrywise weights need n^2 dense solves; n={n} exceeds the cap {cap}")
    if any(v < 2 for v in structure.m):
        raise ValueError("covariance estimators need m >= 2 in every group")
    f = first.reshape(n * n, structure.L, structure.L)
    s = second.reshape(n * n, structure.L, structure.L)
    est = []
    for k, mk in enumerate(structure.m, start=1):
        idx = structure.index(k)
        sub = (f[:, idx[:, None], idx[None, :]] / mk
               + s[:, idx[:, None], idx[None, :]] / (mk * (mk - 1.0)))
        est.append(0.5 * (sub + np.swapaxes(sub, 1, 2)))
    betas, variances, bad = batched_weights(structure, est, alpha, cond_cap)
    if np.any(bad):
        fallback = covmat_scalar_weights(structure, CovCovTerms(first.sum(axis=(0, 1)),
                                                                second.sum(axis=(0, 1))),
                                         alpha, cond_cap)
        fill_singular(betas, variances, bad, fallback.betas, est, "entries")
    betas = tuple(b.reshape(n, n, -1) for b in betas)
    return EntrywiseWeightSet(betas, alpha, n, float(variances.sum()),
                              extras={"entry_variances": variances.reshape(n, n)})


def apply_entrywise_estimator(weights, group_covs):
    """sum_k sum_l beta_l^(k) o B~_l^(k) for per-group covariance stacks (p_k, n, n)."""
    if len(group_covs) != len(weights.betas):
        raise DimensionMismatch("one covariance stack per group is required")
    total = np.zeros((weights.n, weights.n))
    for b, c in zip(weights.betas, group_covs):
        c = np.asarray(c, dtype=float)
        if c.shape != (b.shape[2], weights.n, weights.n):
            raise DimensionMismatch(f"covariance stack of shape {c.shape} does not fit weights")
        total += np.einsum("ijl,lij->ij", b, c)
    return 0.5 * (total + total.T)


@dataclass(frozen=True)
class CovMatrixEstimate:
    """A symmetric covariance-matrix estimate with its provenance."""

    matrix: np.ndarray
    biased: bool
    provenance: dict = field(default_factory=dict, compare=False)

    @property
    def min_eigenvalue(self):
        return float(np.linalg.eigvalsh(self.matrix)[0])

    @property
    def is_psd(self):
        scale = max(np.max(np.abs(self.matrix)), np.finfo(float).tiny)
        return self.min_eigenvalue >= -1e-12 * scale


def apply_covmat_scalar_estimator(weights, group_covs, biased=None):
    """sum_k sum_l beta_l^(k) B~_l^(k) for scalar weights."""
    total = apply_scalar_estimator(weights, group_covs)
    return CovMatrixEstimate(0.5 * (total + total.T),
                             weights.biased if biased is None else biased,
                             {"weights": "scalar"})


def mc_group_covariances(ensemble):
    """Per-group MC covariance matrices B~_l^(k), each of shape (p_k, n, n)."""
    return ensemble.group_covariance_matrices()


class EquivalenceClassPartition:
    """Labels for index pairs (i, j); pairs sharing a label share one weight.

    ``labels`` is an (n, n) integer array, symmetric.  Distances between
    classes, used to replace ill-conditioned classes, are label distances.
    """

    def __init__(self, labels, kind="custom"):
        labels = np.asarray(labels)
        if labels.ndim != 2 or labels.shape[0] != labels.shape[1]:
            raise DimensionMismatch(f"labels must be square, got shape {labels.shape}")
        if not np.issubdtype(labels.dtype, np.integer):
            raise TypeError("class labels must be integers")
        if not np.array_equal(labels, labels.T):
            raise ValueError("pairs (i, j) and (j, i) must share a class")
        self.labels = labels
        self.kind = kind
        self.classes, inverse, counts = np.unique(labels.ravel(), return_inverse=True,
                                                  return_counts=True)
        self._inverse = inverse
        self.sizes = counts

    @classmethod
    def periodic_distance(cls, n):
        """Classes min(|i - j|, n - |i - j|) on a 1D periodic grid."""
        n = check_positive_int(n, "n")
        d = np.abs(np.subtract.outer(np.arange(n), np.arange(n)))
        return cls(np.minimum(d, n - d), kind="periodic")

    @property
    def n(self):
        return self.labels.shape[0]

    def members(self, c):
        """Flat indices (i * n + j) of the pairs in class position c."""
        return np.flatnonzero(self._inverse == c)

    def to_dict(self):
        if self.kind == "periodic":
            return {"kind": "periodic", "n": self.n}
        return {"kind": "custom", "labels": self.labels.tolist()}

    @classmethod
    def from_dict(cls, data):
        if data.get("kind") == "periodic":
            return cls.periodic_distance(data["n"])
        return cls(np.asarray(data["labels"], dtype=int))


def pair_keys(structure):
    """The (k, l) pairs, 1-based, in the order used by localization vectors."""
    return [(k, int(l) + 1) for k in range(1, structure.K + 1) for l in structure.index(k)]


@dataclass(frozen=True)
class LocalizationMap:
    """Localization weights per class and per (group, level).

    ``weights`` has shape (number of classes, p); column order follows
    :func:`pair_keys`.
    """

    classes: np.ndarray
    keys: tuple
    weights: np.ndarray
    diagnostics: dict = field(default_factory=dict, compare=False)

    def assemble(self, partition, structure):
        """Per group, the localization matrices L_l^(k), shape (p_k, n, n)."""
        if not np.array_equal(partition.classes, self.classes):
            raise ValueError("partition classes differ from the localization map")
        n = partition.n
        full = self.weights[partition._inverse]  # (n*n, p)
        out, col = [], 0
        for p in structure.sizes:
            out.append(full[:, col:col + p].T.reshape(p, n, n))
            col += p
        return out

    def to_dict(self):
        return {str(int(c)): {f"{k},{l}": float(w) for (k, l), w in zip(self.keys, row)}
                for c, row in zip(self.classes, self.weights)}


def asy2sample_coefficients(m, exact=False):
    """P1, P2, P3 relating sample products to products of true covariances.

    E[P1 C(X,Y)C(Z,T) + P2 (C(X,Z)C(Y,T) + C(X,T)C(Y,Z)) + P3 M4(X,Y,Z,T)]
    = C(X,Y) C(Z,T) for unbiased sample covariances C and the biased
    fourth-moment estimator M4 computed from the same m samples.
    """
    m = check_positive_int(m, "m", minimum=4)
    M = Fraction(m)
    den = M * (M - 2) * (M - 3)
    p1 = (M - 1) * (M * M - 3 * M + 1) / den
    p2 = (M - 1) / den
    p3 = -M / ((M - 2) * (M - 3))
    return (p1, p2, p3) if exact else (float(p1), float(p2), float(p3))


def product_of_covariances(calibration):
    """Unbiased-in-expectation estimates of B_L,ij B_l,ij for every level l.

    ``calibration`` holds m >= 4 members coupled across all L levels,
    shape (m, L, n).  Returns an array (L, n, n).
    """
    x = np.asarray(calibration, dtype=float)
    if x.ndim != 3:
        raise DimensionMismatch("calibration ensemble must have shape (m, L, n)")
    m, L, n = x.shape
    p1, p2, p3 = asy2sample_coefficients(m)
    xt = x - x.mean(axis=0)
    top = xt[:, -1]
    c_top = top.T @ top / (m - 1)
    out = np.empty((L, n, n))
    for l in range(L):
        lo = xt[:, l]
        c_l = lo.T @ lo / (m - 1)
        cross = top.T @ lo / (m - 1)  # cross[i, j] = C(Z_L,i, Z_l,j)
        d = np.diag(cross)
        m4 = np.einsum("si,sj,si,sj->ij", top, top, lo, lo) / m
        out[l] = (p1 * c_top * c_l + p2 * (np.outer(d, d) + cross * cross.T) + p3 * m4)
    return out


def _stack_estimates(structure, group_covs):
    stack = []
    for k, c in enumerate(group_covs, start=1):
        c = np.asarray(c, dtype=float)
        if c.ndim != 3 or c.shape[0] != structure.sizes[k - 1]:
            raise DimensionMismatch(f"group {k}: expected ({structure.sizes[k - 1]}, n, n)")
        stack.append(c)
    return np.concatenate(stack, axis=0)


def class_systems(structure, partition, group_covs, products, subset=None, seed=0):
    """Class-averaged left- and right-hand sides of the optimality conditions.

    ``group_covs`` are the MC covariance matrices B~_l^(k) whose single
    realization, averaged over each class, stands in for E[B~ B~^T].
    ``products`` (L, n, n) estimates B_L,ij B_l,ij.  ``subset`` limits each
    class to that many randomly chosen pairs.
    """
    b = _stack_estimates(structure, group_covs)
    p, n = b.shape[0], partition.n
    if b.shape[1:] != (n, n) or products.shape[1:] != (n, n):
        raise DimensionMismatch("covariance estimates do not match the partition size")
    levels = np.array([l - 1 for _, l in pair_keys(structure)])
    flat_b = b.reshape(p, n * n)
    flat_r = products.reshape(products.shape[0], n * n)[levels]
    rng = np.random.default_rng(seed)
    lhs = np.empty((partition.classes.size, p, p))
    rhs = np.empty((partition.classes.size, p))
    for c in range(partition.classes.size):
        idx = partition.members(c)
        if idx.size == 0:
            raise ValueError(f"class {partition.classes[c]} is empty")
        if subset is not None and subset < idx.size:
            idx = np.sort(rng.choice(idx, size=subset, replace=False))
        x = flat_b[:, idx]
        lhs[c] = x @ x.T / idx.size
        rhs[c] = flat_r[:, idx].mean(axis=1)
    return lhs, rhs


def solve_class_systems(lhs, rhs, classes=None, cond_cap=CLASS_COND_CAP):
    """Solve lhs[c] w = rhs[c] per class, reusing the nearest good class when singular."""
    lhs = np.asarray(lhs, dtype=float)
    rhs = np.asarray(rhs, dtype=float)
    C = lhs.shape[0]
    classes = np.arange(C) if classes is None else np.asarray(classes)
    conds = np.array([np.linalg.cond(a) for a in lhs])
    good = conds <= cond_cap
    if not np.any(good):
        raise np.linalg.LinAlgError("every localization class system is ill-conditioned")
    weights = np.zeros_like(rhs)
    weights[good] = np.linalg.solve(lhs[good], rhs[good][..., None])[..., 0]
    replaced = {}
    for c in np.flatnonzero(~good):
        donors = np.flatnonzero(good)
        d = donors[np.argmin(np.abs(classes[donors] - classes[c]))]
        weights[c] = weights[d]
        replaced[int(classes[c])] = int(classes[d])
    if replaced:
        warnings.warn(f"ill-conditioned localization classes {sorted(replaced)} reuse "
                      "their nearest well-conditioned neighbour", RuntimeWarning, stacklevel=2)
    return weights, conds, replaced


def optimal_localization(structure, partition, group_covs, calibration, subset=None,
                         clip=False, seed=0):
    """Localization weights minimizing the class-averaged mean squared error.

    Parameters
    ----------
    structure : CouplingStructure
    partition : EquivalenceClassPartition
    group_covs : list of arrays (p_k, n, n)
        MC covariance matrices of every level in every group.
    calibration : array of shape (m, L, n)
        An independent ensemble coupling all levels, m >= 4, used to
        estimate the products B_L,ij B_l,ij.
    subset : int, optional
        Use this many random pairs per class instead of the full class.
    clip : bool
        Clip the weights to [0, 1.5].

    Returns
    -------
    LocalizationMap
    """
    check_structure(structure)
    calibration = np.asarray(calibration, dtype=float)
    if calibration.ndim != 3 or calibration.shape[1] != structure.L:
        raise DimensionMismatch("calibration ensemble must have shape (m, L, n)")
    if calibration.shape[0] < 4:
        raise ValueError(f"the calibration ensemble needs m >= 4, got {calibration.shape[0]}")
    products = product_of_covariances(calibration)
    lhs, rhs = class_systems(structure, partition, group_covs, products, subset, seed)
    return localization_from_systems(structure, partition, lhs, rhs, clip)


def localization_from_systems(structure, partition, lhs, rhs, clip=False):
    weights, conds, replaced = solve_class_systems(lhs, rhs, partition.classes)
    if clip:
        weights = np.clip(weights, *CLIP_RANGE)
    return LocalizationMap(partition.classes, tuple(pair_keys(structure)), weights,
                           {"condition_numbers": conds.tolist(), "replaced": replaced})


def exact_class_systems(structure, partition, cov_blocks, entry_terms):
    """Class systems with exact expectations, for Gaussian oracle models.

    ``cov_blocks`` (L, L, n, n) are the true covariances; ``entry_terms``
    the per-entry covariance-of-covariance terms (n, n, L, L).
    """
    check_structure(structure, need_m=True)
    keys = pair_keys(structure)
    levels = np.array([l - 1 for _, l in keys])
    groups = np.array([k for k, _ in keys])
    L = structure.L
    B = np.einsum("llij->lij", cov_blocks)  # B_l = C(Z_l, Z_l)
    n = B.shape[1]
    first, second = entry_terms
    m = np.asarray(structure.m, dtype=float)[groups - 1]
    same = groups[:, None] == groups[None, :]
    mk = m[:, None]
    f = first[:, :, levels[:, None], levels[None, :]]
    s = second[:, :, levels[:, None], levels[None, :]]
    cov = np.where(same, f / mk + s / (mk * (mk - 1.0)), 0.0)  # (n, n, p, p)
    bb = B[levels].reshape(len(keys), n * n)
    C = partition.classes.size
    lhs = np.empty((C, len(keys), len(keys)))
    rhs = np.empty((C, len(keys)))
    cov = cov.reshape(n * n, len(keys), len(keys))
    top = B[L - 1].reshape(n * n)
    for c in range(C):
        idx = partition.members(c)
        lhs[c] = cov[idx].mean(axis=0) + bb[:, idx] @ bb[:, idx].T / idx.size
        rhs[c] = (bb[:, idx] * top[idx]).mean(axis=1)
    return lhs, rhs


def apply_localized_estimator(localization, partition, structure, group_covs):
    """sum_k sum_l L_l^(k) o B~_l^(k), symmetrized, flagged as biased."""
    mats = localization.assemble(partition, structure)
    if len(group_covs) != len(mats):
        raise DimensionMismatch("one covariance stack per group is required")
    total = np.zeros((partition.n, partition.n))
    for loc, c in zip(mats, group_covs):
        c = np.asarray(c, dtype=float)
        if c.shape != loc.shape:
            raise DimensionMismatch(f"covariance stack {c.shape} does not match {loc.shape}")
        total += np.sum(loc * c, axis=0)
    est = CovMatrixEstimate(0.5 * (total + total.T), True, {"weights": "localized"})
    est.provenance["psd"] = est.is_psd
    return est


def localization_from_weights(structure, partition, weights):
    """A constant-per-class map equal to given scalar weights (no localization)."""
    w = np.concatenate(weights.betas if isinstance(weights, WeightSet) else weights)
    return LocalizationMap(partition.classes, tuple(pair_keys(structure)),
                           np.tile(w, (partition.classes.size, 1)))

