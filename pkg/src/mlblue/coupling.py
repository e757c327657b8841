"""Coupling structures and the scalar MLBLUE solver.

Levels are numbered 1..L and groups 1..K in every public function, so the
indices printed in diagnostics match the usual tableau notation.  The solver
works on the covariance matrices of the per-group Monte Carlo statistics
("estimator covariances"), which makes it serve mean estimation (where the
estimator covariance is C/m) and covariance estimation (where it involves
fourth moments) through the same code path.
"""

from dataclasses import dataclass, field

import numpy as np

from ._validation import check_alpha, check_square
from .exceptions import (
    DimensionMismatch,
    InvalidStructureError,
    SingularGroupCovariance,
    SingularPhi,
    SingularSaddlePoint,
)

#: Group matrices with a larger condition number are rejected.
COND_CAP = 1e12


@dataclass(frozen=True)
class CouplingStructure:
    """Fidelity levels, coupling groups and (optionally) sample sizes and costs.

    Parameters
    ----------
    L : int
        Number of fidelity levels.
    groups : sequence of sequences of int
        The K coupling groups, each a set of 1-based level indices.  Stored
        sorted.
    m : sequence of int, optional
        Number of coupled samples per group.
    costs : sequence of float, optional
        Cost of one coupled sample of each group.
    """

    L: int
    groups: tuple
    m: tuple = None
    costs: tuple = None

    def __post_init__(self):
        object.__setattr__(self, "L", int(self.L))
        groups = tuple(tuple(sorted(int(l) for l in g)) for g in self.groups)
        object.__setattr__(self, "groups", groups)
        if self.m is not None:
            object.__setattr__(self, "m", tuple(int(v) for v in self.m))
        if self.costs is not None:
            object.__setattr__(self, "costs", tuple(float(c) for c in self.costs))

    @property
    def K(self):
        return len(self.groups)

    @property
    def sizes(self):
        """Group cardinalities p^(k)."""
        return tuple(len(g) for g in self.groups)

    @property
    def p(self):
        return sum(self.sizes)

    def with_m(self, m):
        return CouplingStructure(self.L, self.groups, tuple(m), self.costs)

    def with_costs(self, costs):
        return CouplingStructure(self.L, self.groups, self.m, tuple(costs))

    def index(self, k):
        """0-based positions of the levels of group k (1-based)."""
        _check_group_index(self, k)
        return np.asarray(self.groups[k - 1]) - 1

    def high_fidelity_indicator(self):
        """h^(k) = 1 iff level L belongs to group k."""
        return np.array([1.0 if self.L in g else 0.0 for g in self.groups])

    def to_dict(self):
        out = {"L": self.L, "groups": [list(g) for g in self.groups]}
        if self.m is not None:
            out["m"] = list(self.m)
        if self.costs is not None:
            out["costs"] = list(self.costs)
        return out

    @classmethod
    def from_dict(cls, data):
        return cls(L=data["L"], groups=data["groups"], m=data.get("m"), costs=data.get("costs"))


def mlmc_structure(L, m=None, costs=None):
    """The MLMC coupling pattern {1}, {1,2}, ..., {L-1,L}."""
    groups = [(1,)] + [(l - 1, l) for l in range(2, L + 1)]
    return CouplingStructure(L, groups, m, costs)


def is_mlmc_pattern(structure):
    return structure.groups == mlmc_structure(structure.L).groups


def validate(structure):
    """List every invariant the structure violates (empty if valid)."""
    problems = []
    L = structure.L
    if L < 1:
        problems.append(f"L must be >= 1, got {L}")
    if structure.K < 1:
        problems.append("at least one coupling group is required")
    seen = {}
    for k, g in enumerate(structure.groups, start=1):
        if len(g) == 0:
            problems.append(f"group {k} is empty")
        if len(set(g)) != len(g):
            problems.append(f"group {k} repeats a level: {list(g)}")
        bad = [l for l in g if l < 1 or l > L]
        if bad:
            problems.append(f"group {k} has levels outside 1..{L}: {bad}")
        key = frozenset(g)
        if key in seen:
            problems.append(f"duplicate group: groups {seen[key]} and {k} are both {sorted(key)}")
        else:
            seen[key] = k
    covered = set().union(*map(set, structure.groups)) if structure.groups else set()
    missing = sorted(set(range(1, L + 1)) - covered)
    if missing:
        problems.append(f"union of groups does not cover levels {missing}")
    if structure.m is not None:
        if len(structure.m) != structure.K:
            problems.append(f"m has {len(structure.m)} entries for {structure.K} groups")
        elif any(v < 0 for v in structure.m):
            problems.append("sample sizes m must be non-negative")
    if structure.costs is not None:
        if len(structure.costs) != structure.K:
            problems.append(f"costs has {len(structure.costs)} entries for {structure.K} groups")
        elif any(not c > 0 for c in structure.costs):
            problems.append("costs must be positive")
    return problems


def check_structure(structure, need_m=False):
    problems = validate(structure)
    if problems:
        raise InvalidStructureError(problems)
    if need_m and structure.m is None:
        raise ValueError("sample sizes m are required")
    return structure


def _check_group_index(structure, k):
    if not 1 <= k <= structure.K:
        raise IndexError(f"group index {k} outside 1..{structure.K}")


def restrict(x, structure, k):
    """R^(k) x: the entries of a per-level vector that belong to group k."""
    x = np.asarray(x)
    if x.shape[0] != structure.L:
        raise DimensionMismatch(f"expected a length-{structure.L} vector, got {x.shape}")
    return x[structure.index(k)]


def extend(y, structure, k):
    """P^(k) y: scatter a group vector back to the levels, zeros elsewhere."""
    y = np.asarray(y)
    idx = structure.index(k)
    if y.shape[0] != idx.size:
        raise DimensionMismatch(f"group {k} has {idx.size} levels, got {y.shape}")
    out = np.zeros((structure.L,) + y.shape[1:], dtype=np.result_type(y, float))
    out[idx] = y
    return out


def selection_matrix(structure, k):
    """Dense R^(k), shape (p^(k), L)."""
    idx = structure.index(k)
    R = np.zeros((idx.size, structure.L))
    R[np.arange(idx.size), idx] = 1.0
    return R


@dataclass(frozen=True)
class GroupMomentSet:
    """One symmetric PSD matrix per coupling group.

    ``kind="sample"`` means the matrices are per-sample covariances C^(k)
    that get divided by m^(k); ``kind="estimator"`` means they already are
    the covariances of the group's Monte Carlo statistics.
    """

    matrices: tuple
    kind: str = "sample"

    def __post_init__(self):
        if self.kind not in ("sample", "estimator"):
            raise ValueError(f"kind must be 'sample' or 'estimator', got {self.kind!r}")
        mats = tuple(check_square(c, f"group matrix {k}") for k, c in enumerate(self.matrices, 1))
        object.__setattr__(self, "matrices", mats)

    def check(self, structure):
        if len(self.matrices) != structure.K:
            raise DimensionMismatch(f"{len(self.matrices)} group matrices for {structure.K} groups")
        for k, (c, p) in enumerate(zip(self.matrices, structure.sizes), start=1):
            if c.shape != (p, p):
                raise DimensionMismatch(f"group {k} matrix must be {p}x{p}, got {c.shape}")
        return self

    def estimator_covariances(self, structure):
        """The matrices of covariance of the group statistics."""
        self.check(structure)
        if self.kind == "estimator":
            return self.matrices
        check_structure(structure, need_m=True)
        if any(v < 1 for v in structure.m):
            raise ValueError("every group needs m >= 1 outside of sample allocation")
        return tuple(c / mk for c, mk in zip(self.matrices, structure.m))

    @classmethod
    def from_full(cls, cov, structure, kind="sample"):
        """Extract the group blocks R^(k) C P^(k) of a full L x L matrix."""
        cov = check_square(cov, "cov", structure.L)
        return cls(tuple(cov[np.ix_(structure.index(k), structure.index(k))]
                         for k in range(1, structure.K + 1)), kind)


@dataclass(frozen=True)
class WeightSet:
    """Scalar weights beta^(k), one vector per group, for the target alpha."""

    betas: tuple
    alpha: np.ndarray
    biased: bool = False
    variance: float = None
    extras: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def flat(self):
        return np.concatenate(self.betas)

    def no_bias_residual(self, structure):
        """max |sum_k P^(k) beta^(k) - alpha|."""
        total = np.zeros(structure.L)
        for k, b in enumerate(self.betas, start=1):
            total += extend(b, structure, k)
        return float(np.max(np.abs(total - self.alpha)))

    def to_dict(self):
        out = {"betas": [b.tolist() for b in self.betas], "alpha": self.alpha.tolist(),
               "biased": self.biased}
        if self.variance is not None:
            out["variance"] = float(self.variance)
        return out


def mlmc_weights(structure, alpha=None):
    """Telescoping +-1 weights on the MLMC pattern: (1), (-1, 1), ..., (-1, 1)."""
    if not is_mlmc_pattern(structure):
        raise ValueError("MLMC weights need the groups {1}, {1,2}, ..., {L-1,L}")
    betas = (np.array([1.0]),) + tuple(np.array([-1.0, 1.0]) for _ in range(structure.L - 1))
    return WeightSet(betas, check_alpha(alpha, structure.L))


def _condition(a):
    s = np.linalg.svd(a, compute_uv=False)
    return np.inf if s[-1] <= 0 else s[0] / s[-1]


def _checked_inverse(a, k, cond_cap):
    cond = _condition(a)
    if not cond <= cond_cap:
        raise SingularGroupCovariance(k, cond)
    return np.linalg.inv(a)


def assemble_phi(structure, est_covs, cond_cap=COND_CAP):
    """phi = sum_k P^(k) (CC^(k))^-1 R^(k) and the group inverses."""
    phi = np.zeros((structure.L, structure.L))
    inverses = []
    for k, cc in enumerate(est_covs, start=1):
        inv = _checked_inverse(cc, k, cond_cap)
        idx = structure.index(k)
        phi[np.ix_(idx, idx)] += inv
        inverses.append(inv)
    return phi, inverses


def _solve_phi(phi, alpha, cond_cap):
    cond = _condition(phi)
    if not cond <= cond_cap:
        raise SingularPhi(f"phi is singular (condition number {cond:.3g}); "
                          "some level is not sampled by any group")
    return np.linalg.solve(phi, alpha)


def solve_weights(structure, est_covs, alpha=None, cond_cap=COND_CAP):
    """Optimal weights from estimator covariances CC^(k).

    beta^(k) = (CC^(k))^-1 R^(k) phi^-1 alpha.  Returns a :class:`WeightSet`
    whose ``variance`` is alpha^T phi^-1 alpha.
    """
    check_structure(structure)
    alpha = check_alpha(alpha, structure.L)
    est_covs = GroupMomentSet(tuple(est_covs), "estimator").check(structure).matrices
    phi, inverses = assemble_phi(structure, est_covs, cond_cap)
    u = _solve_phi(phi, alpha, cond_cap)
    betas = tuple(inv @ u[structure.index(k)] for k, inv in enumerate(inverses, start=1))
    return WeightSet(betas, alpha, variance=float(alpha @ u))


def optimal_scalar_weights(structure, moments, alpha=None, cond_cap=COND_CAP):
    """Scalar MLBLUE weights for the statistic described by ``moments``.

    Parameters
    ----------
    structure : CouplingStructure
    moments : GroupMomentSet
        Per-sample covariances (``kind="sample"``, scaled by 1/m^(k)) or
        estimator covariances (``kind="estimator"``).
    alpha : array-like of shape (L,), optional
        Target combination of per-level statistics; defaults to e_L.

    Returns
    -------
    WeightSet
    """
    return solve_weights(structure, moments.estimator_covariances(structure), alpha, cond_cap)


def kkt_solve(structure, moments, alpha=None):
    """Solve the (p + L) saddle-point system of the constrained problem densely.

    Returns the weights and the Lagrange multipliers lambda.
    """
    check_structure(structure)
    alpha = check_alpha(alpha, structure.L)
    est_covs = moments.estimator_covariances(structure)
    p, L = structure.p, structure.L
    P = np.hstack([selection_matrix(structure, k).T for k in range(1, structure.K + 1)])
    A = np.zeros((p + L, p + L))
    offset = 0
    for cc in est_covs:
        q = cc.shape[0]
        A[offset:offset + q, offset:offset + q] = cc
        offset += q
    A[:p, p:] = -P.T
    A[p:, :p] = P
    rhs = np.concatenate([np.zeros(p), alpha])
    try:
        sol = np.linalg.solve(A, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularSaddlePoint(str(exc)) from exc
    if not np.all(np.isfinite(sol)):
        raise SingularSaddlePoint("saddle-point solve produced non-finite values")
    beta, lam = sol[:p], sol[p:]
    splits = np.cumsum(structure.sizes)[:-1]
    betas = tuple(np.split(beta, splits))
    variance = weights_variance(structure, est_covs, betas)
    return WeightSet(betas, alpha, variance=variance), lam


def mlblue_variance(structure, moments, alpha=None, cond_cap=COND_CAP):
    """Minimal variance alpha^T phi^-1 alpha reachable with the given m."""
    check_structure(structure)
    alpha = check_alpha(alpha, structure.L)
    phi, _ = assemble_phi(structure, moments.estimator_covariances(structure), cond_cap)
    return float(alpha @ _solve_phi(phi, alpha, cond_cap))


def weights_variance(structure, est_covs, betas):
    """sum_k beta^(k)T CC^(k) beta^(k) for arbitrary (e.g. sub-optimal) weights."""
    if isinstance(est_covs, GroupMomentSet):
        est_covs = est_covs.estimator_covariances(structure)
    if isinstance(betas, WeightSet):
        betas = betas.betas
    return float(sum(b @ cc @ b for b, cc in zip(betas, est_covs)))


def apply_scalar_estimator(weights, group_values):
    """sum_k beta^(k) . v^(k) for per-group vectors of Monte Carlo statistics."""
    betas = weights.betas if isinstance(weights, WeightSet) else weights
    if len(group_values) != len(betas):
        raise DimensionMismatch(f"{len(group_values)} group vectors for {len(betas)} groups")
    total = 0.0
    for k, (b, v) in enumerate(zip(betas, group_values), start=1):
        v = np.asarray(v, dtype=float)
        if v.shape[0] != b.shape[0]:
            raise DimensionMismatch(f"group {k}: {v.shape[0]} statistics for {b.shape[0]} weights")
        total = total + np.tensordot(b, v, axes=(0, 0))
    return total

