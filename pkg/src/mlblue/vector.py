"""Multilevel estimators for the mean of a vector of n elements.

Four weight classes, each a special case of the next:

* ``scalar``: one weight per (group, level), solved on the covariances
  summed over elements;
* ``field``: one weight per (group, level, element), i.e. n independent
  scalar problems;
* ``wfield``: field weights applied to coefficients in an orthonormal
  basis W;
* ``matrix``: a full n x n_l matrix per (group, level).
"""

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.fft import dct, idct

from ._validation import check_alpha, check_positive_int
from .coupling import COND_CAP, check_structure, extend, solve_weights
from .exceptions import DimensionMismatch, SingularGroupCovariance, SingularPhi

ORTHONORMAL_TOL = 1e-10
MATRIX_SIZE_CAP = 4096
FLAVORS = ("scalar", "field", "wfield", "matrix")


class OrthonormalBasis:
    """An orthonormal n x n matrix W whose columns are the basis vectors.

    ``forward(x)`` returns the coefficients W^T x and ``inverse(c)`` the
    field W c, both along the last axis.  Use :meth:`identity`, :meth:`dct`
    or pass an explicit matrix, which is checked for orthonormality.
    """

    def __init__(self, matrix=None, kind="matrix", n=None, tol=ORTHONORMAL_TOL, seed=0):
        self.kind = kind
        if kind == "matrix":
            w = np.asarray(matrix, dtype=float)
            if w.ndim != 2 or w.shape[0] != w.shape[1]:
                raise DimensionMismatch(f"basis must be a square matrix, got {w.shape}")
            self.n = w.shape[0]
            self._matrix = w
            self._check(tol, seed)
        elif kind in ("identity", "dct"):
            self.n = check_positive_int(n, "n")
            self._matrix = None
        else:
            raise ValueError(f"unknown basis kind {kind!r}")

    @classmethod
    def identity(cls, n):
        return cls(kind="identity", n=n)

    @classmethod
    def dct(cls, n):
        """Orthonormal DCT-II."""
        return cls(kind="dct", n=n)

    @classmethod
    def from_name(cls, name, n):
        if name in ("identity", "I", None):
            return cls.identity(n)
        if name in ("dct", "dct2", "DCT-II"):
            return cls.dct(n)
        raise ValueError(f"unknown basis {name!r}; use 'identity' or 'dct'")

    @property
    def matrix(self):
        if self._matrix is None:
            if self.kind == "identity":
                self._matrix = np.eye(self.n)
            else:
                self._matrix = idct(np.eye(self.n), type=2, norm="ortho", axis=0)
        return self._matrix

    def _check(self, tol, seed):
        w = self._matrix
        x = np.random.default_rng(seed).standard_normal((self.n, 8))
        err = max(np.max(np.abs(w.T @ (w @ x) - x)), np.max(np.abs(w @ (w.T @ x) - x)))
        if not err <= tol * max(1.0, np.max(np.abs(x))):
            raise ValueError(f"basis is not orthonormal (error {err:.3g} > {tol})")

    def _check_shape(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.n:
            raise DimensionMismatch(f"last axis has {x.shape[-1]} elements, basis has {self.n}")
        return x

    def forward(self, x):
        x = self._check_shape(x)
        if self.kind == "identity":
            return x
        if self.kind == "dct":
            return dct(x, type=2, norm="ortho", axis=-1)
        return x @ self._matrix

    def inverse(self, c):
        c = self._check_shape(c)
        if self.kind == "identity":
            return c
        if self.kind == "dct":
            return idct(c, type=2, norm="ortho", axis=-1)
        return c @ self._matrix.T

    def to_dict(self):
        return {"kind": self.kind, "n": self.n}


@dataclass(frozen=True)
class VectorWeightSet:
    """Weights of a vector-mean estimator.

    ``betas[k-1]`` has shape (p_k,) for the scalar flavor, (n, p_k) for the
    field and W-field flavors (coefficient i of level l in column l) and
    (n, N_k) for matrix weights, N_k being the stacked size of group k.
    """

    flavor: str
    betas: tuple
    alpha: np.ndarray
    n: int
    variance: float = None
    basis: OrthonormalBasis = None
    level_sizes: tuple = None
    biased: bool = False
    extras: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if self.flavor not in FLAVORS:
            raise ValueError(f"flavor must be one of {FLAVORS}, got {self.flavor!r}")

    def no_bias_residual(self, structure):
        if self.flavor == "scalar":
            total = sum(extend(b, structure, k) for k, b in enumerate(self.betas, 1))
            return float(np.max(np.abs(total - self.alpha)))
        if self.flavor in ("field", "wfield"):
            total = np.zeros((self.n, structure.L))
            for k, b in enumerate(self.betas, 1):
                total[:, structure.index(k)] += b
            return float(np.max(np.abs(total - self.alpha)))
        offsets = _offsets(self.level_sizes)
        total = np.zeros((self.n, offsets[-1]))
        for k, b in enumerate(self.betas, 1):
            total[:, _group_columns(structure, k, offsets)] += b
        return float(np.max(np.abs(total - self.extras["alpha_matrix"])))

    def to_dict(self):
        out = {"flavor": self.flavor, "n": self.n, "alpha": self.alpha.tolist(),
               "betas": [np.asarray(b).tolist() for b in self.betas], "biased": self.biased}
        if self.variance is not None:
            out["variance"] = float(self.variance)
        if self.basis is not None:
            out["basis"] = self.basis.to_dict()
        if self.level_sizes is not None:
            out["level_sizes"] = list(self.level_sizes)
        return out


def _offsets(sizes):
    return np.concatenate([[0], np.cumsum(sizes)]).astype(int)


def _group_columns(structure, k, offsets):
    return np.concatenate([np.arange(offsets[l], offsets[l + 1]) for l in structure.index(k)])


def _check_elementwise(structure, elem_covs):
    check_structure(structure, need_m=True)
    if any(v < 1 for v in structure.m):
        raise ValueError("every group needs m >= 1 outside of sample allocation")
    if len(elem_covs) != structure.K:
        raise DimensionMismatch(f"{len(elem_covs)} covariance stacks for {structure.K} groups")
    stacks = []
    for k, (c, p) in enumerate(zip(elem_covs, structure.sizes), start=1):
        c = np.asarray(c, dtype=float)
        if c.ndim != 3 or c.shape[1:] != (p, p):
            raise DimensionMismatch(f"group {k} stack must be (n, {p}, {p}), got {c.shape}")
        stacks.append(c)
    if len({c.shape[0] for c in stacks}) != 1:
        raise DimensionMismatch("covariance stacks disagree on n")
    return stacks


def scalar_weights_nd(structure, elem_covs, alpha=None, cond_cap=COND_CAP):
    """One weight per (group, level) from the element-summed covariances.

    ``elem_covs[k-1]`` is the stack (n, p_k, p_k) of per-sample covariances
    C^(k,i) of element i across the levels of group k.  The returned
    variance is the total variance summed over elements.
    """
    stacks = _check_elementwise(structure, elem_covs)
    summed = [c.sum(axis=0) / mk for c, mk in zip(stacks, structure.m)]
    w = solve_weights(structure, summed, alpha, cond_cap)
    return VectorWeightSet("scalar", w.betas, w.alpha, stacks[0].shape[0], w.variance)


def _batched_condition(a):
    s = np.linalg.svd(a, compute_uv=False)
    with np.errstate(divide="ignore"):
        return np.where(s[:, -1] > 0, s[:, 0] / s[:, -1], np.inf)


def batched_weights(structure, est, alpha, cond_cap=COND_CAP):
    """Solve many independent scalar MLBLUE problems at once.

    ``est[k-1]`` is a stack (N, p_k, p_k) of estimator covariances.  Returns
    per-group weights (N, p_k), per-problem variances and a mask of the
    problems whose group matrix or phi is singular (left at zero weight).
    """
    N, L = est[0].shape[0], structure.L
    bad = np.zeros(N, dtype=bool)
    for c in est:
        bad |= ~(_batched_condition(c) <= cond_cap)
    betas = [np.zeros((N, p)) for p in structure.sizes]
    variances = np.zeros(N)
    rows = np.flatnonzero(~bad)
    if rows.size:
        phi = np.zeros((rows.size, L, L))
        inverses = []
        for k, c in enumerate(est, start=1):
            inv = np.linalg.inv(c[rows])
            idx = structure.index(k)
            phi[:, idx[:, None], idx[None, :]] += inv
            inverses.append(inv)
        ok = _batched_condition(phi) <= cond_cap
        bad[rows[~ok]] = True
        if np.any(ok):
            rhs = np.broadcast_to(alpha, (int(ok.sum()), L))[..., None]
            u = np.linalg.solve(phi[ok], rhs)[..., 0]
            for k, inv in enumerate(inverses, start=1):
                betas[k - 1][rows[ok]] = np.einsum("nij,nj->ni", inv[ok],
                                                   u[:, structure.index(k)])
            variances[rows[ok]] = u @ alpha
    return betas, variances, bad


def fill_singular(betas, variances, bad, fallback, est, what="elements"):
    """Replace the weights of singular problems by ``fallback`` (one vector per group)."""
    elements = np.flatnonzero(bad)
    if elements.size == 0:
        return
    if elements.size == bad.size:
        raise SingularGroupCovariance(0, np.inf, element=int(elements[0]),
                                      hint=f"every one of the {what} is singular")
    warnings.warn(f"singular covariance at {what} {elements.tolist()}; "
                  "using scalar weights there", RuntimeWarning, stacklevel=3)
    for k, b in enumerate(fallback):
        betas[k][bad] = b
    for i in elements:
        variances[i] = sum(b @ c[i] @ b for b, c in zip(fallback, est))


def field_weights_nd(structure, elem_covs, alpha=None, cond_cap=COND_CAP, _flavor="field",
                     _basis=None):
    """Per-element MLBLUE weights: n independent scalar problems, solved batched.

    Elements whose group covariance (or phi) is singular fall back to the
    scalar weights with a warning, which keeps the estimator unbiased.
    """
    stacks = _check_elementwise(structure, elem_covs)
    alpha = check_alpha(alpha, structure.L)
    est = [c / mk for c, mk in zip(stacks, structure.m)]
    betas, variances, bad = batched_weights(structure, est, alpha, cond_cap)
    if np.any(bad):
        sw = scalar_weights_nd(structure, elem_covs, alpha, cond_cap)
        fill_singular(betas, variances, bad, sw.betas, est)
    return VectorWeightSet(_flavor, tuple(betas), alpha, stacks[0].shape[0],
                           float(variances.sum()), basis=_basis,
                           extras={"element_variances": variances,
                                   "fallback_elements": np.flatnonzero(bad)})


def wfield_weights(structure, elem_covs_w, alpha=None, basis=None, cond_cap=COND_CAP):
    """Field weights on coefficients in the orthonormal basis ``basis``.

    ``elem_covs_w`` are the per-coefficient covariances of W^T Z (use
    ``FieldMoments.group_elementwise(structure, basis)`` for exact ones).
    With the identity basis this is :func:`field_weights_nd` exactly.
    """
    n = np.asarray(elem_covs_w[0]).shape[0]
    basis = OrthonormalBasis.identity(n) if basis is None else basis
    if basis.n != n:
        raise DimensionMismatch(f"basis has size {basis.n}, covariances have n={n}")
    return field_weights_nd(structure, elem_covs_w, alpha, cond_cap, "wfield", basis)


def alpha_matrix(alpha, level_sizes, n):
    """The n x N map [alpha_1 I, ..., alpha_L I] (levels with alpha_l = 0 may differ in size)."""
    blocks = []
    for a, nl in zip(alpha, level_sizes):
        if a != 0 and nl != n:
            raise DimensionMismatch(f"alpha is non-zero on a level of size {nl} != n={n}")
        blocks.append(a * np.eye(n) if a != 0 else np.zeros((n, nl)))
    return np.hstack(blocks)


def matrix_weights(structure, group_covs, alpha=None, level_sizes=None, n=None,
                   size_cap=MATRIX_SIZE_CAP, cond_cap=COND_CAP):
    """General matrix-weight MLBLUE.

    ``group_covs[k-1]`` is the covariance of the stacked group vector
    Z^(k) (levels of group k in sorted order, sizes ``level_sizes``).
    Weights are beta^(k) = m^(k) A phi^-1 P^(k) C^(k)^-1 with
    phi = sum_k m^(k) P^(k) C^(k)^-1 R^(k); the variance is
    Tr(A phi^-1 A^T).  Levels sampled by a single group have their block
    fixed by the no-bias condition and are set to alpha_l I exactly.
    """
    check_structure(structure, need_m=True)
    alpha = check_alpha(alpha, structure.L)
    group_covs = [np.asarray(c, dtype=float) for c in group_covs]
    if len(group_covs) != structure.K:
        raise DimensionMismatch(f"{len(group_covs)} group covariances for {structure.K} groups")
    if level_sizes is None:
        q = group_covs[0].shape[0] // structure.sizes[0]
        level_sizes = (q,) * structure.L
    level_sizes = tuple(int(v) for v in level_sizes)
    if len(level_sizes) != structure.L:
        raise DimensionMismatch("level_sizes needs one entry per level")
    n = level_sizes[-1] if n is None else n
    offsets = _offsets(level_sizes)
    N = int(offsets[-1])
    if N > size_cap:
        raise ValueError(f"stacked size N={N} exceeds the dense cap {size_cap}")
    A = alpha_matrix(alpha, level_sizes, n)
    phi = np.zeros((N, N))
    inverses, columns = [], []
    for k, (c, mk) in enumerate(zip(group_covs, structure.m), start=1):
        cols = _group_columns(structure, k, offsets)
        if c.shape != (cols.size, cols.size):
            raise DimensionMismatch(f"group {k} covariance must be {cols.size}x{cols.size}")
        s = np.linalg.svd(c, compute_uv=False)
        cond = np.inf if s[-1] <= 0 else s[0] / s[-1]
        if not cond <= cond_cap:
            raise SingularGroupCovariance(
                k, cond, hint="coarse levels must enter as is, not interpolated to a finer grid")
        inv = np.linalg.inv(c)
        phi[np.ix_(cols, cols)] += mk * inv
        inverses.append(inv)
        columns.append(cols)
    s = np.linalg.svd(phi, compute_uv=False)
    if not s[0] <= cond_cap * s[-1]:
        raise SingularPhi("matrix phi is singular; some level is not sampled")
    lam = np.linalg.solve(phi, A.T).T
    betas = [mk * lam[:, cols] @ inv for mk, cols, inv in zip(structure.m, columns, inverses)]
    counts = np.zeros(structure.L, dtype=int)
    for k in range(1, structure.K + 1):
        counts[structure.index(k)] += 1
    for k in range(1, structure.K + 1):
        pos = 0
        for l in structure.index(k):
            nl = level_sizes[l]
            if counts[l] == 1:
                betas[k - 1][:, pos:pos + nl] = A[:, offsets[l]:offsets[l + 1]]
            pos += nl
    variance = float(np.trace(A @ lam.T))
    return VectorWeightSet("matrix", tuple(betas), alpha, n, variance, level_sizes=level_sizes,
                           extras={"alpha_matrix": A, "multipliers": lam})


def matrix_kkt_residual(structure, group_covs, weights):
    """Scaled residuals of beta^(k) C^(k)/m^(k) - Lambda P^(k) = 0 and of the no-bias condition."""
    offsets = _offsets(weights.level_sizes)
    lam = weights.extras["multipliers"]
    worst = 0.0
    for k, (b, c, mk) in enumerate(zip(weights.betas, group_covs, structure.m), start=1):
        cols = _group_columns(structure, k, offsets)
        r = b @ c / mk - lam[:, cols]
        scale = np.linalg.norm(b) * np.linalg.norm(c) / mk + np.linalg.norm(lam[:, cols])
        worst = max(worst, np.linalg.norm(r) / scale)
    return worst, weights.no_bias_residual(structure)


def matrix_operators(structure, weights):
    """Every flavor as physical-space blocks (n, N_k) acting on stacked group means."""
    n = weights.n
    out = []
    for k, b in enumerate(weights.betas, start=1):
        p = structure.sizes[k - 1]
        if weights.flavor == "matrix":
            out.append(np.asarray(b))
        elif weights.flavor == "scalar":
            out.append(np.hstack([bl * np.eye(n) for bl in b]))
        else:
            w = np.eye(n) if weights.basis is None else weights.basis.matrix
            out.append(np.hstack([(w * b[:, j]) @ w.T for j in range(p)]))
    return out


def vector_variance(structure, group_covs, weights):
    """Total variance sum_k Tr(B^(k) C^(k) B^(k)T) / m^(k) for any flavor.

    ``group_covs`` are the physical-space covariances of the stacked group
    vectors (see ``FieldMoments.group_block``).
    """
    ops = matrix_operators(structure, weights)
    return float(sum(np.sum((B @ c) * B) / mk for B, c, mk in zip(ops, group_covs, structure.m)))


def apply_vector_estimator(weights, group_means):
    """Combine per-group Monte Carlo means into the estimate of the target vector.

    ``group_means[k-1]`` has shape (p_k, n) (or is a list of per-level
    vectors for matrix weights with unequal level sizes).
    """
    if len(group_means) != len(weights.betas):
        raise DimensionMismatch(f"{len(group_means)} group means for {len(weights.betas)} groups")
    n = weights.n
    total = np.zeros(n)
    for k, (b, v) in enumerate(zip(weights.betas, group_means), start=1):
        if weights.flavor == "matrix":
            v = np.concatenate([np.ravel(x) for x in v])
            if v.size != b.shape[1]:
                raise DimensionMismatch(f"group {k}: {v.size} values for {b.shape[1]} columns")
            total = total + b @ v
            continue
        v = np.asarray(v, dtype=float)
        if v.ndim != 2 or v.shape != (len(b) if weights.flavor == "scalar" else b.shape[1], n):
            raise DimensionMismatch(f"group {k}: means of shape {v.shape} do not fit the weights")
        if weights.flavor == "scalar":
            total = total + np.tensordot(b, v, axes=(0, 0))
        elif weights.flavor == "field":
            total = total + np.einsum("il,li->i", b, v)
        else:
            total = total + np.einsum("il,li->i", b, weights.basis.forward(v))
    if weights.flavor == "wfield":
        total = weights.basis.inverse(total)
    return total


def best_matrix_allocation(structure, group_covs, candidates, alpha=None, level_sizes=None):
    """Evaluate the matrix-weight variance at each candidate m; return (best m, variances).

    Matrix weights do not fit the convex allocation problem, so allocation
    for this flavor is a search over user-supplied candidates.
    """
    results = []
    for m in candidates:
        w = matrix_weights(structure.with_m(tuple(int(v) for v in m)), group_covs, alpha,
                           level_sizes)
        results.append(w.variance)
    best = int(np.argmin(results))
    return tuple(int(v) for v in candidates[best]), results
