"""Coupled Gaussian model hierarchies with closed-form moments.

These hierarchies are the oracle for the test suite: every covariance and
fourth moment is known exactly (fourth moments through the Isserlis
identity), so estimators can be checked against analytic targets and
replication studies.

Random numbers come from numpy's counter-based Philox generator.  One
stream is keyed by ``(seed, replicate, group)``; inside a stream, draws are
laid out member by member with a fixed column per stochastic input, so all
levels of a member see the same shared input while groups stay independent.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from ._validation import check_positive_int
from .coupling import GroupMomentSet, check_structure
from .moments import CovCovTerms, Ensemble, covcov_scalar_terms

PRNG_NAME = "numpy.random.Philox4x64-10"
PRNG_VERSION = np.__version__


def prng_metadata():
    return {"prng": PRNG_NAME, "numpy": PRNG_VERSION}


def stream(seed, *key):
    """Independent Philox stream for ``seed`` and an integer key path."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class GaussianHierarchySpec:
    """Scalar levels Z_l = mu_l + sigma_l (rho_l G_0 + sqrt(1 - rho_l^2) G_l)."""

    mu: tuple
    sigma: tuple
    rho: tuple

    def __post_init__(self):
        for name in ("mu", "sigma", "rho"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        if not len(self.mu) == len(self.sigma) == len(self.rho):
            raise ValueError("mu, sigma and rho must have one entry per level")
        if any(s <= 0 for s in self.sigma):
            raise ValueError("sigma must be positive")
        if any(not 0.0 <= r <= 1.0 for r in self.rho):
            raise ValueError("rho must lie in [0, 1]")

    @property
    def L(self):
        return len(self.mu)

    def covariance(self):
        s = np.asarray(self.sigma)
        r = np.asarray(self.rho)
        cov = np.outer(s * r, s * r)
        np.fill_diagonal(cov, s**2)
        return cov

    def to_dict(self):
        return {"type": "gaussian", "mu": list(self.mu), "sigma": list(self.sigma),
                "rho": list(self.rho)}


def fourier_basis(n):
    """Real orthonormal Fourier basis of the periodic grid and its wave numbers."""
    x = np.arange(n)
    cols = [np.full(n, 1.0 / np.sqrt(n))]
    waves = [0]
    for kappa in range(1, (n - 1) // 2 + 1):
        arg = 2.0 * np.pi * kappa * x / n
        cols += [np.sqrt(2.0 / n) * np.cos(arg), np.sqrt(2.0 / n) * np.sin(arg)]
        waves += [kappa, kappa]
    if n % 2 == 0:
        cols.append(np.cos(np.pi * x) / np.sqrt(n))
        waves.append(n // 2)
    return np.column_stack(cols), np.asarray(waves)


@dataclass(frozen=True)
class FieldHierarchySpec:
    """Multiresolution Gaussian random field on a 1D periodic grid of n points.

    Level l of a member is::

        Z_l = mu_l + a * F_l xi + a * b * E_l eta_l

    with xi the white noise shared by all levels of the member, eta_l white
    noise private to level l, ``a`` and ``b`` pointwise profiles and F_l,
    E_l circulant filters.  F_l keeps the energy spectrum below the level's
    cutoff wave number; E_l adds independent, increasingly small-scale
    noise of relative size ``noise[l]``, so the coupling between levels is
    tight at large scales and loose at small ones.  ``noise_profile``
    optionally scales the private noise pointwise, which makes the
    inter-level correlation vary in space.
    """

    n: int
    cutoffs: tuple
    noise: tuple
    length_scale: float = 2.0
    nugget: float = 1e-2
    amplitude: tuple = None
    mu: tuple = None
    noise_profile: tuple = None

    def __post_init__(self):
        object.__setattr__(self, "n", int(self.n))
        object.__setattr__(self, "cutoffs", tuple(float(c) for c in self.cutoffs))
        object.__setattr__(self, "noise", tuple(float(v) for v in self.noise))
        if len(self.cutoffs) != len(self.noise):
            raise ValueError("cutoffs and noise need one entry per level")
        if self.amplitude is not None:
            amp = tuple(float(v) for v in self.amplitude)
            if len(amp) != self.n:
                raise ValueError("amplitude needs one entry per grid point")
            object.__setattr__(self, "amplitude", amp)
        if self.noise_profile is not None:
            prof = tuple(float(v) for v in self.noise_profile)
            if len(prof) != self.n:
                raise ValueError("noise_profile needs one entry per grid point")
            object.__setattr__(self, "noise_profile", prof)
        if self.mu is not None:
            object.__setattr__(self, "mu", tuple(float(v) for v in self.mu))
            if len(self.mu) != len(self.cutoffs):
                raise ValueError("mu needs one entry per level")

    @property
    def L(self):
        return len(self.cutoffs)

    def _spectra(self):
        _, waves = fourier_basis(self.n)
        k = 2.0 * np.pi * waves / self.n
        energy = np.exp(-0.5 * (k * self.length_scale) ** 2) + self.nugget
        energy *= self.n / energy.sum()
        kmax = max(waves.max(), 1)
        coupled, private = [], []
        for cut, nu in zip(self.cutoffs, self.noise):
            taper = 1.0 / (1.0 + (waves / cut) ** 8) if np.isfinite(cut) else np.ones(self.n)
            coupled.append(np.sqrt(energy) * taper)
            private.append(nu * np.sqrt(energy) * (0.2 + waves / kmax))
        return np.array(coupled), np.array(private)

    def filters(self):
        """Physical-space filters F_l and E_l, each of shape (L, n, n)."""
        q, _ = fourier_basis(self.n)
        coupled, private = self._spectra()
        amp = np.ones(self.n) if self.amplitude is None else np.asarray(self.amplitude)
        f = np.einsum("i,ik,lk,jk->lij", amp, q, coupled, q)
        prof = np.ones(self.n) if self.noise_profile is None else np.asarray(self.noise_profile)
        e = np.einsum("i,ik,lk,jk->lij", amp * prof, q, private, q)
        return f, e

    def means(self):
        mu = np.zeros(self.L) if self.mu is None else np.asarray(self.mu)
        return np.repeat(mu[:, None], self.n, axis=1)

    def covariance_blocks(self):
        """cov[l, l'] = C(Z_l, Z_l'), shape (L, L, n, n)."""
        f, e = self.filters()
        cov = np.einsum("aik,bjk->abij", f, f)
        for l in range(self.L):
            cov[l, l] += e[l] @ e[l].T
        return cov

    def to_dict(self):
        out = {"type": "field", "n": self.n, "cutoffs": list(self.cutoffs),
               "noise": list(self.noise), "length_scale": self.length_scale,
               "nugget": self.nugget}
        if self.amplitude is not None:
            out["amplitude"] = list(self.amplitude)
        if self.mu is not None:
            out["mu"] = list(self.mu)
        if self.noise_profile is not None:
            out["noise_profile"] = list(self.noise_profile)
        return out


def spec_from_dict(data):
    data = dict(data)
    kind = data.pop("type", "gaussian")
    if kind == "gaussian":
        return GaussianHierarchySpec(**data)
    if kind == "field":
        if "cutoffs" in data:
            data["cutoffs"] = [float("inf") if c in (None, "inf") else c for c in data["cutoffs"]]
        return FieldHierarchySpec(**data)
    raise ValueError(f"unknown model type {kind!r}")


def _draw_group(spec, idx, m, rng, cache):
    if isinstance(spec, GaussianHierarchySpec):
        g = rng.standard_normal((m, spec.L + 1))
        mu = np.asarray(spec.mu)[idx]
        s = np.asarray(spec.sigma)[idx]
        r = np.asarray(spec.rho)[idx]
        return mu + s * (r * g[:, :1] + np.sqrt(1.0 - r**2) * g[:, 1 + idx])
    if "filters" not in cache:
        cache["filters"] = spec.filters()
        cache["means"] = spec.means()
    f, e = cache["filters"]
    g = rng.standard_normal((m, spec.L + 1, spec.n))
    shared = np.einsum("lij,mj->mli", f[idx], g[:, 0])
    private = np.einsum("lij,mlj->mli", e[idx], g[:, 1 + idx])
    return cache["means"][idx] + shared + private


def sample_ensemble(spec, structure, seed, replicate=0, _cache=None):
    """Draw one coupled ensemble with m^(k) members in group k.

    Deterministic in ``(seed, replicate)``; groups use distinct streams.
    """
    check_structure(structure, need_m=True)
    if spec.L != structure.L:
        raise ValueError(f"model has {spec.L} levels, structure has {structure.L}")
    cache = {} if _cache is None else _cache
    groups = []
    for k in range(1, structure.K + 1):
        rng = stream(seed, replicate, k)
        groups.append(_draw_group(spec, structure.index(k), structure.m[k - 1], rng, cache))
    meta = dict(prng_metadata(), replicate=int(replicate))
    return Ensemble(structure, tuple(groups), seed=int(seed), metadata=meta)


def sample_coupled(spec, size, seed, key=(0,)):
    """``size`` members coupled across all L levels: (size, L) or (size, L, n)."""
    cache = {}
    rng = stream(seed, *key)
    return _draw_group(spec, np.arange(spec.L), size, rng, cache)


@dataclass(frozen=True)
class GaussianMoments:
    """Exact first, second and fourth moments of a scalar Gaussian hierarchy."""

    mean: np.ndarray
    cov: np.ndarray

    def m4(self, a, b, c, d):
        """Isserlis: E[X~a X~b X~c X~d] = C_ab C_cd + C_ac C_bd + C_ad C_bc (0-based)."""
        C = self.cov
        return C[a, b] * C[c, d] + C[a, c] * C[b, d] + C[a, d] * C[b, c]

    def m4_tensor(self):
        C = self.cov
        return (np.einsum("ab,cd->abcd", C, C) + np.einsum("ac,bd->abcd", C, C)
                + np.einsum("ad,bc->abcd", C, C))

    def group_moments(self, structure):
        """Per-sample group covariances C^(k) for mean estimation."""
        return GroupMomentSet.from_full(self.cov, structure, "sample")

    def variance_covcov_terms(self):
        """Covariance-of-variance terms across all levels (X = Y)."""
        C = self.cov
        m4 = np.outer(np.diag(C), np.diag(C)) + 2.0 * C**2
        return covcov_scalar_terms(m4, C)


@dataclass(frozen=True)
class FieldMoments:
    """Exact moments of a field hierarchy; ``cov`` has shape (L, L, n, n)."""

    mean: np.ndarray
    cov: np.ndarray

    @property
    def L(self):
        return self.cov.shape[0]

    @property
    def n(self):
        return self.cov.shape[2]

    def full_covariance(self):
        """C(Z, Z) of the stacked (L n)-vector."""
        L, n = self.L, self.n
        return self.cov.transpose(0, 2, 1, 3).reshape(L * n, L * n)

    def elementwise_covariances(self, basis=None):
        """C^(i)[l, l'] = C(Z_l,i, Z_l',i) in physical or basis space, shape (n, L, L)."""
        cov = self.cov
        if basis is not None:
            w = basis.matrix
            cov = np.einsum("ki,abkl,lj->abij", w, cov, w)
        return np.einsum("abii->iab", cov).copy()

    def group_elementwise(self, structure, basis=None):
        """Per group, the stack (n, p_k, p_k) of elementwise sample covariances."""
        ce = self.elementwise_covariances(basis)
        return tuple(ce[:, idx][:, :, idx] for idx in
                     (structure.index(k) for k in range(1, structure.K + 1)))

    def group_block(self, structure, k):
        """Covariance of the stacked group vector Z^(k), size n p_k."""
        idx = structure.index(k)
        sub = self.cov[np.ix_(idx, idx)]
        p, n = idx.size, self.n
        return sub.transpose(0, 2, 1, 3).reshape(p * n, p * n)

    def averaged_covcov_terms(self):
        """sum_ij CC^(ij) for covariance-matrix estimation, Gaussian closed form."""
        L = self.L
        val = np.empty((L, L))
        for a in range(L):
            for b in range(L):
                d = self.cov[a, b]
                val[a, b] = np.trace(d) ** 2 + np.sum(d * d.T)
        return CovCovTerms(val, val.copy())

    def entry_covcov_terms(self):
        """Per matrix entry (i, j), CovCov terms across levels: arrays (n, n, L, L)."""
        cov = self.cov
        cx = np.einsum("abii->iab", cov)
        cxy = np.einsum("abij->ijab", cov)
        cross = cxy * np.swapaxes(cxy, -1, -2)
        prod = cx[:, None] * cx[None, :]
        # Isserlis: m4 - c c^T = cx cy + cxy cxy^T, the same as the second term.
        val = prod + cross
        return val, val.copy()

    def pointwise_fourth(self, weights):
        """E[(sum_l w_l Z~_l,i)^4] for every grid point i (Gaussian: 3 var^2)."""
        w = np.asarray(weights, dtype=float)
        var = np.einsum("a,b,abii->i", w, w, self.cov)
        return 3.0 * var**2


def analytic_moments(spec):
    """Closed-form moments of a Gaussian hierarchy."""
    if isinstance(spec, GaussianHierarchySpec):
        return GaussianMoments(np.asarray(spec.mu), spec.covariance())
    if isinstance(spec, FieldHierarchySpec):
        return FieldMoments(spec.means(), spec.covariance_blocks())
    raise TypeError(f"no analytic moments for {type(spec).__name__}")


@dataclass(frozen=True)
class ReplicationResult:
    """Empirical statistics of an estimator over R independent ensembles.

    ``variance`` is the total variance (sum over elements) and ``mse`` the
    total squared error against ``target`` when one is given.
    """

    R: int
    mean: np.ndarray
    se_mean: np.ndarray
    variance: float
    se_variance: float
    mse: float = None
    se_mse: float = None
    values: np.ndarray = None

    def to_dict(self):
        out = {"R": self.R, "mean": np.asarray(self.mean).tolist(),
               "se_mean": np.asarray(self.se_mean).tolist(),
               "variance": float(self.variance), "se_variance": float(self.se_variance)}
        if self.mse is not None:
            out["mse"] = float(self.mse)
            out["se_mse"] = float(self.se_mse)
        return out


def summarize(values, target=None, keep=False):
    """Replication statistics of stacked estimates of shape (R, ...)."""
    x = np.asarray(values, dtype=float)
    R = x.shape[0]
    if R < 2:
        raise ValueError("need at least 2 replications")
    mean = x.mean(axis=0)
    se_mean = x.std(axis=0, ddof=1) / np.sqrt(R)
    dev = ((x - mean) ** 2).reshape(R, -1).sum(axis=1)
    variance = dev.sum() / (R - 1)
    se_variance = dev.std(ddof=1) / np.sqrt(R)
    mse = se_mse = None
    if target is not None:
        err = ((x - np.asarray(target)) ** 2).reshape(R, -1).sum(axis=1)
        mse = err.mean()
        se_mse = err.std(ddof=1) / np.sqrt(R)
    return ReplicationResult(R, mean, se_mean, float(variance), float(se_variance),
                             mse, se_mse, x if keep else None)


def replicate_estimator(estimator, spec, structure, R, seed, target=None, threads=1,
                        keep=False):
    """Apply ``estimator(ensemble)`` to R independent ensembles.

    Replicate r draws from the streams keyed by (seed, r, group), so the
    result does not depend on ``threads``.
    """
    R = check_positive_int(R, "R", minimum=2)
    check_structure(structure, need_m=True)
    cache = {}
    sample_ensemble(spec, structure, seed, 0, cache)

    def one(r):
        return np.asarray(estimator(sample_ensemble(spec, structure, seed, r, cache)),
                          dtype=float)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            values = list(pool.map(one, range(R)))
    else:
        values = [one(r) for r in range(R)]
    return summarize(np.stack(values), target, keep)
