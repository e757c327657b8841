"""Command-line front end.

Every subcommand reads an experiment config (``--config``), writes one
result document per run into ``--out`` and a ``run_manifest.json`` with
seeds, versions and timings.  Result documents contain no timings, so two
runs with the same config and seed produce byte-identical results.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.
"""

import argparse
import csv
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .allocation import (
    AllocationProblem,
    CovarianceVariance,
    MeanVariance,
    allocate,
    mlmc_cov_allocation,
    mlmc_covariance_bounds,
)
from .coupling import check_structure, validate
from .covmat import (
    DEFAULT_CALIBRATION_SIZE,
    EquivalenceClassPartition,
    apply_covmat_scalar_estimator,
    covmat_scalar_weights,
)
from .estimators import (
    CovarianceMatrixMLBLUE,
    LocalizedCovarianceMLBLUE,
    MLBLUECovariance,
    MLBLUEMean,
    VectorMLBLUE,
)
from .exceptions import DimensionMismatch, InvalidStructureError, MLBLUEError
from .io import ConfigError, dumps, load_document, structure_from_document
from .moments import averaged_covcov_naive, averaged_covcov_terms
from .synthetic import (
    FieldHierarchySpec,
    analytic_moments,
    prng_metadata,
    replicate_estimator,
    sample_coupled,
    sample_ensemble,
    spec_from_dict,
)

THREADS_ENV = "MLBLUE_THREADS"
TASKS = ("mean-scalar", "mean-vector", "cov-scalar", "cov-matrix", "localize")
FLAVORS = {"mean-vector": ("scalar", "field", "wfield", "matrix"),
           "cov-matrix": ("scalar", "entrywise")}
# Stream key of calibration draws; replicates use (r, k) with groups k >= 1.
CALIBRATION_KEY = (0, 0)


class Experiment:
    """A parsed and checked experiment config."""

    def __init__(self, data, base_dir, seed=None):
        self.data = data
        model = data.get("model")
        if model is None and "model_file" in data:
            model = load_document(Path(base_dir) / data["model_file"])
        if model is None:
            raise ConfigError("config needs 'model' or 'model_file'")
        try:
            self.spec = spec_from_dict({k: v for k, v in model.items() if k != "schema_version"})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid model: {exc}") from exc
        if "structure" not in data:
            raise ConfigError("config needs a 'structure'")
        self.structure = structure_from_document(data["structure"])
        self.violations = validate(self.structure)
        if self.spec.L != self.structure.L:
            raise ConfigError(f"model has {self.spec.L} levels, structure has {self.structure.L}")
        self.task = data.get("task", "mean-scalar")
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        vector_model = isinstance(self.spec, FieldHierarchySpec)
        if vector_model != (self.task in ("mean-vector", "cov-matrix", "localize")):
            raise ConfigError(f"task {self.task!r} does not fit a {type(self.spec).__name__}")
        self.flavor = data.get("flavor", "field" if self.task == "mean-vector" else "scalar")
        if self.task in FLAVORS and self.flavor not in FLAVORS[self.task]:
            raise ConfigError(f"flavor {self.flavor!r} is not valid for task {self.task!r}")
        self.basis = data.get("basis", "dct")
        self.alpha = data.get("alpha")
        self.seed = int(seed if seed is not None else data.get("seed", 0))
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        self.replications = int(data.get("replications", 1000))
        self.calibration = dict(data.get("calibration", {"source": "exact"}))
        if self.calibration.get("source", "exact") not in ("exact", "samples"):
            raise ConfigError("calibration.source must be 'exact' or 'samples'")
        self.localization = dict(data.get("localization", {}))
        self.allocation = dict(data.get("allocation", {}))

    def alpha_vector(self):
        L = self.structure.L
        if self.alpha is None:
            return np.eye(L)[-1]
        return np.asarray(self.alpha, dtype=float)

    def need_m(self):
        check_structure(self.structure, need_m=True)

    def check(self):
        if self.violations:
            raise InvalidStructureError(self.violations)

    def calibration_data(self):
        """Exact moments or a coupled calibration ensemble drawn from its own stream."""
        if self.calibration.get("source", "exact") == "exact":
            return analytic_moments(self.spec)
        size = int(self.calibration.get("size", 1000))
        return sample_coupled(self.spec, size, self.seed, CALIBRATION_KEY)

    def estimator(self):
        s = self.structure
        if self.task == "mean-scalar":
            return MLBLUEMean(s, self.alpha)
        if self.task == "cov-scalar":
            return MLBLUECovariance(s, self.alpha)
        if self.task == "mean-vector":
            return VectorMLBLUE(s, self.flavor, self.basis, self.alpha)
        if self.task == "cov-matrix":
            return CovarianceMatrixMLBLUE(s, self.flavor, self.alpha)
        return LocalizedCovarianceMLBLUE(s, subset=self.localization.get("subset"),
                                         clip=bool(self.localization.get("clip", False)),
                                         seed=self.seed)

    def target(self):
        """Exact value of the estimated quantity."""
        mom = analytic_moments(self.spec)
        a = self.alpha_vector()
        if self.task == "mean-scalar":
            return float(a @ mom.mean)
        if self.task == "cov-scalar":
            return float(a @ np.diag(mom.cov))
        if self.task == "mean-vector":
            return a @ mom.mean
        if self.task == "cov-matrix":
            return np.einsum("l,llij->ij", a, mom.cov)
        return mom.cov[-1, -1]


def _weights_table(weights, structure):
    rows = []
    matrix = getattr(weights, "flavor", None) == "matrix"
    for k, b in enumerate(weights.betas, start=1):
        b = np.asarray(b)
        pos = 0
        for j, level in enumerate(structure.groups[k - 1]):
            if matrix:
                size = weights.level_sizes[level - 1]
                col = b[:, pos:pos + size]
                pos += size
            else:
                col = b[j] if b.ndim == 1 else b[..., j]
            rows.append({"group": k, "level": level,
                         "weight": col if np.ndim(col) == 0 else np.ravel(col).tolist()})
    return rows


def cmd_validate(exp, args):
    violations = exp.violations
    return {"valid": not violations, "violations": violations,
            "structure": exp.structure.to_dict()}


def cmd_weights(exp, args):
    exp.need_m()
    est = exp.estimator()
    if exp.task == "localize":
        raise ConfigError("localization weights depend on the ensemble; use 'localize'")
    est.fit(exp.calibration_data())
    w = est.weights_
    out = {"task": exp.task, "flavor": getattr(w, "flavor", exp.flavor),
           "structure": exp.structure.to_dict(), "alpha": exp.alpha_vector(),
           "variance": w.variance, "no_bias_residual": w.no_bias_residual(exp.structure),
           "weights": _weights_table(w, exp.structure)}
    if args.csv:
        _write_csv(Path(args.out) / "weights.csv", ["group", "level", "weight"],
                   [[r["group"], r["level"], r["weight"]] for r in out["weights"]])
    return out


def cmd_allocate(exp, args):
    s = exp.structure
    conf = exp.allocation
    budget = args.budget if args.budget is not None else conf.get("budget")
    target = args.target if args.target is not None else conf.get("target")
    method = conf.get("method", "mosap")
    if s.costs is None:
        raise ConfigError("allocation needs structure.costs")
    mom = analytic_moments(exp.spec)
    if method == "mlmc-cov":
        if budget is None:
            raise ConfigError("the MLMC covariance allocation needs a budget")
        fourth = [[mom.pointwise_fourth(_diff_weights(s.L, l, sign)) for l in range(s.L)]
                  for sign in (-1.0, 1.0)]
        bounds = mlmc_covariance_bounds(np.array(fourth[0]), np.array(fourth[1]))
        result = mlmc_cov_allocation(s, bounds, float(budget), mom.averaged_covcov_terms())
        return {"method": method, "allocation": result.to_dict()}
    if exp.task == "mean-scalar":
        objective = MeanVariance(s, mom.group_moments(s).matrices, exp.alpha)
    elif exp.task == "cov-scalar":
        objective = CovarianceVariance(s, mom.variance_covcov_terms(), exp.alpha)
    elif exp.task == "cov-matrix":
        objective = CovarianceVariance(s, mom.averaged_covcov_terms(), exp.alpha)
    else:
        raise ConfigError(f"no allocation objective for task {exp.task!r}")
    problem = AllocationProblem(s, objective, budget=None if budget is None else float(budget),
                                target=None if target is None else float(target))
    result = allocate(problem)
    return {"method": method, "mode": problem.mode, "budget": budget, "target": target,
            "allocation": result.to_dict()}


def _diff_weights(L, l, sign):
    w = np.zeros(L)
    w[l] = 1.0
    if l > 0:
        w[l - 1] = sign
    return w


def _summary(value):
    if hasattr(value, "matrix"):
        return value.matrix
    return value


def cmd_estimate(exp, args):
    exp.need_m()
    ens = sample_ensemble(exp.spec, exp.structure, exp.seed)
    est = exp.estimator()
    if exp.task == "localize":
        est.fit(_localize_calibration(exp, 0))
    else:
        est.fit(exp.calibration_data())
    value = est.estimate(ens)
    target = exp.target()
    out = {"task": exp.task, "seed": exp.seed, "m": list(exp.structure.m),
           "estimate": _summary(value), "target": target,
           "squared_error": float(np.sum((np.asarray(_summary(value)) - target) ** 2))}
    if hasattr(est, "variance_"):
        out["theoretical_variance"] = est.variance_
    return out


def _localize_calibration(exp, r):
    size = int(exp.localization.get("calibration_size", DEFAULT_CALIBRATION_SIZE))
    return sample_coupled(exp.spec, size, exp.seed, (r, 0))


def cmd_replicate(exp, args):
    exp.need_m()
    R = exp.replications
    target = exp.target()
    if exp.task == "localize":
        return _replicate_localized(exp, args, target)
    est = exp.estimator().fit(exp.calibration_data())

    def run(ens):
        return _summary(est.estimate(ens))

    res = replicate_estimator(run, exp.spec, exp.structure, R, exp.seed, target,
                              threads=args.threads)
    theory = est.variance_
    out = {"task": exp.task, "flavor": exp.flavor, "R": R, "seed": exp.seed,
           "m": list(exp.structure.m), "empirical": res.to_dict(),
           "theoretical_variance": theory,
           "relative_variance_error": (res.variance - theory) / theory}
    if exp.task in ("mean-scalar", "cov-scalar"):
        out["empirical"]["target"] = target
    if args.csv:
        _write_csv(Path(args.out) / "replicate.csv",
                   ["quantity", "empirical", "standard_error", "theoretical"],
                   [["variance", res.variance, res.se_variance, theory],
                    ["mse", res.mse, res.se_mse, theory]])
    return out


def _replicate_localized(exp, args, target):
    s = exp.structure
    mom = analytic_moments(exp.spec)
    unloc = covmat_scalar_weights(s, mom.averaged_covcov_terms())
    part = EquivalenceClassPartition.periodic_distance(exp.spec.n)
    errors = {"localized": [], "unlocalized": []}
    cache = {}
    for r in range(exp.replications):
        ens = sample_ensemble(exp.spec, s, exp.seed, r, cache)
        est = LocalizedCovarianceMLBLUE(s, part, exp.localization.get("subset"),
                                        bool(exp.localization.get("clip", False)), exp.seed)
        loc = est.fit(_localize_calibration(exp, r)).estimate(ens).matrix
        raw = apply_covmat_scalar_estimator(unloc, ens.group_covariance_matrices()).matrix
        errors["localized"].append(np.sum((loc - target) ** 2))
        errors["unlocalized"].append(np.sum((raw - target) ** 2))
    out = {"task": "localize", "R": exp.replications, "seed": exp.seed, "m": list(s.m),
           "calibration_size": int(exp.localization.get("calibration_size",
                                                        DEFAULT_CALIBRATION_SIZE)),
           "theoretical_variance_unlocalized": unloc.variance}
    for key, e in errors.items():
        e = np.asarray(e)
        out[f"mse_{key}"] = float(e.mean())
        out[f"se_mse_{key}"] = float(e.std(ddof=1) / np.sqrt(e.size))
    return out


def cmd_localize(exp, args):
    exp.need_m()
    if exp.task != "localize":
        raise ConfigError("the localize subcommand needs task 'localize'")
    ens = sample_ensemble(exp.spec, exp.structure, exp.seed)
    est = exp.estimator().fit(_localize_calibration(exp, 0))
    value = est.estimate(ens)
    target = exp.target()
    return {"seed": exp.seed, "localization": est.localization_.to_dict(),
            "replaced_classes": est.localization_.diagnostics["replaced"],
            "psd": bool(value.provenance["psd"]),
            "squared_error": float(np.sum((value.matrix - target) ** 2))}


def _best_time(fn, x, repeats):
    best = np.inf
    for _ in range(repeats):
        t = time.perf_counter()
        fn(x)
        best = min(best, time.perf_counter() - t)
    return best


def bench_gamma(sizes, ne, L, repeats, seed, naive_sizes=()):
    """Time the gamma-average path over ``sizes`` and both paths over ``naive_sizes``.

    Returns the fast-path rows, the comparison rows and the slope of
    log-time against log-n for the fast path.
    """
    rng = np.random.default_rng(seed)
    rows = [{"n": int(n), "fast_seconds": _best_time(averaged_covcov_terms,
                                                      rng.standard_normal((ne, L, n)), repeats)}
            for n in sizes]
    compare = []
    for n in naive_sizes:
        x = rng.standard_normal((ne, L, n))
        fast, naive = averaged_covcov_terms(x), averaged_covcov_naive(x)
        diff = max(np.abs(a - b).max() / np.abs(b).max()
                   for a, b in ((fast.first, naive.first), (fast.second, naive.second)))
        compare.append({"n": int(n), "fast_seconds": _best_time(averaged_covcov_terms, x, repeats),
                        "naive_seconds": _best_time(averaged_covcov_naive, x, 1),
                        "max_rel_diff": float(diff)})
    slope = None
    if len(rows) > 1:
        slope = float(np.polyfit(np.log([r["n"] for r in rows]),
                                 np.log([r["fast_seconds"] for r in rows]), 1)[0])
    return rows, compare, slope


def cmd_bench(exp, args):
    sizes = [int(v) for v in args.sizes.split(",")]
    naive = [int(v) for v in args.naive_sizes.split(",") if v]
    rows, compare, slope = bench_gamma(sizes, args.ne, args.levels, args.repeats,
                                       exp.seed if exp else 0, naive)
    return {"timings": rows, "naive_comparison": compare, "slope": slope, "ne": args.ne,
            "L": args.levels}


COMMANDS = {"validate": cmd_validate, "weights": cmd_weights, "allocate": cmd_allocate,
            "estimate": cmd_estimate, "replicate": cmd_replicate, "localize": cmd_localize,
            "bench": cmd_bench}


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def build_parser():
    parser = argparse.ArgumentParser(prog="mlblue", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=name != "bench", help="experiment config file")
        p.add_argument("--seed", type=int, help="override the config seed (unsigned 64-bit)")
        p.add_argument("--threads", type=int, default=None,
                       help=f"worker cap (default: ${THREADS_ENV} or 1)")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--csv", action="store_true", help="also write CSV tables")
        if name == "allocate":
            p.add_argument("--budget", type=float)
            p.add_argument("--target", type=float, help="target standard deviation")
        if name == "bench":
            p.add_argument("--sizes", default="1000,10000,100000")
            p.add_argument("--ne", type=int, default=32)
            p.add_argument("--levels", type=int, default=3)
            p.add_argument("--repeats", type=int, default=7)
            p.add_argument("--naive-sizes", default="10,20,40")
    return parser


def _threads(value):
    if value is None:
        value = int(os.environ.get(THREADS_ENV, "1"))
    if value < 1:
        raise ConfigError("thread count must be positive")
    return value


def main(argv=None):
    args = build_parser().parse_args(argv)
    started = time.perf_counter()
    try:
        args.threads = _threads(args.threads)
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        exp = None
        if args.config:
            exp = Experiment(load_document(args.config), Path(args.config).parent, args.seed)
            if args.command != "validate":
                exp.check()
        result = COMMANDS[args.command](exp, args)
    except (ConfigError, InvalidStructureError, DimensionMismatch, KeyError, TypeError) as exc:
        print(f"mlblue: configuration error: {exc}", file=sys.stderr)
        return 2
    except (MLBLUEError, np.linalg.LinAlgError) as exc:
        print(f"mlblue: numerical failure ({type(exc).__name__}): {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"mlblue: invalid input: {exc}", file=sys.stderr)
        return 2
    result = dict(result, command=args.command, schema_version=1)
    if exp is not None:
        result["config"] = exp.data
    (out_dir / f"{args.command}.json").write_text(dumps(result))
    manifest = {"command": args.command, "argv": list(argv if argv is not None else sys.argv[1:]),
                "seed": exp.seed if exp else None, "threads": args.threads,
                "versions": {"mlblue": __version__, "numpy": np.__version__,
                             "python": platform.python_version()},
                "generator": prng_metadata(),
                "elapsed_seconds": time.perf_counter() - started}
    (out_dir / "run_manifest.json").write_text(dumps(manifest))
    if args.command == "validate" and not result["valid"]:
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
