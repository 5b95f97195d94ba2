"""Command-line interface: ``fit``, ``estimate``, ``simulate`` and ``truth``.

Settings come from flags, then a JSON ``--config`` file, then built-in
defaults. Exit codes: 0 success, 2 usage, 3 input schema, 4 convergence or
root finding, 5 stratum coverage, 6 numerical failure, 7 invalid
configuration, 8 too many failed replicates, 9 file I/O.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .errors import ClusterIPWError, ConfigurationError, SchemaError
from .estimands import EstimandSpec, standard_estimands
from .estimators import estimate_many
from .io import read_clusters_csv, read_json, write_json
from .policy import type_b_weights
from .propensity import PropensityParams, fit_mle, gauss_hermite
from .simulation import DgpConfig, assemble_truth, fast_config, quadrature_truth, replicate_study

logger = logging.getLogger("clusteripw")

EXIT_IO = 9

DEFAULTS = {
    "id_col": "cluster_id", "treatment_col": "treatment", "outcome_col": "outcome", "covariates": None,
    "quad_nodes": 25, "tol": 1e-6, "max_iter": 500, "seed": 0, "ci_level": 0.95, "k": "default",
    "scale_1000": False, "closure": False, "all_strata": False, "type_b": False, "sigma": "auto",
    "alpha": None, "contrast": None, "estimand": None, "replicates": 200, "threads": 1,
    "fast": False, "clusters": None, "outcome_intercept": None, "normal_scale": None,
    "method": "simulation", "truth_method": "quadrature", "m1": 10**6, "m2": 10**6, "m3": 10**6,
    "m_cov": 20_000, "truth_file": None, "model": None, "data": None, "out": None, "verbose": False,
}
SIGMA_FULL_MAX = 2000
TABLE_ALPHAS = (0.4, 0.5, 0.55)


# --------------------------------------------------------------------------
# argument parsing

def _k_value(text):
    # "all" survives parsing as a string so it is not mistaken for an absent flag
    if str(text).lower() in ("all", "none", "exhaustive"):
        return "all"
    k = int(text)
    if k < 1:
        raise argparse.ArgumentTypeError("k must be a positive integer or 'all'")
    return k


def _contrast(text):
    try:
        a, b = (float(x) for x in str(text).split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"contrast must look like 0.5,0.4, got {text!r}") from None
    return (a, b)


def _add_common(p):
    p.add_argument("--config", help="JSON file of settings (flags take precedence)")
    p.add_argument("--seed", type=int, default=None, help="master seed (default 0)")
    p.add_argument("--quad-nodes", type=int, default=None, help="Gauss-Hermite nodes (default 25)")
    p.add_argument("--threads", type=int, default=None, help="worker processes for replicates (default 1)")
    p.add_argument("--out", default=None, help="output path")
    p.add_argument("-v", "--verbose", action="store_true", default=None)


def _add_data(p):
    p.add_argument("--data", default=None, help="long CSV, one row per individual")
    p.add_argument("--id-col", default=None)
    p.add_argument("--treatment-col", default=None)
    p.add_argument("--outcome-col", default=None)
    p.add_argument("--covariates", default=None, help="comma-separated covariate columns (default: all others)")


def _add_dgp(p):
    p.add_argument("--fast", action="store_true", default=None, help="small cluster sizes {4, 8, 12}")
    p.add_argument("--clusters", type=int, default=None, help="clusters per dataset (default 125)")
    p.add_argument("--outcome-intercept", type=float, default=None)
    p.add_argument("--normal-scale", choices=("sd", "variance"), default=None)
    p.add_argument("--alpha", type=float, action="append", default=None,
                   help="policy value; repeat for several (default 0.4, 0.5, 0.55)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clusteripw", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit the random-intercept propensity model")
    _add_common(p)
    _add_data(p)
    p.add_argument("--tol", type=float, default=None)
    p.add_argument("--max-iter", type=int, default=None)

    p = sub.add_parser("estimate", help="IPW estimates with sandwich intervals")
    _add_common(p)
    _add_data(p)
    p.add_argument("--model", default=None, help="fitted-model JSON from 'fit' (otherwise fit here)")
    p.add_argument("--alpha", type=float, action="append", default=None, help="policy value (repeatable)")
    p.add_argument("--contrast", type=_contrast, action="append", default=None,
                   help="policy pair a,b for oe/se0/se1 (repeatable; both must be listed in --alpha)")
    p.add_argument("--estimand", action="append", default=None, help="explicit estimand such as 'se1(0.5,0.4)'")
    p.add_argument("--type-b", action="store_true", default=None, help="add independent-allocation comparators")
    p.add_argument("--k", type=_k_value, default=None, help="sampled vectors per stratum, or 'all' (default)")
    p.add_argument("--ci-level", type=float, default=None)
    p.add_argument("--scale-1000", action="store_true", default=None, help="multiply estimates by 1000")
    p.add_argument("--closure", action="store_true", default=None,
                   help="drop omega(n, n) from fully supported sizes in the variance stack")
    p.add_argument("--all-strata", action="store_true", default=None)
    p.add_argument("--sigma", choices=("auto", "full", "targets"), default=None,
                   help="covariance written to the JSON sidecar (auto: full when small)")
    p.add_argument("--tol", type=float, default=None)
    p.add_argument("--max-iter", type=int, default=None)

    p = sub.add_parser("simulate", help="replication study with bias, coverage and SE summaries")
    _add_common(p)
    _add_dgp(p)
    p.add_argument("--replicates", type=int, default=None)
    p.add_argument("--k", type=_k_value, default=None, help="sampled vectors per stratum (default 1)")
    p.add_argument("--ci-level", type=float, default=None)
    p.add_argument("--truth-method", choices=("quadrature", "simulation", "file"), default=None)
    p.add_argument("--truth-file", default=None, help="truth CSV written by 'truth'")
    p.add_argument("--m-cov", type=int, default=None)
    p.add_argument("--m1", type=int, default=None)
    p.add_argument("--m2", type=int, default=None)
    p.add_argument("--m3", type=int, default=None)

    p = sub.add_parser("truth", help="true estimand values for the simulation design")
    _add_common(p)
    _add_dgp(p)
    p.add_argument("--method", choices=("simulation", "quadrature"), default=None)
    p.add_argument("--m1", type=int, default=None)
    p.add_argument("--m2", type=int, default=None)
    p.add_argument("--m3", type=int, default=None)
    p.add_argument("--m-cov", type=int, default=None)
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Merge flags over the config file over defaults."""
    cfg = {}
    if getattr(args, "config", None):
        try:
            cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except json.JSONDecodeError as err:
            raise SchemaError(f"{args.config}: invalid JSON ({err})") from None
        if not isinstance(cfg, dict):
            raise SchemaError(f"{args.config}: expected a JSON object")
        cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
        unknown = sorted(set(cfg) - set(DEFAULTS))
        if unknown:
            raise ConfigurationError(f"{args.config}: unknown setting(s) {unknown}")
    out = {}
    for key, default in DEFAULTS.items():
        flag = getattr(args, key, None)
        out[key] = flag if flag is not None else cfg.get(key, default)
    out["command"] = args.command
    if isinstance(out["covariates"], str):
        out["covariates"] = [c.strip() for c in out["covariates"].split(",") if c.strip()]
    if out["contrast"] is not None:
        out["contrast"] = [_contrast(",".join(map(str, c))) if not isinstance(c, str) else _contrast(c)
                           for c in out["contrast"]]
    if out["k"] != "default" and out["k"] is not None:
        out["k"] = _k_value(out["k"])
    if out["k"] == "all":
        out["k"] = None
    if out["quad_nodes"] < 1:
        raise ConfigurationError("--quad-nodes must be at least 1")
    if not 0.0 < out["ci_level"] < 1.0:
        raise ConfigurationError("--ci-level must lie in (0, 1)")
    for a in out["alpha"] or ():
        if not 0.0 < a < 1.0:
            raise ConfigurationError(f"alpha values must lie in (0, 1), got {a}")
    return out


# --------------------------------------------------------------------------
# helpers

def _load_data(cfg):
    if not cfg["data"]:
        raise ConfigurationError("--data is required")
    return read_clusters_csv(cfg["data"], cfg["id_col"], cfg["treatment_col"], cfg["outcome_col"],
                             cfg["covariates"])


def _dgp(cfg) -> DgpConfig:
    base = fast_config() if cfg["fast"] else DgpConfig()
    kw = {"seed": cfg["seed"]}
    if cfg["clusters"] is not None:
        kw["M"] = cfg["clusters"]
    if cfg["outcome_intercept"] is not None:
        kw["outcome_intercept"] = cfg["outcome_intercept"]
    if cfg["normal_scale"] is not None:
        kw["normal_scale"] = cfg["normal_scale"]
    return base.with_(**kw)


def _write_frame(frame: pd.DataFrame, out):
    if out is None:
        sys.stdout.write(frame.to_csv(index=False))
    else:
        frame.to_csv(out, index=False)


def _sidecar(out, suffix=".json"):
    return None if out is None else Path(out).with_suffix(suffix)


def _companion(out, tag):
    return None if out is None else Path(out).with_name(f"{Path(out).stem}_{tag}.csv")


def _specs_for_estimate(cfg) -> list[EstimandSpec]:
    alphas = list(dict.fromkeys(cfg["alpha"] or []))
    specs = []
    for a in alphas:
        specs += [EstimandSpec(kind, a) for kind in ("mu", "mu0", "mu1")]
        if cfg["type_b"]:
            specs.append(EstimandSpec("mu_typeB", a))
    for a, b in cfg["contrast"] or []:
        missing = [x for x in (a, b) if x not in alphas]
        if missing:
            raise ConfigurationError(f"contrast ({a},{b}) uses policy values {missing} not given by --alpha")
        specs += [EstimandSpec(kind, a, b) for kind in ("oe", "se0", "se1")]
        if cfg["type_b"]:
            specs.append(EstimandSpec("oe_typeB", a, b))
    specs += [EstimandSpec.parse(t) for t in cfg["estimand"] or []]
    if not specs:
        raise ConfigurationError("nothing to estimate: give --alpha, --contrast or --estimand")
    return list(dict.fromkeys(specs))


def _fit(clusters, cfg, rule):
    return fit_mle(clusters, rule, tol=cfg["tol"], max_iter=cfg["max_iter"], full_output=True)


# --------------------------------------------------------------------------
# subcommands

def cmd_fit(cfg) -> int:
    if cfg["out"] is None:
        raise ConfigurationError("--out is required for fit")
    clusters, covs = _load_data(cfg)
    res = _fit(clusters, cfg, gauss_hermite(cfg["quad_nodes"]))
    payload = {
        "kind": "propensity_fit",
        "covariates": covs,
        "params": {"beta0": res.params.beta0, "beta1": res.params.beta1, "sigma": res.params.sigma},
        "diagnostics": {"loglik": res.loglik, "grad_norm": res.grad_norm, "n_iter": res.n_iter,
                        "converged": res.converged, "clusters": len(clusters),
                        "individuals": int(sum(c.n for c in clusters))},
        "settings": {"quad_nodes": cfg["quad_nodes"], "tol": cfg["tol"], "max_iter": cfg["max_iter"]},
    }
    write_json(cfg["out"], payload)
    logger.info("fit: sigma=%.4f loglik=%.4f (%d iterations)", res.params.sigma, res.loglik, res.n_iter)
    return 0


def _load_model(path, covs):
    data = read_json(path)
    if data.get("kind") != "propensity_fit":
        raise SchemaError(f"{path}: not a fitted-model file")
    if data.get("covariates") != covs:
        raise SchemaError(f"{path}: model covariates {data.get('covariates')} differ from data columns {covs}")
    p = data["params"]
    return PropensityParams(p["beta0"], p["beta1"], p["sigma"])


def cmd_estimate(cfg) -> int:
    clusters, covs = _load_data(cfg)
    specs = _specs_for_estimate(cfg)
    rule = gauss_hermite(cfg["quad_nodes"])
    t0 = time.perf_counter()
    if cfg["model"]:
        params = _load_model(cfg["model"], covs)
        fit_info = {"source": str(cfg["model"])}
    else:
        res = _fit(clusters, cfg, rule)
        params = res.params
        fit_info = {"source": "fitted", "loglik": res.loglik, "grad_norm": res.grad_norm, "n_iter": res.n_iter}
    k = None if cfg["k"] == "default" else cfg["k"]
    run = estimate_many(specs, clusters, params, rule, k=k, seed=cfg["seed"], level=cfg["ci_level"],
                        closure=cfg["closure"], all_strata=cfg["all_strata"])
    elapsed = time.perf_counter() - t0

    scale = 1000.0 if cfg["scale_1000"] else 1.0
    frame = pd.DataFrame([r.as_dict() for r in run.reports])
    for col in ("point", "std_error", "ci_lower", "ci_upper"):
        frame[col] = frame[col] * scale
    frame["scale"] = scale
    _write_frame(frame, cfg["out"])

    side = _sidecar(cfg["out"])
    if side is not None:
        labels = ["/".join(map(str, lab)) for lab in run.stack.labels]
        q = len(labels)
        scope = cfg["sigma"]
        if scope == "auto":
            scope = "full" if q <= SIGMA_FULL_MAX else "targets"
        keep = list(range(q)) if scope == "full" else [r.index for r in run.reports]
        write_json(side, {
            "kind": "estimates",
            "estimands": [r.spec.label for r in run.reports],
            "params": {"beta0": params.beta0, "beta1": params.beta1, "sigma": params.sigma},
            "fit": fit_info,
            "theta_labels": labels,
            "theta": run.theta.values,
            "sigma_scope": scope,
            "sigma_labels": [labels[i] for i in keep],
            "sigma": run.sandwich.Sigma_hat[np.ix_(keep, keep)],
            "clusters": run.stack.M,
            "q": q,
            "jacobian_condition": run.sandwich.condition,
            "k": k, "seed": cfg["seed"], "level": cfg["ci_level"], "scale": scale,
            "quad_nodes": cfg["quad_nodes"], "closure": cfg["closure"],
        })
    logger.info("estimate: %d estimands, q=%d, %.1fs", len(specs), run.stack.q, elapsed)
    return 0


def _truth_table(dgp, alphas, cfg, method):
    if method == "quadrature":
        return quadrature_truth(dgp, alphas, m_cov=cfg["m_cov"], rule=gauss_hermite(cfg["quad_nodes"]))
    return assemble_truth(dgp, alphas, cfg["m1"], cfg["m2"], cfg["m3"])


def _truth_specs(alphas, type_b=True):
    specs = standard_estimands(tuple(alphas))
    if type_b:
        specs += [EstimandSpec("mu_typeB", a) for a in alphas]
        specs += [EstimandSpec("oe_typeB", s.alpha, s.alpha_prime) for s in specs if s.kind == "oe"]
    return specs


def cmd_truth(cfg) -> int:
    dgp = _dgp(cfg)
    alphas = tuple(dict.fromkeys(cfg["alpha"] or TABLE_ALPHAS))
    t0 = time.perf_counter()
    table = _truth_table(dgp, alphas, cfg, cfg["method"])
    elapsed = time.perf_counter() - t0
    _write_frame(table.to_frame(_truth_specs(alphas)), cfg["out"])

    omega = table.omega_frame()
    omega["omega_tv"] = [type_b_weights(a, int(n))[int(s)] for a, n, s in zip(omega["alpha"], omega["n"], omega["s"])]
    omega["ratio"] = omega["omega"] / omega["omega_tv"]
    comp = _companion(cfg["out"], "omega")
    if comp is not None:
        omega.to_csv(comp, index=False)
        write_json(_sidecar(cfg["out"]), {
            "kind": "truth", "method": table.method, "alphas": list(alphas), "gamma0": table.gamma0,
            "sample_sizes": table.sample_sizes, "dgp": dgp.to_dict(), "seconds": elapsed,
        })
    logger.info("truth (%s): %.1fs", table.method, elapsed)
    return 0


def cmd_simulate(cfg) -> int:
    dgp = _dgp(cfg)
    alphas = tuple(dict.fromkeys(cfg["alpha"] or TABLE_ALPHAS))
    specs = standard_estimands(alphas)
    method = cfg["truth_method"]
    if cfg["truth_file"]:
        method = "file"
    if method == "file":
        if not cfg["truth_file"]:
            raise ConfigurationError("--truth-file is required with --truth-method file")
        tf = pd.read_csv(cfg["truth_file"])
        if not {"estimand", "truth"} <= set(tf.columns):
            raise SchemaError(f"{cfg['truth_file']}: needs 'estimand' and 'truth' columns")
        truth = dict(zip(tf["estimand"], tf["truth"]))
    else:
        table = _truth_table(dgp, alphas, cfg, method)
        truth = {s.label: table.value(s) for s in specs}
    k = 1 if cfg["k"] == "default" else cfg["k"]
    t0 = time.perf_counter()
    report = replicate_study(dgp, cfg["replicates"], truth, specs, k=k, Q=cfg["quad_nodes"],
                             level=cfg["ci_level"], threads=cfg["threads"])
    elapsed = time.perf_counter() - t0
    _write_frame(report.summary, cfg["out"])
    comp = _companion(cfg["out"], "replicates")
    if comp is not None:
        report.replicates.to_csv(comp, index=False)
        write_json(_sidecar(cfg["out"]), {
            "kind": "simulation", "replicates": report.R, "failed": report.n_failed,
            "failures": {str(r): m for r, m in report.failures.items()}, "k": k,
            "truth_method": method, "dgp": dgp.to_dict(), "seconds": elapsed,
        })
    logger.info("simulate: %d replicates (%d failed), %.1fs", report.R, report.n_failed, elapsed)
    return 0


COMMANDS = {"fit": cmd_fit, "estimate": cmd_estimate, "simulate": cmd_simulate, "truth": cmd_truth}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve(args)
        logging.basicConfig(level=logging.INFO if cfg["verbose"] else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](cfg)
    except ClusterIPWError as err:
        print(f"clusteripw {args.command}: {type(err).__name__}: {err}", file=sys.stderr)
        return err.exit_code
    except OSError as err:
        print(f"clusteripw {args.command}: {err}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
