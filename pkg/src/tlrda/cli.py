"""Command-line harness: simulate | fit | validate | crossover | robustness.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from typing import Optional

import jsonschema
import numpy as np

from . import __version__
from . import risk
from .errors import ContractError, DataError, NumericalError, TLRDAError, UnsupportedRegimeError
from .hyper import HyperParams, estimate_hyper
from .sample import PopulationSample, compute_moments
from .simgen import SimConfig, draw_deltas, draw_population
from .weights import VARIANTS, PluginContext, family, fit_transfer, plugin_problem, prediction_variant

log = logging.getLogger("tlrda")

SCHEMA_VERSION = 1
DEFAULT_GRID = (0.3, 10.0, 30)
EXPERIMENT_COLUMNS = ("lambda", "method", "error_theory", "error_mc_mean", "error_mc_sd", "n_reps", "seed0")

_num = {"type": "number"}
_cov = {"type": ["object", "string"]}
SIM_SCHEMA = {
    "type": "object",
    "properties": {
        "p": {"type": "integer", "minimum": 1},
        "n": {"type": "array", "items": {"type": "integer", "minimum": 3}, "minItems": 1},
        "alpha_sq": {"type": ["number", "array"]},
        "rho": {"type": ["number", "array"]},
        "cov": _cov, "test_cov": _cov,
        "heterogeneous_cov": {"type": "array"},
        "class_balance": {"type": ["number", "array"]},
        "mu_bar_scale": _num,
        "n_test": {"type": "integer", "minimum": 0},
        "seed": {"type": "integer", "minimum": 0},
        "stratified": {"type": "boolean"},
    },
    "required": ["p", "n"],
    "additionalProperties": False,
}
_grid = {"type": ["string", "array"]}
SCHEMAS = {
    "simulate": {"type": "object", "properties": {"sim": SIM_SCHEMA}, "required": ["sim"],
                 "additionalProperties": False},
    "fit": {"type": "object", "properties": {
        "manifest": {"type": "string"}, "variants": {"type": "array", "items": {"enum": list(VARIANTS)}},
        "lambda_grid": _grid, "lambdas_per_population": {"type": "array", "items": _num},
        "folds": {"type": "integer", "minimum": 2}, "seed": {"type": "integer", "minimum": 0},
        "hyper": {"type": "object"},
        "feature_filter": {"type": "object", "properties": {
            "kind": {"enum": ["variance", "t"]}, "top_m": {"type": "integer", "minimum": 1}},
            "required": ["kind", "top_m"], "additionalProperties": False}},
        "required": ["manifest"], "additionalProperties": False},
    "validate": {"type": "object", "properties": {
        "sim": SIM_SCHEMA, "lambda_grid": _grid, "reps": {"type": "integer", "minimum": 1},
        "variants": {"type": "array", "items": {"enum": list(VARIANTS)}},
        "hyper_source": {"enum": ["true", "estimated"]}}, "required": ["sim"],
        "additionalProperties": False},
    "crossover": {"type": "object", "properties": {
        "K": {"type": ["integer", "array"]}, "gammas": _grid, "r": _num, "r_prime": {"type": ["number", "array"]},
        "rho": _num, "alpha_sq": {"type": ["number", "array"]},
        "sweep": {"type": "object"}}, "additionalProperties": False},
    "robustness": {"type": "object", "properties": {
        "sim": {"type": "object"}, "lambda_grid": _grid, "seeds": {"type": ["integer", "array"]},
        "variants": {"type": "array"}}, "additionalProperties": False},
}


# ---------------------------------------------------------------- helpers

def parse_grid(spec, default=DEFAULT_GRID) -> np.ndarray:
    """'a:b:n' -> n log-spaced points in [a, b]; lists pass through."""
    if spec is None:
        a, b, n = default
        return np.geomspace(a, b, n)
    if isinstance(spec, (list, tuple)):
        g = np.asarray(spec, float)
    else:
        try:
            a, b, n = spec.split(":")
            a, b, n = float(a), float(b), int(n)
        except ValueError as e:
            raise ContractError("grid must look like a:b:n, got %r" % spec) from e
        if n < 1 or a <= 0 or b < a:
            raise ContractError("invalid grid %r" % spec)
        g = np.geomspace(a, b, n)
    if np.any(g <= 0):
        raise ContractError("grid values must be positive")
    return g


def write_population_csv(sample: PopulationSample, path: str):
    p = sample.p
    data = np.column_stack([sample.features, sample.labels])
    header = ",".join(["f%d" % (j + 1) for j in range(p)] + ["label"])
    np.savetxt(path, data, delimiter=",", header=header, comments="",
               fmt=["%.17g"] * p + ["%d"])


def read_population_csv(path: str, population_id: int = 1) -> PopulationSample:
    with open(path, newline="") as fh:
        header = next(csv.reader(fh))
    p = len(header) - 1
    if p < 1 or header[-1] != "label" or header[:-1] != ["f%d" % (j + 1) for j in range(p)]:
        raise DataError("%s: header must be f1..fp,label" % path)
    try:
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except ValueError as e:
        raise DataError("%s: %s" % (path, e)) from e
    if data.shape[1] != p + 1:
        raise DataError("%s: ragged rows" % path)
    return PopulationSample(data[:, :p], data[:, p].astype(int), population_id)


def load_manifest(path: str):
    """Returns (train samples with the target last, test sample or None, manifest)."""
    with open(path) as fh:
        man = json.load(fh)
    base = os.path.dirname(os.path.abspath(path))
    pops = man.get("populations")
    if not pops or "target" not in man:
        raise DataError("manifest needs 'populations' and 'target'")
    target = str(man["target"])
    if target not in pops:
        raise DataError("target %s not among populations" % target)
    order = [k for k in sorted(pops, key=lambda s: int(s)) if k != target] + [target]
    train = [read_population_csv(os.path.join(base, pops[k]), int(k)) for k in order]
    test = None
    if man.get("test"):
        test = read_population_csv(os.path.join(base, man["test"]), int(target))
    p = {s.p for s in train}
    if len(p) != 1 or (test is not None and test.p not in p):
        raise DataError("populations disagree in dimension")
    return train, test, man


def select_features(train, kind: str, top_m: int) -> np.ndarray:
    """Indices of the top_m features, scored on training data only.

    'variance' ranks by variance over all training rows; 't' ranks by the
    absolute Welch t statistic between classes in the target population.
    """
    p = train[0].p
    if top_m > p:
        raise ContractError("top_m = %d exceeds p = %d" % (top_m, p))
    if kind == "variance":
        score = np.vstack([s.features for s in train]).var(axis=0, ddof=1)
    else:
        X, y = train[-1].features, train[-1].labels
        a, b = X[y == 1], X[y == -1]
        se = np.sqrt(a.var(axis=0, ddof=1) / len(a) + b.var(axis=0, ddof=1) / len(b))
        score = np.abs(a.mean(axis=0) - b.mean(axis=0)) / np.where(se > 0, se, np.inf)
    # stable sort keeps the lower index on ties
    return np.sort(np.argsort(-score, kind="stable")[:top_m])


def _restrict(sample: Optional[PopulationSample], cols) -> Optional[PopulationSample]:
    if sample is None:
        return None
    return PopulationSample(sample.features[:, cols], sample.labels, sample.population_id)


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        return None if not math.isfinite(float(x)) else float(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def write_report(out: str, command: str, cfg: dict, **sections) -> str:
    rep = {"schema_version": SCHEMA_VERSION, "tool_version": __version__, "command": command,
           "config_echo": cfg}
    rep.update(sections)
    path = os.path.join(out, "report.json")
    with open(path, "w") as fh:
        json.dump(_jsonable(rep), fh, indent=2, sort_keys=True)
    return path


def write_table(path: str, rows, columns=EXPERIMENT_COLUMNS):
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        wr.writeheader()
        for r in rows:
            wr.writerow({c: ("NaN" if isinstance(r.get(c), float) and not math.isfinite(r[c]) else r.get(c))
                         for c in columns})


def _sim_config(d: dict, seed: Optional[int]) -> SimConfig:
    d = dict(d)
    if seed is not None:
        d["seed"] = seed
    return SimConfig(**d)


# ---------------------------------------------------------------- commands

def cmd_simulate(cfg: dict, out: str, seed: Optional[int] = None) -> dict:
    sc = _sim_config(cfg["sim"], seed)
    os.makedirs(out, exist_ok=True)
    deltas = draw_deltas(sc)
    files = {}
    for k in range(1, sc.K + 1):
        s = draw_population(sc, k, deltas)
        name = "pop_%d.csv" % k
        write_population_csv(s, os.path.join(out, name))
        files[str(k)] = name
    man = {"schema_version": SCHEMA_VERSION, "populations": files, "target": sc.K, "test": None}
    if sc.n_test > 0:
        write_population_csv(draw_population(sc, sc.K, deltas, test=True), os.path.join(out, "test.csv"))
        man["test"] = "test.csv"
    else:
        man["test_note"] = "n_test = 0; no test set written"
    with open(os.path.join(out, "manifest.json"), "w") as fh:
        json.dump(man, fh, indent=2, sort_keys=True)
    write_report(out, "simulate", _jsonable({**cfg, "sim": sc.to_dict()}), manifest=man)
    return man


def _cv_errors(variant, train, hyper, grid, folds, seed, lams_pp=None):
    """Mean held-out target error per grid value."""
    tgt = train[-1]
    rng = np.random.default_rng(seed)
    idx = rng.permutation(tgt.n)
    parts = np.array_split(idx, folds)
    src_mos = [compute_moments(s) for s in train[:-1]]
    errs = np.zeros((len(grid), folds))
    for f, hold in enumerate(parts):
        keep = np.setdiff1d(idx, hold)
        try:
            mo_t = compute_moments(tgt.subset(keep))
        except DataError:
            errs[:, f] = np.nan
            continue
        ctx = PluginContext(src_mos + [mo_t])
        held = tgt.subset(hold)
        for i, lam in enumerate(grid):
            lams = lam if lams_pp is None else np.asarray(lams_pp) * lam
            fit = fit_transfer(variant, hyper, ctx, lams)
            errs[i, f] = risk.empirical_error_and_auc(fit.classifier, None, held)["error"]
    return np.nanmean(errs, axis=1)


def _fit_one(v, train, test, hyper, ctx, grid, folds, seed, lams_pp):
    errs = _cv_errors(v, train, hyper, grid, folds, seed, lams_pp)
    best = int(np.nanargmin(errs))  # first minimum -> smallest lambda on ties
    lam = float(grid[best])
    lams = lam if lams_pp is None else np.asarray(lams_pp) * lam
    fit = fit_transfer(v, hyper, ctx, lams)
    pp = plugin_problem(prediction_variant(v), hyper, ctx, lams)
    minv = None
    try:
        minv = ctx.target_mean_inv_T() if family(v) == "het" else ctx.pooled_mean_inv_T()
    except UnsupportedRegimeError:
        pass
    emp = risk.empirical_error_and_auc(fit.classifier, None, test) if test is not None else None
    try:
        rr = risk.risk_report(fit.weights.w, pp.u, pp.system, float(hyper.alpha_sq[-1]), minv, emp).to_dict()
    except ContractError as e:
        rr = {"limiting_error": 0.5, "note": str(e), "empirical_error": emp and emp["error"]}
    if emp and "auc_error" in emp:
        rr["auc_note"] = emp["auc_error"]
    cv = {"lambda_grid": grid.tolist(), "mean_error": errs.tolist(), "selected": lam}
    return {**fit.weights.to_dict(), "lambda": lam}, rr, cv


def cmd_fit(cfg: dict, out: str, seed: Optional[int] = None, variants=None, grid=None,
            folds: Optional[int] = None) -> dict:
    train, test, man = load_manifest(cfg["manifest"])
    variants = variants or cfg.get("variants") or ["P_ind"]
    grid = parse_grid(grid if grid is not None else cfg.get("lambda_grid"))
    folds = folds or cfg.get("folds", 5)
    seed = seed if seed is not None else cfg.get("seed", 0)
    lams_pp = cfg.get("lambdas_per_population")
    if lams_pp is not None:
        if len(lams_pp) != len(train):
            raise ContractError("lambdas_per_population needs one entry per population")
        if any(family(v) == "pool" for v in variants):
            raise ContractError("pooled variants require a common lambda")
    selected = None
    if "feature_filter" in cfg:
        ff = cfg["feature_filter"]
        selected = select_features(train, ff["kind"], ff["top_m"])
        train = [_restrict(s, selected) for s in train]
        test = _restrict(test, selected)
    mos = [compute_moments(s) for s in train]
    if "hyper" in cfg:
        hyper = HyperParams.from_dict(cfg["hyper"], "user_supplied")
        if hyper.K != len(train):
            raise ContractError("hyper has %d populations, data has %d" % (hyper.K, len(train)))
    else:
        hyper = estimate_hyper(mos)
    ctx = PluginContext(mos)
    K = len(train)
    weights, risks, cv = {}, {}, {}
    for v in variants:
        try:
            weights[v], risks[v], cv[v] = _fit_one(v, train, test, hyper, ctx, grid, folds, seed, lams_pp)
        except UnsupportedRegimeError as e:
            log.warning("%s skipped: %s", v, e)
            weights[v] = {"variant": v, "skipped": str(e)}
            if len(variants) == 1:
                raise
        if K == 1 and "w" in weights[v]:
            weights[v]["note"] = "single population: transfer weight is trivial (naive RDA)"
    if all("skipped" in weights[v] for v in variants):
        raise UnsupportedRegimeError("no requested variant is supported on this data")
    os.makedirs(out, exist_ok=True)
    extra = {} if selected is None else {"selected_features": (selected + 1).tolist()}
    write_report(out, "fit", cfg, hyperparams=hyper.to_dict(), weights=weights, risk=risks, cv=cv, **extra)
    return {"weights": weights, "risk": risks, "hyperparams": hyper.to_dict(), "cv": cv, **extra}


def cmd_validate(cfg: dict, out: str, seed: Optional[int] = None, variants=None, grid=None,
                 reps: Optional[int] = None) -> list:
    sc = _sim_config(cfg["sim"], seed)
    grid = parse_grid(grid if grid is not None else cfg.get("lambda_grid"))
    reps = reps or cfg.get("reps", 50)
    variants = variants or cfg.get("variants") or ["E_ind", "P_ind", "E_pool", "P_pool"]
    rows = risk.theory_vs_mc(sc, grid, reps, variants, cfg.get("hyper_source", "true"))
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "validate.csv")
    write_table(path, rows)
    write_report(out, "validate", _jsonable({**cfg, "sim": sc.to_dict()}),
                 experiment_tables={"validate": path})
    return rows


def cmd_crossover(cfg: dict, out: str) -> list:
    Ks = np.atleast_1d(cfg.get("K", [2, 6])).astype(int)
    gammas = parse_grid(cfg.get("gammas"), default=(0.5, 8.0, 25))
    rows = []
    os.makedirs(out, exist_ok=True)
    if "sweep" in cfg:
        from .simgen import CovSpec
        sw = cfg["sweep"]
        H = np.linalg.eigvalsh(CovSpec.from_any(sw.get("cov", "ar1")).matrix(int(sw.get("p", 400))))
        lam_grid = parse_grid(sw.get("lambda_grid"))
        for K in Ks:
            for r in risk.crossover_sweep(int(K), gammas, cfg.get("alpha_sq", 0.5), cfg.get("rho", 0.5), H, lam_grid):
                rows.append({"K": int(K), **r, "pooled_wins": r["err_pooled"] < r["err_individual"]})
    else:
        rp = cfg.get("r_prime")
        if rp is None:
            rps = {int(K): 2.0 * int(K) / gammas.min() for K in Ks}
        elif isinstance(rp, list):
            if len(rp) != len(Ks):
                raise ContractError("r_prime list must align with K")
            rps = dict(zip(map(int, Ks), map(float, rp)))
        else:
            rps = {int(K): float(rp) for K in Ks}
        for K in Ks:
            res = risk.crossover_analysis(int(K), gammas, cfg.get("r", 2.0), rps[int(K)],
                                          cfg.get("rho", 0), cfg.get("alpha_sq", 0.5))
            for r in res["rows"]:
                rows.append({"K": int(K), **r, "gamma_star": res["gamma_star"]})
    path = os.path.join(out, "crossover.csv")
    cols = list(rows[0].keys()) if rows else ["K"]
    write_table(path, rows, cols)
    write_report(out, "crossover", cfg, experiment_tables={"crossover": path})
    return rows


def cmd_robustness(cfg: dict, out: str, seed: Optional[int] = None, grid=None, reps: Optional[int] = None) -> list:
    sc = risk.robustness_config(seed=seed or 0, **cfg.get("sim", {}))
    grid = parse_grid(grid if grid is not None else cfg.get("lambda_grid"))
    seeds = cfg.get("seeds", reps or 20)
    seeds = list(range(sc.seed, sc.seed + seeds)) if isinstance(seeds, int) else list(seeds)
    rows = risk.robustness_experiment(sc, grid, seeds, tuple(cfg.get("variants", ("naive", "E_ind", "P_ind"))))
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "robustness.csv")
    write_table(path, rows)
    write_report(out, "robustness", _jsonable({**cfg, "sim": sc.to_dict()}), experiment_tables={"robustness": path})
    return rows


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tlrda", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name in SCHEMAS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=name != "crossover", help="JSON config file")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--variant", action="append", choices=VARIANTS)
        p.add_argument("--lambda-grid", help="a:b:n, log-spaced")
        p.add_argument("--folds", type=int)
        p.add_argument("--reps", type=int)
        p.add_argument("-v", "--verbose", action="store_true")
    return ap


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = {}
        if args.config:
            with open(args.config) as fh:
                cfg = json.load(fh)
        jsonschema.validate(cfg, SCHEMAS[args.command])
        if args.command == "simulate":
            cmd_simulate(cfg, args.out, args.seed)
        elif args.command == "fit":
            cmd_fit(cfg, args.out, args.seed, args.variant, args.lambda_grid, args.folds)
        elif args.command == "validate":
            cmd_validate(cfg, args.out, args.seed, args.variant, args.lambda_grid, args.reps)
        elif args.command == "crossover":
            cmd_crossover(cfg, args.out)
        else:
            cmd_robustness(cfg, args.out, args.seed, args.lambda_grid, args.reps)
    except (jsonschema.ValidationError, json.JSONDecodeError, TypeError) as e:
        log.error("config error: %s", getattr(e, "message", e))
        return 2
    except TLRDAError as e:
        log.error("%s: %s", type(e).__name__, e)
        return e.exit_code
    except OSError as e:
        log.error("IO error: %s", e)
        return 3
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
