"""Command line entry point: ``mkvmaster solve`` and ``mkvmaster check``.

Runs are described by a JSON configuration; unknown keys are rejected. The
seed must come from the configuration or ``--seed``. Every artifact embeds
a hash of the effective configuration, and no artifact carries a timestamp,
so equal configurations give byte-identical files.

Exit codes: 0 success, 1 a check failed, 2 invalid configuration or usage,
3 convergence failure, 4 numerical failure.
"""

import argparse
import copy
import csv
import hashlib
import io
import json
import logging
import math
import os
import sys

import numpy as np

from . import control  # noqa: F401  (registers the Pontryagin scenarios)
from .errors import (
    ConvergenceError,
    IllConditionedBasisError,
    InvalidInputError,
    MkvError,
    NumericDomainError,
    OracleBlowUpError,
)
from .fbsde import InitialLawSpec, SolverParams, flow_consistency, solve_long_horizon, weak_lipschitz_estimate
from .grid import TimeGrid
from .lions import MomentFunctional, chain_rule_residual, lions_derivative, simulate_flow
from .lq_oracle import LqSpec, OracleField, OracleValue, oracle_field, solve_riccati
from .master import master_residual
from .measure import EmpiricalMeasure
from .scenario import SeededSampler, build_scenario, check_lasry_lions, estimate_lipschitz

log = logging.getLogger("mkvmaster")

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_CONVERGENCE, EXIT_NUMERIC = 0, 1, 2, 3, 4

CHECKS = (
    "chain_rule",
    "master_residual",
    "identification",
    "hypotheses",
    "lq_validate",
    "flow_consistency",
    "weak_lipschitz",
)

LQ_SCENARIOS = {"lq_mfg": "mfg", "lq_mkv": "mkv"}


class ConfigError(InvalidInputError):
    pass


# -- configuration ------------------------------------------------------------

_SOLVER_KEYS = {
    "n_particles",
    "n_steps",
    "basis_degree",
    "mean_regressor",
    "replicas",
    "replica_spread",
    "picard_max",
    "tol_law",
    "damping",
    "min_damping",
    "delta_min",
    "block_length",
    "moment_matching",
}

_CHECK_DEFAULTS = {
    "chain_rule": {"functional": "second_moment", "flow": "brownian", "n_particles": 4096, "n_steps": 64, "T": 1.0, "start": "origin", "moment_matching": True, "tol": 0.05},
    "master_residual": {"source": "solver", "n_points": 20, "measure_atoms": 128, "h_t": 1e-3, "h_x": 1e-3, "h_mu": None, "tol": 0.05},
    "identification": {"n_points": 20, "measure_atoms": 128, "h_x": 1e-4, "h_mu": None, "tol": 0.02},
    "hypotheses": {"n_samples": 64, "n_pairs": 16, "tol": 1e-12},
    "lq_validate": {"tol": 0.01},
    "flow_consistency": {"s": None, "tol": 0.02},
    "weak_lipschitz": {"pairs": None, "factor": 1.1, "tol": None},
}

_SCHEMA = {
    "scenario": {"name", "params"},
    "horizon": {"t0", "T"},
    "initial_law": {"kind", "mean", "std", "low", "high", "atoms"},
    "solver": _SOLVER_KEYS,
    "query": {"residual_sweep", "checks"},
    "output": {"ensemble", "ensemble_particles"},
}


def _reject_unknown(block, allowed, where):
    if not isinstance(block, dict):
        raise ConfigError(f"{where} must be an object")
    extra = sorted(set(block) - set(allowed))
    if extra:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(extra)}")


def validate_config(cfg):
    """Check the structure of a configuration and fill defaults (returns a copy)."""
    _reject_unknown(cfg, set(_SCHEMA) | {"seed"}, "config")
    cfg = copy.deepcopy(cfg)
    for key, allowed in _SCHEMA.items():
        if key in cfg:
            _reject_unknown(cfg[key], allowed, key)
    if "scenario" not in cfg or "name" not in cfg["scenario"]:
        raise ConfigError("config needs scenario.name")
    if "seed" not in cfg or isinstance(cfg["seed"], bool) or not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError("a nonnegative integer seed is mandatory (config 'seed' or --seed)")
    cfg.setdefault("horizon", {})
    cfg["horizon"].setdefault("t0", 0.0)
    cfg["horizon"].setdefault("T", 1.0)
    cfg.setdefault("initial_law", {})
    cfg.setdefault("solver", {})
    cfg.setdefault("output", {})
    cfg["output"].setdefault("ensemble", True)
    cfg["output"].setdefault("ensemble_particles", None)
    query = cfg.setdefault("query", {})
    sweep = query.get("residual_sweep")
    if sweep is not None:
        _reject_unknown(sweep, {"t", "x", "measure_atoms", "h_t", "h_x", "h_mu"}, "query.residual_sweep")
        if "t" not in sweep or "x" not in sweep:
            raise ConfigError("query.residual_sweep needs 't' and 'x' lists")
    checks = query.setdefault("checks", {})
    _reject_unknown(checks, CHECKS, "query.checks")
    for name, block in checks.items():
        _reject_unknown(block, _CHECK_DEFAULTS[name], f"query.checks.{name}")
    return cfg


def config_hash(cfg):
    text = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _lq_spec(cfg):
    name = cfg["scenario"]["name"]
    if name not in LQ_SCENARIOS:
        return None, None
    params = dict(cfg["scenario"].get("params", {}))
    hz = cfg["horizon"]
    for key in ("t0", "T"):
        if key in params and params[key] != hz[key]:
            raise ConfigError(f"scenario.params.{key} disagrees with horizon.{key}")
        params[key] = hz[key]
    try:
        return LqSpec(**params), LQ_SCENARIOS[name]
    except TypeError as exc:
        raise ConfigError(f"bad LQ parameters: {exc}") from None


def _scenario(cfg):
    lq, _ = _lq_spec(cfg)
    params = dict(cfg["scenario"].get("params", {}))
    if lq is not None:
        params["T"], params["t0"] = lq.T, lq.t0
    return build_scenario(cfg["scenario"]["name"], params)


def _solver_params(cfg):
    try:
        return SolverParams(seed=cfg["seed"], **cfg["solver"])
    except TypeError as exc:
        raise ConfigError(f"bad solver block: {exc}") from None


def _initial_law(block):
    try:
        return InitialLawSpec(**block)
    except TypeError as exc:
        raise ConfigError(f"bad initial_law block: {exc}") from None


# -- output helpers ------------------------------------------------------------------


def _write(path, text):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(text)


def _dump(obj):
    return json.dumps(_plain(obj), sort_keys=True, indent=2) + "\n"


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    return obj


def _thin(mu, n):
    if n is None or mu.n <= n:
        return mu
    idx = np.linspace(0, mu.n - 1, n).round().astype(int)
    return EmpiricalMeasure(mu.atoms[idx])


def _ensemble_csv(ens, limit, chash):
    return _with_hash(ens.to_csv() if limit is None else _limited(ens, limit).to_csv(), chash)


def _with_hash(text, chash):
    lines = text.split("\r\n")
    out = [lines[0] + ",config_hash"] + [ln + "," + chash for ln in lines[1:] if ln]
    return "\r\n".join(out) + "\r\n"


def _limited(ens, n):
    from dataclasses import replace

    n = min(n, ens.n)
    return replace(ens, X=ens.X[:n], Y=ens.Y[:n], Z=ens.Z[:n], dW=ens.dW[:n])


def _sweep_csv(rows, d, m, chash):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    names = ["dt", "drift", "trace", "driver", "measure_drift", "measure_trace", "total"]
    head = ["t"] + [f"x{j + 1}" for j in range(d)]
    head += [f"{n}_{a + 1}" if m > 1 else n for n in names for a in range(m)]
    w.writerow(head + ["config_hash"])
    for r in rows:
        vals = [repr(float(r.t))] + [repr(float(v)) for v in r.x]
        for part in r.as_row():
            vals += [repr(float(v)) for v in np.ravel(part)]
        w.writerow(vals + [chash])
    return buf.getvalue()


# -- commands -----------------------------------------------------------------------


class _Stage:
    """Remembers which operation is running so errors can name it."""

    name = "config"


def _solve(cfg, stage):
    c = _scenario(cfg)
    params = _solver_params(cfg)
    init = _initial_law(cfg["initial_law"])
    hz = cfg["horizon"]
    stage.name = f"fbsde.solve_long_horizon(N={params.n_particles}, K={params.n_steps}, T={hz['T']})"
    ens, fld = solve_long_horizon(c, init, hz["t0"], hz["T"], params)
    return c, params, init, ens, fld


def cmd_solve(cfg, out, stage):
    chash = config_hash(cfg)
    c, params, init, ens, fld = _solve(cfg, stage)
    os.makedirs(out, exist_ok=True)
    _write(os.path.join(out, "field.csv"), fld.to_csv(chash))
    _write(os.path.join(out, "field.json"), fld.to_json(chash) + "\n")
    if cfg["output"]["ensemble"]:
        _write(os.path.join(out, "ensemble.csv"), _ensemble_csv(ens, cfg["output"]["ensemble_particles"], chash))
    gaps = fld.diagnostics.get("picard_gaps", [])
    diag = {
        "config_hash": chash,
        "scenario": cfg["scenario"]["name"],
        "picard_gaps": gaps,
        "final_law_gap": gaps[-1] if gaps else None,
        "tol_law": params.tol_law,
        "decoupling_residual": fld.diagnostics["decoupling_residual"],
        "fit_diagnostic": fld.diagnostics["fit_diagnostic"],
        "z_consistency": fld.diagnostics["z_consistency"],
        "block_steps": fld.diagnostics.get("block_steps"),
        "outside_contraction_regime": fld.diagnostics["outside_contraction_regime"],
        "flags": c.flags,
    }
    lq, kind = _lq_spec(cfg)
    if lq is not None:
        stage.name = "lq_oracle.solve_riccati"
        sol = solve_riccati(lq, kind, fld.grid)
        _write(os.path.join(out, "oracle.csv"), _with_hash(sol.to_csv(), chash))
        diag["oracle_sup_error"] = _oracle_error(ens, fld, sol)
    sweep = cfg["query"].get("residual_sweep")
    if sweep is not None:
        stage.name = "master.master_residual"
        mu = _thin(ens.measure(0), sweep.get("measure_atoms", 128))
        rows = []
        for t in sweep["t"]:
            for x in sweep["x"]:
                rows.append(
                    master_residual(
                        fld, c, float(t), np.atleast_1d(np.asarray(x, dtype=float)), mu,
                        sweep.get("h_t", 1e-3), sweep.get("h_x", 1e-3), sweep.get("h_mu"),
                    )
                )
        _write(os.path.join(out, "residuals.csv"), _sweep_csv(rows, c.d, c.m, chash))
    _write(os.path.join(out, "diagnostics.json"), _dump(diag))
    log.info("solve finished; final law gap %s", diag["final_law_gap"])
    return EXIT_OK


def _oracle_error(ens, fld, sol):
    worst = 0.0
    for k in range(fld.grid.K + 1):
        x = ens.X[:, k]
        mu = ens.measure(k)
        diff = fld.value_at(k, x, mu) - oracle_field(sol, fld.grid.time(k), x, mu)
        worst = max(worst, float(np.max(np.linalg.norm(diff, axis=1) / (1 + np.linalg.norm(x, axis=1)))))
    return worst


_FUNCTIONALS = {
    "second_moment": lambda: MomentFunctional(lambda x: (x**2).sum(axis=1), lambda m: m[..., 0], "second moment"),
    "mean": lambda: MomentFunctional(lambda x: x[:, 0], lambda m: m[..., 0], "first coordinate mean"),
    "mean_squared": lambda: MomentFunctional(lambda x: x[:, 0], lambda m: m[..., 0] ** 2, "squared mean"),
    "l2_norm": lambda: MomentFunctional(lambda x: (x**2).sum(axis=1), lambda m: np.sqrt(m[..., 0]), "L2 norm"),
}


def _check_chain_rule(cfg, opts, stage, out):
    if opts["functional"] not in _FUNCTIONALS:
        raise ConfigError(f"unknown functional {opts['functional']!r}; known: {sorted(_FUNCTIONALS)}")
    if opts["flow"] not in ("brownian", "ou"):
        raise ConfigError("flow must be 'brownian' or 'ou'")
    U = _FUNCTIONALS[opts["functional"]]()
    d = _scenario(cfg).d
    n = int(opts["n_particles"])
    if opts["start"] == "origin":
        x0 = np.zeros((n, d))
    elif opts["start"] == "initial_law":
        x0 = _initial_law(cfg["initial_law"]).sample(n, d, cfg["seed"])
    else:
        raise ConfigError("start must be 'origin' or 'initial_law'")
    grid = TimeGrid(0.0, float(opts["T"]), int(opts["n_steps"]))
    eye = np.eye(d)
    if opts["flow"] == "brownian":
        drift = lambda t, X: np.zeros_like(X)  # noqa: E731
    else:
        drift = lambda t, X: -X  # noqa: E731
    stage.name = "lions.chain_rule_residual"
    flow = simulate_flow(x0, drift, lambda t, X: np.broadcast_to(eye, X.shape + (d,)), grid, cfg["seed"], bool(opts["moment_matching"]))
    res = chain_rule_residual(U, flow)
    if out:
        est = lions_derivative(U, flow.measure(flow.grid.K))
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(["atom_index"] + [f"x{j + 1}" for j in range(d)] + [f"dmu_{j + 1}" for j in range(d)])
        for i in range(est.values.shape[0]):
            w.writerow([i] + [repr(float(v)) for v in est.atoms[i]] + [repr(float(v)) for v in est.values[i]])
        os.makedirs(out, exist_ok=True)
        _write(os.path.join(out, "lions_derivative.csv"), buf.getvalue())
    return {"residual": res, "tol": opts["tol"], "passed": bool(res < opts["tol"])}


def _random_points(rng, fld, n):
    K = fld.grid.K
    ks = rng.integers(1, K, size=n) if K > 1 else np.zeros(n, dtype=int)
    return ks


def _check_master_residual(cfg, opts, stage, out):
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([cfg["seed"], 0x6D72])))
    c = _scenario(cfg)
    worst = 0.0
    if opts["source"] == "oracle":
        lq, kind = _lq_spec(cfg)
        if lq is None:
            raise ConfigError("source 'oracle' needs an LQ scenario")
        field = OracleField(solve_riccati(lq, kind))
        x0 = _initial_law(cfg["initial_law"]).sample(opts["measure_atoms"], c.d, cfg["seed"])
        mu = EmpiricalMeasure(x0)
        stage.name = "master.master_residual(oracle)"
        for _ in range(int(opts["n_points"])):
            t = rng.uniform(lq.t0, lq.T)
            x = mu.atoms[rng.integers(mu.n)]
            r = master_residual(field, c, t, x, mu, opts["h_t"], opts["h_x"], opts["h_mu"])
            worst = max(worst, float(np.max(np.abs(r.total))))
    elif opts["source"] == "solver":
        _, _, _, ens, fld = _solve(cfg, stage)
        stage.name = "master.master_residual(solver)"
        for k in _random_points(rng, fld, int(opts["n_points"])):
            mu = _thin(ens.measure(k), opts["measure_atoms"])
            x = mu.atoms[rng.integers(mu.n)]
            r = master_residual(fld, c, fld.grid.time(k), x, mu, opts["h_t"], opts["h_x"], opts["h_mu"])
            worst = max(worst, float(np.max(np.abs(r.total))))
    else:
        raise ConfigError("source must be 'solver' or 'oracle'")
    return {"max_abs_total": worst, "tol": opts["tol"], "passed": bool(worst < opts["tol"])}


def _check_identification(cfg, opts, stage, out):
    from .control import identification_check

    lq, kind = _lq_spec(cfg)
    if lq is None:
        raise ConfigError("identification needs an LQ scenario (lq_mfg or lq_mkv)")
    _, _, _, ens, fld = _solve(cfg, stage)
    V = OracleValue(solve_riccati(lq, kind), lq)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([cfg["seed"], 0x6964])))
    stage.name = f"control.identification_check({kind})"
    worst = 0.0
    for k in _random_points(rng, fld, int(opts["n_points"])):
        mu = _thin(ens.measure(k), opts["measure_atoms"])
        x = mu.atoms[rng.integers(mu.n)]
        val = identification_check(kind, V, fld, fld.grid.time(k), x, mu, opts["h_x"], opts["h_mu"])
        worst = max(worst, val)
    return {"kind": kind, "max_discrepancy": worst, "tol": opts["tol"], "passed": bool(worst < opts["tol"])}


def _lasry_lions_pairs(rng, n_pairs, d, n_atoms=8):
    pairs = []
    for _ in range(n_pairs):
        a = rng.normal(size=(n_atoms, d))
        b = rng.normal(loc=rng.normal(size=d), size=(n_atoms, d))
        pairs.append((EmpiricalMeasure(a), EmpiricalMeasure(b)))
    return pairs


def _check_hypotheses(cfg, opts, stage, out):
    c = _scenario(cfg)
    stage.name = "scenario.estimate_lipschitz"
    report = estimate_lipschitz(c, SeededSampler(seed=cfg["seed"]), int(opts["n_samples"]))
    report.convexity_lambda = c.flags.get("convexity_lambda")
    passed = True
    lq, _ = _lq_spec(cfg)
    if lq is not None:
        from .control import quadratic_tracking

        stage.name = "scenario.check_lasry_lions"
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([cfg["seed"], 0x6C6C])))
        pairs = _lasry_lions_pairs(rng, int(opts["n_pairs"]), lq.d)
        F0 = quadratic_tracking(lq.rho, lq.Q, lq.d)[0]
        G = quadratic_tracking(lq.rho_G, lq.Q_G, lq.d)[0]
        report.monotonicity_min = min(check_lasry_lions(F0, pairs), check_lasry_lions(G, pairs))
        passed = report.monotonicity_min >= -opts["tol"]
    if report.convexity_lambda is not None:
        passed = passed and report.convexity_lambda > 0
    result = json.loads(report.to_json())
    result["passed"] = bool(passed)
    return result


def _check_lq_validate(cfg, opts, stage, out):
    lq, kind = _lq_spec(cfg)
    if lq is None:
        raise ConfigError("lq_validate needs an LQ scenario (lq_mfg or lq_mkv)")
    _, _, _, ens, fld = _solve(cfg, stage)
    stage.name = "lq_oracle.solve_riccati"
    err = _oracle_error(ens, fld, solve_riccati(lq, kind, fld.grid))
    return {"sup_error": err, "tol": opts["tol"], "passed": bool(err < opts["tol"])}


def _check_flow_consistency(cfg, opts, stage, out):
    c = _scenario(cfg)
    params = _solver_params(cfg)
    hz = cfg["horizon"]
    grid = TimeGrid(hz["t0"], hz["T"], params.n_steps)
    s = opts["s"] if opts["s"] is not None else grid.time(grid.K // 2)
    stage.name = f"fbsde.flow_consistency(s={s})"
    val = flow_consistency(c, _initial_law(cfg["initial_law"]), grid, params, s)
    return {"discrepancy": val, "s": s, "tol": opts["tol"], "passed": bool(val < opts["tol"])}


def _check_weak_lipschitz(cfg, opts, stage, out):
    c = _scenario(cfg)
    params = _solver_params(cfg)
    hz = cfg["horizon"]
    grid = TimeGrid(hz["t0"], hz["T"], params.n_steps)
    base = _initial_law(cfg["initial_law"])
    others = opts["pairs"] or [dict(cfg["initial_law"], mean=_shift(cfg["initial_law"].get("mean", 0.0)))]
    pairs = [(base, _initial_law(o)) for o in others]
    stage.name = "fbsde.weak_lipschitz_estimate"
    est = weak_lipschitz_estimate(c, grid, params, pairs)
    result = {"estimate": est}
    lq, kind = _lq_spec(cfg)
    if lq is not None:
        sol = solve_riccati(lq, kind)
        bound = opts["factor"] * (np.linalg.norm(sol.eta[0], 2) + np.linalg.norm(sol.chi[0], 2))
        result.update(bound=float(bound), passed=bool(est <= bound))
    elif opts["tol"] is not None:
        result.update(bound=opts["tol"], passed=bool(est <= opts["tol"]))
    else:
        result["passed"] = True
    return result


def _shift(mean):
    return (np.asarray(mean, dtype=float) + 0.5).tolist()


_CHECK_FUNCS = {
    "chain_rule": _check_chain_rule,
    "master_residual": _check_master_residual,
    "identification": _check_identification,
    "hypotheses": _check_hypotheses,
    "lq_validate": _check_lq_validate,
    "flow_consistency": _check_flow_consistency,
    "weak_lipschitz": _check_weak_lipschitz,
}


def cmd_check(cfg, name, out, stage):
    opts = dict(_CHECK_DEFAULTS[name])
    opts.update(cfg["query"]["checks"].get(name, {}))
    result = _CHECK_FUNCS[name](cfg, opts, stage, out)
    report = {"check": name, "config_hash": config_hash(cfg), **result}
    text = _dump(report)
    if out:
        os.makedirs(out, exist_ok=True)
        _write(os.path.join(out, f"check_{name}.json"), text)
    sys.stdout.write(text)
    return EXIT_OK if result["passed"] else EXIT_CHECK_FAILED


# -- entry point ---------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="mkvmaster", description="McKean-Vlasov FBSDE solver and master-equation checks")
    p.add_argument("--seed", type=int, default=None, help="override the configuration seed")
    p.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("solve", help="solve a scenario and write field, ensemble and diagnostics")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    c = sub.add_parser("check", help="run one verification and write a JSON report")
    c.add_argument("name", choices=CHECKS)
    c.add_argument("--config", required=True)
    c.add_argument("--out", default=None)
    return p


def load_config(path, seed=None):
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if seed is not None:
        if not isinstance(cfg, dict):
            raise ConfigError("config must be a JSON object")
        cfg["seed"] = seed
    return validate_config(cfg)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s")
    stage = _Stage()
    try:
        cfg = load_config(args.config, args.seed)
        if args.command == "solve":
            return cmd_solve(cfg, args.out, stage)
        return cmd_check(cfg, args.name, args.out, stage)
    except ConvergenceError as exc:
        print(f"convergence failure in {stage.name}: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except (NumericDomainError, IllConditionedBasisError, OracleBlowUpError, FloatingPointError) as exc:
        print(f"numerical failure in {stage.name}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InvalidInputError, MkvError) as exc:
        print(f"invalid configuration ({stage.name}): {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
