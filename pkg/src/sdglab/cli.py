"""Config-driven experiment runner.

    python -m sdglab <subcommand> [--config FILE] [--seed N] [--paths N] [--dt X]
                     [--delta X] [--out DIR] [--quiet] [--section.key VALUE ...]

Exit codes: 0 all verdicts pass, 1 some verdict fails, 2 configuration error.
"""

from __future__ import annotations

import argparse
import copy
import datetime
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .analyze import all_passed, certify_delta_optimality, convergence_study, monotone_within, verify_value_identity
from .geometry import quasi_random_interior
from .isaacs import lambda_analytic, lambda_supinf_bruteforce
from .problem import CATALOGUE, audit_grid, builtin_spec, field_bundle, finite_difference_audit, pde_residual
from .simulate import SimConfig, simulate_limit, simulate_near_optimal, write_path_csv
from .strategy import SolverError, calibrate, coefficient_gaps, feedback_fields, verify_near_saddle

log = logging.getLogger("sdglab")

SUBCOMMANDS = ("validate", "lambda-check", "strategy-solve", "simulate", "verify-value", "certify", "converge")

DEFAULTS = {
    "spec": "ms1",
    "x0": [2.0, 0.0],
    "seed": 0,
    "output_dir": "out",
    "simulation": {
        "dt": 1e-4,
        "t_max": None,
        "n_paths": 10_000,
        "substeps": 10,
        "substep_zone": 10.0,
        "chunk_size": 50_000,
        "record_stride": 100,
        "engine": "auto",
    },
    "strategy": {
        "delta": 0.01,
        "delta_sequence": [0.3, 0.1, 0.03, 0.01],
        "grid_size": 400,
        "calibration_grid": 2000,
        "saddle_points": 100,
    },
    "validate": {"grid_size": 10_000, "residual_tol": 1e-12, "fd_residual_tol": 1e-5, "invariant_tol": 1e-10},
    "lambda": {"samples": 200, "dims": [2, 3], "n_dir": {2: 720, 3: 5000},
               "tol": {2: 2e-2, 3: 5e-2}, "d_grid": [0.0, 1.0, 10.0, 100.0, 1000.0], "d_max": 1000.0},
    "simulate": {"process": "limit", "n_dump": 3},
    "converge": {"delta_sequence": [0.3, 0.1, 0.03], "n_paths": 10_000, "coupled": True},
}

FLAG_PATHS = {"seed": "seed", "paths": "simulation.n_paths", "dt": "simulation.dt",
              "delta": "strategy.delta", "out": "output_dir"}


class ConfigError(ValueError):
    pass


# -- configuration -------------------------------------------------------------------


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def set_dotted(cfg: dict, key: str, value) -> None:
    parts = [int(p) if p.isdigit() else p for p in key.split(".")]
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"unknown config section in {key!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {key!r}")
    node[parts[-1]] = value


def _parse_value(text: str):
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse value {text!r}: {exc}") from None


def load_config(path: str | None, overrides: dict) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed config: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config must be a mapping")
        unknown = set(data) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        cfg = _merge(cfg, data)
    for key, value in overrides.items():
        set_dotted(cfg, key, value)
    return cfg


def _positive(value, name):
    if not isinstance(value, (int, float)) or isinstance(value, bool) or not math.isfinite(value) or value <= 0:
        raise ConfigError(f"{name} must be a positive number, got {value!r}")
    return value


def resolve(cfg: dict):
    """Validate a merged config; returns (spec, x0, SimConfig)."""
    name = cfg["spec"]
    if name not in CATALOGUE:
        raise ConfigError(f"unknown spec {name!r}; available: {', '.join(sorted(CATALOGUE))}")
    spec = builtin_spec(name)
    try:
        x0 = np.asarray(cfg["x0"], dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(f"x0 must be a list of numbers, got {cfg['x0']!r}") from None
    if x0.shape != (spec.dim,) or not np.all(np.isfinite(x0)):
        raise ConfigError(f"x0 must be a finite point in R^{spec.dim}")
    if not spec.domain.in_closure(x0):
        raise ConfigError(f"x0={x0.tolist()} lies outside the closed domain of {name}")
    sim = cfg["simulation"]
    _positive(sim["dt"], "simulation.dt")
    _positive(sim["n_paths"], "simulation.n_paths")
    if sim["t_max"] is not None:
        _positive(sim["t_max"], "simulation.t_max")
    _positive(cfg["strategy"]["delta"], "strategy.delta")
    seed = cfg["seed"]
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError(f"seed must be a nonnegative integer, got {seed!r}")
    try:
        sc = SimConfig(dt=float(sim["dt"]), t_max=sim["t_max"], record_stride=int(sim["record_stride"]), seed=seed,
                       substeps=int(sim["substeps"]), substep_zone=float(sim["substep_zone"]),
                       chunk_size=int(sim["chunk_size"]), engine=sim["engine"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return spec, x0, sc


# -- subcommands -----------------------------------------------------------------------


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def cmd_validate(cfg, spec, x0, sc):
    v = cfg["validate"]
    grid = audit_grid(spec.domain, int(v["grid_size"]))
    exact = float(np.max(np.abs(pde_residual(spec, grid))))
    fd = float(np.max(np.abs(pde_residual(spec, grid, finite_differences=True))))
    audit = finite_difference_audit(spec)
    b = field_bundle(spec, grid)
    q_dot = float(np.max(np.abs(np.sum(b.q * b.p, axis=-1)) / (np.linalg.norm(b.q, axis=-1) * b.p_norm + 1.0)))
    unit = float(np.max(np.abs(np.linalg.norm(b.p_bar, axis=-1) - 1.0)))
    return {
        "spec_name": spec.name,
        "domain": spec.domain.describe(),
        "grid_points": int(len(grid)),
        "residual_max": exact,
        "fd_residual_max": fd,
        "audit": audit.as_dict(),
        "q_dot_Du_max_scaled": q_dot,
        "pbar_unit_error_max": unit,
        "constants": {"c0": spec.c0, "c1": spec.c1, "h_lower": spec.h_lower, "h_sign": spec.h_sign,
                      **{k: val for k, val in spec.constants.items() if not k.endswith("note")}},
        "verdicts": {
            "residual": exact <= v["residual_tol"],
            "fd_residual": fd <= v["fd_residual_tol"],
            "derivative_audit": audit.passed,
            "q_orthogonal_Du": q_dot <= v["invariant_tol"],
            "pbar_unit": unit <= v["invariant_tol"],
        },
    }


def random_jets(m: int, n: int, seed: int):
    """p ~ N(0, I) and S = (G + G')/2 with G uniform on [-1, 1]."""
    rng = np.random.default_rng([seed, m])
    for _ in range(n):
        p = rng.standard_normal(m)
        G = rng.uniform(-1.0, 1.0, (m, m))
        yield p, 0.5 * (G + G.T)


def cmd_lambda_check(cfg, spec, x0, sc):
    lc = cfg["lambda"]
    rows = {}
    verdicts = {}
    for m in lc["dims"]:
        n_dir = int(lc["n_dir"][m])
        errs = []
        for p, S in random_jets(int(m), int(lc["samples"]), cfg["seed"]):
            bf = lambda_supinf_bruteforce(p, S, n_dir, lc["d_grid"], lc["d_max"])
            errs.append(abs(bf - lambda_analytic(p, S)))
        errs = np.asarray(errs)
        rows[f"m{m}"] = {"n_dir": n_dir, "samples": len(errs), "max_error": float(errs.max()),
                         "mean_error": float(errs.mean()), "tol": float(lc["tol"][m])}
        verdicts[f"lambda_identity_m{m}"] = bool(errs.max() <= lc["tol"][m])
    return {"seed": cfg["seed"], "normalization": "raw sup-inf of phi is -2 Lambda; compared value is -raw/2",
            "dims": rows, "verdicts": verdicts}


def cmd_strategy_solve(cfg, spec, x0, sc):
    st = cfg["strategy"]
    grid = quasi_random_interior(spec.domain, int(st["grid_size"]))
    cal = quasi_random_interior(spec.domain, int(st["calibration_grid"]))
    sweep = []
    for delta in st["delta_sequence"]:
        params = calibrate(spec, float(delta), cal)
        sweep.append({**coefficient_gaps(spec, params, grid), "doublings": params.doublings,
                      "grid_min_gamma": params.grid_min_gamma})
    params = calibrate(spec, float(st["delta"]), cal)
    saddle = verify_near_saddle(spec, params, grid[: int(st["saddle_points"])])
    a_gaps = [r["sup_a_minus_pbar"] for r in sweep]
    q_gaps = [r["sup_Q_minus_2q"] for r in sweep]
    return {
        "spec_name": spec.name,
        "delta": params.delta,
        "d_delta": params.d_delta,
        "sweep": sweep,
        "near_saddle": saddle,
        "verdicts": {
            "gaps_monotone": monotone_within(a_gaps) and monotone_within(q_gaps),
            "final_gaps_small": a_gaps[-1] <= 0.05 and q_gaps[-1] <= 0.05,
            "gamma_nonpositive": all(r["max_gamma"] <= 0.0 for r in sweep),
            "near_saddle": saddle["passed"],
        },
    }


def cmd_simulate(cfg, spec, x0, sc):
    sim = cfg["simulate"]
    out_dir = Path(cfg["output_dir"]) / "paths"
    out_dir.mkdir(parents=True, exist_ok=True)
    process = sim["process"]
    if process not in ("limit", "near_optimal"):
        raise ConfigError("simulate.process must be 'limit' or 'near_optimal'")
    fields = None
    if process == "near_optimal":
        params = calibrate(spec, float(cfg["strategy"]["delta"]),
                           quasi_random_interior(spec.domain, int(cfg["strategy"]["calibration_grid"])))
        fields = feedback_fields(spec, params)
    paths = []
    for i in range(int(sim["n_dump"])):
        if fields is None:
            o = simulate_limit(spec, x0, sc, path_index=i)
        else:
            o = simulate_near_optimal(spec, fields, x0, sc, path_index=i)
        name = f"{process}_{i:04d}.csv"
        write_path_csv(o, out_dir / name)
        paths.append({"path_index": i, "file": f"paths/{name}", "exited": o.exited, "censored": o.censored,
                      "tau": o.tau, "exit_point": None if o.exit_point is None else o.exit_point.tolist(),
                      "running_cost": o.running_cost, "payoff": o.payoff(spec),
                      "control_trace_digest": o.control_trace_digest})
    report = {"spec_name": spec.name, "x0": x0.tolist(), "process": process, "dt": sc.dt, "seed": sc.seed,
              "paths": paths, "verdicts": {"no_censoring": not any(p["censored"] for p in paths)}}
    if fields is not None:
        report["delta"] = fields.params.delta
        report["d_delta"] = fields.params.d_delta
    return report


def cmd_verify_value(cfg, spec, x0, sc):
    return verify_value_identity(spec, x0, sc, int(cfg["simulation"]["n_paths"]))


def cmd_certify(cfg, spec, x0, sc):
    st = cfg["strategy"]
    params = calibrate(spec, float(st["delta"]), quasi_random_interior(spec.domain, int(st["calibration_grid"])))
    return certify_delta_optimality(spec, x0, params, sc, int(cfg["simulation"]["n_paths"]))


def cmd_converge(cfg, spec, x0, sc):
    cv = cfg["converge"]
    st = cfg["strategy"]
    rep = convergence_study(spec, x0, cv["delta_sequence"], sc, int(cv["n_paths"]), grid_size=int(st["grid_size"]),
                            calibration_grid=int(st["calibration_grid"]), coupled=bool(cv["coupled"]))
    out = {"spec_name": spec.name, "x0": x0.tolist(), "n_paths": int(cv["n_paths"]), "dt": sc.dt, "seed": sc.seed,
           "coupled": bool(cv["coupled"])}
    out.update(rep.as_dict())
    return out


COMMANDS = {
    "validate": cmd_validate,
    "lambda-check": cmd_lambda_check,
    "strategy-solve": cmd_strategy_solve,
    "simulate": cmd_simulate,
    "verify-value": cmd_verify_value,
    "certify": cmd_certify,
    "converge": cmd_converge,
}


# -- entry point -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sdglab", description="Simulation and verification of the tug-of-war game SDE.")
    ap.add_argument("subcommand", choices=SUBCOMMANDS)
    ap.add_argument("--config", help="YAML config file")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--paths", type=int)
    ap.add_argument("--dt", type=float)
    ap.add_argument("--delta", type=float)
    ap.add_argument("--out", help="output directory")
    ap.add_argument("--quiet", action="store_true")
    return ap


def parse_overrides(extra: list[str]) -> dict:
    """``--section.key VALUE`` or ``--section.key=VALUE`` pairs."""
    out = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or len(tok) < 3:
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, text = key.split("=", 1)
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"missing value for {tok}")
            i += 1
            text = extra[i]
        out[key] = _parse_value(text)
        i += 1
    return out


def write_report(report: dict, out_dir: Path, subcommand: str) -> Path:
    """JSON with sorted keys; the only non-reproducible content lives under ``meta``."""
    out_dir.mkdir(parents=True, exist_ok=True)
    body = _jsonable(report)
    body["meta"] = {"timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(), "version": __version__,
                    "subcommand": subcommand}
    path = out_dir / f"{subcommand}.json"
    path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    return path


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    try:
        args, extra = ap.parse_known_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    try:
        overrides = parse_overrides(extra)
        for flag, key in FLAG_PATHS.items():
            val = getattr(args, flag)
            if val is not None:
                overrides[key] = val
        cfg = load_config(args.config, overrides)
        spec, x0, sc = resolve(cfg)
        report = COMMANDS[args.subcommand](cfg, spec, x0, sc)
    except ConfigError as exc:
        print(f"sdglab: configuration error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, SolverError, FloatingPointError) as exc:
        print(f"sdglab: invalid numerics: {exc}", file=sys.stderr)
        return 2
    path = write_report(report, Path(cfg["output_dir"]), args.subcommand)
    ok = all_passed(report)
    if not args.quiet:
        for name, passed in report["verdicts"].items():
            print(f"{'PASS' if passed else 'FAIL'}  {name}")
        print(f"report: {path}")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
