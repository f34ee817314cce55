"""Command-line entry point.

Subcommands: simulate, equilibrium, theorem5, duality, generator-check,
ancestors, convergence, ergodicity, closedform, validate.

Configuration comes from a TOML file with flat [model] and [experiment]
sections; command-line flags override config values, and the environment
variable MORAN_SEED is the lowest-priority seed source.  Unknown config keys
are rejected.  Every output carries a stamp (package version, hash of the
effective config, seed) and the effective config itself: JSON reports embed
it as an object, CSV files start with '# key = value' comment lines that
reparse as TOML.  Outputs are written atomically.

Exit codes: 0 success, 1 validation / configuration failure, 2 a check
subcommand ran but its criterion failed.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import tempfile
from typing import Dict, List, Optional

import numpy as np

try:
    import tomllib  # py >= 3.11
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from . import __version__
from .model import make_initial, load_state, save_state, two_type_alphabet, validate as validate_state
from .engine import save_log
from .closedform import (
    f_coefficient,
    f_from_moment_combination,
    neutral_moments,
    neutral_moments_by_solve,
    omega0_residuals,
    theorem5_laplace,
    theorem5_mean_distance,
)
from .experiments import (
    ExperimentConfig,
    run_convergence_sweep,
    run_equilibrium_moments,
    run_ergodicity,
    run_theorem5,
)

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_CHECK_FAILED = 2

_MODEL_KEYS = {"N", "gamma", "theta_b", "theta_g", "z", "alpha"}
_EXPERIMENT_KEYS = {
    "burn_in", "observations", "spacing", "replicates", "lam", "lambda_grid",
    "alpha_grid", "n_sweep", "t_snapshot", "comb_spacing", "moment_tuples",
    "batches", "seed", "out", "t_end", "initial", "t", "reps", "h", "grid",
    "qv_T", "windows", "samples_per_rep", "extrapolate",
}


class ConfigError(Exception):
    pass


def _load_config(path: Optional[str]) -> Dict:
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config {path}: {exc}")
    flat: Dict = {}
    for section, allowed in (("model", _MODEL_KEYS), ("experiment", _EXPERIMENT_KEYS)):
        body = raw.pop(section, {})
        if not isinstance(body, dict):
            raise ConfigError(f"[{section}] must be a table")
        for key, val in body.items():
            if key not in allowed:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            flat[key] = val
    if raw:
        raise ConfigError(f"unknown config sections: {sorted(raw)}")
    return flat


def _effective_seed(flat: Dict, args) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    if "seed" in flat:
        return int(flat["seed"])
    env = os.environ.get("MORAN_SEED")
    if env is not None:
        return int(env)
    return 0


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot render {type(v)} in config block")


def _config_block(cfg: Dict) -> str:
    return "\n".join(f"{k} = {_toml_value(v)}" for k, v in sorted(cfg.items()) if v is not None)


def _config_hash(cfg: Dict) -> str:
    return hashlib.sha256(_config_block(cfg).encode()).hexdigest()[:16]


def _stamp(cfg: Dict, seed: int) -> Dict:
    return {"version": __version__, "config_hash": _config_hash(cfg), "seed": seed}


def _atomic_write(path: str, text: str) -> None:
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-treemoran-")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _emit(payload_rows: Optional[List[Dict]], payload_obj: Dict, cfg: Dict, seed: int, args) -> None:
    """Write CSV (rows) or JSON (object) per --format, to --out or stdout."""
    fmt = args.format
    if fmt == "csv":
        if payload_rows is None:
            payload_rows = [payload_obj]
        lines = [f"# {ln}" for ln in _config_block(cfg).splitlines()]
        stamp = _stamp(cfg, seed)
        lines += [f"# stamp_{k} = {_toml_value(v)}" for k, v in stamp.items()]
        cols = list(payload_rows[0].keys()) if payload_rows else []
        lines.append(",".join(cols))
        for row in payload_rows:
            lines.append(",".join(_csv_cell(row.get(c)) for c in cols))
        text = "\n".join(lines) + "\n"
    else:
        obj = dict(payload_obj)
        obj["config"] = {k: v for k, v in sorted(cfg.items()) if v is not None}
        obj["stamp"] = _stamp(cfg, seed)
        if payload_rows is not None:
            obj["rows"] = payload_rows
        text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if args.out:
        _atomic_write(args.out, text)
    else:
        sys.stdout.write(text)


def _csv_cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    s = str(v)
    if "," in s or '"' in s or "\n" in s:
        s = '"' + s.replace('"', '""') + '"'
    return s


def _experiment_config(flat: Dict, args, name: str, **kw) -> ExperimentConfig:
    fields = {
        k: flat[k]
        for k in (
            "N", "gamma", "theta_b", "theta_g", "z", "alpha", "alpha_grid", "lam",
            "lambda_grid", "burn_in", "observations", "spacing", "replicates",
            "n_sweep", "t_snapshot", "comb_spacing", "moment_tuples", "batches", "out",
        )
        if k in flat
    }
    for k in ("alpha_grid", "lambda_grid", "n_sweep"):
        if k in fields:
            fields[k] = tuple(fields[k])
    if getattr(args, "reps", None) is not None:
        fields["replicates"] = args.reps
    fields.update(kw)
    fields["seed"] = _effective_seed(flat, args)
    return ExperimentConfig(name=name, **fields)


# -- subcommand handlers -----------------------------------------------------------


def _cmd_closedform(args, flat) -> int:
    g = args.gamma if args.gamma is not None else flat.get("gamma", 1.0)
    tb = args.tb if args.tb is not None else flat.get("theta_b", 1.0)
    tg = args.tg if args.tg is not None else flat.get("theta_g", 1.0)
    lam = args.lam if args.lam is not None else flat.get("lam", 1.0)
    alpha = args.alpha if args.alpha is not None else flat.get("alpha", 0.0)
    cfg = {"gamma": g, "theta_b": tb, "theta_g": tg, "lam": lam, "alpha": alpha}
    table = neutral_moments(g, tb, tg, lam)
    solved = neutral_moments_by_solve(g, tb, tg, lam)
    resid = omega0_residuals(table)
    payload = dict(table.as_dict())
    payload["f"] = f_coefficient(g, tb, tg, lam)
    payload["f_from_moments"] = f_from_moment_combination(g, tb, tg, lam)
    payload["theorem5_laplace"] = theorem5_laplace(g, tb, tg, lam, alpha)
    payload["theorem5_mean_distance"] = theorem5_mean_distance(g, tb, tg, alpha)
    payload["max_solve_discrepancy"] = max(
        abs(v - solved.as_dict()[k]) for k, v in table.as_dict().items()
    )
    payload["max_residual"] = max(abs(v) for v in resid.values())
    _emit(None, payload, cfg, _effective_seed(flat, args), args)
    return EXIT_OK


def _cmd_validate(args, flat) -> int:
    alph = two_type_alphabet()
    try:
        state = load_state(args.matrix, args.types, alph)
    except (ValueError, OSError) as exc:
        print(f"invalid state: {exc}", file=sys.stderr)
        return EXIT_INVALID
    diag = validate_state(state, tol=args.tol)
    payload = {
        "ok": diag.ok(),
        "symmetry_violations": diag.symmetry,
        "ultrametric_violations": diag.ultrametric,
        "future_mrca": diag.future_mrca,
        "worst_ultrametric_excess": diag.worst_ultrametric_excess,
    }
    cfg = {"matrix": args.matrix, "types": args.types, "tol": args.tol}
    _emit(None, payload, cfg, 0, args)
    return EXIT_OK if diag.ok() else EXIT_INVALID


def _cmd_simulate(args, flat) -> int:
    from ._fastsim import FastSim

    seed = _effective_seed(flat, args)
    N = int(flat.get("N", 50))
    cfg = {
        "N": N,
        "gamma": flat.get("gamma", 1.0),
        "theta_b": flat.get("theta_b", 1.0),
        "theta_g": flat.get("theta_g", 1.0),
        "z": flat.get("z", 1.0),
        "alpha": flat.get("alpha", 0.0),
        "t_end": args.t_end if args.t_end is not None else flat.get("t_end", 10.0),
        "initial": flat.get("initial", "star"),
        "comb_spacing": flat.get("comb_spacing", 10.0),
        "seed": seed,
    }
    exp = ExperimentConfig(
        N=N, gamma=cfg["gamma"], theta_b=cfg["theta_b"], theta_g=cfg["theta_g"],
        z=cfg["z"], alpha=cfg["alpha"], seed=seed,
        burn_in=0.0, observations=10, spacing=max(cfg["t_end"], 1e-9) / 10.0,
    )
    params = exp.params()
    alph = two_type_alphabet()
    types = np.arange(N) % 2
    state = make_initial(
        cfg["initial"], N, alph, np.random.default_rng(seed),
        spacing=cfg["comb_spacing"], types=types,
    )
    if args.log_out:
        from .engine import MoranEngine

        eng = MoranEngine(state, params, seed=seed)
        eng.run_until(cfg["t_end"])
        save_log(eng.log, args.log_out)
        n_events = len(eng.log)
    else:
        sim = FastSim(state, params, seed=seed)
        out = sim.run(cfg["t_end"], record_events=True, record_cap=1 << 22)
        n_events = len(out["events"]["time"])
    if args.state_out:
        save_state(state, args.state_out, args.state_out + ".types")
    diag = validate_state(state)
    r = state.distance_matrix()
    payload = {
        "t": state.t,
        "events": n_events,
        "mean_pair_distance": float(
            (r.sum() - np.trace(r)) / (N * (N - 1))
        ),
        "fit_frequency": float((state.types == 0).mean()),
        "valid": diag.ok(),
    }
    _emit(None, payload, cfg, seed, args)
    return EXIT_OK if diag.ok() else EXIT_INVALID


def _cmd_equilibrium(args, flat) -> int:
    cfg = _experiment_config(flat, args, "equilibrium")
    rep = run_equilibrium_moments(cfg)
    ok = rep.max_abs_z() <= 3.0
    _emit(rep.rows, {"max_abs_z": rep.max_abs_z(), "burnin_shift_max_z": rep.burnin_shift_max_z,
                     "passed": ok}, rep.config, cfg.seed, args)
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def _cmd_theorem5(args, flat) -> int:
    cfg = _experiment_config(flat, args, "theorem5")
    extrap = flat.get("extrapolate", True)
    rep = run_theorem5(cfg, extrapolate=bool(extrap))
    checks = [r["sign_ok"] for r in rep.rows]
    payload = {"first_order": rep.first_order, "naive_slope": rep.naive_slope}
    if rep.extrapolated is not None:
        payload["extrapolated"] = rep.extrapolated
        checks.append(rep.extrapolated["first_order"]["ok"])
        for r in rep.extrapolated["rows"]:
            checks.append(r["sign_ok"])
            if r["powered"]:
                checks.append(r["magnitude_ok"])
    else:
        checks.append(rep.first_order["ok"])
    ok = all(bool(c) for c in checks if c is not None)
    payload["passed"] = ok
    _emit(rep.rows, payload, rep.config, cfg.seed, args)
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def _cmd_duality(args, flat) -> int:
    from .dual import duality_gap, leaf_pair_laplace, leaf_marked_pair_laplace

    seed = _effective_seed(flat, args)
    cfg = _experiment_config(flat, args, "duality")
    t = args.t if args.t is not None else flat.get("t", 1.0)
    reps = args.reps if args.reps is not None else flat.get("reps", 200)
    marked = cfg.alpha > 0
    expr = leaf_marked_pair_laplace(cfg.lam) if marked else leaf_pair_laplace(cfg.lam)
    alph = two_type_alphabet()
    types = np.arange(cfg.N) % 2
    state = make_initial("star", cfg.N, alph, np.random.default_rng(seed), types=types)
    params = cfg.params()
    rng = np.random.default_rng((seed, 5))
    report = duality_gap(state, expr, t, params, reps, rng)
    band = 3.0 * report.se + 2.0 / cfg.N
    ok = abs(report.gap) <= band
    payload = report.as_dict()
    payload.update({"band": band, "passed": ok, "marked": marked, "t": t})
    _emit(None, payload, {**cfg.as_dict(), "t": t, "reps": reps}, seed, args)
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def _cmd_generator_check(args, flat) -> int:
    from .generator_check import martingale_residual, qv_check
    from .stats import poly_pair_distance, poly_pair_laplace

    seed = _effective_seed(flat, args)
    N = int(flat.get("N", 20))
    cfg = _experiment_config(flat, args, "generator-check", N=N)
    params = cfg.params()
    alph = two_type_alphabet()
    state = make_initial("star", N, alph, np.random.default_rng(seed), types=np.arange(N) % 2)
    h = args.h if args.h is not None else flat.get("h", 0.1 / (max(cfg.gamma, 0.1) * N))
    reps = args.reps if args.reps is not None else flat.get("reps", 2000)
    mart = martingale_residual(params, poly_pair_distance(), state, h, reps, seed)
    mart_half = martingale_residual(params, poly_pair_distance(), state, h / 2, reps, seed + 1)
    c_est = abs(mart.drift_empirical - mart_half.drift_empirical) / (h / 2)
    band = 3.0 * mart.drift_se + c_est * h
    drift_ok = abs(mart.drift_empirical - mart.drift_exact) <= band
    T = flat.get("qv_T", 1.0)
    qv = qv_check(params, poly_pair_laplace(cfg.lam), state, T,
                  reps=int(flat.get("grid", 30)), seed=seed, grid=50)
    qv_band = 3.0 * math.hypot(qv.qv_se, qv.qv_formula_se) + 0.02
    qv_ok = abs(qv.qv_empirical - qv.qv_formula) <= qv_band
    payload = {
        "drift_exact": mart.drift_exact,
        "drift_empirical": mart.drift_empirical,
        "se": mart.drift_se,
        "drift_band": band,
        "qv_formula": qv.qv_formula,
        "qv_empirical": qv.qv_empirical,
        "se_qv": qv.qv_se,
        "h": h,
        "T": T,
        "reps": reps,
        "seed": seed,
        "passed": bool(drift_ok and qv_ok),
    }
    _emit(None, payload, cfg.as_dict(), seed, args)
    return EXIT_OK if payload["passed"] else EXIT_CHECK_FAILED


def _cmd_ancestors(args, flat) -> int:
    from ._fastsim import FastSim
    from .genealogy import ancestor_mean_bound, trace_ancestors_arrays

    seed = _effective_seed(flat, args)
    cfg = _experiment_config(flat, args, "ancestors")
    windows = flat.get("windows", [0.5, 1.0, 2.0])
    reps = args.reps if args.reps is not None else flat.get("reps", 300)
    t_end = max(windows) + 1.0
    params = cfg.params()
    alph = two_type_alphabet()
    rows = []
    counts = {w: np.empty(reps) for w in windows}
    for rep in range(reps):
        state = make_initial("star", cfg.N, alph, np.random.default_rng((seed, rep)),
                             types=np.arange(cfg.N) % 2)
        sim = FastSim(state, params, seed=(seed, "anc", rep))
        out = sim.run(t_end, record_events=True, record_cap=1 << 21)
        ev = out["events"]
        mask = ev["kind"] != 2
        times, parents, victims = ev["time"][mask], ev["parent"][mask], ev["victim"][mask]
        for w in windows:
            anc = trace_ancestors_arrays(times, parents, victims, np.arange(cfg.N), t_end, t_end - w)
            counts[w][rep] = np.unique(anc).size
    ok = True
    for w in windows:
        mean = float(counts[w].mean())
        se = float(counts[w].std(ddof=1) / math.sqrt(reps))
        bound = ancestor_mean_bound(cfg.N, w, cfg.gamma, cfg.alpha)
        ok = ok and (mean <= bound + 3 * se)
        rows.append({"s": t_end - w, "t": t_end, "count": mean, "se": se, "bound": bound})
    _emit(rows, {"passed": ok}, cfg.as_dict(), seed, args)
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def _cmd_convergence(args, flat) -> int:
    cfg = _experiment_config(flat, args, "convergence")
    rep = run_convergence_sweep(cfg)
    ok = rep.fit["max_resid_z"] is None or rep.fit["max_resid_z"] <= 3.0
    _emit(rep.rows, {"fit": rep.fit, "passed": ok}, rep.config, cfg.seed, args)
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def _cmd_ergodicity(args, flat) -> int:
    cfg = _experiment_config(flat, args, "ergodicity")
    rep = run_ergodicity(cfg)
    if rep.non_ergodic:
        payload = {"non_ergodic": True, "passed": True,
                   "note": "type fixation detected; convergence not asserted"}
        _emit(rep.rows, payload, rep.config, cfg.seed, args)
        return EXIT_OK
    ok = rep.max_z <= 3.0
    _emit(rep.rows, {"non_ergodic": False, "max_z": rep.max_z, "passed": ok},
          rep.config, cfg.seed, args)
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS,
                        help="TOML config file with [model]/[experiment] sections")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                        help="master seed (overrides config)")
    common.add_argument("--reps", type=int, default=argparse.SUPPRESS,
                        help="replicate override")
    common.add_argument("--out", default=argparse.SUPPRESS,
                        help="output path (default stdout)")
    common.add_argument("--format", choices=("csv", "json"), default=argparse.SUPPRESS)
    p = argparse.ArgumentParser(prog="treemoran", description=__doc__, parents=[common])
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help):
        return sub.add_parser(name, help=help, parents=[common])

    add("equilibrium", "neutral moment table vs simulation")
    add("theorem5", "small-selection expansion vs paired simulation")
    add("convergence", "fixed-time statistic across N with C/N fit")
    add("ergodicity", "star vs comb initial states at stationarity")

    q = add("closedform", "print the closed-form tables as JSON")
    q.add_argument("--gamma", type=float, default=None)
    q.add_argument("--tb", type=float, default=None, help="mutation rate away from fit")
    q.add_argument("--tg", type=float, default=None, help="mutation rate toward fit")
    q.add_argument("--lambda", dest="lam", type=float, default=None)
    q.add_argument("--alpha", type=float, default=None)

    v = add("validate", "validate a state file pair")
    v.add_argument("--matrix", required=True)
    v.add_argument("--types", required=True)
    v.add_argument("--tol", type=float, default=1e-9)

    s = add("simulate", "run the engine and emit state / log files")
    s.add_argument("--t-end", dest="t_end", type=float, default=None)
    s.add_argument("--state-out", dest="state_out", default=None)
    s.add_argument("--log-out", dest="log_out", default=None)

    d = add("duality", "two-sided duality check")
    d.add_argument("--t", type=float, default=None)

    g = add("generator-check", "drift and quadratic-variation checks")
    g.add_argument("--h", type=float, default=None)

    add("ancestors", "ancestor counts vs the analytic bound")
    return p


_HANDLERS = {
    "closedform": _cmd_closedform,
    "validate": _cmd_validate,
    "simulate": _cmd_simulate,
    "equilibrium": _cmd_equilibrium,
    "theorem5": _cmd_theorem5,
    "duality": _cmd_duality,
    "generator-check": _cmd_generator_check,
    "ancestors": _cmd_ancestors,
    "convergence": _cmd_convergence,
    "ergodicity": _cmd_ergodicity,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for name, default in (("config", None), ("seed", None), ("reps", None),
                          ("out", None), ("format", "json")):
        if not hasattr(args, name):
            setattr(args, name, default)
    try:
        flat = _load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    try:
        return _HANDLERS[args.command](args, flat)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
