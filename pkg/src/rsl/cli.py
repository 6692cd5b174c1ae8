"""Command-line entry point: ``rsl {check,simulate,superhedge,value,duality}``.

Every run writes ``report.json`` (plus CSV artifacts) into ``--output``,
falling back to ``$RSL_OUTPUT_DIR`` and then ``./rsl-output``. Exit codes:
0 when every check passes, 2 when a check fails or an engine refuses the
inputs, 1 for usage and configuration errors.

Settings resolve as command-line flag, then the command's table in
``--config`` (an experiment TOML written by ``--dump-config``), then the
built-in default.
"""

from __future__ import annotations

import argparse
import copy
import logging
import math
import os
import sys

import numpy as np
import tomli
import tomli_w

from . import __version__
from .conditions import certify_all, classify
from .config import load_model, spec_from_config
from .duality import conjugacy_check, shape_check, weak_duality_check
from .errors import BadFamilyParams, ConfigError, RslError
from .model import FAMILIES, builtin
from .report import SCHEMA, ReportIOError, emit_report, write_csv
from .simulate import (
    Direction,
    euler_paths,
    girsanov_drift_check,
    moment_stability_check,
    parse_selector,
    stochastic_exponential,
)
from .utility import UtilitySpec
from .value import (
    FractionGrid,
    LatticeConfig,
    StateGrid,
    WealthGrid,
    dual_value,
    primal_value,
    superhedge,
    verify_superhedge,
)

DEFAULT_SEED = 42

DEFAULTS = {
    "check": {"utility": "log", "budget": 1000},
    "simulate": {
        "paths": 10000,
        "steps": 64,
        "selector": "",
        "direction": "PtoQ",
        "moments": [],
        "refinements": [64, 128, 256],
        "moment_paths": 100000,
        "dump": False,
    },
    "superhedge": {
        "payoff": "pos(X(T) - 1)",
        "steps": 64,
        "param_grid": 9,
        "stretch": 1.0,
        "verify_paths": 10000,
        "slack_c": 0.0,
        "band": False,
    },
    "value": {
        "utility": "log",
        "x": [1.0],
        "y": [],
        "steps": 64,
        "wealth_nodes": 201,
        "fraction_nodes": 201,
        "param_grid": 9,
        "interpolation": "linear",
        "band": False,
    },
    "duality": {
        "utility": "log",
        "steps": 64,
        "wealth_nodes": 201,
        "fraction_nodes": 201,
        "param_grid": 9,
        "interpolation": "linear",
        "grid_lo": 0.25,
        "grid_hi": 4.0,
        "grid_points": 41,
        "tolerance": -1.0,
        "inner": "min",
        "weak_x": -1.0,
        "weak_y": -1.0,
        "selector": "",
        "paths": 100000,
    },
}

_LIST_KEYS = {"moments", "refinements", "x", "y"}


def _floats(text):
    return [float(v) for v in str(text).split(",") if v.strip()]


def _ints(text):
    return [int(v) for v in str(text).split(",") if v.strip()]


def build_parser():
    p = argparse.ArgumentParser(prog="rsl", description="Robust finance numerical laboratory.")
    p.add_argument("--version", action="version", version=f"rsl {__version__} (report schema {SCHEMA})")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--model", help="model TOML file or builtin family name")
        sp.add_argument("--config", help="experiment TOML (as written by --dump-config)")
        sp.add_argument("--seed", type=int, default=None, help=f"64-bit seed (default {DEFAULT_SEED})")
        sp.add_argument("--threads", type=int, default=1, help="worker threads; results do not depend on it")
        sp.add_argument("--output", default=None, help="output directory (default $RSL_OUTPUT_DIR or ./rsl-output)")
        sp.add_argument("--dump-config", action="store_true", help="print the resolved experiment TOML and exit")
        sp.add_argument("-v", "--verbose", action="store_true")

    sp = sub.add_parser("check", help="certify the structural conditions")
    common(sp)
    sp.add_argument("--utility")
    sp.add_argument("--budget", type=int)

    sp = sub.add_parser("simulate", help="Euler paths, Girsanov densities and their checks")
    common(sp)
    sp.add_argument("--paths", type=int)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--selector", help="constant:f=..|feedback:name|adversarial:file")
    sp.add_argument("--direction", choices=["PtoQ", "QtoP"])
    sp.add_argument("--moments", type=_floats, help="comma-separated p values for the moment check")
    sp.add_argument("--refinements", type=_ints, help="comma-separated n_steps for the moment check")
    sp.add_argument("--moment-paths", type=int)
    sp.add_argument("--dump", action="store_const", const=True, default=None, help="write paths.csv")

    sp = sub.add_parser("superhedge", help="superhedging price and hedge verification")
    common(sp)
    sp.add_argument("--payoff")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--param-grid", type=int)
    sp.add_argument("--stretch", type=float)
    sp.add_argument("--verify-paths", type=int)
    sp.add_argument("--slack-c", type=float)
    sp.add_argument("--band", action="store_const", const=True, default=None, help="rerun at doubled resolution")

    for name, helptext in (("value", "primal (and dual) utility value"), ("duality", "conjugacy and weak duality")):
        sp = sub.add_parser(name, help=helptext)
        common(sp)
        sp.add_argument("--utility")
        sp.add_argument("--steps", type=int)
        sp.add_argument("--wealth-nodes", type=int)
        sp.add_argument("--fraction-nodes", type=int)
        sp.add_argument("--param-grid", type=int)
        sp.add_argument("--interpolation", choices=["linear", "monotone_cubic"])
        if name == "value":
            sp.add_argument("--x", type=_floats, help="comma-separated initial wealths")
            sp.add_argument("--y", type=_floats, help="comma-separated dual points (runs the dual DP)")
            sp.add_argument("--band", action="store_const", const=True, default=None)
        else:
            sp.add_argument("--grid-lo", type=float)
            sp.add_argument("--grid-hi", type=float)
            sp.add_argument("--grid-points", type=int)
            sp.add_argument("--tolerance", type=float)
            sp.add_argument("--inner", choices=["min", "max"])
            sp.add_argument("--weak-x", type=float)
            sp.add_argument("--weak-y", type=float)
            sp.add_argument("--selector")
            sp.add_argument("--paths", type=int)
    return p


# ---------------------------------------------------------------------------
# resolution
# ---------------------------------------------------------------------------


def _resolve(args):
    exp = {}
    if args.config:
        try:
            with open(args.config, "rb") as fh:
                exp = tomli.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read {args.config}: {exc.strerror}", "config") from None
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML: {exc}", "config") from None
        if exp.get("command", args.command) != args.command:
            raise ConfigError(f"config is for {exp['command']!r}, not {args.command!r}", "command")
        extra = [k for k in DEFAULTS if k in exp and k != args.command]
        if extra:
            raise ConfigError(f"exactly one engine section allowed, found {extra}", extra[0])
    engine = dict(DEFAULTS[args.command])
    section = exp.get(args.command, {})
    for key, val in section.items():
        if key not in engine:
            raise ConfigError("unknown setting", f"{args.command}.{key}")
        engine[key] = val
    for key in engine:
        val = getattr(args, key, None)
        if val is not None:
            engine[key] = val
    seed = args.seed if args.seed is not None else int(exp.get("seed", DEFAULT_SEED))

    if args.model:
        if os.path.exists(args.model):
            spec = load_model(args.model)
        elif args.model in FAMILIES:
            try:
                spec = builtin(args.model)
            except BadFamilyParams as exc:
                raise ConfigError(f"builtin {args.model!r} needs parameters; pass a model file ({exc})", "model") from None
        else:
            raise ConfigError(f"model file {args.model!r} not found", "model")
    elif "model_config" in exp:
        spec = spec_from_config(exp["model_config"])
    else:
        raise ConfigError("no model given (use --model or a config with [model_config])", "model")
    return spec, engine, seed


def _dump_config(command, spec, engine, seed):
    doc = {"command": command, "seed": seed, command: {}, "model_config": spec.source}
    for k, v in engine.items():
        doc[command][k] = list(v) if k in _LIST_KEYS else v
    return tomli_w.dumps(copy.deepcopy(doc))


def _utility(text):
    try:
        return UtilitySpec.parse(text)
    except ValueError as exc:
        raise ConfigError(str(exc), "utility") from None


def _lattice(engine):
    return LatticeConfig(
        n_steps=int(engine["steps"]),
        param_grid_per_dim=int(engine["param_grid"]),
        state_grid=StateGrid(stretch=float(engine.get("stretch", 1.0))),
        wealth_grid=WealthGrid(n=int(engine.get("wealth_nodes", 201))),
        fraction_grid=FractionGrid(n=int(engine.get("fraction_nodes", 201))),
        interpolation=engine.get("interpolation", "linear"),
        dual_inner=engine.get("inner", "min"),
    )


def _model_summary(spec):
    return {
        "family": spec.family,
        "structure": spec.structure.value,
        "d": spec.d,
        "T": spec.horizon_T,
        "x0": list(spec.initial_x0),
        "param_lower": list(spec.param_box.lower),
        "param_upper": list(spec.param_box.upper),
    }


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _cmd_check(spec, engine, seed, threads, out):
    certs = certify_all(spec, seed=seed)
    utilities = ["log", "power:0.5", "power:-1", "exponential:1"]
    if engine["utility"] not in utilities:
        utilities.insert(0, engine["utility"])
    g, c, m, e = certs.growth, certs.convexity, certs.mpr, certs.ellipticity
    mpr = {
        "feasible": m.feasible,
        "residual_sup": m.residual_sup,
        "local_bounds": {repr(k): v for k, v in m.local_bounds.items()},
        "global_bound": m.global_bound,
        "divergent": m.divergent,
        "probe_levels": m.probe_levels,
        "probe_bounds": m.probe_bounds,
        "probe_ratios": m.probe_ratios,
        "ratio_divergent": m.ratio_divergent,
        "growth_exponent": m.growth_exponent,
        "rate_divergent": m.rate_divergent,
        "witness": m.witness,
    }
    apps = {}
    for u in utilities:
        a = classify(spec, _utility(u), certs)
        apps[u] = {
            "conjugacy_bounded": a.conjugacy_bounded,
            "main_pos_power_exp": a.main_pos_power_exp,
            "main_neg_power_log": a.main_neg_power_log,
        }
    conditions = classify(spec, _utility(engine["utility"]), certs).conditions["conditions"]
    passes = (not g.violated) and c.passed and m.locally_bounded
    return passes, {
        "growth": g,
        "convexity": c,
        "mpr": mpr,
        "ellipticity": e,
        "conditions": conditions,
        "applicability": apps,
    }


def _cmd_simulate(spec, engine, seed, threads, out):
    sel = parse_selector(engine["selector"] or "constant:", spec)
    ens = euler_paths(spec, sel, int(engine["paths"]), int(engine["steps"]), seed, threads=threads)
    direction = Direction.coerce(engine["direction"])
    dens = stochastic_exponential(spec, ens, direction=direction)
    z = dens.z_T
    n = ens.n_paths
    se_z = float(z.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    xT = ens.states[:, -1]
    results = {
        "selector": sel.name,
        "n_paths": n,
        "n_steps": ens.n_steps,
        "dt": ens.dt,
        "n_clamped": ens.n_clamped,
        "direction": direction.value,
        "terminal_mean": xT.mean(axis=0),
        "terminal_se": xT.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros(spec.d),
        "mean_z": float(z.mean()),
        "se_z": se_z,
        "supermartingale_ok": bool(z.mean() <= 1.0 + 5.0 * se_z),
    }
    passes = results["supermartingale_ok"]
    if direction is Direction.P_TO_Q:
        g = girsanov_drift_check(spec, ens, dens)
        results["girsanov"] = g
        passes = passes and g.passes and g.martingale_ok
    if engine["moments"]:
        certs = certify_all(spec, seed=seed)
        rep = moment_stability_check(
            spec, engine["moments"], engine["refinements"], seed, certs, sel,
            n_paths=int(engine["moment_paths"]), threads=threads,
        )
        results["moments"] = rep
        passes = passes and rep.passes
    if engine["dump"]:
        t = np.arange(ens.n_steps + 1) * ens.dt
        rows = (
            [i, t[k], *ens.states[i, k].tolist(), dens.log_z[i, k]]
            for i in range(n) for k in range(ens.n_steps + 1)
        )
        header = ["path_id", "t"] + [f"X_{i + 1}" for i in range(spec.d)] + ["logZ"]
        write_csv(os.path.join(out, "paths.csv"), header, rows)
        results["artifacts"] = ["paths.csv"]
    return passes, results


def _surface_rows(surface, wealth_scale):
    """Rows ``t,state,wealth,value,H,f_adversary`` of a tabulated surface."""
    n = surface.n_steps
    for k in range(n + 1):
        for j, x in enumerate(surface.states):
            for c, w in enumerate(surface.grid):
                h = f = None
                if k < n:
                    pol = surface.maximizer_policy[k, j, c]
                    h = pol * w if wealth_scale else pol
                    f = ";".join(format(float(v), ".17g") for v in surface.adversary_policy[k, j, c])
                yield [surface.times[k], x, w if wealth_scale else None, surface.values[k, j, c], h, f]


def _cmd_superhedge(spec, engine, seed, threads, out):
    cfg = _lattice(engine)
    surf = superhedge(spec, engine["payoff"], cfg)
    ver = verify_superhedge(surf, spec, int(engine["verify_paths"]), seed, float(engine["slack_c"]))
    shape = shape_check(surf)
    results = {
        "payoff": engine["payoff"],
        "price": surf.price,
        "lattice_step": surf.meta["step"],
        "n_steps": surf.n_steps,
        "verify": ver,
        "shape": shape,
    }
    if engine["band"]:
        fine = superhedge(spec, engine["payoff"], cfg.refined())
        results["refined_price"] = fine.price
        results["band"] = abs(fine.price - surf.price)
    write_csv(os.path.join(out, "surface.csv"), ["t", "state", "wealth", "value", "H", "f_adversary"],
              _surface_rows(surf, False))
    results["artifacts"] = ["surface.csv"]
    return ver.passes and shape.passes, results


def _cmd_value(spec, engine, seed, threads, out):
    util = _utility(engine["utility"])
    cfg = _lattice(engine)
    certs = certify_all(spec, seed=seed)
    x = engine["x"]
    u = primal_value(spec, util, x, cfg, certs)
    shape = shape_check(u)
    results = {"utility": util.label(), "x": x, "u": u.meta["u"], "shape_u": shape}
    passes = shape.passes
    if engine["band"]:
        fine = primal_value(spec, util, x, cfg.refined(), certs)
        results["u_refined"] = fine.meta["u"]
        results["band"] = float(np.abs(fine.meta["u"] - u.meta["u"]).max())
    write_csv(os.path.join(out, "primal.csv"), ["t", "state", "wealth", "value", "H", "f_adversary"],
              _surface_rows(u, True))
    results["artifacts"] = ["primal.csv"]
    if engine["y"]:
        v = dual_value(spec, util, engine["y"], cfg, certs)
        sv = shape_check(v)
        results.update({"y": engine["y"], "v": v.meta["v"], "shape_v": sv})
        passes = passes and sv.passes
    return passes, results


def _cmd_duality(spec, engine, seed, threads, out):
    util = _utility(engine["utility"])
    cfg = _lattice(engine)
    certs = certify_all(spec, seed=seed)
    grid = np.geomspace(float(engine["grid_lo"]), float(engine["grid_hi"]), int(engine["grid_points"]))
    u = primal_value(spec, util, [1.0, *grid], cfg, certs)
    v = dual_value(spec, util, grid, cfg, certs)
    u1 = float(u.meta["u"][0])
    tol = float(engine["tolerance"])
    if tol < 0:
        tol = 0.02 * (1.0 + abs(u1))
    conj = conjugacy_check(u, v, grid, grid, tol)
    su, sv = shape_check(u), shape_check(v)
    results = {
        "utility": util.label(),
        "inner": cfg.dual_inner,
        "u1": u1,
        "conjugacy": conj,
        "shape_u": su,
        "shape_v": sv,
    }
    passes = conj.pass_ and su.passes and sv.passes
    if float(engine["weak_x"]) > 0 and float(engine["weak_y"]) > 0:
        sel = parse_selector(engine["selector"] or "constant:", spec)
        wx = float(engine["weak_x"])
        u_wx = float(u.curve()(wx))
        w = weak_duality_check(spec, util, wx, float(engine["weak_y"]), sel, cfg, seed,
                               n_paths=int(engine["paths"]), u_value=u_wx, threads=threads)
        results["weak_duality"] = w
        passes = passes and w.passes
    write_csv(os.path.join(out, "primal_conjugacy.csv"), ["x", "u", "biconj_u"],
              zip(conj.x_grid, conj.u_vals, conj.biconj_u))
    write_csv(os.path.join(out, "dual_conjugacy.csv"), ["y", "v", "biconj_v"],
              zip(conj.y_grid, conj.v_vals, conj.biconj_v))
    results["artifacts"] = ["primal_conjugacy.csv", "dual_conjugacy.csv"]
    return passes, results


COMMANDS = {
    "check": _cmd_check,
    "simulate": _cmd_simulate,
    "superhedge": _cmd_superhedge,
    "value": _cmd_value,
    "duality": _cmd_duality,
}


def run(argv=None):
    """Execute one subcommand; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        spec, engine, seed = _resolve(args)
        if args.dump_config:
            sys.stdout.write(_dump_config(args.command, spec, engine, seed))
            return 0
        if args.threads < 1:
            raise ConfigError("threads must be at least 1", "threads")
        out = args.output or os.environ.get("RSL_OUTPUT_DIR") or "rsl-output"
        os.makedirs(out, exist_ok=True)
    except (ConfigError, OSError) as exc:
        print(f"rsl: error: {exc}", file=sys.stderr)
        return 1
    base = {"command": args.command, "seed": seed, "model": _model_summary(spec), "settings": engine}
    try:
        passes, results = COMMANDS[args.command](spec, engine, seed, args.threads, out)
    except ConfigError as exc:
        print(f"rsl: error: {exc}", file=sys.stderr)
        return 1
    except ReportIOError as exc:
        print(f"rsl: error: {exc}", file=sys.stderr)
        return 1
    except RslError as exc:
        passes, results = False, {"error": {"type": type(exc).__name__, "message": str(exc)}}
    try:
        emit_report({**base, "pass": passes, **results}, out)
    except ReportIOError as exc:
        print(f"rsl: error: {exc}", file=sys.stderr)
        return 1
    return 0 if passes else 2


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
