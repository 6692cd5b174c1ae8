"""TOML model configs: parsing into :class:`UncertaintySpec` and re-emission.

Layout::

    [model]
    family = "gbm_interval"      # or gbm_scaled, delay, remark_2_10,
    T = 1.0                      #    nonlinear_diffusion, custom
    x0 = [1.0]
    d = 1

    [intervals]                  # gbm_interval
    b = [0.05, 0.1]
    a = [0.04, 0.09]

    [scaled]                     # gbm_scaled
    b_bar = 0.1
    a_bar = 0.04

    [delay]                      # delay (gamma_table also usable from custom)
    tau = 0.5
    r = [0.0, 0.02]
    lambda = [0.0, 1.0]
    sigma2 = [0.04, 0.09]
    gamma_table = { z = [-1.0, 0.0, 1.0], g = [0.0, 0.0, 0.1] }

    [box]                        # nonlinear_diffusion / custom
    lower = [0.0]
    upper = [1.0]

    [coefficients]
    drift = ["f1 * X(t)"]
    diffusion = [["0.04 + f1 * abs(X(t))"]]
    growth_const = 1.0           # optional

    [constants]
    tau = 0.25
"""

from __future__ import annotations

import copy

import numpy as np
import tomli
import tomli_w

from .dsl import compile_expr
from .errors import BadFamilyParams, ConfigError
from .model import (
    CoefficientField,
    GammaTable,
    ParameterBox,
    Structure,
    UncertaintySpec,
    build_family,
)

_FAMILY_TABLE = {"gbm_interval": "intervals", "gbm_scaled": "scaled", "delay": "delay"}


def _plain(v):
    if isinstance(v, GammaTable):
        return {"z": v.z.tolist(), "g": v.g.tolist()}
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (tuple, list, np.ndarray)):
        return [_plain(x) for x in v]
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    return v


def family_config(name, T, x0, params):
    """Config mapping for a family given keyword parameters."""
    x0 = [float(v) for v in np.atleast_1d(np.asarray(x0, dtype=float))]
    params = _plain(dict(params))
    cfg = {"model": {"family": name, "T": float(T), "x0": x0, "d": len(x0)}}
    if name in _FAMILY_TABLE:
        if name == "delay" and "gamma" in params and "gamma_table" not in params:
            params["gamma_table"] = params.pop("gamma")
        cfg[_FAMILY_TABLE[name]] = params
    elif name in ("nonlinear_diffusion", "custom"):
        for key in ("box", "coefficients", "constants", "delay"):
            if key in params:
                cfg[key] = params[key]
        for key in ("lower", "upper"):
            if key in params:
                cfg.setdefault("box", {})[key] = params[key]
        for key in ("drift", "diffusion", "growth_const"):
            if key in params:
                cfg.setdefault("coefficients", {})[key] = params[key]
    return cfg


def _get(table, key, path):
    if key not in table:
        raise ConfigError("missing key", f"{path}.{key}" if path else key)
    return table[key]


def _dsl_spec(cfg, family):
    model = cfg["model"]
    d = int(model.get("d", len(model.get("x0", [0.0]))))
    box_t = _get(cfg, "box", "")
    box = ParameterBox(_get(box_t, "lower", "box"), _get(box_t, "upper", "box"))
    coef = _get(cfg, "coefficients", "")
    consts = cfg.get("constants", {})
    gamma = None
    if "delay" in cfg and "gamma_table" in cfg["delay"]:
        gt = cfg["delay"]["gamma_table"]
        gamma = GammaTable(gt["z"], gt["g"])
        consts = {"tau": cfg["delay"].get("tau", 0.0), **consts}
    drift_src = _get(coef, "drift", "coefficients")
    diff_src = _get(coef, "diffusion", "coefficients")
    if isinstance(drift_src, str):
        drift_src = [drift_src]
    if isinstance(diff_src, str) or (isinstance(diff_src, list) and diff_src and isinstance(diff_src[0], str) and d == 1):
        diff_src = [[diff_src]] if isinstance(diff_src, str) else [diff_src]
    if len(drift_src) != d:
        raise ConfigError(f"expected {d} drift expressions", "coefficients.drift")
    if len(diff_src) != d or any(len(row) != d for row in diff_src):
        raise ConfigError(f"expected a {d}x{d} diffusion table", "coefficients.diffusion")
    dims = box.dims
    drift_e = [
        compile_expr(s, dims, d, consts, gamma, key=f"coefficients.drift[{i}]") for i, s in enumerate(drift_src)
    ]
    diff_e = [
        [compile_expr(s, dims, d, consts, gamma, key=f"coefficients.diffusion[{i}][{j}]") for j, s in enumerate(row)]
        for i, row in enumerate(diff_src)
    ]
    exprs = drift_e + [e for row in diff_e for e in row]
    if any(e.max_lag > 0 for e in exprs):
        structure = Structure.PATH_DEPENDENT
    elif any(e.uses_state or e.uses_time for e in exprs):
        structure = Structure.MARKOVIAN
    else:
        structure = Structure.CONSTANT
    if family == "nonlinear_diffusion" and structure is Structure.PATH_DEPENDENT:
        raise ConfigError("nonlinear_diffusion coefficients may only read X(t)", "coefficients")

    def _env(f, t, prefix):
        return {"f": f, "t": t, "prefix": prefix}

    def drift(f, t, prefix):
        env = _env(f, t, prefix)
        n = f.shape[0]
        return np.stack([np.broadcast_to(e(env), (n,)) for e in drift_e], axis=-1)

    def diffusion(f, t, prefix):
        env = _env(f, t, prefix)
        n = f.shape[0]
        rows = [np.stack([np.broadcast_to(e(env), (n,)) for e in row], axis=-1) for row in diff_e]
        return np.stack(rows, axis=-2)

    growth = coef.get("growth_const")
    lip = coef.get("lipschitz_const")
    cf = CoefficientField(
        d,
        drift,
        diffusion,
        structure,
        None if growth is None else float(growth),
        None if lip is None else float(lip),
    )
    return box, cf


def spec_from_config(cfg):
    """Build an :class:`UncertaintySpec` from a parsed config mapping."""
    cfg = copy.deepcopy(cfg)
    model = _get(cfg, "model", "")
    family = _get(model, "family", "model")
    T = float(_get(model, "T", "model"))
    x0 = model.get("x0", [1.0])
    if "d" in model and int(model["d"]) != len(np.atleast_1d(x0)):
        raise ConfigError(f"d = {model['d']} but x0 has length {len(np.atleast_1d(x0))}", "model.d")
    try:
        if family in _FAMILY_TABLE:
            params = cfg.get(_FAMILY_TABLE[family], {})
            spec = build_family(family, T, x0, params)
        elif family == "remark_2_10":
            spec = build_family(family, T, x0, {})
        elif family in ("nonlinear_diffusion", "custom"):
            box, cf = _dsl_spec(cfg, family)
            spec = UncertaintySpec(box, cf, T, tuple(np.atleast_1d(x0)), family=family)
        else:
            raise ConfigError(f"unknown family {family!r}", "model.family")
    except BadFamilyParams as exc:
        table = _FAMILY_TABLE.get(family, "model")
        raise ConfigError(str(exc), table) from exc
    object.__setattr__(spec, "source", cfg)
    return spec


def load_model(path):
    with open(path, "rb") as fh:
        try:
            cfg = tomli.load(fh)
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML in {path}: {exc}") from None
    return spec_from_config(cfg)


def loads_model(text):
    return spec_from_config(tomli.loads(text))


def dump_model(spec):
    """Re-emit the TOML a spec was built from (floats keep full precision)."""
    if spec.source is None:
        raise ConfigError("spec was not built from a config and cannot be dumped")
    return tomli_w.dumps(_plain(spec.source))
