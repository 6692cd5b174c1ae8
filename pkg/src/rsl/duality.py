"""Numerical checks of the duality between primal and dual value functions."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, DomainMismatch, NotApplicable
from .simulate import Direction, euler_paths, stochastic_exponential
from .utility import UtilitySpec
from .value import Curve, LatticeConfig, SurfaceKind, ValueSurface, primal_value

INF_CAP = 1e9
_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def _as_curve(obj):
    if isinstance(obj, Curve):
        return obj
    if isinstance(obj, ValueSurface):
        return obj.curve()
    grid, values = obj
    return Curve(grid, values)


def _golden(fn, lo, hi, minimize, iters=80):
    """Golden-section search on ``[lo, hi]``; returns the best value found."""
    sign = 1.0 if minimize else -1.0
    a, b = lo, hi
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = sign * fn(c), sign * fn(d)
    for _ in range(iters):
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = sign * fn(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = sign * fn(d)
        if b - a <= 1e-13 * (1.0 + abs(a)):
            break
    return sign * min(fc, fd)


def legendre(curve, points, minimize):
    """``inf_s [g(s) + p s]`` (``minimize``) or ``sup_s [g(s) - p s]`` over the curve's domain.

    The extremum is located on the tabulated nodes, then refined by
    golden-section search in ``log s`` between the neighbouring nodes.
    """
    curve = _as_curve(curve)
    grid, vals = curve.grid, curve.values
    finite = vals < INF_CAP
    out = np.empty(np.size(points))
    for i, p in enumerate(np.atleast_1d(points)):
        if minimize:
            obj = np.where(finite, vals + p * grid, np.inf)
            k = int(np.argmin(obj))
        else:
            obj = vals - p * grid
            k = int(np.argmax(obj))
        best = obj[k]
        lo, hi = math.log(grid[max(k - 1, 0)]), math.log(grid[min(k + 1, grid.size - 1)])
        if hi > lo:
            if minimize:
                ref = _golden(lambda z: float(curve(math.exp(z))) + p * math.exp(z), lo, hi, True)
                best = min(best, ref)
            else:
                ref = _golden(lambda z: float(curve(math.exp(z))) - p * math.exp(z), lo, hi, False)
                best = max(best, ref)
        out[i] = best
    return out


@dataclass
class ConjugacyReport:
    x_grid: np.ndarray
    y_grid: np.ndarray
    u_vals: np.ndarray
    v_vals: np.ndarray
    biconj_u: np.ndarray
    biconj_v: np.ndarray
    gap_u: float
    gap_v: float
    tolerance: float
    pass_: bool


def _check_domain(curve, pts, name):
    lo, hi = curve.domain
    if np.min(pts) < lo * (1.0 - 1e-12) or np.max(pts) > hi * (1.0 + 1e-12):
        raise DomainMismatch(f"{name} grid [{np.min(pts):.6g}, {np.max(pts):.6g}] exceeds tabulation [{lo:.6g}, {hi:.6g}]")


def conjugacy_check(u_surface, v_surface, x_grid, y_grid, tolerance):
    """Compare ``u`` with ``inf_y [v(y) + x y]`` and ``v`` with ``sup_x [u(x) - x y]``.

    Values of ``v`` above 1e9 count as ``+inf``. Passes iff both gaps are
    within ``tolerance``.
    """
    uc, vc = _as_curve(u_surface), _as_curve(v_surface)
    x_grid = np.asarray(x_grid, dtype=float)
    y_grid = np.asarray(y_grid, dtype=float)
    _check_domain(uc, x_grid, "x")
    _check_domain(vc, y_grid, "y")
    u_vals = uc(x_grid)
    v_vals = vc(y_grid)
    bu = legendre(vc, x_grid, minimize=True)
    bv = legendre(uc, y_grid, minimize=False)
    du = np.abs(u_vals - bu)
    dv = np.where((v_vals >= INF_CAP) & (bv >= INF_CAP), 0.0, np.abs(v_vals - bv))
    gap_u = max(float(du.max()), 0.0)
    gap_v = max(float(dv.max()), 0.0)
    return ConjugacyReport(
        x_grid=x_grid,
        y_grid=y_grid,
        u_vals=u_vals,
        v_vals=v_vals,
        biconj_u=bu,
        biconj_v=bv,
        gap_u=gap_u,
        gap_v=gap_v,
        tolerance=float(tolerance),
        pass_=bool(gap_u <= tolerance and gap_v <= tolerance),
    )


def eval_shifted_conjugate(utility, y):
    """``V_1(y) = sup_{x >= 0} [U(x + 1) - x y]`` for log and power ``p in (0, 1)``; vectorized."""
    if isinstance(utility, str):
        utility = UtilitySpec.parse(utility)
    y_arr = np.asarray(y, dtype=float)
    if np.any(np.isnan(y_arr)) or np.any(y_arr <= 0):
        raise DomainError("shifted conjugate needs y > 0")
    if utility.kind == "log":
        # x* = max(1/y - 1, 0)
        with np.errstate(divide="ignore"):
            out = np.where(y_arr >= 1.0, 0.0, -np.log(y_arr) - 1.0 + y_arr)
    elif utility.kind == "power" and 0.0 < utility.param < 1.0:
        p = utility.param
        # x* + 1 = y^{1/(p-1)} when y <= 1, boundary x* = 0 otherwise
        out = np.where(y_arr >= 1.0, 1.0 / p, np.power(y_arr, p / (p - 1.0)) * (1.0 / p - 1.0) + y_arr)
    else:
        raise NotApplicable(f"shifted conjugate is defined for log and power p in (0,1), not {utility.label()}")
    return float(out) if np.ndim(out) == 0 else out


@dataclass
class WeakDualityReport:
    x: float
    y: float
    u: float
    bound: float
    se: float
    slack: float
    n_paths: int
    selector: str
    passes: bool


def weak_duality_check(spec, utility, x, y, selector_P, cfg=None, seed=42, n_paths=100_000, n_steps=None,
                       u_value=None, certificates=None, threads=1):
    """Monte Carlo check of ``u(x) <= E^P[max(V_1(y Z_T), 0)] + x y``.

    ``Z_T`` is the drift-removing density of the model picked by
    ``selector_P``. ``u(x)`` comes from :func:`primal_value` unless
    ``u_value`` is given.
    """
    if isinstance(utility, str):
        utility = UtilitySpec.parse(utility)
    cfg = cfg or LatticeConfig()
    if u_value is None:
        u_value = float(primal_value(spec, utility, [x], cfg, certificates).meta["u"][0])
    ens = euler_paths(spec, selector_P, n_paths, n_steps or cfg.n_steps, seed, threads=threads)
    z = stochastic_exponential(spec, ens, direction=Direction.P_TO_Q).z_T
    vals = np.maximum(eval_shifted_conjugate(utility, y * z), 0.0)
    mean = float(vals.mean())
    se = float(vals.std(ddof=1) / math.sqrt(n_paths)) if n_paths > 1 else 0.0
    bound = mean + x * y
    return WeakDualityReport(
        x=float(x),
        y=float(y),
        u=float(u_value),
        bound=bound,
        se=se,
        slack=bound - float(u_value),
        n_paths=int(n_paths),
        selector=selector_P.name,
        passes=bool(u_value <= bound + 4.0 * se),
    )


@dataclass
class ShapeReport:
    kind: str
    tolerance: float
    n_violations: int
    violations: list = field(default_factory=list)
    passes: bool = True


def _sweep(grid, vals, increasing, concave, tol, where, out):
    d = np.diff(vals)
    bad = d < -tol if increasing else d > tol
    for i in np.flatnonzero(bad):
        out.append({**where, "index": int(i + 1), "test": "monotone", "magnitude": float(abs(d[i]))})
    if grid.size >= 3:
        w = (grid[1:-1] - grid[:-2]) / (grid[2:] - grid[:-2])
        chord = (1.0 - w) * vals[:-2] + w * vals[2:]
        excess = chord - vals[1:-1]  # > 0 means the middle point lies below the chord
        bad = excess > tol if concave else -excess > tol
        for i in np.flatnonzero(bad):
            out.append({**where, "index": int(i + 1), "test": "concave" if concave else "convex",
                        "magnitude": float(abs(excess[i]))})


def shape_check(surface, rel_tol=1e-6, max_listed=50, expect=None):
    """Monotonicity and midpoint-curvature sweeps.

    PrimalU slices must be nondecreasing and concave in wealth, DualV slices
    nonincreasing and convex in ``y``; every (time, node) slice is swept.
    Superhedge surfaces must dominate the payoff at maturity. A plain
    :class:`Curve` needs ``expect`` set to ``"primal"`` or ``"dual"``.
    """
    violations = []
    if isinstance(surface, Curve):
        slices = [({"t_index": 0, "node": 0}, surface.values)]
        grid = surface.grid
        kind = expect
    else:
        kind = {SurfaceKind.PRIMAL_U: "primal", SurfaceKind.DUAL_V: "dual",
                SurfaceKind.SUPERHEDGE: "superhedge"}[surface.kind]
        grid = surface.grid
        slices = [({"t_index": k, "node": j}, surface.values[k, j])
                  for k in range(surface.values.shape[0]) for j in range(surface.values.shape[1])]
    if kind not in ("primal", "dual", "superhedge"):
        raise ValueError("expect must be 'primal' or 'dual' for a plain curve")
    if kind == "superhedge":
        n = surface.n_steps
        pay = surface.meta["payoff"]
        x = surface.states
        if surface.meta["uses_max"]:
            m = x[surface.start_node + np.arange(surface.grid.size)]
            X, XM = np.meshgrid(x, m, indexing="ij")
            target = pay(X, np.maximum(XM, X))
        else:
            target = pay(x[:, None], x[:, None])
        rng = float(np.ptp(surface.values[n])) or 1.0
        tol = rel_tol * rng
        gap = target - surface.values[n]
        for j, c in zip(*np.nonzero(gap > tol)):
            violations.append({"t_index": n, "node": int(j), "index": int(c), "test": "dominates_payoff",
                               "magnitude": float(gap[j, c])})
    else:
        finite = [v[np.isfinite(v)] for _, v in slices]
        rng = max(float(np.ptp(v)) for v in finite if v.size) or 1.0
        tol = rel_tol * rng
        for where, vals in slices:
            _sweep(grid, vals, kind == "primal", kind == "primal", tol, where, violations)
    violations.sort(key=lambda v: -v["magnitude"])
    return ShapeReport(
        kind=kind,
        tolerance=tol,
        n_violations=len(violations),
        violations=violations[:max_listed],
        passes=not violations,
    )
