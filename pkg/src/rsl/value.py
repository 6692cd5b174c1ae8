"""Lattice dynamic programs: superhedging price, primal utility value u, dual value v.

All three engines work on a one-dimensional recombining trinomial lattice
for Markovian (or constant) specs. At a node with up-spacing ``u`` and
down-spacing ``d`` the move probabilities match drift ``b dt`` and second
moment ``v = a dt + (b dt)^2``::

    p_up   = (v + b dt d) / (u (u + d))
    p_down = (v - b dt u) / (d (u + d))
    p_mid  = 1 - p_up - p_down

Any probability outside ``[0, 1]`` raises :class:`GridTooCoarse`; nothing is
clipped. The lattice step defaults to ``h^2 = stretch * max_f v`` at the
start node, so the most volatile parameter puts zero mass on the middle move.

Value interpolation in wealth (or log-density) is done on a transformed
scale chosen so that the exact solution of the constant-coefficient problem
is affine in the interpolation coordinate: ``log U^{-1}(V)`` against
``log w`` for log and power utility, and the analogous transform for the
conjugate. Exponential utility interpolates raw values.
"""

from __future__ import annotations

import enum
import itertools
import logging
import math
import re
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.interpolate import PchipInterpolator

from .conditions import _quad, certify_all, classify, mpr_batch, theorem_for
from .dsl import compile_expr
from .errors import (
    ConfigError,
    GridTooCoarse,
    LogDensityGridExceeded,
    MprInfeasible,
    NotApplicable,
    SuperhedgeViolation,
)
from .model import Structure, evaluate_batch
from .utility import UtilitySpec, conjugate_array, eval_conjugate

__all__ = [
    "UtilitySpec",
    "eval_conjugate",
    "StateGrid",
    "WealthGrid",
    "FractionGrid",
    "DensityGrid",
    "LatticeConfig",
    "SurfaceKind",
    "ValueSurface",
    "Payoff",
    "superhedge",
    "verify_superhedge",
    "primal_value",
    "dual_value",
]

logger = logging.getLogger(__name__)

PROB_TOL = 1e-12
_VERIFY_TAG = 11


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StateGrid:
    """``kind`` is ``arithmetic`` (nodes ``x0 + j h``) or ``geometric`` (``x0 e^{j h}``).

    ``step`` overrides ``h``; ``half_width`` truncates the lattice to
    ``|j| <= half_width`` (default: the full tree).
    """

    kind: str = "arithmetic"
    stretch: float = 1.0
    step: float | None = None
    half_width: int | None = None

    def __post_init__(self):
        if self.kind not in ("arithmetic", "geometric"):
            raise ConfigError(f"unknown state grid kind {self.kind!r}", "state_grid.kind")
        if not self.stretch >= 1.0:
            raise ConfigError("stretch must be >= 1", "state_grid.stretch")
        if self.step is not None and not self.step > 0:
            raise ConfigError("step must be positive", "state_grid.step")
        if self.half_width is not None and self.half_width < 1:
            raise ConfigError("half_width must be at least 1", "state_grid.half_width")


@dataclass(frozen=True)
class WealthGrid:
    """Geometric wealth grid from the wealth floor to ``hi`` (default ``100 max(x)``)."""

    n: int = 201
    hi: float | None = None

    def __post_init__(self):
        if self.n < 3:
            raise ConfigError("wealth grid needs at least 3 nodes", "wealth_grid.n")
        if self.hi is not None and not self.hi > 0:
            raise ConfigError("wealth grid must be strictly positive", "wealth_grid.hi")


@dataclass(frozen=True)
class FractionGrid:
    """Portfolio fractions ``pi`` (``H = pi W``) on ``linspace(-bound, bound, n)``.

    The default bound is ``2 max |theta|`` over the parameter grid, at least 1.
    """

    n: int = 201
    bound: float | None = None

    def __post_init__(self):
        if self.n < 3 or self.n % 2 == 0:
            raise ConfigError("fraction grid needs an odd node count >= 3", "fraction_grid.n")


@dataclass(frozen=True)
class DensityGrid:
    """Uniform log-density grid; ``lo``/``hi`` default to ``log y`` range padded by ``n_sd`` sd."""

    n: int = 401
    n_sd: float = 8.0
    lo: float | None = None
    hi: float | None = None

    def __post_init__(self):
        if self.n < 3:
            raise ConfigError("log-density grid needs at least 3 nodes", "density_grid.n")
        if self.lo is not None and self.hi is not None and not self.lo < self.hi:
            raise ConfigError("log-density grid must be increasing", "density_grid")


@dataclass(frozen=True)
class LatticeConfig:
    n_steps: int = 64
    state_grid: StateGrid = field(default_factory=StateGrid)
    wealth_grid: WealthGrid = field(default_factory=WealthGrid)
    param_grid_per_dim: int = 9
    interpolation: str = "linear"
    fraction_grid: FractionGrid = field(default_factory=FractionGrid)
    density_grid: DensityGrid = field(default_factory=DensityGrid)
    wealth_min: float | None = None
    dual_inner: str = "min"

    def __post_init__(self):
        if self.n_steps < 1:
            raise ConfigError("n_steps must be at least 1", "n_steps")
        if self.param_grid_per_dim < 2:
            raise ConfigError("param_grid_per_dim must be at least 2", "param_grid_per_dim")
        if self.interpolation not in ("linear", "monotone_cubic"):
            raise ConfigError("interpolation must be linear or monotone_cubic", "interpolation")
        if self.wealth_min is not None and not self.wealth_min > 0:
            raise ConfigError("wealth_min must be positive", "wealth_min")
        if self.dual_inner not in ("min", "max"):
            raise ConfigError("dual_inner must be min or max", "dual_inner")

    def refined(self):
        """Doubled time steps and grid densities."""
        sg = self.state_grid
        return replace(
            self,
            n_steps=2 * self.n_steps,
            state_grid=replace(sg, half_width=None if sg.half_width is None else 2 * sg.half_width),
            wealth_grid=replace(self.wealth_grid, n=2 * self.wealth_grid.n - 1),
            fraction_grid=replace(self.fraction_grid, n=2 * self.fraction_grid.n - 1),
            density_grid=replace(self.density_grid, n=2 * self.density_grid.n - 1),
        )


# ---------------------------------------------------------------------------
# surfaces
# ---------------------------------------------------------------------------


class SurfaceKind(enum.Enum):
    PRIMAL_U = "PrimalU"
    DUAL_V = "DualV"
    SUPERHEDGE = "Superhedge"


@dataclass
class ValueSurface:
    """Tabulated value function with the policies attaining it.

    ``values`` has shape ``(n_steps + 1, n_nodes, n_grid)``; ``grid`` is the
    wealth grid (PrimalU), the ``y = e^l`` grid (DualV) or the running-max
    node offsets (Superhedge, a single column when the payoff has no
    running-max tap). ``maximizer_policy`` holds portfolio fractions (PrimalU)
    or the hedge ``H`` (Superhedge); ``adversary_policy`` holds the chosen
    parameter vectors with a trailing ``dims`` axis.
    """

    kind: SurfaceKind
    times: np.ndarray
    states: np.ndarray
    grid: np.ndarray
    values: np.ndarray
    maximizer_policy: np.ndarray
    adversary_policy: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def n_steps(self):
        return self.times.size - 1

    @property
    def start_node(self):
        return int(self.meta["start_node"])

    def initial_slice(self):
        """``(grid, values)`` at ``t = 0`` and the start node."""
        return self.grid, self.values[0, self.start_node]

    @property
    def price(self):
        if self.kind is not SurfaceKind.SUPERHEDGE:
            raise AttributeError("price is defined for superhedge surfaces")
        return float(self.values[0, self.start_node, 0])

    def curve(self):
        """The ``t = 0`` slice as an interpolating :class:`Curve` on its natural domain."""
        if self.kind is SurfaceKind.SUPERHEDGE:
            raise ValueError("superhedge surfaces have no wealth/dual curve")
        grid, vals = self.initial_slice()
        return Curve(grid, vals, self.meta.get("transform", "identity"), self.meta.get("interpolation", "linear"))

    def __call__(self, points):
        return self.curve()(points)


# ---------------------------------------------------------------------------
# interpolation on transformed scales
# ---------------------------------------------------------------------------


def _transform_pair(name):
    """``(forward, inverse)`` maps for a transform label."""
    if name == "identity":
        return (lambda v: v), (lambda c: c)
    kind, _, arg = name.partition(":")
    if kind == "power_u":  # log U^{-1}(V) for U = x^p / p
        p = float(arg)
        return (lambda v: np.log(p * v) / p), (lambda c: np.exp(p * c) / p)
    if kind == "scaled_exp":  # log(V / c) for V = c e^{q l}
        c0 = float(arg)
        return (lambda v: np.log(v / c0)), (lambda z: c0 * np.exp(z))
    raise ValueError(f"unknown transform {name!r}")


def _primal_transform(utility):
    if utility.kind == "power":
        return f"power_u:{utility.param!r}"
    return "identity"  # log: V is already log U^{-1}(V); exponential: raw


def _dual_transform(utility):
    if utility.kind == "power":
        return f"scaled_exp:{(1.0 - utility.param) / utility.param!r}"
    return "identity"


class _Weights:
    """Linear interpolation weights on ``nodes`` for queries ``q`` (any shape); extrapolates linearly."""

    def __init__(self, nodes, q):
        n = nodes.size
        self.i = np.clip(np.searchsorted(nodes, q, side="right") - 1, 0, n - 2)
        lo, hi = nodes[self.i], nodes[self.i + 1]
        self.w = (q - lo) / (hi - lo)
        self.q = q
        self.nodes = nodes
        self.inside = (q >= nodes[0]) & (q <= nodes[-1])

    def apply(self, vals, rows=None):
        """Interpolate ``vals`` (rows x nodes); ``rows`` picks a row per query (broadcast with q)."""
        if rows is None:
            return vals[..., self.i] * (1.0 - self.w) + vals[..., self.i + 1] * self.w
        return vals[rows, self.i] * (1.0 - self.w) + vals[rows, self.i + 1] * self.w


def _interp(nodes, vals, q, method, rows=None, weights=None):
    """Interpolate rows of ``vals`` at ``q``; linear outside the node range."""
    wts = weights if weights is not None else _Weights(nodes, q)
    out = wts.apply(vals, rows)
    if method == "monotone_cubic":
        if rows is None:
            cub = PchipInterpolator(nodes, vals, axis=-1, extrapolate=False)(q)
        else:
            rows_b = np.broadcast_to(rows, q.shape)
            cub = np.empty(q.shape)
            for r in np.unique(rows_b):
                sel = rows_b == r
                cub[sel] = PchipInterpolator(nodes, vals[r], extrapolate=False)(q[sel])
        out = np.where(wts.inside, cub, out) if rows is not None else np.where(wts.inside, cub, out)
    return out


@dataclass
class Curve:
    """A positive-domain function tabulated on ``grid`` and interpolated in ``log`` grid coordinates."""

    grid: np.ndarray
    values: np.ndarray
    transform: str = "identity"
    interpolation: str = "linear"

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.grid.ndim != 1 or self.grid.size < 2 or np.any(np.diff(self.grid) <= 0) or self.grid[0] <= 0:
            raise ValueError("curve grid must be positive and strictly increasing")
        self._fwd, self._inv = _transform_pair(self.transform)
        self._z = np.log(self.grid)
        self._c = self._fwd(self.values)

    @property
    def domain(self):
        return float(self.grid[0]), float(self.grid[-1])

    def __call__(self, points):
        q = np.log(np.asarray(points, dtype=float))
        return self._inv(_interp(self._z, self._c, q, self.interpolation))

    @classmethod
    def from_function(cls, fn, grid, transform="identity"):
        grid = np.asarray(grid, dtype=float)
        return cls(grid, fn(grid), transform)


# ---------------------------------------------------------------------------
# lattice geometry
# ---------------------------------------------------------------------------


def _require_lattice(spec):
    if spec.d != 1:
        raise NotApplicable("lattice engines need d = 1; use Monte Carlo bounds for d > 1")
    if spec.structure is Structure.PATH_DEPENDENT:
        raise NotApplicable("lattice engines need a Markovian spec; path-dependent families are simulate-only")


class _Lattice:
    """Node coordinates with one ghost node on each side (index 0 and N+1)."""

    def __init__(self, spec, cfg, with_drift, collapse):
        self.spec = spec
        self.n_steps = cfg.n_steps
        self.dt = spec.horizon_T / cfg.n_steps
        self.f_grid = spec.param_box.grid(cfg.param_grid_per_dim)
        self.kind = cfg.state_grid.kind
        self.with_drift = with_drift
        x0 = float(spec.x0[0])
        if self.kind == "geometric" and x0 <= 0:
            raise ConfigError("geometric state grid needs x0 > 0", "state_grid.kind")
        b0, a0 = self._coeffs(0.0, np.array([x0]))
        v0 = a0 * self.dt + (b0 * self.dt) ** 2 if with_drift else a0 * self.dt
        vmax = float(v0.max())
        step = cfg.state_grid.step
        if step is None:
            step = math.sqrt(cfg.state_grid.stretch * vmax) if vmax > 0 else 1.0
            if self.kind == "geometric":
                step = math.sqrt(cfg.state_grid.stretch * vmax) / x0 if vmax > 0 else 0.1
        self.h = float(step)
        self.collapse = collapse
        J = 0 if collapse else (cfg.state_grid.half_width or cfg.n_steps)
        self.J = J
        self.N = 2 * J + 1
        j = np.arange(-J - 1, J + 2, dtype=float)
        self.xg = x0 + j * self.h if self.kind == "arithmetic" else x0 * np.exp(j * self.h)
        if collapse:
            # one node whose neighbours sit at fixed offsets
            self.xg = np.array([x0 - self.h, x0, x0 + self.h])
        self.x = self.xg[1:-1]
        self.up = self.xg[2:] - self.x
        self.down = self.x - self.xg[:-2]
        self.start = J

    def _coeffs(self, t, xs):
        """``(b, a)`` with shape ``(len(xs), n_f)`` on the parameter grid."""
        nf = self.f_grid.shape[0]
        f = np.tile(self.f_grid, (xs.size, 1))
        prefix = np.repeat(xs, nf).reshape(-1, 1, 1)
        b, a = evaluate_batch(self.spec, f, t, prefix)
        return b[:, 0].reshape(xs.size, nf), a[:, 0, 0].reshape(xs.size, nf)

    def coeffs(self, k):
        return self._coeffs(k * self.dt, self.x)

    def probs(self, k, b, a):
        """Move probabilities ``(N, n_f, 3)`` ordered (down, mid, up); checks reachable nodes."""
        dt = self.dt
        bd = b * dt if self.with_drift else np.zeros_like(b)
        v = a * dt + bd**2
        u = self.up[:, None]
        d = self.down[:, None]
        p_up = (v + bd * d) / (u * (u + d))
        p_dn = (v - bd * u) / (d * (u + d))
        p = np.stack([p_dn, 1.0 - p_up - p_dn, p_up], axis=-1)
        reach = np.abs(np.arange(self.N) - self.start) <= k
        bad = ((p < -PROB_TOL) | (p > 1.0 + PROB_TOL)).any(axis=(1, 2)) & reach
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            need_stretch = float((v[i] / (u[i] * d[i])).max())
            drift_ratio = float((np.abs(bd[i]) * max(u[i, 0], d[i, 0]) / np.maximum(v[i], 1e-300)).max())
            hint = []
            if need_stretch > 1.0:
                hint.append(f"lattice step too small: need step^2 >= {need_stretch:.4g} x current")
            if drift_ratio > 1.0:
                hint.append(f"drift too large for the step: refine n_steps by a factor >= {drift_ratio**2:.4g}")
            raise GridTooCoarse(
                f"trinomial probabilities leave [0, 1] at t = {k * dt:.6g}, x = {self.x[i]:.6g}; " + "; ".join(hint)
            )
        return p

    def moves(self):
        """Increments ``(N, 3)`` ordered (down, mid, up)."""
        return np.stack([-self.down, np.zeros(self.N), self.up], axis=-1)


def _shift_rows(V, s, collapse):
    """Rows ``j + s`` of ``V`` (shape (N, ...)) with linear ghost extrapolation at the edges."""
    if collapse or s == 0:
        return V
    N = V.shape[0]
    if N == 1:
        return V
    if s > 0:
        ghost = 2.0 * V[-1:] - V[-2:-1]
        return np.concatenate([V[1:], ghost], axis=0)
    ghost = 2.0 * V[:1] - V[1:2]
    return np.concatenate([ghost, V[:-1]], axis=0)


# ---------------------------------------------------------------------------
# superhedging
# ---------------------------------------------------------------------------


@dataclass
class Payoff:
    """Terminal payoff ``fn(x_T, running_max)`` evaluated on arrays."""

    fn: object
    uses_max: bool = False
    source: str = "<callable>"

    @classmethod
    def parse(cls, text):
        """Compile a payoff in the model expression language.

        ``X(T)`` (or ``X(t)``) is the terminal state and ``max_X`` its running
        maximum; ``pos(z)`` is the positive part.
        """
        src = re.sub(r"\bX\(\s*T\s*\)", "X(t)", text)
        expr = compile_expr(src, dims=1, d=1, allow_running_max=True, key="payoff")
        if expr.max_lag > 0:
            raise ConfigError("payoffs may only read the terminal state and max_X", "payoff")
        uses_max = "max_X" in src

        def fn(x, m):
            x = np.asarray(x, dtype=float)
            env = {"f": np.zeros((x.size, 1)), "t": 0.0, "prefix": x.reshape(-1, 1, 1),
                   "running_max": np.asarray(m, dtype=float).reshape(-1)}
            return np.broadcast_to(np.asarray(expr(env), dtype=float), (x.size,)).reshape(x.shape)

        return cls(fn, uses_max, text)

    def __call__(self, x, m=None):
        x = np.asarray(x, dtype=float)
        m = x if m is None else np.asarray(m, dtype=float)
        return np.broadcast_to(np.asarray(self.fn(x, m), dtype=float), x.shape)


def _as_payoff(payoff):
    if isinstance(payoff, Payoff):
        return payoff
    if isinstance(payoff, str):
        return Payoff.parse(payoff)
    if callable(payoff):
        return Payoff(lambda x, m: payoff(x), False)
    raise TypeError("payoff must be a Payoff, an expression string or a callable of X_T")


def _max_index(lat, M, s):
    """Running-max column after moving by ``s`` from every (node, column); shape (N, M)."""
    jn = np.arange(lat.N) + s - lat.start  # offset of the new node
    cols = np.maximum(np.arange(M)[None, :], jn[:, None])
    return np.clip(cols, 0, M - 1)


def superhedge(spec, payoff, cfg=None):
    """Superhedging price ``sup_Q E^Q[payoff]`` over the zero-drift set by backward induction.

    At each node the adversary picks the diffusion value on the parameter grid
    maximizing the one-step expectation; the hedge is the central difference
    of the next-step value.
    """
    cfg = cfg or LatticeConfig()
    _require_lattice(spec)
    pay = _as_payoff(payoff)
    lat = _Lattice(spec, cfg, with_drift=False, collapse=False)
    n, N = cfg.n_steps, lat.N
    M = lat.J + 1 if pay.uses_max else 1
    x = lat.x
    # terminal values: column c holds running max x_{start + c}
    if pay.uses_max:
        X, XM = np.meshgrid(x, x[lat.start + np.arange(M)], indexing="ij")
        XM = np.maximum(XM, X)
    else:
        X = XM = x[:, None]
    term = pay(X, XM)
    if np.any(term < 0):
        # prices are translation invariant, so a payoff bounded below on the grid is enough
        logger.info("payoff %s is negative on part of the lattice", pay.source)
    values = np.empty((n + 1, N, M))
    values[n] = term
    H = np.empty((n, N, M))
    adv = np.empty((n, N, M, spec.dims))
    move_p = np.empty((n, N, M, 3))
    cols = [_max_index(lat, M, s) for s in (-1, 0, 1)] if pay.uses_max else None
    rows = np.arange(N)[:, None]
    for k in range(n - 1, -1, -1):
        Vn = values[k + 1]
        nxt = []
        for idx, s in enumerate((-1, 0, 1)):
            shifted = _shift_rows(Vn, s, False)
            nxt.append(shifted[rows, cols[idx]] if pay.uses_max else shifted)
        _, a = lat.coeffs(k)
        p = lat.probs(k, np.zeros_like(a), a)  # (N, nf, 3)
        E = np.einsum("nfs,snm->nmf", p, np.stack(nxt))  # (N, M, nf)
        best = np.argmax(E, axis=-1)
        values[k] = np.take_along_axis(E, best[..., None], axis=-1)[..., 0]
        H[k] = (nxt[2] - nxt[0]) / (lat.up + lat.down)[:, None]
        adv[k] = lat.f_grid[best]
        move_p[k] = p[rows, best]
    return ValueSurface(
        kind=SurfaceKind.SUPERHEDGE,
        times=np.linspace(0.0, spec.horizon_T, n + 1),
        states=x,
        grid=np.arange(M, dtype=float),
        values=values,
        maximizer_policy=H,
        adversary_policy=adv,
        meta={
            "start_node": lat.start,
            "step": lat.h,
            "dt": lat.dt,
            "state_grid": lat.kind,
            "ghost_states": lat.xg,
            "move_probs": move_p,
            "payoff": pay,
            "payoff_source": pay.source,
            "uses_max": pay.uses_max,
            "f_grid": lat.f_grid,
        },
    )


@dataclass
class SuperhedgeReport:
    price: float
    n_paths: int
    n_violations: int
    worst_shortfall: float
    slack_c: float
    slack: float
    exhaustive_paths: int
    exhaustive_violations: int
    violating_path: list | None
    passes: bool


def _roll(surface, moves):
    """Terminal hedging error ``pi + sum H dX - payoff`` for move sequences ``moves`` (paths, n) in {-1,0,1}."""
    meta = surface.meta
    xg = meta["ghost_states"]
    N = surface.states.size
    M = surface.grid.size
    start = surface.start_node
    P, n = moves.shape
    j = np.full(P, start)
    m = np.zeros(P, dtype=int)
    wealth = np.full(P, surface.price)
    states = np.empty((P, n + 1))
    states[:, 0] = surface.states[start]
    for k in range(n):
        h = surface.maximizer_policy[k, np.clip(j, 0, N - 1), m]
        jn = j + moves[:, k]
        dx = xg[jn + 1] - xg[j + 1]
        wealth = wealth + h * dx
        j = np.clip(jn, 0, N - 1)
        if M > 1:
            m = np.clip(np.maximum(m, j - start), 0, M - 1)
        states[:, k + 1] = xg[jn + 1]
    pay = meta["payoff"]
    xmax = states.max(axis=1)
    return wealth - pay(states[:, -1], xmax), states


def verify_superhedge(surface, spec, n_adversary_paths=10_000, seed=42, slack_c=0.0, exhaustive_max_steps=12,
                      strict=False):
    """Roll the tabulated hedge along adversarial lattice paths.

    Each step the adversary keeps the diffusion value that minimizes the
    expected hedging profit (the tabulated argmax) and the move is drawn
    from that value's probabilities. When ``n_steps <= exhaustive_max_steps``
    every one of the ``3^n`` move sequences is also checked. A path violates
    when ``pi + sum H dX < payoff - slack_c dt`` beyond a 1e-9 rounding
    allowance. ``strict=True`` raises :class:`SuperhedgeViolation` instead
    of reporting.
    """
    if surface.kind is not SurfaceKind.SUPERHEDGE:
        raise ValueError("verify_superhedge needs a superhedge surface")
    n = surface.n_steps
    dt = surface.meta["dt"]
    slack = slack_c * dt
    tol = 1e-9 * (1.0 + abs(surface.price))
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed) & (2**64 - 1),
                                                                      spawn_key=(_VERIFY_TAG,))))
    # sample moves along the adversary's own probabilities
    N, M = surface.states.size, surface.grid.size
    start = surface.start_node
    P = int(n_adversary_paths)
    moves = np.empty((P, n), dtype=int)
    j = np.full(P, start)
    m = np.zeros(P, dtype=int)
    probs = surface.meta["move_probs"]
    for k in range(n):
        p = probs[k, j, m]
        cdf = np.cumsum(p, axis=1)
        u = rng.random(P)
        s = (u[:, None] > cdf[:, :2]).sum(axis=1) - 1
        moves[:, k] = s
        j = np.clip(j + s, 0, N - 1)
        if M > 1:
            m = np.clip(np.maximum(m, j - start), 0, M - 1)
    err, states = _roll(surface, moves)
    bad = err < -slack - tol
    n_bad = int(bad.sum())
    worst = float(max(0.0, -err.min()))
    path = states[int(np.argmin(err))].tolist() if n_bad else None
    ex_paths = ex_bad = 0
    if n <= exhaustive_max_steps:
        all_moves = np.array(list(itertools.product((-1, 0, 1), repeat=n)), dtype=int)
        err_x, states_x = _roll(surface, all_moves)
        bad_x = err_x < -slack - tol
        ex_paths, ex_bad = int(all_moves.shape[0]), int(bad_x.sum())
        worst = max(worst, float(max(0.0, -err_x.min())))
        if ex_bad and path is None:
            path = states_x[int(np.argmin(err_x))].tolist()
    report = SuperhedgeReport(
        price=surface.price,
        n_paths=P,
        n_violations=n_bad,
        worst_shortfall=worst,
        slack_c=float(slack_c),
        slack=float(slack),
        exhaustive_paths=ex_paths,
        exhaustive_violations=ex_bad,
        violating_path=path,
        passes=n_bad == 0 and ex_bad == 0,
    )
    if strict and not report.passes:
        raise SuperhedgeViolation(f"hedge falls short by {worst:.3e} beyond slack {slack:.3e}", path=path)
    return report


# ---------------------------------------------------------------------------
# primal and dual utility value
# ---------------------------------------------------------------------------


def _check_applicable(spec, utility, certificates):
    certs = certificates if certificates is not None else certify_all(spec)
    app = classify(spec, utility, certs)
    flag = theorem_for(utility)
    if not getattr(app, flag):
        failed = {k: v for k, v in app.conditions[flag].items() if v not in ("pass", "assumed")}
        raise NotApplicable(f"{flag} hypotheses not certified for {utility.label()}: {failed}")
    return certs


def _collapsible(spec, cfg):
    return spec.structure is Structure.CONSTANT and cfg.state_grid.kind == "arithmetic"


def primal_value(spec, utility, x_list, cfg=None, certificates=None, check=True):
    """Robust utility value ``u(x) = sup_pi inf_f E[U(W_T)]`` by max-min dynamic programming.

    The control is the fraction ``pi`` of wealth held in the asset, so
    ``W' = W (1 + pi dX)``. A fraction is feasible at a node only if every
    successor wealth stays at or above the wealth floor.
    """
    cfg = cfg or LatticeConfig()
    _require_lattice(spec)
    if isinstance(utility, str):
        utility = UtilitySpec.parse(utility)
    if check:
        _check_applicable(spec, utility, certificates)
    x_arr = np.atleast_1d(np.asarray(x_list, dtype=float))
    if np.any(x_arr <= 0):
        raise ValueError("initial wealth must be positive")
    w_min = cfg.wealth_min if cfg.wealth_min is not None else 1e-6 * float(x_arr.min())
    w_hi = cfg.wealth_grid.hi if cfg.wealth_grid.hi is not None else 100.0 * float(x_arr.max())
    if not (w_min < x_arr.min() and x_arr.max() <= w_hi):
        raise ConfigError(f"wealth grid [{w_min}, {w_hi}] does not cover x_list", "wealth_grid")
    wg = np.geomspace(w_min, w_hi, cfg.wealth_grid.n)
    z = np.log(wg)
    collapse = _collapsible(spec, cfg)
    lat = _Lattice(spec, cfg, with_drift=True, collapse=collapse)
    n, N, W = cfg.n_steps, lat.N, wg.size
    fwd, inv = _transform_pair(_primal_transform(utility))

    b0, a0 = lat.coeffs(0)
    theta0 = np.where(a0 > 0, b0 / np.where(a0 > 0, a0, 1.0), 0.0)
    bound = cfg.fraction_grid.bound or max(1.0, 2.0 * float(np.abs(theta0).max()))
    pis = np.linspace(-bound, bound, cfg.fraction_grid.n)
    Pi = pis.size

    moves = lat.moves()  # (N, 3)
    growth = 1.0 + pis[None, None, :, None] * moves[:, None, None, :]  # (N, 1, Pi, 3)
    w_next = wg[None, :, None, None] * growth  # (N, W, Pi, 3)
    feasible = (w_next >= w_min * (1.0 - 1e-12)).all(axis=-1)  # (N, W, Pi)
    q = np.log(np.maximum(w_next, w_min))
    wts = [_Weights(z, q[..., s]) for s in range(3)]

    values = np.empty((n + 1, N, W))
    values[n] = np.broadcast_to(utility(wg), (N, W))
    frac = np.empty((n, N, W))
    adv = np.empty((n, N, W, spec.dims))
    row_idx = np.arange(N)[:, None, None]
    coeff_cache = None
    for k in range(n - 1, -1, -1):
        if spec.structure is Structure.CONSTANT and coeff_cache is not None:
            b, a, p = coeff_cache
        else:
            b, a = lat.coeffs(k)
            p = lat.probs(k, b, a)  # (N, nf, 3)
            if spec.structure is Structure.CONSTANT:
                coeff_cache = (b, a, p)
        C = fwd(values[k + 1])
        nxt = []
        for s_idx, s in enumerate((-1, 0, 1)):
            Cs = _shift_rows(C, s, collapse)
            nxt.append(inv(_interp(z, Cs, q[..., s_idx], cfg.interpolation, rows=row_idx, weights=wts[s_idx])))
        nxt = np.stack(nxt, axis=-1)  # (N, W, Pi, 3)
        worst = np.full((N, W, Pi), np.inf)
        arg = np.zeros((N, W, Pi), dtype=int)
        for fi in range(p.shape[1]):
            e = np.einsum("nwps,ns->nwp", nxt, p[:, fi])
            better = e < worst
            worst = np.where(better, e, worst)
            arg = np.where(better, fi, arg)
        worst = np.where(feasible, worst, -np.inf)
        best = np.argmax(worst, axis=-1)  # (N, W)
        values[k] = np.take_along_axis(worst, best[..., None], axis=-1)[..., 0]
        frac[k] = pis[best]
        adv[k] = lat.f_grid[np.take_along_axis(arg, best[..., None], axis=-1)[..., 0]]
    transform = _primal_transform(utility)
    surface = ValueSurface(
        kind=SurfaceKind.PRIMAL_U,
        times=np.linspace(0.0, spec.horizon_T, n + 1),
        states=lat.x,
        grid=wg,
        values=values,
        maximizer_policy=frac,
        adversary_policy=adv,
        meta={
            "start_node": lat.start,
            "step": lat.h,
            "dt": lat.dt,
            "utility": utility.label(),
            "transform": transform,
            "interpolation": cfg.interpolation,
            "wealth_min": w_min,
            "fractions": pis,
            "collapsed": collapse,
        },
    )
    surface.meta["u"] = surface.curve()(x_arr)
    surface.meta["x"] = x_arr
    return surface


def dual_value(spec, utility, y_list, cfg=None, certificates=None, check=True, inner=None):
    """Dual value ``v(y)`` by dynamic programming on (state, log-density).

    Each step the measure ``Q`` fixes a diffusion value and ``P`` picks a
    drift compatible with it; the density ``dQ/dP`` is the stochastic
    exponential of the market price of risk ``theta = b / a``. The outer
    player minimizes. ``inner`` (default ``cfg.dual_inner``) sets the inner
    player: ``"min"`` takes the infimum over ``P`` as well, ``"max"`` the
    supremum.
    """
    cfg = cfg or LatticeConfig()
    _require_lattice(spec)
    if isinstance(utility, str):
        utility = UtilitySpec.parse(utility)
    if check:
        _check_applicable(spec, utility, certificates)
    inner = inner or cfg.dual_inner
    if inner not in ("min", "max"):
        raise ValueError("inner must be 'min' or 'max'")
    y_arr = np.atleast_1d(np.asarray(y_list, dtype=float))
    if np.any(y_arr <= 0):
        raise ValueError("y must be positive")
    collapse = _collapsible(spec, cfg)
    lat = _Lattice(spec, cfg, with_drift=True, collapse=collapse)
    n, N = cfg.n_steps, lat.N
    T = spec.horizon_T

    b0, a0 = lat.coeffs(0)
    theta0, _ = mpr_batch(b0.reshape(-1, 1), a0.reshape(-1, 1, 1))
    sd = math.sqrt(float(_quad(theta0, a0.reshape(-1, 1, 1)).max()) * T)
    l_need = (math.log(y_arr.min()) - 6.0 * sd, math.log(y_arr.max()) + 6.0 * sd)
    dg = cfg.density_grid
    lo = dg.lo if dg.lo is not None else math.log(y_arr.min()) - dg.n_sd * sd - 0.5
    hi = dg.hi if dg.hi is not None else math.log(y_arr.max()) + dg.n_sd * sd + 0.5
    if lo > l_need[0] or hi < l_need[1]:
        raise LogDensityGridExceeded(
            f"log-density grid [{lo:.4g}, {hi:.4g}] does not cover log y +- 6 sd = "
            f"[{l_need[0]:.4g}, {l_need[1]:.4g}]; widen density_grid.lo/hi"
        )
    ell = np.linspace(lo, hi, dg.n)
    L = ell.size
    transform = _dual_transform(utility)
    fwd, inv = _transform_pair(transform)

    values = np.empty((n + 1, N, L))
    values[n] = np.broadcast_to(conjugate_array(utility, np.exp(ell)), (N, L))
    q_pol = np.empty((n, N, L, spec.dims))
    p_pol = np.empty((n, N, L, spec.dims))
    moves = lat.moves()  # (N, 3)
    row_idx = np.arange(N)[:, None]
    cache = None
    for k in range(n - 1, -1, -1):
        if cache is None or spec.structure is not Structure.CONSTANT:
            b, a = lat.coeffs(k)
            p = lat.probs(k, b, a)  # (N, nf, 3)
            theta, resid = mpr_batch(b.reshape(-1, 1), a.reshape(-1, 1, 1))
            bad = resid > 1e-8 * (1.0 + np.abs(b.reshape(-1)))
            if bad.any():
                i = int(np.flatnonzero(bad)[0])
                raise MprInfeasible(
                    f"no market price of risk at x = {lat.x[i // b.shape[1]]:.6g}",
                    witness={"f": lat.f_grid[i % b.shape[1]].tolist(), "t": k * lat.dt},
                )
            theta = theta.reshape(b.shape)
            # increments of log Z per move: (N, nf, 3)
            dl = -theta[..., None] * (moves[:, None, :] - (b * lat.dt)[..., None]) - 0.5 * (theta**2 * a * lat.dt)[
                ..., None
            ]
            groups = _a_groups(a)
            cache = (b, a, p, dl, groups)
        b, a, p, dl, groups = cache
        C = fwd(values[k + 1])
        nf = p.shape[1]
        E = np.zeros((N, nf, L))
        for s_idx, s in enumerate((-1, 0, 1)):
            Cs = _shift_rows(C, s, collapse)
            qpos = ell[None, None, :] + dl[:, :, s_idx, None]  # (N, nf, L)
            vals = inv(_interp(ell, Cs, qpos, cfg.interpolation, rows=np.arange(N)[:, None, None]))
            E += p[:, :, s_idx, None] * vals
        if inner == "min":
            fi = np.argmin(E, axis=1)  # (N, L)
            values[k] = np.take_along_axis(E, fi[:, None, :], axis=1)[:, 0]
            q_pol[k] = lat.f_grid[fi]
            p_pol[k] = lat.f_grid[fi]
        else:
            out = np.full((N, L), np.inf)
            q_choice = np.zeros((N, L), dtype=int)
            p_choice = np.zeros((N, L), dtype=int)
            for node in range(N):
                for members in groups[node]:
                    sub = E[node, members]  # (g, L)
                    j = np.argmax(sub, axis=0)
                    val = sub[j, np.arange(L)]
                    better = val < out[node]
                    out[node] = np.where(better, val, out[node])
                    q_choice[node] = np.where(better, members[0], q_choice[node])
                    p_choice[node] = np.where(better, members[j], p_choice[node])
            values[k] = out
            q_pol[k] = lat.f_grid[q_choice]
            p_pol[k] = lat.f_grid[p_choice]
    del row_idx
    surface = ValueSurface(
        kind=SurfaceKind.DUAL_V,
        times=np.linspace(0.0, T, n + 1),
        states=lat.x,
        grid=np.exp(ell),
        values=values,
        maximizer_policy=p_pol,
        adversary_policy=q_pol,
        meta={
            "start_node": lat.start,
            "step": lat.h,
            "dt": lat.dt,
            "utility": utility.label(),
            "transform": transform,
            "interpolation": cfg.interpolation,
            "inner": inner,
            "log_density_sd": sd,
            "collapsed": collapse,
        },
    )
    surface.meta["v"] = surface.curve()(y_arr)
    surface.meta["y"] = y_arr
    return surface


def _a_groups(a):
    """Per node, lists of parameter indices sharing a diffusion value."""
    out = []
    for row in a:
        key = np.round(row / (np.abs(row).max() + 1e-300), 12)
        _, inv_idx = np.unique(key, return_inverse=True)
        out.append([np.flatnonzero(inv_idx == g) for g in range(inv_idx.max() + 1)])
    return out
