"""Uncertainty sets: parameter boxes, coefficient fields and builtin families.

A model is a compact box ``F`` of parameters together with a drift field
``b(f, t, prefix)`` and a diffusion field ``a(f, t, prefix)``.  Fields are
evaluated on batches so that path engines can call them once per time step:

* ``f`` has shape ``(n, dims)``;
* ``t`` is a scalar time;
* ``prefix`` has shape ``(n, k + 1, d)`` and holds the path on the uniform
  grid ``linspace(0, t, k + 1)``.

Drift returns ``(n, d)`` and diffusion ``(n, d, d)``.
"""

from __future__ import annotations

import enum
import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import BadFamilyParams, ConfigError, NonPsdDiffusion, ParamOutOfBox

logger = logging.getLogger(__name__)

PSD_TOL = 1e-10
BOX_TOL = 1e-12


class Structure(enum.Enum):
    CONSTANT = "Constant"
    MARKOVIAN = "Markovian"
    PATH_DEPENDENT = "PathDependent"


@dataclass(frozen=True)
class ParameterBox:
    lower: tuple
    upper: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in np.atleast_1d(self.lower))
        hi = tuple(float(v) for v in np.atleast_1d(self.upper))
        if len(lo) != len(hi) or not lo:
            raise BadFamilyParams("box bounds must be non-empty and of equal length")
        if any(not (a <= b) for a, b in zip(lo, hi)):
            raise BadFamilyParams(f"box needs lower <= upper, got {lo} / {hi}")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dims(self):
        return len(self.lower)

    @property
    def lo(self):
        return np.asarray(self.lower)

    @property
    def hi(self):
        return np.asarray(self.upper)

    def contains(self, f, tol=BOX_TOL):
        f = np.asarray(f, dtype=float)
        scale = tol * (1.0 + np.maximum(np.abs(self.lo), np.abs(self.hi)))
        return bool(np.all(f >= self.lo - scale) and np.all(f <= self.hi + scale))

    def clamp(self, f):
        return np.minimum(np.maximum(f, self.lo), self.hi)

    def grid(self, per_dim):
        """Tensor grid with ``per_dim`` points per axis, shape ``(per_dim**dims, dims)``."""
        axes = [np.linspace(a, b, per_dim) for a, b in zip(self.lower, self.upper)]
        return np.array(list(itertools.product(*axes)), dtype=float).reshape(-1, self.dims)

    def corners(self):
        return np.array(list(itertools.product(*zip(self.lower, self.upper))), dtype=float)


@dataclass(frozen=True)
class CoefficientField:
    dim_d: int
    drift: Callable
    diffusion: Callable
    structure: Structure
    declared_growth_const: float | None = None
    declared_lipschitz_const: float | None = None


@dataclass(frozen=True)
class UncertaintySpec:
    param_box: ParameterBox
    coeffs: CoefficientField
    horizon_T: float
    initial_x0: tuple
    family: str = "custom"
    # config mapping the spec was built from; used for round-trips
    source: dict = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        x0 = tuple(float(v) for v in np.atleast_1d(self.initial_x0))
        object.__setattr__(self, "initial_x0", x0)
        if not self.horizon_T > 0:
            raise BadFamilyParams(f"horizon_T must be positive, got {self.horizon_T}")
        if len(x0) != self.coeffs.dim_d:
            raise BadFamilyParams(f"x0 has length {len(x0)} but d = {self.coeffs.dim_d}")

    @property
    def d(self):
        return self.coeffs.dim_d

    @property
    def dims(self):
        return self.param_box.dims

    @property
    def x0(self):
        return np.asarray(self.initial_x0)

    @property
    def structure(self):
        return self.coeffs.structure


@dataclass(frozen=True)
class ThetaSample:
    drift_val: np.ndarray
    diff_val: np.ndarray
    param: np.ndarray


def symmetrize(a):
    if a.shape[-1] == 1:
        return a
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def psd_check(a, where=""):
    """Raise :class:`NonPsdDiffusion` if any matrix in the batch has eigenvalue < -1e-10."""
    eig = a[..., 0, :] if a.shape[-1] == 1 else np.linalg.eigvalsh(a)
    bad = eig[..., 0] < -PSD_TOL
    if np.any(bad):
        i = int(np.flatnonzero(np.atleast_1d(bad))[0])
        lam = float(np.atleast_1d(eig[..., 0])[i])
        raise NonPsdDiffusion(f"diffusion has eigenvalue {lam:.3e} < -1e-10 {where}".strip())


def psd_sqrt(a):
    """Symmetric square root with negative eigenvalues clipped to zero."""
    if a.shape[-1] == 1:
        return np.sqrt(np.maximum(a, 0.0))
    lam, vec = np.linalg.eigh(a)
    root = np.sqrt(np.maximum(lam, 0.0))
    return np.einsum("...ij,...j,...kj->...ik", vec, root, vec)


def evaluate_batch(spec, f, t, prefix, check=True):
    """Evaluate ``(b, a)`` for a batch; diffusion is symmetrized (and PSD-checked)."""
    f = np.asarray(f, dtype=float)
    n = f.shape[0]
    d = spec.d
    b = np.broadcast_to(np.asarray(spec.coeffs.drift(f, t, prefix), dtype=float), (n, d))
    a = np.broadcast_to(np.asarray(spec.coeffs.diffusion(f, t, prefix), dtype=float), (n, d, d))
    a = symmetrize(a)
    if check:
        psd_check(a)
    return np.array(b), a


def _as_prefix(spec, prefix):
    if prefix is None:
        return spec.x0.reshape(1, 1, -1)
    p = np.asarray(prefix, dtype=float)
    if p.ndim == 1:
        p = p.reshape(-1, spec.d) if spec.d > 1 else p.reshape(-1, 1)
    return p.reshape(1, -1, spec.d)


def eval_coefficients(spec, f, t, prefix=None):
    """Evaluate one element of the correspondence at ``(t, prefix)``.

    ``prefix`` is the discrete path observed on ``linspace(0, t, k + 1)``; it
    must start at ``x0``.
    """
    f = np.atleast_1d(np.asarray(f, dtype=float))
    if f.shape != (spec.dims,) or not spec.param_box.contains(f):
        raise ParamOutOfBox(f"parameter {f.tolist()} outside {spec.param_box}")
    if not (0.0 <= t <= spec.horizon_T):
        raise ValueError(f"t = {t} outside [0, {spec.horizon_T}]")
    p = _as_prefix(spec, prefix)
    b, a = evaluate_batch(spec, f.reshape(1, -1), float(t), p)
    return ThetaSample(drift_val=b[0], diff_val=a[0], param=f)


def sample_theta_set(spec, t, prefix=None, grid_per_dim=3):
    """Evaluate the correspondence on a tensor grid over the parameter box."""
    if grid_per_dim < 2:
        raise ValueError("grid_per_dim must be at least 2")
    grid = spec.param_box.grid(grid_per_dim)
    p = _as_prefix(spec, prefix)
    pb = np.broadcast_to(p, (grid.shape[0],) + p.shape[1:])
    b, a = evaluate_batch(spec, grid, float(t), pb, check=False)
    eig = np.linalg.eigvalsh(a)[:, 0]
    bad = np.flatnonzero(eig < -PSD_TOL)
    if bad.size:
        i = int(bad[0])
        raise NonPsdDiffusion(
            f"diffusion has eigenvalue {eig[i]:.3e} < -1e-10 at grid point f={grid[i].tolist()}"
        )
    return [ThetaSample(drift_val=b[i], diff_val=a[i], param=grid[i]) for i in range(grid.shape[0])]


# ---------------------------------------------------------------------------
# builtin families
# ---------------------------------------------------------------------------


def _interval(params, key, default=None):
    v = params.get(key, default)
    if v is None:
        raise BadFamilyParams(f"missing interval {key!r}")
    try:
        lo, hi = (float(x) for x in v)
    except (TypeError, ValueError):
        raise BadFamilyParams(f"{key}: expected [lower, upper], got {v!r}") from None
    if not lo <= hi:
        raise BadFamilyParams(f"{key}: need lower <= upper, got [{lo}, {hi}]")
    return lo, hi


def _gbm_interval(params):
    b_lo, b_hi = _interval(params, "b", (0.05, 0.1))
    a_lo, a_hi = _interval(params, "a", (0.04, 0.09))
    if a_lo < 0:
        raise BadFamilyParams("a: volatility interval must be nonnegative")
    box = ParameterBox((b_lo, a_lo), (b_hi, a_hi))

    def drift(f, t, prefix):
        return f[:, 0:1]

    def diffusion(f, t, prefix):
        return f[:, 1].reshape(-1, 1, 1)

    growth = max(b_lo**2, b_hi**2) + a_hi
    return box, CoefficientField(1, drift, diffusion, Structure.CONSTANT, growth, 0.0)


def _gbm_scaled(params):
    b_bar = float(params.get("b_bar", 0.1))
    a_bar = float(params.get("a_bar", 0.04))
    if a_bar <= 0:
        raise BadFamilyParams("a_bar must be positive")
    box = ParameterBox((0.0,), (1.0,))

    def drift(f, t, prefix):
        return f[:, 0:1] * b_bar

    def diffusion(f, t, prefix):
        return (f[:, 0] * a_bar).reshape(-1, 1, 1)

    return box, CoefficientField(1, drift, diffusion, Structure.CONSTANT, b_bar**2 + a_bar, 0.0)


class GammaTable:
    """Piecewise-linear function with linear extrapolation beyond the table ends."""

    def __init__(self, z, g):
        self.z = np.asarray(z, dtype=float)
        self.g = np.asarray(g, dtype=float)
        if self.z.ndim != 1 or self.z.shape != self.g.shape or self.z.size < 2:
            raise BadFamilyParams("gamma_table needs matching z/g arrays with >= 2 points")
        if np.any(np.diff(self.z) <= 0):
            raise BadFamilyParams("gamma_table z must be strictly increasing")
        if np.any(self.g < 0):
            raise BadFamilyParams("gamma must be nonnegative")
        self.left_slope = (self.g[1] - self.g[0]) / (self.z[1] - self.z[0])
        self.right_slope = (self.g[-1] - self.g[-2]) / (self.z[-1] - self.z[-2])

    def __call__(self, z):
        z = np.asarray(z, dtype=float)
        out = np.interp(z, self.z, self.g)
        out = np.where(z < self.z[0], self.g[0] + self.left_slope * (z - self.z[0]), out)
        out = np.where(z > self.z[-1], self.g[-1] + self.right_slope * (z - self.z[-1]), out)
        return np.maximum(out, 0.0)

    def lipschitz(self):
        return float(np.abs(np.diff(self.g) / np.diff(self.z)).max())


def _delay(params):
    r_lo, r_hi = _interval(params, "r", (0.0, 0.02))
    l_lo, l_hi = _interval(params, "lambda", (0.0, 1.0))
    s_lo, s_hi = _interval(params, "sigma2", (0.04, 0.09))
    if not (0.0 < s_lo <= s_hi):
        raise BadFamilyParams(f"delay family needs 0 < sigma2_lower <= sigma2_upper, got [{s_lo}, {s_hi}]")
    tau = float(params.get("tau", 0.5))
    if tau < 0:
        raise BadFamilyParams("tau must be nonnegative")
    table = params.get("gamma_table", {"z": [-1.0, 0.0, 1.0], "g": [0.0, 0.0, 0.1]})
    gamma = table if isinstance(table, GammaTable) else GammaTable(table["z"], table["g"])
    box = ParameterBox((r_lo, l_lo, s_lo), (r_hi, l_hi, s_hi))

    from .dsl import tap_value

    def drift(f, t, prefix):
        y = prefix[:, -1, 0]
        lagged = tap_value(prefix, t, tau, 0)
        return ((f[:, 0] + f[:, 2] * f[:, 1]) * y - gamma(y - lagged))[:, None]

    def diffusion(f, t, prefix):
        return f[:, 2].reshape(-1, 1, 1)

    # |b| <= g(0) + (|f1 + f3 f2| + 2 Lip(gamma)) sup|y|
    coef = max(abs(r + s * lam) for r in (r_lo, r_hi) for s in (s_lo, s_hi) for lam in (l_lo, l_hi))
    growth = 2.0 * (coef + 2.0 * gamma.lipschitz()) ** 2 + 2.0 * float(gamma(0.0)) ** 2 + s_hi
    field_ = CoefficientField(1, drift, diffusion, Structure.PATH_DEPENDENT, growth, None)
    return box, field_, gamma, tau


def _remark_2_10(params):
    box = ParameterBox((1.0, 1.0), (2.0, 2.0))

    def drift(f, t, prefix):
        return (f[:, 0] * np.sqrt(np.abs(prefix[:, -1, 0])))[:, None]

    def diffusion(f, t, prefix):
        return (f[:, 1] * np.abs(prefix[:, -1, 0]) ** 1.5).reshape(-1, 1, 1)

    return box, CoefficientField(1, drift, diffusion, Structure.MARKOVIAN, 6.0, None)


FAMILIES = ("gbm_interval", "gbm_scaled", "nonlinear_diffusion", "delay", "remark_2_10", "custom")


def builtin(name, T=1.0, x0=1.0, **params):
    """Construct a builtin uncertainty set.

    Parameters
    ----------
    name : str
        One of ``gbm_interval``, ``gbm_scaled``, ``delay``, ``remark_2_10``,
        ``nonlinear_diffusion`` (expressions in ``drift``/``diffusion`` that
        may only read ``X(t)``) or ``custom``.
    T, x0 :
        Horizon and initial state.
    **params :
        Family parameters, e.g. ``b=(0.05, 0.1), a=(0.04, 0.09)``.
    """
    from .config import spec_from_config, family_config

    if name not in FAMILIES:
        raise BadFamilyParams(f"unknown family {name!r}; expected one of {FAMILIES}")
    try:
        return spec_from_config(family_config(name, T, x0, params))
    except ConfigError as exc:
        if isinstance(exc.__cause__, BadFamilyParams):
            raise exc.__cause__ from None
        raise


def build_family(name, T, x0, params):
    """Low-level constructor used by the config loader (no DSL families)."""
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if name == "gbm_interval":
        box, cf = _gbm_interval(params)
    elif name == "gbm_scaled":
        box, cf = _gbm_scaled(params)
    elif name == "delay":
        box, cf, _, _ = _delay(params)
    elif name == "remark_2_10":
        box, cf = _remark_2_10(params)
    else:
        raise BadFamilyParams(f"family {name!r} is not a closed-form builtin")
    return UncertaintySpec(box, cf, float(T), tuple(x0), family=name)
