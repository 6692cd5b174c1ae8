"""Path generation under selectors, Girsanov densities and their validation.

Paths are generated in fixed-size chunks. Chunk ``c`` draws its normals from
the counter-based stream ``(seed, c)``, so an ensemble is a pure function of
``(spec, selector, n_paths, n_steps, seed)``; the thread count only changes
which worker fills which chunk. Reductions run over chunks in index order.
"""

from __future__ import annotations

import enum
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ._rng import stream
from .conditions import Certificates, EllipticityCertificate, MprResult, _quad, mpr_batch
from .errors import ConfigError, MprInfeasible, NumericOverflow, PreconditionNotCertified
from .model import evaluate_batch, psd_sqrt

logger = logging.getLogger(__name__)

CHUNK = 16384
OVERFLOW = 1e12
_SIM_TAG = 7


class SelectorKind(enum.Enum):
    CONSTANT = "ConstantParam"
    FEEDBACK = "StateFeedback"
    ADVERSARIAL = "Adversarial"


class Direction(enum.Enum):
    P_TO_Q = "PtoQ"
    Q_TO_P = "QtoP"

    @classmethod
    def coerce(cls, value):
        if isinstance(value, cls):
            return value
        for member in cls:
            if value in (member.value, member.name):
                return member
        raise ValueError(f"unknown direction {value!r}")


# ---------------------------------------------------------------------------
# selectors
# ---------------------------------------------------------------------------


def _corner_scores(spec, t, prefix, score):
    """Evaluate ``score(b, a)`` at every box corner for every path; returns (corners, scores)."""
    corners = spec.param_box.corners()
    n, c = prefix.shape[0], corners.shape[0]
    f = np.tile(corners, (n, 1))
    b, a = evaluate_batch(spec, f, t, np.repeat(prefix, c, axis=0))
    return corners, score(b, a).reshape(n, c)


def _mpr_size(b, a):
    theta, _ = mpr_batch(b, a)
    return _quad(theta, a)


def _fb_max_mpr(spec, t, prefix):
    corners, s = _corner_scores(spec, t, prefix, _mpr_size)
    return corners[np.argmax(s, axis=1)]


def _fb_min_mpr(spec, t, prefix):
    corners, s = _corner_scores(spec, t, prefix, _mpr_size)
    return corners[np.argmin(s, axis=1)]


def _fb_max_drift(spec, t, prefix):
    corners, s = _corner_scores(spec, t, prefix, lambda b, a: b[:, 0])
    return corners[np.argmax(s, axis=1)]


def _fb_min_drift(spec, t, prefix):
    corners, s = _corner_scores(spec, t, prefix, lambda b, a: b[:, 0])
    return corners[np.argmin(s, axis=1)]


def _fb_bang_bang(spec, t, prefix):
    # upper corner while the first component is at or above its start, lower otherwise
    up = prefix[:, -1, 0] >= spec.x0[0]
    box = spec.param_box
    return np.where(up[:, None], box.hi, box.lo)


FEEDBACKS = {
    "bang_bang": _fb_bang_bang,
    "max_mpr": _fb_max_mpr,
    "min_mpr": _fb_min_mpr,
    "max_drift": _fb_max_drift,
    "min_drift": _fb_min_drift,
}


@dataclass
class Selector:
    """A policy ``(t, prefix) -> f`` evaluated on a batch of path prefixes.

    ``policy`` returns an ``(n, dims)`` array. Outputs are clamped into the
    parameter box by :meth:`choose`, which logs how many rows were moved.
    """

    kind: SelectorKind
    policy: object
    name: str = ""
    fixed: np.ndarray | None = None

    @classmethod
    def constant(cls, f):
        f = np.atleast_1d(np.asarray(f, dtype=float))
        return cls(SelectorKind.CONSTANT, lambda t, prefix: np.broadcast_to(f, (prefix.shape[0], f.size)),
                   "constant:f=" + ",".join(repr(float(v)) for v in f), fixed=f)

    @classmethod
    def feedback(cls, spec, rule):
        """``rule`` is a name from :data:`FEEDBACKS` or a callable ``(spec, t, prefix) -> f``."""
        if isinstance(rule, str):
            if rule not in FEEDBACKS:
                raise ConfigError(f"unknown feedback {rule!r}; choose from {sorted(FEEDBACKS)}", "selector")
            fn, name = FEEDBACKS[rule], rule
        else:
            fn, name = rule, getattr(rule, "__name__", "callable")
        return cls(SelectorKind.FEEDBACK, lambda t, prefix: fn(spec, t, prefix), "feedback:" + name)

    @classmethod
    def adversarial(cls, times, states, params, name="table"):
        """Tabulated policy: ``params[i, j]`` applies on ``[times[i], times[i+1])`` nearest ``states[j]``.

        Lookups use the first state component.
        """
        times = np.asarray(times, dtype=float)
        states = np.asarray(states, dtype=float)
        params = np.asarray(params, dtype=float)
        if params.ndim == 2:
            params = params[..., None]
        if params.shape[:2] != (times.size, states.size):
            raise ConfigError(
                f"adversarial table has shape {params.shape[:2]}, expected {(times.size, states.size)}", "selector"
            )
        if np.any(np.diff(times) <= 0) or np.any(np.diff(states) <= 0):
            raise ConfigError("adversarial table axes must be strictly increasing", "selector")

        def policy(t, prefix):
            i = int(np.clip(np.searchsorted(times, t + 1e-12 * max(1.0, abs(t)), side="right") - 1, 0, times.size - 1))
            x = prefix[:, -1, 0]
            j = np.clip(np.searchsorted(states, x), 1, states.size - 1)
            j = np.where(np.abs(x - states[j - 1]) <= np.abs(states[j] - x), j - 1, j)
            if states.size == 1:
                j = np.zeros_like(j)
            return params[i, j]

        return cls(SelectorKind.ADVERSARIAL, policy, "adversarial:" + name)

    @classmethod
    def from_file(cls, path):
        """Load a tabulated policy from JSON ``{"t": [...], "x": [...], "f": [[[...]]]}`` or CSV ``t,x,f1..fk``."""
        try:
            if str(path).endswith(".csv"):
                raw = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
                times, states = np.unique(raw[:, 0]), np.unique(raw[:, 1])
                params = np.full((times.size, states.size, raw.shape[1] - 2), np.nan)
                params[np.searchsorted(times, raw[:, 0]), np.searchsorted(states, raw[:, 1])] = raw[:, 2:]
                if np.isnan(params).any():
                    raise ConfigError(f"{path}: CSV table is not a full (t, x) grid", "selector")
            else:
                with open(path) as fh:
                    data = json.load(fh)
                times, states, params = data["t"], data["x"], data["f"]
        except (OSError, KeyError, ValueError) as exc:
            raise ConfigError(f"cannot read adversarial table {path}: {exc}", "selector") from None
        return cls.adversarial(times, states, params, name=str(path))

    def choose(self, box, t, prefix):
        """Policy output clamped into ``box``; returns ``(f, n_clamped)``."""
        n = prefix.shape[0]
        if self.fixed is not None:
            f = box.clamp(self.fixed)
            moved = n if np.any(f != self.fixed) else 0
            if moved:
                logger.info("selector %s: clamped to %s", self.name, f.tolist())
            return np.broadcast_to(f, (n, box.dims)), moved
        raw = np.asarray(self.policy(t, prefix), dtype=float)
        raw = np.broadcast_to(raw, (prefix.shape[0], box.dims))
        f = box.clamp(raw)
        moved = int(np.count_nonzero(np.any(f != raw, axis=-1)))
        if moved:
            logger.info("selector %s: clamped %d of %d parameters at t=%g", self.name, moved, f.shape[0], t)
        return f, moved


def parse_selector(text, spec):
    """Parse ``constant:f=0.1,0.04``, ``feedback:max_mpr`` or ``adversarial:path``."""
    kind, _, arg = text.partition(":")
    if kind == "constant":
        arg = arg[2:] if arg.startswith("f=") else arg
        if not arg:
            return Selector.constant(spec.param_box.hi)
        try:
            return Selector.constant([float(v) for v in arg.split(",")])
        except ValueError:
            raise ConfigError(f"bad constant selector {text!r}", "selector") from None
    if kind == "feedback":
        return Selector.feedback(spec, arg)
    if kind == "adversarial":
        return Selector.from_file(arg)
    raise ConfigError(f"unknown selector kind {kind!r}", "selector")


# ---------------------------------------------------------------------------
# ensembles
# ---------------------------------------------------------------------------


@dataclass
class PathEnsemble:
    n_paths: int
    n_steps: int
    dt: float
    states: np.ndarray
    chosen_params: np.ndarray
    seed: int
    n_clamped: int = 0


@dataclass
class DensityProcess:
    log_z: np.ndarray
    direction: Direction

    @property
    def z_T(self):
        return np.exp(self.log_z[:, -1])


def _chunks(n_paths, chunk):
    return [(c, c * chunk, min(chunk, n_paths - c * chunk)) for c in range((n_paths + chunk - 1) // chunk)]


def _run_chunk(spec, selector, seed, c, offset, m, n_steps, direction=None, tol=1e-8):
    """Simulate one chunk; with ``direction`` set, also accumulate ``log Z_T``."""
    d, dt = spec.d, spec.horizon_T / n_steps
    rng = stream(seed, _SIM_TAG, c)
    # time-major buffer so each step writes one contiguous slab
    tm = np.empty((n_steps + 1, m, d))
    tm[0] = spec.x0
    params = np.empty((n_steps, m, spec.dims))
    log_z = np.zeros(m) if direction is not None else None
    clamped = 0
    sq = math.sqrt(dt)
    for k in range(n_steps):
        t = k * dt
        prefix = tm[: k + 1].transpose(1, 0, 2)
        f, moved = selector.choose(spec.param_box, t, prefix)
        clamped += moved
        params[k] = f
        b, a = evaluate_batch(spec, f, t, prefix)
        xi = rng.standard_normal((m, d))
        if d == 1:
            dw = np.sqrt(np.maximum(a[:, 0], 0.0)) * xi
        else:
            dw = np.einsum("nij,nj->ni", psd_sqrt(a), xi)
        x = tm[k] + b * dt + sq * dw
        bad = ~(np.abs(x) <= OVERFLOW).all(axis=-1)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise NumericOverflow(f"path {offset + i} left |x| <= 1e12 at step {k + 1}")
        tm[k + 1] = x
        if log_z is not None:
            log_z += _log_increment(b, a, x - tm[k], dt, direction, offset, k, params[k], tol)
    return tm.transpose(1, 0, 2), params.transpose(1, 0, 2), clamped, log_z


def _log_increment(b, a, dx, dt, direction, offset, k, f, tol):
    theta, resid = mpr_batch(b, a)
    bad = resid > tol * (1.0 + np.linalg.norm(b, axis=-1))
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise MprInfeasible(
            f"no theta with a theta = b on path {offset + i}, step {k} (residual {resid[i]:.3e})",
            witness={"path": offset + i, "step": k, "param": f[i].tolist()},
        )
    if direction is Direction.P_TO_Q:
        inc = -np.einsum("ni,ni->n", theta, dx - b * dt)
    else:
        inc = np.einsum("ni,ni->n", theta, dx)
    return inc - 0.5 * _quad(theta, a) * dt


def _map_chunks(fn, jobs, threads):
    if threads <= 1 or len(jobs) <= 1:
        return [fn(*job) for job in jobs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda job: fn(*job), jobs))


def euler_paths(spec, selector, n_paths, n_steps, seed=42, threads=1, chunk=CHUNK):
    """Euler-Maruyama ensemble under ``selector``; see the module docstring for seeding."""
    if n_paths < 1 or n_steps < 1:
        raise ValueError("n_paths and n_steps must be at least 1")
    jobs = [(spec, selector, seed, c, off, m, n_steps) for c, off, m in _chunks(n_paths, chunk)]
    parts = _map_chunks(_run_chunk, jobs, threads)
    return PathEnsemble(
        n_paths=n_paths,
        n_steps=n_steps,
        dt=spec.horizon_T / n_steps,
        states=np.concatenate([p[0] for p in parts]),
        chosen_params=np.concatenate([p[1] for p in parts]),
        seed=seed,
        n_clamped=sum(p[2] for p in parts),
    )


def _log_density(spec, states, params, dt, direction, offset=0, tol=1e-8):
    n, n_steps = params.shape[0], params.shape[1]
    log_z = np.zeros((n, n_steps + 1))
    for k in range(n_steps):
        t = k * dt
        b, a = evaluate_batch(spec, params[:, k], t, states[:, : k + 1])
        dx = states[:, k + 1] - states[:, k]
        log_z[:, k + 1] = log_z[:, k] + _log_increment(b, a, dx, dt, direction, offset, k, params[:, k], tol)
    return log_z


def stochastic_exponential(spec, ensemble, selector=None, direction="PtoQ"):
    """Density process along the ensemble.

    Parameters default to ``ensemble.chosen_params``; passing ``selector``
    re-evaluates the policy on each prefix instead.
    """
    direction = Direction.coerce(direction)
    params = ensemble.chosen_params
    if selector is not None:
        params = np.stack(
            [selector.choose(spec.param_box, k * ensemble.dt, ensemble.states[:, : k + 1])[0]
             for k in range(ensemble.n_steps)],
            axis=1,
        )
    return DensityProcess(_log_density(spec, ensemble.states, params, ensemble.dt, direction), direction)


# ---------------------------------------------------------------------------
# checks
# ---------------------------------------------------------------------------


@dataclass
class GirsanovReport:
    n_paths: int
    n_steps: int
    mean_z: float
    se_z: float
    martingale_ok: bool
    weighted_mean: np.ndarray
    weighted_se: np.ndarray
    unweighted_mean: np.ndarray
    max_z_score: float
    passes: bool


def girsanov_drift_check(spec, ensemble, density, n_se=4.0):
    """Z_T-weighted per-step increment means against their self-normalized SE."""
    if density.direction is not Direction.P_TO_Q:
        raise ValueError("girsanov_drift_check needs a PtoQ density")
    z = density.z_T
    n = z.size
    dx = np.diff(ensemble.states, axis=1)  # (n, steps, d)
    sw = z.sum()
    wmean = np.einsum("n,nkd->kd", z, dx) / sw
    wse = np.sqrt(np.einsum("n,nkd->kd", z**2, (dx - wmean) ** 2)) / sw
    mean_z = float(z.mean())
    se_z = float(z.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        score = np.where(wse > 0, np.abs(wmean) / wse, np.where(wmean == 0, 0.0, np.inf))
    max_score = float(score.max())
    return GirsanovReport(
        n_paths=n,
        n_steps=ensemble.n_steps,
        mean_z=mean_z,
        se_z=se_z,
        martingale_ok=bool(abs(mean_z - 1.0) <= n_se * se_z or mean_z == 1.0),
        weighted_mean=wmean,
        weighted_se=wse,
        unweighted_mean=dx.mean(axis=0),
        max_z_score=max_score,
        passes=bool(max_score <= n_se),
    )


@dataclass
class MomentCell:
    p: float
    n_steps: int
    moment: float
    se: float


@dataclass
class MomentReport:
    cells: list
    growth_factors: dict
    ceiling: dict = field(default_factory=dict)
    within_ceiling: bool | None = None
    max_factor: float = 3.0
    passes: bool = False


def _certified_bound(certificates):
    """Return the global MPR bound (or None) after checking the precondition."""
    if isinstance(certificates, Certificates):
        mpr, ell = certificates.mpr, certificates.ellipticity
    elif isinstance(certificates, MprResult):
        mpr, ell = certificates, None
    elif isinstance(certificates, EllipticityCertificate):
        mpr, ell = None, certificates
    else:
        mpr = ell = None
    bound = mpr.global_bound if mpr is not None else None
    if bound is None and not (ell is not None and ell.passes):
        raise PreconditionNotCertified(
            "moment control needs a bounded-MPR or an ellipticity certificate"
        )
    return bound


def moment_stability_check(
    spec,
    p_list,
    refinement_list,
    seed=42,
    certificates=None,
    selector=None,
    n_paths=100_000,
    threads=1,
    chunk=CHUNK,
    max_factor=3.0,
):
    """Empirical ``E[Z_T^p]`` per refinement, streamed chunk by chunk.

    Passes iff for every ``p`` the moments at successive refinements differ
    by a factor below ``max_factor``. When the certificate carries a global
    MPR bound ``K``, the Novikov-type ceiling ``exp(p(p-1)/2 K T)`` is
    reported alongside.
    """
    bound = _certified_bound(certificates)
    if selector is None:
        selector = Selector.constant(spec.param_box.hi)
    p_arr = np.asarray(p_list, dtype=float)
    cells = []
    for n_steps in refinement_list:
        def work(c, off, m, n_steps=n_steps):
            lz = _run_chunk(spec, selector, seed, c, off, m, n_steps, Direction.P_TO_Q)[3]
            zp = np.exp(np.outer(p_arr, lz))
            return zp.sum(axis=1), (zp * zp).sum(axis=1)

        parts = _map_chunks(work, _chunks(n_paths, chunk), threads)
        s1 = np.zeros_like(p_arr)
        s2 = np.zeros_like(p_arr)
        for a1, a2 in parts:
            s1 += a1
            s2 += a2
        mean = s1 / n_paths
        var = np.maximum(s2 / n_paths - mean**2, 0.0)
        for i, p in enumerate(p_arr):
            cells.append(MomentCell(float(p), int(n_steps), float(mean[i]), float(math.sqrt(var[i] / n_paths))))
    factors = {}
    for p in p_arr:
        ms = [c.moment for c in cells if c.p == p]
        fs = [max(a, b) / min(a, b) if min(a, b) > 0 else math.inf for a, b in zip(ms, ms[1:])]
        factors[repr(float(p))] = max(fs) if fs else 1.0
    ceiling, within = {}, None
    if bound is not None:
        within = True
        for p in p_arr:
            cap = math.exp(0.5 * p * (p - 1.0) * bound * spec.horizon_T)
            ceiling[repr(float(p))] = cap
            for c in cells:
                if c.p == p and c.moment > cap + 4.0 * c.se and p >= 1.0:
                    within = False
    return MomentReport(
        cells=cells,
        growth_factors=factors,
        ceiling=ceiling,
        within_ceiling=within,
        max_factor=max_factor,
        passes=all(f < max_factor for f in factors.values()),
    )
