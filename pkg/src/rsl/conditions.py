"""Sampling certificates for the structural conditions on an uncertainty set.

None of these certificates is a proof: each one evaluates the coefficient
fields on a seeded sample of ``(f, t, prefix)`` points (plus deterministic
anchors such as the corners of the parameter box) and reports the worst
point it found.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ._rng import stream
from .errors import MprInfeasible
from .model import evaluate_batch

logger = logging.getLogger(__name__)

PINV_RTOL = 1e-12
N_TIME_SLICES = 8
PREFIX_STEPS = (0, 4, 16)

# stream tags
_GROWTH, _MPR, _ELLIPTIC = 1, 2, 3


@dataclass
class GrowthCertificate:
    estimated_C: float
    sample_budget: int
    worst_point: dict
    violated: bool
    declared_C: float | None = None


@dataclass
class ConvexityCertificate:
    passed: bool
    max_gap: float
    witness: dict | None = None


@dataclass
class MprResult:
    theta: object
    residual_sup: float
    local_bounds: dict
    global_bound: float | None
    feasible: bool
    divergent: bool = False
    probe_levels: list = field(default_factory=list)
    probe_bounds: list = field(default_factory=list)
    probe_ratios: list = field(default_factory=list)
    ratio_divergent: bool = False
    growth_exponent: float = 0.0
    rate_divergent: bool = False
    witness: dict | None = None

    @property
    def locally_bounded(self):
        return self.feasible and not self.divergent


@dataclass
class EllipticityCertificate:
    lambda_min: float
    lambda_max: float
    K_estimate: float
    passes: bool
    scale_minima: list = field(default_factory=list)
    scale_maxima: list = field(default_factory=list)


@dataclass
class Certificates:
    """Bundle of certificates computed for one spec (any may be missing)."""

    growth: GrowthCertificate | None = None
    convexity: ConvexityCertificate | None = None
    mpr: MprResult | None = None
    ellipticity: EllipticityCertificate | None = None


@dataclass
class TheoremApplicability:
    conjugacy_bounded: bool
    main_pos_power_exp: bool
    main_neg_power_log: bool
    conditions: dict


# ---------------------------------------------------------------------------
# sampling helpers
# ---------------------------------------------------------------------------


def _walk_prefixes(rng, x0, n, k, radii):
    """Driverless random walks from ``x0`` whose sup-distance from ``x0`` equals ``radii``."""
    d = x0.size
    if k == 0:
        return np.broadcast_to(x0, (n, 1, d)).copy()
    steps = rng.standard_normal((n, k, d))
    walk = np.concatenate([np.zeros((n, 1, d)), np.cumsum(steps, axis=1)], axis=1)
    size = np.linalg.norm(walk, axis=2).max(axis=1)
    walk *= (radii / np.maximum(size, 1e-300))[:, None, None]
    return x0 + walk


def _sample_f(rng, box, n):
    return box.lo + (box.hi - box.lo) * rng.random((n, box.dims))


def _sample_batches(spec, seed, tag, budget, max_radius, scale_index=0):
    """Yield ``(f, t, prefix)`` batches: box corners on the constant path, then random points."""
    x0 = spec.x0
    T = spec.horizon_T
    corners = spec.param_box.corners()
    yield corners, 0.0, np.broadcast_to(x0, (len(corners), 1, spec.d)).copy()
    per = max(budget // (N_TIME_SLICES * len(PREFIX_STEPS)), 1)
    for j in range(N_TIME_SLICES):
        for m, k in enumerate(PREFIX_STEPS):
            rng = stream(seed, tag, scale_index, j, m)
            t = T * (j + 1) / N_TIME_SLICES if k else T * rng.random()
            f = _sample_f(rng, spec.param_box, per)
            f[: min(per, len(corners))] = corners[: min(per, len(corners))]
            radii = max_radius * rng.random(per)
            yield f, t, _walk_prefixes(rng, x0, per, k, radii)


def mpr_batch(b, a):
    """Minimum-norm solve of ``a theta = b`` for a batch; returns ``(theta, residual)``."""
    if a.shape[-1] == 1:
        a1, b1 = a[..., 0, 0], b[..., 0]
        ok = a1 > 0.0
        theta = np.where(ok, b1 / np.where(ok, a1, 1.0), 0.0)[..., None]
        return theta, np.abs(a1 * theta[..., 0] - b1)
    lam, vec = np.linalg.eigh(a)
    lam_max = np.max(np.abs(lam), axis=-1, keepdims=True)
    keep = lam > PINV_RTOL * lam_max
    inv = np.where(keep, 1.0 / np.where(keep, lam, 1.0), 0.0)
    coords = np.einsum("...ji,...j->...i", vec, b)
    theta = np.einsum("...ij,...j->...i", vec, inv * coords)
    resid = np.linalg.norm(np.einsum("...ij,...j->...i", a, theta) - b, axis=-1)
    return theta, resid


def _quad(theta, a):
    if a.shape[-1] == 1:
        return theta[..., 0] * a[..., 0, 0] * theta[..., 0]
    return np.einsum("...i,...ij,...j->...", theta, a, theta)


# ---------------------------------------------------------------------------
# certifiers
# ---------------------------------------------------------------------------


def certify_growth(spec, budget=1000, seed=42):
    """Estimate the linear-growth constant ``(|b|^2 + |a|) / (1 + sup|w|^2)``."""
    if budget < 100:
        raise ValueError("budget must be at least 100")
    max_radius = 10.0 * (1.0 + np.linalg.norm(spec.x0))
    best, worst = 0.0, {}
    for f, t, prefix in _sample_batches(spec, seed, _GROWTH, budget, max_radius):
        b, a = evaluate_batch(spec, f, t, prefix)
        num = np.sum(b**2, axis=-1) + np.linalg.norm(a, ord=2, axis=(-2, -1))
        den = 1.0 + np.max(np.sum(prefix**2, axis=-1), axis=-1)
        ratio = num / den
        i = int(np.argmax(ratio))
        if ratio[i] > best:
            best = float(ratio[i])
            worst = {"f": f[i].tolist(), "t": float(t), "sup_norm": float(np.sqrt(den[i] - 1.0))}
    declared = spec.coeffs.declared_growth_const
    violated = declared is not None and best > declared * (1.0 + 1e-12)
    return GrowthCertificate(best, int(budget), worst, bool(violated), declared)


def certify_convexity(spec, t=0.0, prefix=None, grid_per_dim=5, midpoint_tol=1e-8):
    """Midpoint test of convexity of the correspondence at ``(t, prefix)``.

    For every pair of parameters on the base grid, the midpoint of their
    ``(b, a)`` values must lie within ``midpoint_tol`` of the image of some
    parameter.  Candidates come from the doubled grid (exact for affine
    parameterizations); pairs still above tolerance are refined by a bounded
    least-squares search started at the nearest candidate.
    """
    if grid_per_dim < 3:
        raise ValueError("grid_per_dim must be at least 3")
    from .model import _as_prefix

    box = spec.param_box
    p = _as_prefix(spec, prefix)

    def image(grid):
        pb = np.broadcast_to(p, (grid.shape[0],) + p.shape[1:])
        b, a = evaluate_batch(spec, grid, float(t), pb)
        return np.concatenate([b, a.reshape(len(grid), -1)], axis=1)

    base = box.grid(grid_per_dim)
    fine = box.grid(2 * grid_per_dim - 1)
    vb, vf = image(base), image(fine)
    i, j = np.triu_indices(len(base), k=1)
    mids, gaps, nearest = [], [], []
    chunk = max(1, 2_000_000 // max(len(fine), 1))
    for s in range(0, len(i), chunk):
        ii, jj = i[s : s + chunk], j[s : s + chunk]
        mid = 0.5 * (vb[ii] + vb[jj])
        dist = np.sqrt(((mid[:, None, :] - vf[None, :, :]) ** 2).sum(-1))
        k = dist.argmin(axis=1)
        mids.append(mid)
        gaps.append(dist[np.arange(len(k)), k])
        nearest.append(k)
    mids, gaps, nearest = np.concatenate(mids), np.concatenate(gaps), np.concatenate(nearest)

    todo = np.flatnonzero(gaps > midpoint_tol)
    if todo.size:
        gaps[todo] = _local_distance(image, box, fine[nearest[todo]], mids[todo], gaps[todo])

    q = int(np.argmax(gaps)) if len(gaps) else 0
    worst_gap = float(gaps[q]) if len(gaps) else 0.0
    passed = worst_gap <= midpoint_tol
    witness = None
    if not passed:
        witness = {
            "f_pair": [base[i[q]].tolist(), base[j[q]].tolist()],
            "midpoint": mids[q].tolist(),
            "distance": worst_gap,
        }
    return ConvexityCertificate(passed, worst_gap, witness)


def _local_distance(image, box, start, target, start_gap, iters=60):
    """Batched projected Levenberg-Marquardt: distance from ``target`` rows to the image set."""
    z = start.copy()
    span = np.where(box.hi > box.lo, box.hi - box.lo, 1.0)
    r = image(z) - target
    best = np.sqrt((r**2).sum(-1))
    mu = np.full(len(z), 1e-3)
    eye = np.eye(box.dims)
    for _ in range(iters):
        h = 1e-7 * span
        cols = []
        for k in range(box.dims):
            zk = z.copy()
            step = np.where(zk[:, k] + h[k] <= box.hi[k], h[k], -h[k])
            zk[:, k] += step
            cols.append((image(zk) - target - r) / step[:, None])
        J = np.stack(cols, axis=-1)
        g = np.einsum("nmi,nm->ni", J, r)
        # freeze coordinates pinned at a bound with the descent direction pointing outward
        pinned = ((z <= box.lo) & (g > 0)) | ((z >= box.hi) & (g < 0))
        J = np.where(pinned[:, None, :], 0.0, J)
        JtJ = np.einsum("nmi,nmj->nij", J, J)
        g = np.einsum("nmi,nm->ni", J, r)
        scale = np.einsum("nii->n", JtJ) / box.dims + 1e-20
        delta = -np.einsum("nij,nj->ni", np.linalg.pinv(JtJ + (mu * scale)[:, None, None] * eye), g)
        z_new = np.clip(z + delta, box.lo, box.hi)
        r_new = image(z_new) - target
        dist_new = np.sqrt((r_new**2).sum(-1))
        ok = dist_new < best
        z[ok], r[ok], best[ok] = z_new[ok], r_new[ok], dist_new[ok]
        mu = np.where(ok, np.maximum(mu * 0.3, 1e-12), mu * 10.0)
        if np.all((best < 1e-14) | (mu > 1e12)):
            break
    return np.minimum(best, start_gap)


def solve_mpr(spec, f, t, prefix=None, mpr_residual_tol=1e-8):
    """Market price of risk at one point: minimum-norm ``theta`` with ``a theta = b``."""
    from .model import eval_coefficients

    s = eval_coefficients(spec, f, t, prefix)
    theta, resid = mpr_batch(s.drift_val[None, :], s.diff_val[None, :, :])
    if resid[0] > mpr_residual_tol:
        raise MprInfeasible(
            f"b is not in the range of a (residual {resid[0]:.3e})",
            witness={"f": np.atleast_1d(f).tolist(), "t": float(t)},
        )
    return theta[0], float(resid[0])


def _probe(spec, center, levels, grid_per_dim=5):
    """``max <theta, a theta>`` on shells of radius ``N`` around ``center``."""
    d = spec.d
    dirs = np.concatenate([np.eye(d), -np.eye(d)])
    grid = np.unique(np.concatenate([spec.param_box.grid(grid_per_dim), spec.param_box.corners()]), axis=0)
    t = 0.5 * spec.horizon_T
    k = 8
    out = []
    for N in levels:
        pts = center + N * dirs
        frac = np.linspace(0.0, 1.0, k + 1)[None, :, None]
        paths = spec.x0 + frac * (pts[:, None, :] - spec.x0)
        P = np.repeat(paths, len(grid), axis=0)
        F = np.tile(grid, (len(pts), 1))
        b, a = evaluate_batch(spec, F, t, P)
        theta, _ = mpr_batch(b, a)
        out.append(float(_quad(theta, a).max()))
    return out


def certify_mpr(
    spec,
    level_list=(1.0, 2.0, 4.0, 8.0),
    budget=2000,
    seed=42,
    mpr_residual_tol=1e-8,
    probe_levels=(1.0, 0.5, 0.25),
    strict=False,
):
    """Certify existence and local boundedness of a robust market price of risk.

    ``local_bounds[N]`` is the largest sampled ``<theta, a theta>`` among
    prefixes with sup-norm below ``N``.  A separate probe evaluates the same
    quantity on shells of shrinking radius ``probe_levels`` around the most
    degenerate sampled state; blow-up there flags divergence.  With
    ``strict=True`` an infeasible solve raises :class:`MprInfeasible`.
    """
    levels = [float(v) for v in level_list]
    if not levels or any(b <= a for a, b in zip(levels, levels[1:])):
        raise ValueError("level_list must be nonempty and increasing")
    base_radius = max(levels[-1], 10.0 * (1.0 + np.linalg.norm(spec.x0)))
    scale_max, sup_norm_all, quad_all = [], [], []
    resid_sup, witness = 0.0, None
    center, center_lam = spec.x0.copy(), np.inf
    for s in range(3):
        radius = base_radius * 4.0**s
        cur = 0.0
        for f, t, prefix in _sample_batches(spec, seed, _MPR, budget // 3, radius, scale_index=s):
            b, a = evaluate_batch(spec, f, t, prefix)
            theta, resid = mpr_batch(b, a)
            q = _quad(theta, a)
            i = int(np.argmax(resid))
            if resid[i] > resid_sup:
                resid_sup = float(resid[i])
                if resid_sup > mpr_residual_tol:
                    witness = {"f": f[i].tolist(), "t": float(t), "state": prefix[i, -1].tolist()}
            sup_norm_all.append(np.linalg.norm(prefix, axis=-1).max(axis=-1))
            quad_all.append(q)
            cur = max(cur, float(q.max()))
            lam = np.linalg.eigvalsh(a)[:, 0]
            m = int(np.argmin(lam))
            if lam[m] < center_lam:
                center_lam, center = float(lam[m]), prefix[m, -1].copy()
        scale_max.append(cur)
    feasible = resid_sup <= mpr_residual_tol
    if not feasible and strict:
        raise MprInfeasible(f"no market price of risk: residual {resid_sup:.3e}", witness=witness)

    sup_norm_all = np.concatenate(sup_norm_all)
    quad_all = np.concatenate(quad_all)
    local = {}
    for N in levels:
        inside = sup_norm_all < N
        local[N] = float(quad_all[inside].max()) if np.any(inside) else 0.0
    running = 0.0
    for N in levels:  # nondecreasing by construction; guard against roundoff
        running = max(running, local[N])
        local[N] = running

    probe_levels = [float(v) for v in probe_levels]
    probe = _probe(spec, center, probe_levels) if probe_levels else []
    ratios = []
    for lo, hi in zip(probe, probe[1:]):
        ratios.append(np.inf if lo == 0.0 and hi > 0.0 else (hi / lo if lo > 0.0 else 1.0))
    ratio_div = len(ratios) >= 2 and all(r > 2.0 for r in ratios[-2:])
    exponent = 0.0
    if len(probe) >= 2 and min(probe) > 0.0:
        slope = np.polyfit(np.log(probe_levels), np.log(probe), 1)[0]
        exponent = float(-slope)
    rate_div = len(ratios) >= 2 and all(r > 1.0 + 1e-9 for r in ratios) and exponent >= 0.25
    divergent = bool(ratio_div or rate_div)

    stable = scale_max[-1] <= 1.05 * scale_max[-2] + 1e-300
    global_bound = float(max(scale_max)) if (feasible and stable and not divergent) else None

    def theta_fn(f, t, prefix=None):
        return solve_mpr(spec, f, t, prefix, mpr_residual_tol)[0]

    return MprResult(
        theta=theta_fn,
        residual_sup=resid_sup,
        local_bounds=local,
        global_bound=global_bound,
        feasible=bool(feasible),
        divergent=divergent,
        probe_levels=probe_levels,
        probe_bounds=probe,
        probe_ratios=[float(r) for r in ratios],
        ratio_divergent=bool(ratio_div),
        growth_exponent=exponent,
        rate_divergent=bool(rate_div),
        witness=witness,
    )


def certify_ellipticity(spec, budget=1000, seed=42):
    """Extreme eigenvalues of ``a`` over samples at three escalating path scales."""
    if budget < 100:
        raise ValueError("budget must be at least 100")
    base = 10.0 * (1.0 + np.linalg.norm(spec.x0))
    mins, maxs = [], []
    for s in range(3):
        lo, hi = np.inf, -np.inf
        for f, t, prefix in _sample_batches(spec, seed, _ELLIPTIC, budget // 3, base * 4.0**s, scale_index=s):
            _, a = evaluate_batch(spec, f, t, prefix)
            eig = np.linalg.eigvalsh(a)
            lo = min(lo, float(eig[:, 0].min()))
            hi = max(hi, float(eig[:, -1].max()))
        mins.append(max(lo, 0.0) if lo > -1e-10 else lo)
        maxs.append(hi)
    lam_min, lam_max = min(mins), max(maxs)
    bounded = maxs[-1] <= 1.05 * maxs[-2] and mins[-1] >= mins[-2] / 1.05
    passes = lam_min > 0.0 and bounded
    K = max(lam_max, 1.0 / lam_min) if lam_min > 0 else np.inf
    return EllipticityCertificate(lam_min, lam_max, float(K), bool(passes), mins, maxs)


def classify(spec, utility, certs):
    """Which main theorems have all hypotheses certified, mirroring their statements."""
    g, c, m, e = certs.growth, certs.convexity, certs.mpr, certs.ellipticity

    def status(ok):
        return "missing" if ok is None else ("pass" if ok else "fail")

    growth_ok = None if g is None else not g.violated
    conv_ok = None if c is None else c.passed
    mpr_ok = None if m is None else m.locally_bounded
    mpr_bounded = None if m is None else (m.locally_bounded and m.global_bound is not None)
    ell_ok = None if e is None else e.passes
    conds = {
        "growth": status(growth_ok),
        "continuity": "assumed",
        "convexity": status(conv_ok),
        "mpr": status(mpr_ok),
        "mpr_bounded": status(mpr_bounded),
        "ellipticity": status(ell_ok),
        "medial_limit": "assumed",
    }
    base = bool(growth_ok) and bool(conv_ok) and bool(mpr_ok)
    extra = bool(mpr_bounded) or bool(ell_ok)
    k, p = utility.kind, utility.param

    conj = base and utility.bounded_below
    if k == "exponential":
        pos = base
    elif k == "power" and p > 0:
        pos = base and extra
    else:
        pos = False
    if k == "log":
        neg = base and extra
    elif k == "power" and p < 0:
        neg = base
    else:
        neg = False

    needs = ["growth", "continuity", "convexity", "mpr"]
    table = {
        "conjugacy_bounded": needs + ["utility bounded below"],
        "main_pos_power_exp": needs + (["mpr_bounded or ellipticity"] if k == "power" else []),
        "main_neg_power_log": needs + ["medial_limit"] + (["mpr_bounded or ellipticity"] if k == "log" else []),
    }
    details = {
        flag: {
            req: (
                conds.get(req)
                if req in conds
                else ("pass" if (extra if "or" in req else utility.bounded_below) else "fail")
            )
            for req in reqs
        }
        for flag, reqs in table.items()
    }
    details["conditions"] = conds
    return TheoremApplicability(bool(conj), bool(pos), bool(neg), details)


def certify_all(spec, seed=42):
    """Run every certifier with default budgets."""
    return Certificates(
        growth=certify_growth(spec, seed=seed),
        convexity=certify_convexity(spec),
        mpr=certify_mpr(spec, seed=seed),
        ellipticity=certify_ellipticity(spec, seed=seed),
    )


def theorem_for(utility):
    """Name of the :class:`TheoremApplicability` flag covering ``utility``."""
    if utility.kind == "log" or (utility.kind == "power" and utility.param < 0):
        return "main_neg_power_log"
    return "main_pos_power_exp"
