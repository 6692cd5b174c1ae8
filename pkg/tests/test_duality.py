import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import minimize_scalar

from rsl.duality import (
    conjugacy_check,
    eval_shifted_conjugate,
    legendre,
    shape_check,
    weak_duality_check,
)
from rsl.errors import DomainError, DomainMismatch, NotApplicable
from rsl.model import builtin
from rsl.simulate import Selector
from rsl.utility import UtilitySpec
from rsl.value import Curve

from _helpers import constant_spec

TAB = np.geomspace(0.01, 100.0, 401)
PTS = np.geomspace(0.25, 4.0, 41)


def log_pair(c=0.0, shift=0.0):
    u = Curve.from_function(lambda x: np.log(x) + c, TAB)
    v = Curve.from_function(lambda y: -np.log(y) - 1.0 + c + shift, TAB)
    return u, v


def test_analytic_log_pair():
    u, v = log_pair(c=0.3)
    r = conjugacy_check(u, v, PTS, PTS, tolerance=1e-9)
    assert r.pass_ and r.gap_u <= 1e-9 and r.gap_v <= 1e-9
    assert min(r.gap_u, r.gap_v) >= -1e-12


def test_shifted_pair_fails():
    u, v = log_pair(shift=0.1)
    r = conjugacy_check(u, v, PTS, PTS, tolerance=0.02)
    assert not r.pass_
    assert r.gap_u == pytest.approx(0.1, abs=1e-9)
    assert r.gap_v == pytest.approx(0.1, abs=1e-9)


def test_power_pair_from_tuples():
    p = 0.5
    u = (TAB, TAB**p / p)
    v = (TAB, (1 - p) / p * TAB ** (p / (p - 1)))
    r = conjugacy_check(u, v, PTS, PTS, tolerance=1e-3)
    assert r.pass_


def test_grid_outside_tabulation():
    u, v = log_pair()
    with pytest.raises(DomainMismatch):
        conjugacy_check(u, v, [0.001, 1.0], PTS, 0.1)
    with pytest.raises(DomainMismatch):
        conjugacy_check(u, v, PTS, [1.0, 1000.0], 0.1)


@settings(max_examples=25, deadline=None)
@given(st.floats(-5.0, 5.0))
def test_shift_identity(c):
    base = conjugacy_check(*log_pair(shift=0.05), PTS, PTS, 0.02)
    moved = conjugacy_check(*log_pair(c=c, shift=0.05), PTS, PTS, 0.02)
    assert abs(base.gap_u - moved.gap_u) <= 1e-10
    assert abs(base.gap_v - moved.gap_v) <= 1e-10


def test_biconjugation_idempotent():
    # a convex, decreasing v that is not an exact Legendre partner of anything simple
    y = TAB
    v = Curve(y, -np.log(y) - 1.0 + 0.02 * np.log1p(y))
    single = conjugacy_check(Curve(TAB, legendre(v, TAB, minimize=True)), v, PTS, PTS, 1.0)
    u_tab = Curve(TAB, legendre(v, TAB, minimize=True))
    v_back = legendre(Curve(TAB, legendre(Curve(TAB, legendre(u_tab, TAB, minimize=False)), TAB, minimize=True)),
                      PTS, minimize=False)
    assert np.abs(v_back - v(PTS)).max() <= 2 * max(single.gap_v, 1e-9)


def test_infinite_dual_values_capped():
    u = Curve.from_function(np.log, TAB)
    vals = -np.log(TAB) - 1.0
    vals[:10] = 1e12
    v = Curve(TAB, vals)
    r = conjugacy_check(u, v, PTS, PTS, 1e-6)
    assert np.isfinite(r.gap_u)


# shifted conjugate -----------------------------------------------------------


@pytest.mark.parametrize(
    "text,y,expected",
    [("log", 1.0, 0.0), ("log", 0.5, math.log(2.0) - 0.5), ("power:0.5", 1.0, 2.0), ("log", 3.0, 0.0)],
)
def test_shifted_conjugate_examples(text, y, expected):
    assert eval_shifted_conjugate(text, y) == pytest.approx(expected, abs=1e-14)


def test_shifted_conjugate_errors():
    with pytest.raises(DomainError):
        eval_shifted_conjugate("log", 0.0)
    with pytest.raises(DomainError):
        eval_shifted_conjugate("log", [1.0, -1.0])
    with pytest.raises(NotApplicable):
        eval_shifted_conjugate("exponential:1", 1.0)
    with pytest.raises(NotApplicable):
        eval_shifted_conjugate("power:-1", 1.0)
    out = eval_shifted_conjugate("log", np.array([0.5, 2.0]))
    assert out.shape == (2,)


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(["log", "power:0.5", "power:0.2", "power:0.8"]), st.floats(0.01, 10.0))
def test_shifted_conjugate_numeric(text, y):
    u = UtilitySpec.parse(text)
    # search over z = log(1 + x) so large maximizers stay in range
    res = minimize_scalar(lambda z: -(float(u(math.exp(z))) - math.expm1(z) * y), bounds=(0.0, 60.0),
                          method="bounded", options={"xatol": 1e-12})
    numeric = max(-res.fun, float(u(1.0)))
    assert eval_shifted_conjugate(u, y) == pytest.approx(numeric, rel=1e-6, abs=1e-7)


# weak duality ------------------------------------------------------------------


def test_weak_duality_zero_drift():
    spec = constant_spec([0.0], [[0.04]])
    w = weak_duality_check(spec, "log", 1.0, 1.0, Selector.constant([0.0]), n_paths=1000, u_value=0.0)
    assert w.bound == 1.0 and w.se == 0.0 and w.passes and w.slack == 1.0


def test_weak_duality_gbm_corner():
    from rsl.value import FractionGrid, LatticeConfig, WealthGrid

    gbm = builtin("gbm_interval", b=(0.05, 0.1), a=(0.04, 0.09))
    cfg = LatticeConfig(n_steps=16, wealth_grid=WealthGrid(n=81), fraction_grid=FractionGrid(n=81))
    w = weak_duality_check(gbm, "log", 1.0, 1.0, Selector.constant([0.1, 0.04]), cfg, n_paths=20_000)
    assert w.passes and w.slack > 0


def test_weak_duality_near_tight_single_model():
    # complete market: u(x) = log x + theta^2 a T / 2; shifted dual is tight as x grows
    spec = builtin("gbm_interval", b=(0.1, 0.1), a=(0.04, 0.04))
    x = 40.0
    u = math.log(x) + 0.125
    w = weak_duality_check(spec, "log", x, 1.0 / x, Selector.constant([0.1, 0.04]), n_paths=100_000, n_steps=64,
                           u_value=u)
    assert w.passes and 0.0 <= w.slack + 4 * w.se and w.slack < 0.05


@pytest.mark.parametrize("sel", ["bang_bang", "max_mpr", "min_mpr"])
def test_weak_duality_regression(sel):
    """The inequality holds at 4 SE for every feedback selector on a certified spec."""
    gbm = builtin("gbm_interval", b=(0.05, 0.1), a=(0.04, 0.09))
    u1 = 0.5 * 0.05**2 / 0.09  # closed-form robust log value at x = 1
    for x, y in [(1.0, 1.0), (2.0, 0.5), (10.0, 0.1)]:
        w = weak_duality_check(gbm, "log", x, y, Selector.feedback(gbm, sel), n_paths=20_000, n_steps=32,
                               u_value=math.log(x) + u1)
        assert w.passes


# shape ------------------------------------------------------------------------


def test_shape_analytic_curves():
    u, v = log_pair()
    assert shape_check(u, expect="primal").passes
    assert shape_check(v, expect="dual").passes
    assert not shape_check(u, expect="dual").passes
    with pytest.raises(ValueError):
        shape_check(u)


def test_shape_detects_corrupted_node():
    vals = np.log(TAB)
    vals[200] -= 0.1 * np.ptp(vals)
    r = shape_check(Curve(TAB, vals), expect="primal")
    assert not r.passes
    assert {v["index"] for v in r.violations} >= {200}
    assert r.violations[0]["magnitude"] >= r.violations[-1]["magnitude"]


def test_shape_listing_capped():
    vals = np.sin(np.linspace(0, 40, TAB.size))
    r = shape_check(Curve(TAB, vals), expect="primal", max_listed=5)
    assert r.n_violations > 5 and len(r.violations) == 5
