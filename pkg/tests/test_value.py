import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rsl.config import load_model
from rsl.duality import shape_check
from rsl.errors import ConfigError, GridTooCoarse, LogDensityGridExceeded, NotApplicable, SuperhedgeViolation
from rsl.model import builtin
from rsl.utility import UtilitySpec
from rsl.value import (
    DensityGrid,
    FractionGrid,
    LatticeConfig,
    Payoff,
    StateGrid,
    SurfaceKind,
    WealthGrid,
    dual_value,
    primal_value,
    superhedge,
    verify_superhedge,
)

from _helpers import config_path, constant_spec

SMALL = LatticeConfig(n_steps=16, wealth_grid=WealthGrid(n=81), fraction_grid=FractionGrid(n=81))


@pytest.fixture(scope="module")
def vol():
    return load_model(config_path("vol_interval.toml"))


@pytest.fixture(scope="module")
def gbm():
    return builtin("gbm_interval", b=(0.05, 0.1), a=(0.04, 0.09))


def _fixed_vol(a):
    return builtin("gbm_interval", b=(0.0, 0.0), a=(a, a))


# superhedging -------------------------------------------------------------------


def test_constant_payoff(vol):
    s = superhedge(vol, "1", LatticeConfig(n_steps=8))
    assert s.price == 1.0
    assert np.all(s.maximizer_policy == 0.0)
    r = verify_superhedge(s, vol, n_adversary_paths=500)
    assert r.passes and r.worst_shortfall == 0.0 and r.exhaustive_paths == 3**8


def test_convex_payoff_worst_case_is_high_vol(vol):
    cfg = LatticeConfig(n_steps=32)
    bsb = superhedge(vol, "pos(X(T) - 1)", cfg)
    fixed = superhedge(_fixed_vol(0.09), "pos(X(T) - 1)", cfg)
    assert bsb.meta["step"] == fixed.meta["step"]
    assert bsb.price == pytest.approx(fixed.price, rel=1e-12)
    # ties where the value is affine; at the strike one step before maturity the kink is strict
    assert bsb.adversary_policy[-1, bsb.start_node, 0, 1] == 0.09
    # Bachelier value sigma sqrt(T / 2 pi) with sigma = 0.3
    assert bsb.price == pytest.approx(0.3 / math.sqrt(2 * math.pi), rel=0.02)


def test_concave_payoff_worst_case_is_low_vol(vol):
    cfg = LatticeConfig(n_steps=32)
    bsb = superhedge(vol, "min(X(T), 1)", cfg)
    step = bsb.meta["step"]
    fixed = superhedge(_fixed_vol(0.04), "min(X(T), 1)", LatticeConfig(n_steps=32, state_grid=StateGrid(step=step)))
    assert bsb.price == pytest.approx(fixed.price, abs=1e-12)


def test_superhedge_verifies_exhaustively(vol):
    s = superhedge(vol, "pos(X(T) - 1)", LatticeConfig(n_steps=8))
    r = verify_superhedge(s, vol, n_adversary_paths=2000)
    assert r.passes and r.n_violations == 0 and r.exhaustive_violations == 0
    assert r.exhaustive_paths == 3**8


def test_truncated_hedge_is_caught(vol):
    s = superhedge(vol, "pos(X(T) - 1)", LatticeConfig(n_steps=6))
    s.maximizer_policy[:] = 0.0
    r = verify_superhedge(s, vol, n_adversary_paths=2000)
    assert not r.passes and r.exhaustive_violations > 0 and r.violating_path is not None
    with pytest.raises(SuperhedgeViolation):
        verify_superhedge(s, vol, n_adversary_paths=100, strict=True)


def test_lookback_payoff(vol):
    s = superhedge(vol, "max_X - X(T)", LatticeConfig(n_steps=8))
    assert s.meta["uses_max"] and s.grid.size > 1
    assert verify_superhedge(s, vol, n_adversary_paths=1000).passes
    assert shape_check(s).passes
    assert s.price > 0


def test_slack_counts_against_the_hedge(vol):
    s = superhedge(vol, "pos(X(T) - 1)", LatticeConfig(n_steps=6))
    s.values[0, s.start_node, 0] -= 0.001  # underpriced by 1e-3
    assert not verify_superhedge(s, vol, n_adversary_paths=200).passes
    assert verify_superhedge(s, vol, n_adversary_paths=200, slack_c=0.01 * 6).passes


strikes = st.floats(0.7, 1.3)


@settings(max_examples=15, deadline=None)
@given(strikes, strikes)
def test_superhedge_monotone_and_sublinear(k1, k2):
    vol = load_model(config_path("vol_interval.toml"))
    cfg = LatticeConfig(n_steps=12)

    def price(text):
        return superhedge(vol, text, cfg).price

    lo, hi = max(k1, k2), min(k1, k2)
    assert price(f"pos(X(T) - {lo})") <= price(f"pos(X(T) - {hi})") + 1e-14
    f, g = f"pos(X(T) - {k1})", f"pos({k2} - X(T))"
    assert price(f"{f} + {g}") <= price(f) + price(g) + 1e-12
    # constants pass through
    assert price(f"{f} + 0.5") == pytest.approx(price(f) + 0.5, abs=1e-12)


def test_payoff_dsl():
    p = Payoff.parse("pos(X(T) - 1)")
    assert p(np.array([0.5, 1.5])).tolist() == [0.0, 0.5]
    with pytest.raises(ConfigError):
        Payoff.parse("X(t - 0.5)")


def test_lattice_requirements(vol):
    with pytest.raises(NotApplicable):
        superhedge(builtin("delay"), "pos(X(T) - 1)", LatticeConfig(n_steps=4))
    two_d = constant_spec([0.0, 0.0], np.eye(2), x0=[1.0, 1.0])
    with pytest.raises(NotApplicable):
        superhedge(two_d, "1", LatticeConfig(n_steps=4))
    with pytest.raises(GridTooCoarse):
        superhedge(vol, "pos(X(T) - 1)", LatticeConfig(n_steps=4, state_grid=StateGrid(step=1e-3)))


@pytest.mark.parametrize(
    "factory",
    [
        lambda: StateGrid(kind="log"),
        lambda: StateGrid(stretch=0.5),
        lambda: WealthGrid(n=2),
        lambda: FractionGrid(n=100),
        lambda: DensityGrid(lo=1.0, hi=0.0),
        lambda: LatticeConfig(n_steps=0),
        lambda: LatticeConfig(interpolation="spline"),
        lambda: LatticeConfig(dual_inner="sup"),
        lambda: LatticeConfig(wealth_min=0.0),
    ],
)
def test_config_validation(factory):
    with pytest.raises(ConfigError):
        factory()


# primal value ---------------------------------------------------------------------


def test_zero_drift_log_value_is_log_wealth():
    spec = constant_spec([0.0], [[0.04]])
    u = primal_value(spec, UtilitySpec("log"), [0.5, 1.0, 2.0], SMALL)
    assert np.allclose(u.meta["u"], np.log([0.5, 1.0, 2.0]), atol=1e-9)
    assert np.all(np.abs(u.maximizer_policy[0, u.start_node, 1:]) <= 1e-12)


def test_gbm_log_value(gbm):
    u = primal_value(gbm, UtilitySpec("log"), [1.0, 2.0], SMALL)
    oracle = 0.5 * min(b * b / a for b in (0.05, 0.1) for a in (0.04, 0.09))
    assert u.meta["u"][0] == pytest.approx(oracle, rel=0.1)
    assert u.meta["u"][1] - math.log(2.0) == pytest.approx(u.meta["u"][0], abs=1e-6)
    sc = shape_check(u)
    assert sc.passes and sc.kind == "primal"


def test_power_scaling(gbm):
    u = primal_value(gbm, UtilitySpec("power", 0.5), [1.0, 2.0, 8.0], SMALL)
    u1 = u.meta["u"][0]
    assert u.meta["u"][1] == pytest.approx(math.sqrt(2.0) * u1, rel=1e-6)
    assert u.meta["u"][2] == pytest.approx(math.sqrt(8.0) * u1, rel=1e-6)
    # robust Merton fraction b / ((1 - p) a) at the worst corner (0.05, 0.09)
    # away from the wealth floor, where the nonnegativity mask can bind
    pol = u.maximizer_policy[0, u.start_node, u.grid >= 1e-3]
    step = np.diff(u.meta["fractions"])[0]
    assert np.ptp(pol) <= step
    assert pol[0] == pytest.approx(0.05 / (0.5 * 0.09), abs=step)


def test_refinement_band(gbm):
    coarse = primal_value(gbm, UtilitySpec("power", 0.5), [1.0], SMALL).meta["u"][0]
    fine = primal_value(gbm, UtilitySpec("power", 0.5), [1.0], SMALL.refined()).meta["u"][0]
    assert fine == pytest.approx(coarse, rel=0.01)


def test_primal_needs_certified_hypotheses():
    with pytest.raises(NotApplicable):
        primal_value(builtin("remark_2_10"), UtilitySpec("log"), [1.0], SMALL)


def test_primal_input_validation(gbm):
    with pytest.raises(ValueError):
        primal_value(gbm, UtilitySpec("log"), [0.0], SMALL)
    with pytest.raises(ConfigError):
        primal_value(gbm, UtilitySpec("log"), [1e3], LatticeConfig(n_steps=4, wealth_grid=WealthGrid(hi=10.0)))


def test_exponential_primal_is_monotone_concave(gbm):
    u = primal_value(gbm, UtilitySpec("exponential", 1.0), [0.5, 1.0, 2.0], SMALL)
    assert np.all(np.diff(u.meta["u"]) > 0)
    assert shape_check(u).passes


# dual value ------------------------------------------------------------------


def test_single_model_log_dual_closed_form():
    spec = builtin("gbm_interval", b=(0.1, 0.1), a=(0.04, 0.04))
    y = np.array([0.5, 1.0, 2.0])
    v = dual_value(spec, UtilitySpec("log"), y, SMALL)
    assert v.kind is SurfaceKind.DUAL_V
    assert np.allclose(v.meta["v"], -np.log(y) - 1.0 + 0.5 * 0.25, atol=1e-6)


def test_zero_drift_log_dual():
    spec = constant_spec([0.0], [[0.04]])
    y = np.array([0.25, 1.0, 4.0])
    v = dual_value(spec, UtilitySpec("log"), y, SMALL)
    assert np.allclose(v.meta["v"], -np.log(y) - 1.0, atol=1e-9)


def test_gbm_dual_shape(gbm):
    v = dual_value(gbm, UtilitySpec("log"), [0.5, 1.0, 2.0], SMALL)
    assert shape_check(v).passes
    assert np.all(np.diff(v.meta["v"]) < 0)
    assert v.meta["v"][1] == pytest.approx(-1.0 + 0.013889, abs=1e-3)


def test_dual_grid_too_narrow(gbm):
    cfg = LatticeConfig(n_steps=8, density_grid=DensityGrid(lo=-0.1, hi=0.1))
    with pytest.raises(LogDensityGridExceeded):
        dual_value(gbm, UtilitySpec("log"), [1.0], cfg)


def test_monotone_cubic_interpolation(gbm):
    cfg = LatticeConfig(n_steps=16, wealth_grid=WealthGrid(n=81), fraction_grid=FractionGrid(n=81),
                        interpolation="monotone_cubic")
    u = primal_value(gbm, UtilitySpec("log"), [1.0], cfg)
    lin = primal_value(gbm, UtilitySpec("log"), [1.0], SMALL)
    assert u.meta["u"][0] == pytest.approx(lin.meta["u"][0], rel=0.02)
    assert shape_check(u).passes
