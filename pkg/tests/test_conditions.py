import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rsl.conditions import (
    Certificates,
    certify_all,
    certify_convexity,
    certify_ellipticity,
    certify_growth,
    certify_mpr,
    classify,
    mpr_batch,
    solve_mpr,
    theorem_for,
)
from rsl.errors import MprInfeasible
from rsl.model import builtin
from rsl.utility import UtilitySpec

from _helpers import arc_spec, constant_spec, zero_spec


@pytest.fixture(scope="module")
def gbm():
    return builtin("gbm_interval", b=(0.05, 0.1), a=(0.04, 0.09))


@pytest.fixture(scope="module")
def certs(gbm):
    return certify_all(gbm)


# growth ---------------------------------------------------------------------


def test_growth_zero_spec():
    assert certify_growth(zero_spec()).estimated_C == 0.0


def test_growth_gbm_matches_direct_formula(gbm):
    g = certify_growth(gbm)
    # constant coefficients: ratio is largest where sup|w| is smallest, i.e. at x0
    oracle = (0.1**2 + 0.09) / (1.0 + 1.0**2)
    assert g.estimated_C <= 0.1
    assert g.estimated_C == pytest.approx(oracle, rel=1e-12)
    assert not g.violated and g.sample_budget == 1000


def test_growth_remark_finite():
    g = certify_growth(builtin("remark_2_10"))
    assert np.isfinite(g.estimated_C) and g.estimated_C > 0


def test_growth_violation_has_witness():
    spec = constant_spec([3.0], [[1.0]])  # declared constant 10, true 10/2 = 5 at x0 = 1
    object.__setattr__(spec.coeffs, "declared_growth_const", 1.0)
    g = certify_growth(spec)
    assert g.violated and g.estimated_C > 1.0
    assert set(g.worst_point) == {"f", "t", "sup_norm"}


def test_growth_budget_floor(gbm):
    with pytest.raises(ValueError):
        certify_growth(gbm, budget=10)


def test_growth_seeded(gbm):
    assert certify_growth(builtin("delay"), seed=7) == certify_growth(builtin("delay"), seed=7)


# convexity ------------------------------------------------------------------


def test_convexity_gbm(gbm):
    c = certify_convexity(gbm)
    assert c.passed and c.witness is None


def test_convexity_arc_fails_with_witness():
    c = certify_convexity(arc_spec())
    assert not c.passed
    w = c.witness
    # direct distance from the reported midpoint to the arc
    s = np.linspace(0.0, 1.0, 200001)
    arc = np.stack([np.cos(np.pi * s), np.sin(np.pi * s) + 1.0], axis=1)
    direct = np.sqrt(((arc - np.array(w["midpoint"])) ** 2).sum(1)).min()
    assert c.max_gap == pytest.approx(direct, rel=1e-4)
    assert w["distance"] == c.max_gap


def test_convexity_singleton():
    assert certify_convexity(builtin("gbm_interval", b=(0.1, 0.1), a=(0.04, 0.04))).passed


def test_convexity_delay():
    assert certify_convexity(builtin("delay")).passed


# market price of risk -------------------------------------------------------


def test_solve_mpr_identity():
    spec = constant_spec([1.0, 2.0], np.eye(2), x0=[0.0, 0.0])
    theta, resid = solve_mpr(spec, [0.0], 0.0)
    assert np.allclose(theta, [1.0, 2.0]) and resid == 0.0


def test_solve_mpr_remark():
    spec = builtin("remark_2_10")
    theta, resid = solve_mpr(spec, [1.0, 1.0], 0.5, np.array([[1.0], [4.0]]))
    assert theta[0] == pytest.approx(0.25, abs=1e-15) and resid == 0.0


def test_solve_mpr_infeasible():
    spec = constant_spec([1.0], [[0.0]])
    with pytest.raises(MprInfeasible) as exc:
        solve_mpr(spec, [0.0], 0.0)
    assert exc.value.witness["f"] == [0.0]


def test_mpr_gbm_global_bound(gbm, certs):
    m = certs.mpr
    corners = [b * b / a for b in (0.05, 0.1) for a in (0.04, 0.09)]
    assert m.feasible and not m.divergent
    assert m.global_bound == pytest.approx(max(corners), rel=1e-12)
    levels = list(m.local_bounds)
    vals = [m.local_bounds[k] for k in levels]
    assert levels == sorted(levels) and vals == sorted(vals)
    assert m.theta([0.1, 0.04], 0.0)[0] == pytest.approx(2.5)


def test_mpr_zero_drift():
    m = certify_mpr(constant_spec([0.0], [[0.04]]))
    assert m.feasible and all(v == 0.0 for v in m.local_bounds.values())
    assert m.global_bound == 0.0


def test_mpr_remark_divergent():
    m = certify_mpr(builtin("remark_2_10"))
    assert m.feasible and m.divergent and m.global_bound is None
    assert m.probe_levels == [1.0, 0.5, 0.25]
    b = m.probe_bounds
    assert b[0] < b[1] < b[2]
    # <theta, a theta> = f1^2 / f2 * |x|^{-1/2}, largest at f = (2, 1)
    assert m.growth_exponent == pytest.approx(0.5, abs=0.05)


def test_mpr_infeasible_flagged_or_raised():
    spec = builtin("gbm_scaled")
    # b = f b_bar, a = f a_bar: theta = b_bar / a_bar when f > 0, b = a = 0 at f = 0; feasible
    assert certify_mpr(spec).feasible
    bad = constant_spec([1.0], [[0.0]])
    m = certify_mpr(bad)
    assert not m.feasible and m.witness is not None
    with pytest.raises(MprInfeasible):
        certify_mpr(bad, strict=True)


def test_mpr_levels_validated(gbm):
    with pytest.raises(ValueError):
        certify_mpr(gbm, level_list=(2.0, 1.0))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 4))
def test_mpr_residual_rotation_invariant(seed, d):
    rng = np.random.default_rng(seed)
    m = rng.normal(size=(d, d))
    a = m @ m.T
    if d > 1:
        w, v = np.linalg.eigh(a)
        w[0] = 0.0  # make a singular so the residual can be nonzero
        a = (v * w) @ v.T
    b = rng.normal(size=d)
    q, _ = np.linalg.qr(rng.normal(size=(d, d)))
    _, r1 = mpr_batch(b[None], a[None])
    _, r2 = mpr_batch((q @ b)[None], (q @ a @ q.T)[None])
    assert abs(r1[0] - r2[0]) <= 1e-10 * (1.0 + abs(r1[0]))


# ellipticity -----------------------------------------------------------------


def test_ellipticity_delay_exact():
    e = certify_ellipticity(builtin("delay"))
    assert (e.lambda_min, e.lambda_max) == (0.04, 0.09)
    assert e.passes and e.K_estimate == pytest.approx(25.0)


def test_ellipticity_identity():
    e = certify_ellipticity(constant_spec([0.0, 0.0], np.eye(2), x0=[0.0, 0.0]))
    assert (e.lambda_min, e.lambda_max) == (1.0, 1.0) and e.passes


def test_ellipticity_gbm_scaled_fails():
    e = certify_ellipticity(builtin("gbm_scaled"))
    assert e.lambda_min == 0.0 and not e.passes


def test_ellipticity_invariant():
    for spec in (builtin("delay"), builtin("gbm_interval", b=(0, 0.1), a=(0.01, 0.2))):
        e = certify_ellipticity(spec)
        if e.passes:
            assert 0.0 < e.lambda_min <= e.lambda_max


# classification --------------------------------------------------------------


def test_classify_gbm_log(gbm, certs):
    app = classify(gbm, UtilitySpec("log"), certs)
    assert app.main_neg_power_log and not app.main_pos_power_exp
    assert app.conditions["conditions"]["mpr_bounded"] == "pass"


def test_classify_remark_nothing_applies():
    spec = builtin("remark_2_10")
    c = certify_all(spec)
    for text in ("log", "power:0.5", "power:-1", "exponential:1"):
        app = classify(spec, UtilitySpec.parse(text), c)
        assert not (app.conjugacy_bounded or app.main_pos_power_exp or app.main_neg_power_log)


def test_classify_delay_power_via_ellipticity():
    spec = builtin("delay")
    c = certify_all(spec)
    app = classify(spec, UtilitySpec("power", 0.5), c)
    assert app.main_pos_power_exp and app.conjugacy_bounded
    assert c.ellipticity.passes


def test_classify_requirements_mirror_theorems(gbm, certs):
    weak = Certificates(certs.growth, certs.convexity, certs.mpr, None)
    no_bound = Certificates(certs.growth, certs.convexity,
                            type(certs.mpr)(**{**certs.mpr.__dict__, "global_bound": None}), None)
    for text in ("exponential:1", "power:-1"):
        flag = theorem_for(UtilitySpec.parse(text))
        assert getattr(classify(gbm, UtilitySpec.parse(text), no_bound), flag)
    for text in ("log", "power:0.5"):
        flag = theorem_for(UtilitySpec.parse(text))
        assert not getattr(classify(gbm, UtilitySpec.parse(text), no_bound), flag)
        assert getattr(classify(gbm, UtilitySpec.parse(text), weak), flag)


def test_classify_monotone_in_certificates(gbm, certs):
    """Adding a passing certificate never removes applicability."""
    parts = ["growth", "convexity", "mpr", "ellipticity"]
    full = {k: getattr(certs, k) for k in parts}
    for text in ("log", "power:0.5", "power:-1", "exponential:1"):
        u = UtilitySpec.parse(text)
        for drop in parts:
            partial = Certificates(**{k: (None if k == drop else v) for k, v in full.items()})
            a, b = classify(gbm, u, partial), classify(gbm, u, certs)
            for flag in ("conjugacy_bounded", "main_pos_power_exp", "main_neg_power_log"):
                assert getattr(a, flag) <= getattr(b, flag)
        missing = classify(gbm, u, Certificates())
        assert missing.conditions["conditions"]["growth"] == "missing"
