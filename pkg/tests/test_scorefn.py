import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from riskgen.errors import DomainError
from riskgen.scorefn import (RiskSpec, TailEstimate, check_weight_constraint,
                             empirical_var_es, empirical_var_es_rows, exp_h2_counterexample,
                             expected_score, grid_argmin, landscape_hessian, min_samples,
                             multilevel_score, score)

finite = st.floats(-50, 50, allow_nan=False)


def score_oracle(alpha, w, v, e, x):
    hit = 1.0 if x <= v else 0.0
    return w / 2 * (hit - alpha) * (x * x - v * v) + hit * e * (v - x) + alpha * e * (e / 2 - v)


def test_score_examples(spec):
    assert score(spec, 0, 0, 0) == 0.0
    assert score(spec, -1, -2, 0) == pytest.approx(0.25, abs=1e-12)
    assert score(spec, -1, -2, -3) == pytest.approx(34.0, abs=1e-12)


@given(finite, finite, finite)
def test_score_matches_scalar_oracle(v, e, x):
    got = score(RiskSpec.single(0.05), v, e, x)
    assert got == pytest.approx(score_oracle(0.05, 10.0, v, e, x), rel=1e-12, abs=1e-9)


def test_score_rejects_nonfinite(spec):
    with pytest.raises(DomainError):
        score(spec, np.nan, 0, 0)
    with pytest.raises(DomainError):
        score(spec, 0, 0, np.inf)


def test_score_needs_single_level():
    with pytest.raises(DomainError):
        score(RiskSpec(levels=(0.01, 0.05)), 0, 0, 0)


def test_expected_score_examples(spec):
    assert expected_score(spec, 0, 0, [0]) == 0.0
    assert expected_score(spec, -1, -2, [-3, 0]) == pytest.approx(17.125, abs=1e-12)
    with pytest.raises(DomainError):
        expected_score(spec, 0, 0, [])


def test_expected_score_argmin_normal(spec, rng):
    x = rng.standard_normal(10_000)
    grid = np.arange(-3.0, 0.0 + 1e-12, 0.005)
    v, e, _ = grid_argmin(spec, x, grid, grid)
    est = empirical_var_es(x, 0.05)
    assert abs(v - est.var) <= 0.02
    assert abs(e - est.es) <= 0.02
    # population values for N(0,1) at 5%
    assert abs(v + 1.645) < 0.06 and abs(e + 2.063) < 0.08


def test_grid_argmin_surface_matches_expected_score(spec, rng):
    x = rng.standard_normal(500)
    vg, eg = np.linspace(-2.5, -0.5, 7), np.linspace(-3.0, -1.0, 5)
    _, _, surface = grid_argmin(spec, x, vg, eg)
    for i, v in enumerate(vg):
        for j, e in enumerate(eg):
            assert surface[i, j] == pytest.approx(expected_score(spec, v, e, x), rel=1e-10,
                                                  abs=1e-12)


def test_empirical_var_es_examples():
    est = empirical_var_es(np.arange(-20, 0), 0.05)
    assert (est.var, est.es) == (-20.0, -20.0)
    est = empirical_var_es(np.arange(1, 101), 0.05)
    assert (est.var, est.es) == (5.0, 3.0)
    est = empirical_var_es(np.full(40, 2.5), 0.05)
    assert (est.var, est.es) == (2.5, 2.5)


def test_empirical_var_es_too_few_samples():
    assert min_samples(0.05) == 20
    with pytest.raises(DomainError):
        empirical_var_es(np.arange(19), 0.05)


@given(st.lists(finite, min_size=20, max_size=200), st.sampled_from([0.01, 0.05, 0.1, 0.25]))
def test_es_below_var(xs, alpha):
    if len(xs) < min_samples(alpha):
        return
    est = empirical_var_es(xs, alpha)
    assert est.es <= est.var + 1e-12


def test_rows_match_scalar(rng):
    pnl = rng.standard_normal((6, 333))
    v, e = empirical_var_es_rows(pnl, 0.05)
    for k in range(6):
        est = empirical_var_es(pnl[k], 0.05)
        assert v[k] == est.var and e[k] == pytest.approx(est.es, rel=1e-14)


def test_riskspec_validation():
    for bad in [dict(levels=(0.0,)), dict(levels=(0.05, 0.01)), dict(levels=(0.05,), w_alpha=(0.5,)),
                dict(levels=(0.01, 0.05), spectral_weights=(0.3, 0.3))]:
        with pytest.raises(DomainError):
            RiskSpec(**bad)
    s = RiskSpec(levels=(0.01, 0.05))
    assert s.spectral_weights == (0.5, 0.5)
    assert RiskSpec.from_dict(s.to_dict()) == s


def test_hessian_ee_entry_is_alpha(spec, rng):
    x = rng.uniform(-1, 1, 2000)
    for v, e in [(-0.9, -0.95), (-0.5, -2.0), (0.3, 1.0)]:
        h = landscape_hessian(spec, v, e, x)
        assert h[1, 1] == pytest.approx(0.05, abs=1e-6)
        assert abs(h[0, 1] - h[1, 0]) < 1e-8


def test_exp_h2_counterexample():
    assert exp_h2_counterexample(-0.9, -2.0) < 0
    assert exp_h2_counterexample(-0.9, 0.0) > 0
    # the bracket vanishes at e = -1.95 exactly
    from scipy.optimize import brentq
    root = brentq(lambda e: exp_h2_counterexample(-0.9, e), -3.0, 0.0)
    assert abs(root + 1.95) < 0.05


def test_multilevel_score():
    one = RiskSpec.single(0.05)
    est = TailEstimate(-1.0, -2.0)
    assert multilevel_score(one, [est], -3.0) == score(one, -1.0, -2.0, -3.0)

    two = RiskSpec(levels=(0.01, 0.05))
    x = -0.7
    expect = 0.5 * (score(two.level(0), -1, -2, x) + score(two.level(1), -1, -2, x))
    assert multilevel_score(two, [est, est], x) == pytest.approx(expect, rel=1e-14)

    first = RiskSpec(levels=(0.01, 0.05), spectral_weights=(1.0, 0.0))
    assert multilevel_score(first, [est, TailEstimate(-5, -9)], x) == score(two.level(0), -1, -2, x)
    with pytest.raises(DomainError):
        multilevel_score(two, [est], x)


@settings(max_examples=50)
@given(st.floats(0, 1), st.floats(-3, 0), st.floats(-3, 0))
def test_multilevel_linear_in_weights(p, v, e):
    a = RiskSpec(levels=(0.01, 0.05), spectral_weights=(1.0, 0.0))
    b = RiskSpec(levels=(0.01, 0.05), spectral_weights=(0.0, 1.0))
    mix = RiskSpec(levels=(0.01, 0.05), spectral_weights=(p, 1.0 - p))
    ests = [TailEstimate(v, e), TailEstimate(v / 2, e / 2)]
    x = np.linspace(-3, 1, 9)
    lhs = multilevel_score(mix, ests, x)
    rhs = p * multilevel_score(a, ests, x) + (1 - p) * multilevel_score(b, ests, x)
    assert np.allclose(lhs, rhs, rtol=1e-12, atol=1e-12)


def test_weight_constraint_warns():
    with pytest.warns(RuntimeWarning):
        assert not check_weight_constraint(RiskSpec.single(), [TailEstimate(-1.0, -2.0)])
    assert check_weight_constraint(RiskSpec.single(0.05, 1.0), [TailEstimate(-1.0, -2.0)])


def test_score_continuous_in_v_at_sample(spec):
    # the x**2 - v**2 factor kills the jump of the indicator at x = v
    x, e = -1.3, -2.0
    left, right = score(spec, x - 1e-9, e, x), score(spec, x + 1e-9, e, x)
    assert math.isclose(left, right, abs_tol=1e-7)
