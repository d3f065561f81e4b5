import json

import jsonschema
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from riskgen import evaluation as ev
from riskgen.cli import load_schema
from riskgen.datasim import SynthConfig, simulate
from riskgen.errors import DomainError
from riskgen.scorefn import RiskSpec, empirical_var_es, empirical_var_es_rows
from riskgen.strategies import BuyHold, StrategySet, default_strategy_set

NORMAL_VAR = stats.norm.ppf(0.05)
NORMAL_ES = -stats.norm.pdf(NORMAL_VAR) / 0.05


def test_relative_error_examples(spec, rng):
    ref = rng.standard_normal((3, 2000))
    assert ev.relative_error(ref, ref, spec) == 0.0
    assert ev.relative_error_estimates([-1.1], [-2.0], [-1.0], [-2.0]) == pytest.approx(0.05)
    with pytest.raises(DomainError):
        ev.relative_error_estimates([-1.0], [-2.0], [0.0], [-2.0])


def test_relative_error_of_scenarios(spec):
    batch = simulate(SynthConfig.desk(0, n_steps=10), 400)
    sset = default_strategy_set(3, 0, n_static=2)
    assert ev.relative_error_scenarios(batch, batch, sset, spec) == 0.0


def test_sampling_error(spec, rng):
    ref = rng.standard_normal((2, 8000))
    mean, _ = ev.sampling_error(ref, spec, 8000, trials=1)
    assert mean == pytest.approx(0.0, abs=1e-14)
    means = [ev.sampling_error(ref, spec, n, 100, np.random.default_rng(n))[0]
             for n in (250, 1000, 4000)]
    assert means[0] > means[1] > means[2]
    assert ev.sampling_error(ref, spec, 1000, 20)[1] > 0
    with pytest.raises(DomainError):
        ev.sampling_error(ref, spec, 9000)


def test_rank_frequency(rng):
    levels, values = ev.rank_frequency([3, 1, 2])
    assert np.allclose(levels, [1 / 3, 2 / 3, 1]) and values.tolist() == [1, 2, 3]
    x = rng.standard_normal(1000)
    levels, values = ev.rank_frequency(x)
    assert np.all(np.diff(values) >= 0)
    k = int(np.ceil(0.05 * 1000)) - 1
    assert values[k] == empirical_var_es(x, 0.05).var and levels[k] == pytest.approx(0.05)
    with pytest.raises(DomainError):
        ev.rank_frequency([])


def test_structural_metrics(rng):
    batch = simulate(SynthConfig.default(1, n_steps=30), 500)
    assert ev.corr_diff(batch, batch) == 0.0
    assert ev.autocorr_diff(batch, batch) == 0.0
    perm = batch.increments[:, [2, 0, 1, 4, 3]]
    assert ev.corr_diff(batch, perm) > 0
    assert ev.autocorr_diff(batch, perm) > 0
    assert ev.autocorrelations(batch).shape == (5, 10)
    flat = batch.increments.copy()
    flat[:, 0] = 0.0
    with pytest.raises(DomainError):
        ev.corr_diff(batch, flat)
    with pytest.raises(DomainError):
        ev.autocorr_diff(batch, flat)


def test_autocorrelation_oracle(rng):
    x = rng.standard_normal((50, 2, 40))
    got = ev.autocorrelations(x, 3)
    xc = x - x.mean(axis=(0, 2), keepdims=True)
    for m in range(2):
        for h in (1, 2, 3):
            num = np.mean([np.dot(s[m, h:], s[m, :-h]) for s in xc]) / (40 - h)
            assert got[m, h - 1] == pytest.approx(num / xc[:, m].var(), rel=1e-12)


def test_score_test_identical_and_antisymmetric(spec, rng):
    x = rng.standard_normal((2, 1000))
    v, e = empirical_var_es_rows(x, 0.05)
    stat, rej = ev.score_based_test(v, e, v, e, x, spec)
    assert np.all(stat == 0) and not rej.any()
    tv, te = np.full(2, NORMAL_VAR), np.full(2, NORMAL_ES)
    a, _ = ev.score_based_test(v, e, tv, te, x, spec)
    b, _ = ev.score_based_test(tv, te, v, e, x, spec)
    assert np.allclose(a, -b)


def test_score_test_truth_as_model(spec):
    rejections = 0
    for trial in range(100):
        rng = np.random.default_rng(trial)
        model = empirical_var_es_rows(rng.standard_normal((1, 1000)), 0.05)
        fresh = rng.standard_normal((1, 1000))
        _, rej = ev.score_based_test(*model, [NORMAL_VAR], [NORMAL_ES], fresh, spec)
        rejections += int(rej[0])
    assert rejections <= 12


def test_score_test_power(spec, rng):
    x = rng.standard_normal((1, 1000))
    stat, rej = ev.score_based_test([3 * NORMAL_VAR], [3 * NORMAL_ES], [NORMAL_VAR],
                                    [NORMAL_ES], x, spec)
    assert rej[0] and stat[0] > 0


def test_score_test_degenerate(spec):
    with pytest.raises(DomainError):
        ev.score_based_test([1.0], [1.0], [1.0], [1.0], np.full((1, 100), 5.0), spec)


def test_kupiec_examples():
    assert ev.kupiec_lr(50, 1000, 0.05) == pytest.approx(0.0, abs=1e-9)
    assert ev.kupiec_lr(70, 1000, 0.05) == pytest.approx(7.53, abs=0.01)
    # 0 ln 0 = 0 at both ends
    assert ev.kupiec_lr(0, 100, 0.05) == pytest.approx(-2 * 100 * np.log(0.95))
    assert ev.kupiec_lr(100, 100, 0.05) == pytest.approx(-2 * 100 * np.log(0.05))


def test_kupiec_matches_binomial_likelihoods():
    for c in (1, 13, 49, 77, 300):
        n, a = 1000, 0.05
        null = stats.binom.logpmf(c, n, a)
        alt = stats.binom.logpmf(c, n, c / n)
        assert ev.kupiec_lr(c, n, a) == pytest.approx(-2 * (null - alt), rel=1e-9)


def test_coverage_test(rng):
    x = rng.standard_normal((1, 1000))
    counts, lr, rej = ev.coverage_test([NORMAL_VAR], x, 0.05)
    assert counts[0] == (x < NORMAL_VAR).sum()
    assert lr[0] == pytest.approx(ev.kupiec_lr(counts[0], 1000, 0.05))
    assert rej[0] == (lr[0] > 3.841)
    with pytest.raises(DomainError):
        ev.coverage_test([0.0], x[:, :19], 0.05)


def test_coverage_rejection_rate():
    rejections = 0
    for trial in range(500):
        x = np.random.default_rng(10_000 + trial).standard_normal((1, 1000))
        rejections += int(ev.coverage_test([NORMAL_VAR], x, 0.05)[2][0])
    assert 0.02 <= rejections / 500 <= 0.08


@settings(max_examples=30)
@given(st.integers(0, 2**31))
def test_coverage_invariant_under_monotone_transform(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 200))
    v = -1.3
    a = ev.coverage_test([v], x, 0.05)
    b = ev.coverage_test([np.exp(v)], np.exp(x), 0.05)
    assert a[0][0] == b[0][0] and a[1][0] == b[1][0]


def _inner_brute(real, fake_q, real_q, tau, grid=200_001):
    lo, hi = sorted((real_q, fake_q))
    xs = np.linspace(lo, hi, grid)
    f = np.searchsorted(np.sort(real), xs, side="right") / real.size
    val = np.trapezoid(f - tau, xs) if hasattr(np, "trapezoid") else np.trapz(f - tau, xs)
    return val if fake_q >= real_q else -val


def test_quantile_divergence_inner_integral_oracle(rng):
    real, fake = rng.standard_normal(300), rng.standard_normal(300) * 1.5 + 0.2
    alpha, grid = 0.05, 4
    taus = np.linspace(0, alpha, grid + 1)
    q = lambda s, t: np.sort(s)[max(int(np.ceil(t * s.size - 1e-9)), 1) - 1]
    inner = [_inner_brute(real, q(fake, t), q(real, t), t) for t in taus]
    want = np.trapezoid(inner, taus) if hasattr(np, "trapezoid") else np.trapz(inner, taus)
    got = ev.quantile_divergence(real[None], fake[None], alpha, grid)
    assert got == pytest.approx(want, rel=1e-3, abs=1e-9)


def test_quantile_divergence_properties(rng):
    x = rng.standard_normal((2, 5000))
    assert ev.quantile_divergence(x, x, 0.05) == 0.0
    shifts = [ev.quantile_divergence(x, x + c, 0.05) for c in (0.5, 1.0, 2.0)]
    assert 0 < shifts[0] < shifts[1] < shifts[2]


@settings(max_examples=40)
@given(st.integers(0, 2**31), st.floats(-3, 3), st.floats(0.2, 3))
def test_quantile_divergence_nonnegative(seed, shift, scale):
    rng = np.random.default_rng(seed)
    real, fake = rng.standard_normal((1, 100)), rng.standard_normal((1, 100)) * scale + shift
    assert ev.quantile_divergence(real, fake, 0.1, grid=50) >= -1e-12


def test_score_divergence(spec, rng):
    x = rng.standard_normal((2, 100_000))
    assert abs(ev.score_divergence(x, x, spec)) < 1e-3
    assert ev.score_divergence(x, 2 * x, spec) > 0
    y = rng.standard_normal((2, 100_000))
    assert ev.score_divergence(x, y, spec) >= -1e-3


def test_generalization_error(spec, rng):
    small_r, small_f = rng.standard_normal((1, 1000)), rng.standard_normal((1, 1000))
    big_r, big_f = rng.standard_normal((1, 10_000)), rng.standard_normal((1, 10_000))
    d = lambda a, b: ev.score_divergence(a, b, spec)
    g = ev.generalization_error(d, small_r, small_f, big_r, big_f)
    assert g == pytest.approx(abs(d(small_r, small_f) - d(big_r, big_f)))


def test_report_outputs(spec, tmp_path):
    cfg = SynthConfig.desk(2, n_steps=12)
    model, ref = simulate(cfg, 300), simulate(cfg, 1200)
    sset = default_strategy_set(3, 0, n_static=2)
    report = ev.evaluate(model.increments, ref.increments, sset, spec, se_trials=10)
    d = report.to_dict()
    jsonschema.validate(d, load_schema("report"))
    assert report.relative_error >= 0 and report.sampling_error >= 0
    assert all(r == (abs(t) > ev.Z_CRIT) for r, t in zip(report.score_reject, report.score_stat))
    assert all(r == (lr > ev.CHI2_1_CRIT) for r, lr in zip(report.coverage_reject,
                                                            report.coverage_lr))
    report.to_json(tmp_path / "r.json")
    assert json.loads((tmp_path / "r.json").read_text()) == d
    report.to_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "strategy,statistic,value" and len(lines) == 1 + 7 + 9 * len(sset)
    report.write_rank_frequency(tmp_path / "rf.csv")
    rf = (tmp_path / "rf.csv").read_text().splitlines()
    assert len(rf) == 1 + len(sset) * (300 + 1200)


def test_reference_against_itself(spec):
    batch = simulate(SynthConfig.desk(3, n_steps=12), 400)
    report = ev.evaluate(batch.increments, batch.increments,
                         StrategySet((BuyHold(0), BuyHold(2))), spec, se_trials=5)
    assert report.relative_error == 0.0
    assert report.quantile_divergence == 0.0 and report.score_divergence == 0.0
    assert report.corr_diff == 0.0 and report.autocorr_diff == 0.0
