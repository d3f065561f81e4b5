"""Statistics for judging generated scenarios against reference scenarios.

Tail accuracy (relative and sampling error), two backtests (a score-based
comparison and the binomial coverage test), tail divergences, structural
metrics (cross-asset correlation and autocorrelation gaps) and rank-frequency
curves. PnL inputs are K x n matrices, one row per strategy.
"""

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from riskgen.errors import DomainError
from riskgen.rng import stream
from riskgen.scorefn import RiskSpec, empirical_var_es_rows, score
from riskgen.strategies import StrategySet, pnl_batch

Z_CRIT = 1.959963984540054  # two-sided 5% normal
CHI2_1_CRIT = 3.841458820694124  # chi-square(1) 95% quantile
MAX_LAG = 10


def _rows(pnl):
    x = np.atleast_2d(np.asarray(pnl, float))
    if x.size == 0:
        raise DomainError("empty PnL sample")
    return x


def relative_error_estimates(var, es, ref_var, ref_es) -> float:
    """Average of |VaR/VaR_ref - 1| and |ES/ES_ref - 1| over strategies."""
    var, es = np.asarray(var, float), np.asarray(es, float)
    ref_var, ref_es = np.asarray(ref_var, float), np.asarray(ref_es, float)
    if np.any(ref_var == 0) or np.any(ref_es == 0):
        raise DomainError("reference VaR and ES must be nonzero")
    k = ref_var.size
    return float((np.abs(var - ref_var) / np.abs(ref_var)).sum()
                 + (np.abs(es - ref_es) / np.abs(ref_es)).sum()) / (2 * k)


def relative_error(model_pnl, ref_pnl, spec: RiskSpec) -> float:
    """Relative tail error of model PnL samples against reference PnL samples.

    Averaged over risk levels when ``spec`` has several.
    """
    model_pnl, ref_pnl = _rows(model_pnl), _rows(ref_pnl)
    total = 0.0
    for alpha in spec.levels:
        v, e = empirical_var_es_rows(model_pnl, alpha)
        rv, re = empirical_var_es_rows(ref_pnl, alpha)
        total += relative_error_estimates(v, e, rv, re)
    return total / spec.n_levels


def relative_error_scenarios(model, reference, sset: StrategySet, spec: RiskSpec) -> float:
    return relative_error(pnl_batch(sset, model), pnl_batch(sset, reference), spec)


def sampling_error(ref_pnl, spec: RiskSpec, n: int, trials: int = 100,
                   rng: np.random.Generator = None, replace: bool = False):
    """Mean and std of the relative error of size-``n`` reference subsamples."""
    ref_pnl = _rows(ref_pnl)
    total = ref_pnl.shape[1]
    if n < 1 or (not replace and n > total):
        raise DomainError(f"cannot draw {n} of {total} reference samples")
    rng = rng if rng is not None else np.random.default_rng(0)
    errs = np.empty(trials)
    for i in range(trials):
        idx = rng.choice(total, size=n, replace=replace)
        errs[i] = relative_error(ref_pnl[:, idx], ref_pnl, spec)
    return float(errs.mean()), float(errs.std(ddof=1)) if trials > 1 else 0.0


def rank_frequency(samples):
    """Empirical quantile function: levels i/n and the sorted samples."""
    x = np.sort(np.asarray(samples, float).ravel())
    if x.size == 0:
        raise DomainError("rank_frequency needs at least one sample")
    return np.arange(1, x.size + 1) / x.size, x


def _corr_matrix(batch):
    x = np.asarray(getattr(batch, "increments", batch), float)
    m = x.shape[1]
    flat = x.transpose(1, 0, 2).reshape(m, -1)
    sd = flat.std(axis=1)
    if np.any(sd == 0):
        raise DomainError("an asset has zero variance")
    return np.corrcoef(flat)


def corr_diff(real, fake) -> float:
    """Sum of |correlation gaps| over distinct asset pairs (upper triangle)."""
    cr, cf = _corr_matrix(real), _corr_matrix(fake)
    if cr.shape != cf.shape:
        raise DomainError("real and fake batches disagree on the asset count")
    iu = np.triu_indices(cr.shape[0], 1)
    return float(np.abs(cr[iu] - cf[iu]).sum())


def autocorrelations(batch, max_lag: int = MAX_LAG) -> np.ndarray:
    """M x max_lag autocorrelations of increments, pooled over scenarios."""
    x = np.asarray(getattr(batch, "increments", batch), float)
    n, m, t = x.shape
    if t <= max_lag:
        raise DomainError(f"need more than {max_lag} time steps, got {t}")
    xc = x - x.mean(axis=(0, 2), keepdims=True)
    var = (xc * xc).mean(axis=(0, 2))
    if np.any(var == 0):
        raise DomainError("an asset has zero variance")
    out = np.empty((m, max_lag))
    for h in range(1, max_lag + 1):
        cov = (xc[:, :, h:] * xc[:, :, :-h]).mean(axis=(0, 2))
        out[:, h - 1] = cov / var
    return out


def autocorr_diff(real, fake, max_lag: int = MAX_LAG) -> float:
    ar, af = autocorrelations(real, max_lag), autocorrelations(fake, max_lag)
    if ar.shape != af.shape:
        raise DomainError("real and fake batches disagree on the asset count")
    return float(np.abs(ar - af).sum())


def score_based_test(model_var, model_es, truth_var, truth_es, ref_pnl, spec: RiskSpec,
                     level: int = 0):
    """Per-strategy statistic comparing mean scores of model and truth estimates.

    Returns ``(stats, reject)``; rejection is at the two-sided 5% level.
    """
    ref_pnl = _rows(ref_pnl)
    single = spec.level(level)
    n = ref_pnl.shape[1]
    args = [np.asarray(a, float).reshape(-1, 1) for a in (model_var, model_es, truth_var, truth_es)]
    s_model = score(single, args[0], args[1], ref_pnl)
    s_truth = score(single, args[2], args[3], ref_pnl)
    var = s_model.var(axis=1, ddof=1) + s_truth.var(axis=1, ddof=1)
    flat = (np.ptp(s_model, axis=1) == 0) & (np.ptp(s_truth, axis=1) == 0)
    if np.any(flat | (var <= 0)):
        raise DomainError("degenerate test: zero score variance")
    stats = (s_model.mean(axis=1) - s_truth.mean(axis=1)) / np.sqrt(var / n)
    return stats, np.abs(stats) > Z_CRIT


def _xlogy(x, y):
    return 0.0 if x == 0 else x * math.log(y)


def kupiec_lr(violations: int, n: int, alpha: float) -> float:
    """Likelihood ratio of observed versus nominal violation rate (0 ln 0 = 0)."""
    c = int(violations)
    if not 0 <= c <= n:
        raise DomainError(f"violation count {c} outside [0, {n}]")
    p_hat = c / n
    null = _xlogy(n - c, 1 - alpha) + _xlogy(c, alpha)
    alt = _xlogy(n - c, 1 - p_hat) + _xlogy(c, p_hat)
    return max(0.0, -2.0 * (null - alt))


def coverage_test(model_var, ref_pnl, alpha: float):
    """Violation counts, likelihood ratios and 5% rejections per strategy."""
    ref_pnl = _rows(ref_pnl)
    n = ref_pnl.shape[1]
    if n < 1.0 / alpha - 1e-9:
        raise DomainError(f"need at least {math.ceil(1 / alpha)} samples for alpha={alpha}")
    v = np.asarray(model_var, float).reshape(-1, 1)
    counts = (ref_pnl < v).sum(axis=1)
    lr = np.array([kupiec_lr(c, n, alpha) for c in counts])
    return counts, lr, lr > CHI2_1_CRIT


def _quantiles(x_sorted, taus):
    n = x_sorted.size
    idx = np.clip(np.ceil(taus * n - 1e-9).astype(int), 1, n) - 1
    return x_sorted[idx]


def _cdf_integral(x_sorted, csum, pts):
    """int_{-inf}^{pt} F(s) ds for the empirical CDF of x_sorted."""
    n = x_sorted.size
    k = np.searchsorted(x_sorted, pts, side="right")
    return (k * pts - csum[k]) / n


def quantile_divergence(real_pnl, fake_pnl, alpha: float, grid: int = 200) -> float:
    """Tail quantile divergence averaged over strategies.

    For each level tau in (0, alpha] the inner integral of (F_real(x) - tau)
    between the real and fake tau-quantiles is exact for the step CDF; the
    outer integral uses the trapezoid rule on ``grid`` equal steps.
    """
    real_pnl, fake_pnl = _rows(real_pnl), _rows(fake_pnl)
    taus = np.linspace(0.0, alpha, grid + 1)
    q_taus = np.maximum(taus, 1e-300)  # tau -> 0 reads the sample minimum
    vals = []
    for r, f in zip(real_pnl, fake_pnl):
        rs, fs = np.sort(r), np.sort(f)
        csum = np.concatenate([[0.0], np.cumsum(rs)])
        a, b = _quantiles(rs, q_taus), _quantiles(fs, q_taus)
        inner = (_cdf_integral(rs, csum, b) - _cdf_integral(rs, csum, a)) - taus * (b - a)
        vals.append(np.trapezoid(inner, taus) if hasattr(np, "trapezoid") else np.trapz(inner, taus))
    return float(np.mean(vals))


def score_divergence(real_pnl, fake_pnl, spec: RiskSpec, level: int = 0) -> float:
    """Mean score gap between fake-sample and real-sample tail estimates on real PnLs."""
    real_pnl, fake_pnl = _rows(real_pnl), _rows(fake_pnl)
    single = spec.level(level)
    alpha = spec.levels[level]
    fv, fe = empirical_var_es_rows(fake_pnl, alpha)
    rv, re = empirical_var_es_rows(real_pnl, alpha)
    s_fake = score(single, fv[:, None], fe[:, None], real_pnl).mean(axis=1)
    s_real = score(single, rv[:, None], re[:, None], real_pnl).mean(axis=1)
    return float(np.mean(s_fake - s_real))


def generalization_error(divergence, real_small, fake_small, real_large, fake_large) -> float:
    """|d(small samples) - d(large samples)|, the large pair standing in for the truth."""
    return abs(divergence(real_small, fake_small) - divergence(real_large, fake_large))


# ---------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    strategies: list  # strategy descriptions
    alpha: float
    n_model: int
    n_reference: int
    model_var: list
    model_es: list
    ref_var: list
    ref_es: list
    relative_error: float
    sampling_error: float
    sampling_error_std: float
    corr_diff: float
    autocorr_diff: float
    score_stat: list
    score_reject: list
    coverage_violations: list
    coverage_lr: list
    coverage_reject: list
    quantile_divergence: float
    score_divergence: float
    rank_frequency: dict = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k != "rank_frequency"}
        return json.loads(json.dumps(d, default=_jsonable))

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def to_csv(self, path) -> None:
        """One row per (strategy, statistic); scalar statistics use strategy ``all``."""
        per = {
            "model_var": self.model_var, "model_es": self.model_es,
            "ref_var": self.ref_var, "ref_es": self.ref_es,
            "score_stat": self.score_stat, "score_reject": self.score_reject,
            "coverage_violations": self.coverage_violations, "coverage_lr": self.coverage_lr,
            "coverage_reject": self.coverage_reject,
        }
        scalars = {
            "relative_error": self.relative_error, "sampling_error": self.sampling_error,
            "sampling_error_std": self.sampling_error_std, "corr_diff": self.corr_diff,
            "autocorr_diff": self.autocorr_diff,
            "quantile_divergence": self.quantile_divergence,
            "score_divergence": self.score_divergence,
        }
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["strategy", "statistic", "value"])
            for name, value in scalars.items():
                w.writerow(["all", name, _fmt(value)])
            for k in range(len(self.strategies)):
                for name, values in per.items():
                    w.writerow([k, name, _fmt(values[k])])

    def write_rank_frequency(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["strategy", "source", "level", "value"])
            for (k, source), (levels, values) in sorted(self.rank_frequency.items()):
                for lv, v in zip(levels.tolist(), values.tolist()):
                    w.writerow([k, source, repr(lv), repr(v)])


def _jsonable(x):
    if isinstance(x, (np.bool_,)):
        return bool(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.floating):
        return float(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"not JSON serialisable: {type(x)}")


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def evaluate(model, reference, sset: StrategySet, spec: RiskSpec, se_trials: int = 100,
             seed: int = 0, level: int = 0) -> EvalReport:
    """Full comparison of model scenarios against reference scenarios at one level."""
    mp, rp = pnl_batch(sset, model), pnl_batch(sset, reference)
    alpha = spec.levels[level]
    n_model, n_ref = mp.shape[1], rp.shape[1]
    mv, me = empirical_var_es_rows(mp, alpha)
    rv, re = empirical_var_es_rows(rp, alpha)
    rel = relative_error_estimates(mv, me, rv, re)
    rng = stream(seed, "eval.se")
    # subsamples of the reference at the model's size; bootstrap once that is the whole sample
    se_mean, se_std = sampling_error(rp, spec.level(level), n_model, se_trials, rng,
                                     replace=n_model >= n_ref)
    stats, rej = score_based_test(mv, me, rv, re, rp, spec, level)
    counts, lr, cov_rej = coverage_test(mv, rp, alpha)
    rf = {}
    for k in range(mp.shape[0]):
        rf[(k, "model")] = rank_frequency(mp[k])
        rf[(k, "reference")] = rank_frequency(rp[k])
    return EvalReport(
        strategies=[s.to_dict() for s in sset.strategies],
        alpha=alpha,
        n_model=n_model,
        n_reference=n_ref,
        model_var=mv.tolist(), model_es=me.tolist(), ref_var=rv.tolist(), ref_es=re.tolist(),
        relative_error=rel,
        sampling_error=se_mean,
        sampling_error_std=se_std,
        corr_diff=corr_diff(reference, model),
        autocorr_diff=autocorr_diff(reference, model),
        score_stat=stats.tolist(), score_reject=[bool(x) for x in rej],
        coverage_violations=[int(c) for c in counts], coverage_lr=lr.tolist(),
        coverage_reject=[bool(x) for x in cov_rej],
        quantile_divergence=quantile_divergence(rp, mp, alpha),
        score_divergence=score_divergence(rp, mp, spec, level),
        rank_frequency=rf,
    )
