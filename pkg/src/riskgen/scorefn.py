"""Joint (VaR, ES) score function and empirical tail estimators.

Sign convention: PnL losses are negative, so VaR and ES of a loss-making
tail are negative numbers and ``es <= var``.
"""

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from riskgen.errors import DomainError

DEFAULT_W_ALPHA = 10.0
_INT_TOL = 1e-9


@dataclass(frozen=True)
class RiskSpec:
    levels: tuple
    w_alpha: tuple = None
    spectral_weights: tuple = None

    def __post_init__(self):
        levels = tuple(float(a) for a in np.atleast_1d(self.levels))
        if not levels:
            raise DomainError("RiskSpec needs at least one level")
        if any(not (0.0 < a < 1.0) for a in levels):
            raise DomainError(f"levels must lie in (0, 1), got {levels}")
        if any(b <= a for a, b in zip(levels, levels[1:])):
            raise DomainError(f"levels must be strictly increasing, got {levels}")
        object.__setattr__(self, "levels", levels)

        w = self.w_alpha
        if w is None:
            w = (DEFAULT_W_ALPHA,) * len(levels)
        else:
            w = tuple(float(x) for x in np.atleast_1d(w))
            if len(w) == 1 and len(levels) > 1:
                w = w * len(levels)
        if len(w) != len(levels):
            raise DomainError("w_alpha must have one entry per level")
        if any(not np.isfinite(x) or x < 1.0 for x in w):
            raise DomainError(f"w_alpha must be >= 1, got {w}")
        object.__setattr__(self, "w_alpha", w)

        p = self.spectral_weights
        if p is None:
            p = (1.0 / len(levels),) * len(levels) if len(levels) > 1 else (1.0,)
        else:
            p = tuple(float(x) for x in np.atleast_1d(p))
        if len(p) != len(levels):
            raise DomainError("spectral_weights must have one entry per level")
        if any(x < 0 for x in p) or abs(math.fsum(p) - 1.0) > 1e-12:
            raise DomainError(f"spectral_weights must be nonnegative and sum to 1, got {p}")
        object.__setattr__(self, "spectral_weights", p)

    @classmethod
    def single(cls, alpha=0.05, w_alpha=DEFAULT_W_ALPHA):
        return cls(levels=(alpha,), w_alpha=(w_alpha,))

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    @property
    def alpha(self) -> float:
        if self.n_levels != 1:
            raise DomainError("alpha is only defined for a single-level spec")
        return self.levels[0]

    @property
    def alpha_min(self) -> float:
        return self.levels[0]

    def level(self, m: int) -> "RiskSpec":
        return RiskSpec(levels=(self.levels[m],), w_alpha=(self.w_alpha[m],))

    def to_dict(self) -> dict:
        return {
            "levels": list(self.levels),
            "w_alpha": list(self.w_alpha),
            "spectral_weights": list(self.spectral_weights),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RiskSpec":
        return cls(
            levels=tuple(d["levels"]),
            w_alpha=tuple(d["w_alpha"]) if d.get("w_alpha") is not None else None,
            spectral_weights=(
                tuple(d["spectral_weights"]) if d.get("spectral_weights") is not None else None
            ),
        )


@dataclass(frozen=True)
class TailEstimate:
    var: float
    es: float


def _require_single(spec: RiskSpec):
    if spec.n_levels != 1:
        raise DomainError("single-level RiskSpec required")
    return spec.levels[0], spec.w_alpha[0]


def score(spec: RiskSpec, v, e, x):
    """Score of the candidate pair ``(v, e)`` against the realisation ``x``.

    Vectorised over numpy-broadcastable ``v``, ``e`` and ``x``; returns a
    float for scalar inputs.
    """
    alpha, w = _require_single(spec)
    v, e, x = np.asarray(v, float), np.asarray(e, float), np.asarray(x, float)
    if not (np.all(np.isfinite(v)) and np.all(np.isfinite(e)) and np.all(np.isfinite(x))):
        raise DomainError("score inputs must be finite")
    hit = (x <= v).astype(float)
    out = 0.5 * w * (hit - alpha) * (x * x - v * v) + hit * e * (v - x) + alpha * e * (0.5 * e - v)
    return float(out) if out.ndim == 0 else out


def expected_score(spec: RiskSpec, v, e, samples) -> float:
    """Sample mean of :func:`score` over ``samples``."""
    samples = np.asarray(samples, float).ravel()
    if samples.size == 0:
        raise DomainError("expected_score needs at least one sample")
    return float(np.mean(score(spec, v, e, samples)))


def _tail_counts(n: int, alpha: float):
    an = alpha * n
    k_var = math.ceil(an - _INT_TOL)
    k_es = math.floor(an + _INT_TOL)
    return max(k_var, 1), k_es


def min_samples(alpha: float) -> int:
    """Smallest sample size with at least one point in the alpha-tail."""
    return math.ceil(1.0 / alpha - _INT_TOL)


def empirical_var_es(samples, alpha: float) -> TailEstimate:
    """Order-statistic VaR and ES at level ``alpha``.

    VaR is the ceil(alpha*n)-th smallest sample, ES the mean of the
    floor(alpha*n) smallest.
    """
    x = np.sort(np.asarray(samples, float).ravel(), kind="stable")
    n = x.size
    k_var, k_es = _tail_counts(n, alpha)
    if k_es < 1:
        raise DomainError(
            f"need at least {min_samples(alpha)} samples for alpha={alpha}, got {n}"
        )
    return TailEstimate(var=float(x[k_var - 1]), es=float(np.mean(x[:k_es])))


def empirical_var_es_rows(pnl: np.ndarray, alpha: float):
    """Row-wise :func:`empirical_var_es` for a K x n matrix; returns (var, es) arrays."""
    pnl = np.atleast_2d(np.asarray(pnl, float))
    n = pnl.shape[1]
    k_var, k_es = _tail_counts(n, alpha)
    if k_es < 1:
        raise DomainError(
            f"need at least {min_samples(alpha)} samples for alpha={alpha}, got {n}"
        )
    x = np.sort(pnl, axis=1, kind="stable")
    return x[:, k_var - 1].copy(), x[:, :k_es].mean(axis=1)


def check_weight_constraint(spec: RiskSpec, estimates: Sequence[TailEstimate]) -> bool:
    """Warn when ES/VaR >= W_alpha fails for any estimate; never raises."""
    ok = True
    for est in estimates:
        for w in spec.w_alpha:
            if est.var < 0 and est.es / est.var < w:
                ok = False
    if not ok:
        warnings.warn(
            "ES/VaR ratio below W_alpha for some strategies; the score is still "
            "used as configured",
            RuntimeWarning,
            stacklevel=2,
        )
    return ok


def landscape_hessian(spec: RiskSpec, v: float, e: float, samples) -> np.ndarray:
    """Central finite-difference Hessian of :func:`expected_score` at (v, e)."""
    samples = np.asarray(samples, float).ravel()
    h = 1e-4 * max(1.0, abs(v), abs(e))

    def s(dv, de):
        return expected_score(spec, v + dv, e + de, samples)

    s00 = s(0.0, 0.0)
    hvv = (s(h, 0.0) - 2.0 * s00 + s(-h, 0.0)) / (h * h)
    hee = (s(0.0, h) - 2.0 * s00 + s(0.0, -h)) / (h * h)
    hve = (s(h, h) - s(h, -h) - s(-h, h) + s(-h, -h)) / (4.0 * h * h)
    return np.array([[hvv, hve], [hve, hee]])


def exp_h2_counterexample(v: float, e: float, alpha: float = 0.05) -> float:
    """Closed-form second e-derivative of the expected score for H2(e) = exp(e).

    Uniform[-1, 1] PnL at level 0.05; negative values show the landscape is
    not convex in e far in the tail.
    """
    return math.exp(e) / alpha * (0.25 * (v + 0.9) ** 2 + 0.0475 + alpha + 0.05 * e)


def multilevel_score(spec: RiskSpec, estimates: Sequence[TailEstimate], x):
    """Spectral-weighted sum of per-level scores."""
    if len(estimates) != spec.n_levels:
        raise DomainError(
            f"expected {spec.n_levels} estimates, got {len(estimates)}"
        )
    total = 0.0
    for m, est in enumerate(estimates):
        total = total + spec.spectral_weights[m] * score(spec.level(m), est.var, est.es, x)
    return total


def grid_argmin(spec: RiskSpec, samples, v_grid, e_grid):
    """Grid minimiser of the expected score; exact over the grid.

    Uses the sorted-sample prefix sums so every grid point costs O(log n).
    """
    alpha, w = _require_single(spec)
    x = np.sort(np.asarray(samples, float).ravel())
    n = x.size
    csum = np.concatenate([[0.0], np.cumsum(x)])
    csq = np.concatenate([[0.0], np.cumsum(x * x)])
    v = np.asarray(v_grid, float)[:, None]
    e = np.asarray(e_grid, float)[None, :]
    cnt = np.searchsorted(x, v[:, 0], side="right")
    f = (cnt / n)[:, None]
    sx = (csum[cnt] / n)[:, None]
    sxx = (csq[cnt] / n)[:, None]
    mean_sq = csq[-1] / n
    # mean over samples of each score term, closed form in the tail moments
    s = (
        0.5 * w * ((sxx - alpha * mean_sq) - v * v * (f - alpha))
        + e * (v * f - sx)
        + alpha * e * (0.5 * e - v)
    )
    i, j = np.unravel_index(np.argmin(s), s.shape)
    return float(v[i, 0]), float(e[0, j]), s
