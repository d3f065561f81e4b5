"""Benchmark trading strategies mapping an M x T increment scenario to a PnL.

Dynamic strategies hold ``clip(mean of the last lag increments / scale, -1, 1)``
units of one asset (trend following) or the negation of that position (mean
reversion), entering from step ``lag + 1`` onward.
"""

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from riskgen import autodiff as ad
from riskgen.errors import DomainError
from riskgen.rng import stream

_L1_TOL = 1e-9


def _check_l1(weights, what):
    w = tuple(float(x) for x in weights)
    if not w or not all(math.isfinite(x) for x in w):
        raise DomainError(f"{what} weights must be finite and non-empty")
    if abs(math.fsum(abs(x) for x in w) - 1.0) > _L1_TOL:
        raise DomainError(f"{what} weights must have unit L1 norm, got {w}")
    return w


def l1_normalize(weights) -> tuple:
    w = np.asarray(weights, float)
    norm = np.abs(w).sum()
    if not norm > 0:
        raise DomainError("cannot L1-normalise a zero vector")
    return tuple(float(x) for x in w / norm)


@dataclass(frozen=True)
class BuyHold:
    asset: int
    kind = "buy_hold"

    def to_dict(self):
        return {"kind": self.kind, "asset": self.asset}


@dataclass(frozen=True)
class StaticPortfolio:
    weights: tuple
    kind = "static"

    def __post_init__(self):
        object.__setattr__(self, "weights", _check_l1(self.weights, "portfolio"))

    def to_dict(self):
        return {"kind": self.kind, "weights": list(self.weights)}


@dataclass(frozen=True)
class Eigen:
    weights: tuple
    kind = "eigen"

    def __post_init__(self):
        object.__setattr__(self, "weights", _check_l1(self.weights, "eigenportfolio"))

    def to_dict(self):
        return {"kind": self.kind, "weights": list(self.weights)}


@dataclass(frozen=True)
class _Dynamic:
    asset: int
    lag: int = 1
    scale: float = 1.0

    def __post_init__(self):
        if int(self.lag) != self.lag or self.lag < 1:
            raise DomainError(f"lag must be an integer >= 1, got {self.lag}")
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise DomainError(f"clip scale must be positive, got {self.scale}")
        object.__setattr__(self, "lag", int(self.lag))
        object.__setattr__(self, "scale", float(self.scale))

    def to_dict(self):
        return {"kind": self.kind, "asset": self.asset, "lag": self.lag, "scale": self.scale}


@dataclass(frozen=True)
class TrendFollow(_Dynamic):
    kind = "trend_follow"
    sign = 1.0


@dataclass(frozen=True)
class MeanReversion(_Dynamic):
    kind = "mean_reversion"
    sign = -1.0


_KINDS = {c.kind: c for c in (BuyHold, StaticPortfolio, Eigen, TrendFollow, MeanReversion)}


def strategy_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("kind", None)
    if kind not in _KINDS:
        raise DomainError(f"unknown strategy kind {kind!r}")
    try:
        return _KINDS[kind](**d)
    except TypeError as exc:
        raise DomainError(f"bad fields for {kind}: {exc}") from exc


@dataclass(frozen=True)
class StrategySet:
    strategies: tuple
    weights: tuple = None  # loss weights, uniform by default

    def __post_init__(self):
        strategies = tuple(self.strategies)
        if not strategies:
            raise DomainError("StrategySet must be non-empty")
        object.__setattr__(self, "strategies", strategies)
        w = self.weights
        if w is None:
            w = (1.0 / len(strategies),) * len(strategies)
        w = tuple(float(x) for x in w)
        if len(w) != len(strategies) or any(x < 0 for x in w) or abs(math.fsum(w) - 1) > 1e-9:
            raise DomainError("strategy weights must be nonnegative, one per strategy, summing to 1")
        object.__setattr__(self, "weights", w)

    def __len__(self):
        return len(self.strategies)

    def to_dict(self) -> dict:
        return {"strategies": [s.to_dict() for s in self.strategies],
                "weights": list(self.weights)}

    @classmethod
    def from_dict(cls, d: dict) -> "StrategySet":
        if "strategies" not in d:
            raise DomainError("strategy document needs a 'strategies' list")
        return cls(tuple(strategy_from_dict(s) for s in d["strategies"]), d.get("weights"))

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def from_json(cls, path) -> "StrategySet":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _check_asset(spec, n_assets):
    if not 0 <= spec.asset < n_assets:
        raise DomainError(f"asset index {spec.asset} out of range for {n_assets} assets")


def _check_width(spec, n_assets):
    if len(spec.weights) != n_assets:
        raise DomainError(f"{len(spec.weights)} weights for {n_assets} assets")


def pnl(spec, scenario) -> float:
    """Terminal PnL of one strategy on one M x T increment matrix."""
    x = np.asarray(scenario, float)
    if x.ndim != 2 or not np.all(np.isfinite(x)):
        raise DomainError("scenario must be a finite M x T matrix")
    n_assets, n_steps = x.shape
    if isinstance(spec, BuyHold):
        _check_asset(spec, n_assets)
        return float(x[spec.asset].sum())
    if isinstance(spec, (StaticPortfolio, Eigen)):
        _check_width(spec, n_assets)
        return float(np.dot(spec.weights, x.sum(axis=1)))
    if isinstance(spec, _Dynamic):
        _check_asset(spec, n_assets)
        path = x[spec.asset]
        total = 0.0
        for t in range(spec.lag, n_steps):
            signal = path[t - spec.lag:t].mean() / spec.scale
            total += spec.sign * min(1.0, max(-1.0, signal)) * path[t]
        return float(total)
    raise DomainError(f"unknown strategy {spec!r}")


def lipschitz_bound(spec, n_assets: int, n_steps: int, radius: float = None) -> float:
    """Upper bound on |pnl(x) - pnl(y)| / ||x - y||_F.

    Dynamic strategies are only Lipschitz on bounded sets; their bound
    ``sqrt(T - lag) + radius / scale`` holds on the Frobenius ball of the given
    radius and is infinite when no radius is supplied.
    """
    if isinstance(spec, BuyHold):
        return math.sqrt(n_steps)
    if isinstance(spec, (StaticPortfolio, Eigen)):
        return math.sqrt(n_assets * n_steps) * max(abs(w) for w in spec.weights)
    if isinstance(spec, _Dynamic):
        if radius is None:
            return math.inf
        return math.sqrt(max(n_steps - spec.lag, 0)) + radius / spec.scale
    raise DomainError(f"unknown strategy {spec!r}")


@dataclass
class _Compiled:
    """Matrices that evaluate a StrategySet on flattened (n x M*T) scenarios."""

    linear: np.ndarray  # M*T x K_lin
    pre: np.ndarray  # M*T x (U*T): trend signal / scale per distinct dynamic rule
    select: np.ndarray  # (U*T,) flat column of the increment each position multiplies
    block: np.ndarray  # (U*T) x U: sums each rule's T terms
    signs: np.ndarray  # U x D: +1 trend following, -1 mean reversion
    order: np.ndarray  # column permutation back to the set's order
    n_dynamic: int


def compile_strategies(sset: StrategySet, n_assets: int, n_steps: int) -> _Compiled:
    mt = n_assets * n_steps
    lin_cols, dyn = [], []
    lin_idx, dyn_idx = [], []
    for k, spec in enumerate(sset.strategies):
        if isinstance(spec, BuyHold):
            _check_asset(spec, n_assets)
            col = np.zeros(mt)
            col[spec.asset * n_steps:(spec.asset + 1) * n_steps] = 1.0
            lin_cols.append(col)
            lin_idx.append(k)
        elif isinstance(spec, (StaticPortfolio, Eigen)):
            _check_width(spec, n_assets)
            lin_cols.append(np.repeat(np.asarray(spec.weights), n_steps))
            lin_idx.append(k)
        elif isinstance(spec, _Dynamic):
            _check_asset(spec, n_assets)
            dyn.append(spec)
            dyn_idx.append(k)
        else:
            raise DomainError(f"unknown strategy {spec!r}")
    # mean reversion and trend following on the same (asset, lag, scale) hold
    # opposite positions (clip is odd), so each such triple is evaluated once
    keys = sorted({(sp.asset, sp.lag, sp.scale) for sp in dyn})
    u = len(keys)
    pre = np.zeros((mt, u * n_steps))
    select = np.zeros(u * n_steps, dtype=np.intp)
    block = np.zeros((u * n_steps, u))
    for j, (asset, lag, scale) in enumerate(keys):
        base = asset * n_steps
        for t in range(lag, n_steps):
            col = j * n_steps + t
            pre[base + t - lag:base + t, col] = 1.0 / (lag * scale)
            select[col] = base + t
        block[j * n_steps:(j + 1) * n_steps, j] = 1.0
    signs = np.zeros((u, len(dyn)))
    for i, sp in enumerate(dyn):
        signs[keys.index((sp.asset, sp.lag, sp.scale)), i] = sp.sign
    linear = np.stack(lin_cols, axis=1) if lin_cols else np.zeros((mt, 0))
    order = np.argsort(np.array(lin_idx + dyn_idx), kind="stable")
    return _Compiled(linear=linear, pre=pre, select=select, block=block, signs=signs,
                     order=order, n_dynamic=len(dyn))


def _flat(batch):
    x = getattr(batch, "increments", batch)
    x = np.asarray(x, float)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3:
        raise DomainError("scenario batch must have shape (n, M, T)")
    return x.reshape(x.shape[0], -1), x.shape[1], x.shape[2]


def pnl_batch(sset: StrategySet, batch, compiled: _Compiled = None) -> np.ndarray:
    """K x n PnL matrix for a ScenarioBatch or an (n, M, T) array."""
    flat, n_assets, n_steps = _flat(batch)
    c = compiled or compile_strategies(sset, n_assets, n_steps)
    parts = [flat @ c.linear]
    if c.n_dynamic:
        pos = np.clip(flat @ c.pre, -1.0, 1.0)
        parts.append(((pos * flat[:, c.select]) @ c.block) @ c.signs)
    out = np.concatenate(parts, axis=1)[:, c.order]
    return out.T


def pnl_graph(compiled: _Compiled, scenarios: ad.Node) -> ad.Node:
    """Differentiable K x n PnL matrix from an n x (M*T) scenario node."""
    tape = scenarios.tape
    parts = [ad.matmul(scenarios, tape.constant(compiled.linear))]
    if compiled.n_dynamic:
        pos = ad.clip(ad.matmul(scenarios, tape.constant(compiled.pre)), -1.0, 1.0)
        inc = ad.take_columns(scenarios, compiled.select)
        trend = ad.matmul(ad.mul(pos, inc), tape.constant(compiled.block))
        parts.append(ad.matmul(trend, tape.constant(compiled.signs)))
    out = parts[0] if len(parts) == 1 else ad.concat(parts, axis=1)
    return ad.transpose(ad.take_columns(out, compiled.order))


def _random_l1_weights(rng, n_assets):
    # uniform on the L1 sphere: Dirichlet(1, ..., 1) magnitudes with random signs
    mag = rng.dirichlet(np.ones(n_assets))
    signs = rng.choice([-1.0, 1.0], size=n_assets)
    return l1_normalize(mag * signs)


def default_strategy_set(n_assets: int, seed: int = 0, n_static: int = 50, lag: int = 1,
                         scales=None) -> StrategySet:
    """Buy-and-hold, random static portfolios, mean reversion and trend following.

    One buy-and-hold, one mean-reversion and one trend-following strategy per
    asset. ``scales`` are per-asset clip scales (1.0 on standardised data).
    """
    rng = stream(seed, "strategies")
    scales = np.ones(n_assets) if scales is None else np.asarray(scales, float)
    specs = [BuyHold(m) for m in range(n_assets)]
    specs += [StaticPortfolio(_random_l1_weights(rng, n_assets)) for _ in range(n_static)]
    specs += [MeanReversion(m, lag, float(scales[m])) for m in range(n_assets)]
    specs += [TrendFollow(m, lag, float(scales[m])) for m in range(n_assets)]
    return StrategySet(tuple(specs))


def eigen_strategy_set(basis, n_portfolios: int = None) -> StrategySet:
    """Strategies holding the leading eigenportfolios of an EigenBasis."""
    w = basis.weights if n_portfolios is None else basis.weights[:n_portfolios]
    return StrategySet(tuple(Eigen(l1_normalize(row)) for row in w))
