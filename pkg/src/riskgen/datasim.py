"""Synthetic multi-asset increment simulation and CSV price ingestion.

Simulation runs in fixed-size scenario blocks, each drawing from its own
seeded stream, so the output does not depend on how blocks are spread over
worker processes.
"""

import csv
import json
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path

import numpy as np

from riskgen.errors import DomainError
from riskgen.networks import NoiseSpec
from riskgen.rng import stream

TRADING_DAYS = 255
BURN_IN = 500
BLOCK_SIZE = 256
DEFAULT_STRIDE = 7


@dataclass(frozen=True)
class AssetProcess:
    """One asset's increment dynamics driven by its Gaussian driver u_t."""

    kind: str  # gaussian | ar | garch
    phi: float = 0.0
    nu: float = 5.0
    gamma: float = 0.05
    kappa: float = 0.1
    beta: float = 0.85

    def __post_init__(self):
        if self.kind not in ("gaussian", "ar", "garch"):
            raise DomainError(f"unknown asset process {self.kind!r}")
        if self.kind == "ar" and not abs(self.phi) < 1:
            raise DomainError(f"AR coefficient must satisfy |phi| < 1, got {self.phi}")
        if self.kind == "garch":
            if not self.nu > 2:
                raise DomainError(f"GARCH shock degrees of freedom must exceed 2, got {self.nu}")
            if self.gamma <= 0 or self.kappa < 0 or self.beta < 0:
                raise DomainError("GARCH parameters must be nonnegative with gamma > 0")
            if not self.kappa + self.beta < 1:
                raise DomainError(
                    f"GARCH needs kappa + beta < 1, got {self.kappa + self.beta}")

    def to_dict(self):
        return dict(self.__dict__)


def _sample_corr(rng, m, max_tries=10_000):
    """Symmetric unit-diagonal matrix with U[0, 1] off-diagonals, redrawn until PSD."""
    for _ in range(max_tries):
        c = np.eye(m)
        iu = np.triu_indices(m, 1)
        c[iu] = rng.uniform(0.0, 1.0, size=len(iu[0]))
        c = c + np.triu(c, 1).T
        if np.linalg.eigvalsh(c)[0] >= 0:
            return c
    raise DomainError("could not draw a PSD correlation matrix")


@dataclass(frozen=True)
class SynthConfig:
    assets: tuple
    vols: tuple  # annualised volatilities s_m
    corr: np.ndarray = field(compare=False)
    n_steps: int = 100
    burn_in: int = BURN_IN
    seed: int = 0

    def __post_init__(self):
        assets = tuple(a if isinstance(a, AssetProcess) else AssetProcess(**a)
                       for a in self.assets)
        object.__setattr__(self, "assets", assets)
        object.__setattr__(self, "vols", tuple(float(s) for s in self.vols))
        corr = np.array(self.corr, dtype=float)
        m = len(assets)
        if m < 1 or len(self.vols) != m or corr.shape != (m, m):
            raise DomainError("assets, vols and corr must agree on the asset count")
        if any(not s > 0 for s in self.vols):
            raise DomainError("volatilities must be positive")
        if not np.allclose(corr, corr.T, atol=1e-12) or not np.all(np.isfinite(corr)):
            raise DomainError("correlation matrix must be finite and symmetric")
        if self.n_steps < 1 or self.burn_in < 0:
            raise DomainError("n_steps must be >= 1 and burn_in >= 0")
        object.__setattr__(self, "corr", corr)

    @property
    def n_assets(self) -> int:
        return len(self.assets)

    @property
    def cov(self) -> np.ndarray:
        s = np.asarray(self.vols) / (TRADING_DAYS * self.n_steps)
        return np.outer(s, s) * self.corr

    @classmethod
    def default(cls, seed: int = 0, n_steps: int = 100) -> "SynthConfig":
        """Five assets: Gaussian, AR(1) with 0.5 and -0.15, GARCH-t(5) and GARCH-t(10)."""
        rng = stream(seed, "config")
        vols = rng.uniform(0.3, 0.5, size=5)
        corr = _sample_corr(rng, 5)
        garch = [AssetProcess("garch", nu=nu, gamma=rng.uniform(0.03, 0.07),
                              kappa=rng.uniform(0.08, 0.12), beta=rng.uniform(0.825, 0.875))
                 for nu in (5.0, 10.0)]
        assets = (AssetProcess("gaussian"), AssetProcess("ar", phi=0.5),
                  AssetProcess("ar", phi=-0.15), *garch)
        return cls(assets, tuple(vols), corr, n_steps=n_steps, seed=seed)

    @classmethod
    def desk(cls, seed: int = 0, n_steps: int = 50) -> "SynthConfig":
        """Three assets: Gaussian, AR(1) with 0.5 and GARCH-t(5)."""
        rng = stream(seed, "config")
        vols = rng.uniform(0.3, 0.5, size=3)
        corr = _sample_corr(rng, 3)
        assets = (AssetProcess("gaussian"), AssetProcess("ar", phi=0.5),
                  AssetProcess("garch", nu=5.0, gamma=rng.uniform(0.03, 0.07),
                               kappa=rng.uniform(0.08, 0.12), beta=rng.uniform(0.825, 0.875)))
        return cls(assets, tuple(vols), corr, n_steps=n_steps, seed=seed)

    def to_dict(self) -> dict:
        return {
            "assets": [a.to_dict() for a in self.assets],
            "vols": list(self.vols),
            "corr": self.corr.tolist(),
            "n_steps": self.n_steps,
            "burn_in": self.burn_in,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        preset = d.pop("preset", None)
        if preset is not None:
            base = {"default": cls.default, "desk": cls.desk}.get(preset)
            if base is None:
                raise DomainError(f"unknown preset {preset!r}")
            kw = {k: d[k] for k in ("seed", "n_steps") if k in d}
            return base(**kw)
        try:
            return cls(**d)
        except TypeError as exc:
            raise DomainError(f"bad synthetic config: {exc}") from exc


@dataclass
class ScenarioBatch:
    increments: np.ndarray  # n x M x T, standardised
    mean: np.ndarray  # per-asset scaler mean
    std: np.ndarray  # per-asset scaler std
    provenance: str = "synthetic"
    asset_names: tuple = None

    def __post_init__(self):
        self.increments = np.asarray(self.increments, float)
        if self.increments.ndim != 3:
            raise DomainError("increments must have shape (n, M, T)")
        self.mean = np.asarray(self.mean, float).ravel()
        self.std = np.asarray(self.std, float).ravel()
        m = self.increments.shape[1]
        if self.mean.shape != (m,) or self.std.shape != (m,):
            raise DomainError("one scaler (mean, std) per asset required")
        if not np.all(self.std > 0):
            raise DomainError("scaler std must be positive")
        if self.asset_names is None:
            self.asset_names = tuple(f"asset{i}" for i in range(m))

    @property
    def n(self) -> int:
        return self.increments.shape[0]

    @property
    def n_assets(self) -> int:
        return self.increments.shape[1]

    @property
    def n_steps(self) -> int:
        return self.increments.shape[2]

    def flat(self) -> np.ndarray:
        return self.increments.reshape(self.n, -1)

    def raw(self) -> np.ndarray:
        """Increments in original price units."""
        return self.increments * self.std[None, :, None] + self.mean[None, :, None]

    def subset(self, idx) -> "ScenarioBatch":
        return ScenarioBatch(self.increments[idx], self.mean, self.std, self.provenance,
                             self.asset_names)

    def scalers_dict(self) -> dict:
        return {
            "assets": list(self.asset_names),
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "n_steps": self.n_steps,
            "provenance": self.provenance,
        }


def standardize(raw: np.ndarray, mean=None, std=None):
    """Standardise per asset; scalers are fitted on ``raw`` unless given."""
    if mean is None:
        mean = raw.mean(axis=(0, 2))
        std = raw.std(axis=(0, 2))
    mean, std = np.asarray(mean, float), np.asarray(std, float)
    if not np.all(std > 0):
        raise DomainError("an asset has zero standard deviation")
    return (raw - mean[None, :, None]) / std[None, :, None], mean, std


def _cov_factor(cov):
    w, v = np.linalg.eigh(cov)
    if w[0] < -1e-12 * max(1.0, abs(w[-1])):
        raise DomainError("covariance matrix is not positive semi-definite")
    return v * np.sqrt(np.clip(w, 0.0, None))


def _simulate_block(cfg: SynthConfig, block: int, size: int):
    """Raw increments and Gaussian drivers, each (size, M, T), for one block."""
    rng = stream(cfg.seed, "data", block)
    m, t_len, burn = cfg.n_assets, cfg.n_steps, cfg.burn_in
    total = burn + t_len
    factor = _cov_factor(cfg.cov)
    u = rng.standard_normal((size, total, m)) @ factor.T  # u_t ~ N(0, cov)
    out = np.empty((size, total, m))
    for j, proc in enumerate(cfg.assets):
        uj = u[:, :, j]
        if proc.kind == "gaussian":
            out[:, :, j] = uj
        elif proc.kind == "ar":
            x = np.empty_like(uj)
            prev = np.zeros(size)
            for t in range(total):
                prev = proc.phi * prev + uj[:, t]
                x[:, t] = prev
            out[:, :, j] = x
        else:
            chi = rng.chisquare(proc.nu, size=(size, total))
            eta = uj / np.sqrt(chi / proc.nu)
            sig2 = np.full(size, proc.gamma / (1.0 - proc.kappa - proc.beta))
            x = np.empty_like(uj)
            for t in range(total):
                x[:, t] = np.sqrt(sig2) * eta[:, t]
                sig2 = proc.gamma + proc.kappa * x[:, t] ** 2 + proc.beta * sig2
            out[:, :, j] = x
    keep = slice(burn, total)
    return (np.ascontiguousarray(out[:, keep].transpose(0, 2, 1)),
            np.ascontiguousarray(u[:, keep].transpose(0, 2, 1)))


def _block_job(args):
    return _simulate_block(*args)


def simulate_raw(cfg: SynthConfig, n: int, workers: int = 1, return_drivers: bool = False):
    """Unstandardised increments (n, M, T); optionally also the Gaussian drivers."""
    if n < 1:
        raise DomainError(f"need n >= 1 scenarios, got {n}")
    _cov_factor(cfg.cov)
    jobs = [(cfg, b, min(BLOCK_SIZE, n - b * BLOCK_SIZE))
            for b in range(math.ceil(n / BLOCK_SIZE))]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_block_job, jobs))
    else:
        parts = [_block_job(j) for j in jobs]
    raw = np.concatenate([p[0] for p in parts])
    if return_drivers:
        return raw, np.concatenate([p[1] for p in parts])
    return raw


def simulate(cfg: SynthConfig, n: int, workers: int = 1, scalers=None) -> ScenarioBatch:
    """Simulate ``n`` scenarios and standardise them per asset.

    ``scalers`` is an optional ``(mean, std)`` pair, e.g. from a training set,
    used instead of fitting on the new sample.
    """
    raw = simulate_raw(cfg, n, workers=workers)
    mean, std = (None, None) if scalers is None else scalers
    inc, mean, std = standardize(raw, mean, std)
    return ScenarioBatch(inc, mean, std, "synthetic")


def sample_noise(spec: NoiseSpec, batch: int, rng: np.random.Generator = None) -> np.ndarray:
    """``batch`` i.i.d. noise vectors of width ``spec.dim``."""
    rng = rng if rng is not None else stream(spec.seed, "noise")
    if spec.dist == "student_t":
        return rng.standard_t(spec.nu, size=(batch, spec.dim))
    return rng.uniform(-1.0, 1.0, size=(batch, spec.dim))


# ---------------------------------------------------------------------------
# CSV input / output


def _parse_time(s: str, line: int):
    try:
        return datetime.fromisoformat(s.strip())
    except ValueError as exc:
        raise DomainError(f"line {line}: bad ISO-8601 timestamp {s!r}") from exc


def read_price_csv(path):
    """Timestamps, asset names and a (rows x M) price matrix; drops incomplete rows."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration as exc:
            raise DomainError(f"{path}: empty file") from exc
        names = tuple(h.strip() for h in header[1:])
        if not names:
            raise DomainError(f"{path}: no price columns")
        stamps, rows, dropped = [], [], 0
        for line, rec in enumerate(reader, start=2):
            if not rec:
                continue
            vals = rec[1:]
            try:
                prices = [float(v) for v in vals]
            except ValueError:
                prices = None
            if len(vals) != len(names) or prices is None or not all(map(math.isfinite, prices)):
                dropped += 1
                continue
            stamps.append(_parse_time(rec[0], line))
            rows.append(prices)
    if dropped:
        warnings.warn(f"dropped {dropped} rows with missing or invalid prices", RuntimeWarning,
                      stacklevel=2)
    for a, b in zip(stamps, stamps[1:]):
        if not b > a:
            raise DomainError(f"timestamps must be strictly increasing ({a} then {b})")
    return stamps, names, np.array(rows, dtype=float).reshape(len(rows), len(names))


def window_starts(n_rows: int, window: int, stride: int = DEFAULT_STRIDE):
    if window < 1 or stride < 1:
        raise DomainError("window and stride must be >= 1")
    if n_rows < window:
        raise DomainError(f"need at least {window} rows, got {n_rows}")
    return list(range(0, n_rows - window + 1, stride))


def ingest_csv(path, window: int, stride: int = DEFAULT_STRIDE) -> ScenarioBatch:
    """Overlapping length-``window`` scenarios of price increments from a CSV.

    Row ``r`` carries the increment ``p_r - p_{r-1}``; the first row has no
    predecessor and gets a zero increment, so every row starts a window slot.
    """
    _, names, prices = read_price_csv(path)
    starts = window_starts(prices.shape[0], window, stride)
    inc = np.diff(prices, axis=0, prepend=prices[:1])
    raw = np.stack([inc[s:s + window].T for s in starts])
    std = raw.std(axis=(0, 2))
    if not np.all(std > 0):
        bad = [names[i] for i in np.flatnonzero(~(std > 0))]
        raise DomainError(f"constant price column(s): {', '.join(bad)}")
    z, mean, std = standardize(raw)
    return ScenarioBatch(z, mean, std, "csv", names)


def write_scenarios_csv(batch: ScenarioBatch, path, raw: bool = True) -> None:
    """Long-format CSV (scenario_id, asset, t, increment); raw price units by default."""
    values = batch.raw() if raw else batch.increments
    n, m, t = values.shape
    with open(path, "w", newline="") as fh:
        fh.write("scenario_id,asset,t,increment\n")
        if n == 0:
            return
        sid, asset, step = np.meshgrid(np.arange(n), np.arange(m), np.arange(t), indexing="ij")
        lines = [f"{i},{a},{s},{v!r}" for i, a, s, v in
                 zip(sid.ravel().tolist(), asset.ravel().tolist(), step.ravel().tolist(),
                     values.ravel().tolist())]
        fh.write("\n".join(lines))
        fh.write("\n")


def write_scalers(batch: ScenarioBatch, path) -> None:
    Path(path).write_text(json.dumps(batch.scalers_dict(), indent=2) + "\n")


def read_scalers(path) -> dict:
    d = json.loads(Path(path).read_text())
    for key in ("mean", "std", "n_steps"):
        if key not in d:
            raise DomainError(f"{path}: scaler file lacks {key!r}")
    return d


def read_scenarios_csv(path, scalers: dict) -> ScenarioBatch:
    """Load a long-format scenario CSV and standardise it with ``scalers``."""
    mean, std = np.asarray(scalers["mean"], float), np.asarray(scalers["std"], float)
    m, t = mean.size, int(scalers["n_steps"])
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "scenario_id,asset,t,increment":
            raise DomainError(f"{path}: unexpected header {header!r}")
        body = fh.read()
    data = np.array([float(x) for x in body.replace("\n", ",").split(",") if x],
                    dtype=float) if body.strip() else np.zeros(0)
    if data.size % 4:
        raise DomainError(f"{path}: ragged rows")
    data = data.reshape(-1, 4)
    if data.shape[0] % (m * t):
        raise DomainError(f"{path}: row count {data.shape[0]} is not a multiple of M*T={m * t}")
    n = data.shape[0] // (m * t)
    raw = np.zeros((n, m, t))
    ids = data[:, :3].astype(np.int64)
    if n and (ids[:, 1].max() >= m or ids[:, 2].max() >= t or ids[:, 0].max() >= n
              or ids.min() < 0):
        raise DomainError(f"{path}: index out of range for M={m}, T={t}")
    raw[ids[:, 0], ids[:, 1], ids[:, 2]] = data[:, 3]
    z, mean, std = standardize(raw, mean, std)
    names = tuple(scalers.get("assets") or (f"asset{i}" for i in range(m)))
    return ScenarioBatch(z, mean, std, scalers.get("provenance", "synthetic"), names)
