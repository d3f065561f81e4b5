"""Eigenportfolios from the empirical correlation matrix of asset returns."""

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from riskgen.errors import DomainError


@dataclass
class EigenBasis:
    eigenvalues: np.ndarray  # descending
    eigenvectors: np.ndarray  # columns q_i
    stds: np.ndarray
    weights: np.ndarray  # row i is the L1-normalised i-th eigenportfolio
    corr: np.ndarray

    def to_dict(self) -> dict:
        return {
            "eigenvalues": self.eigenvalues.tolist(),
            "weights": self.weights.tolist(),
            "stds": self.stds.tolist(),
        }

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def _fix_sign(v):
    """Flip so the first component that is not ~0 is positive."""
    scale = np.abs(v).max()
    nz = np.flatnonzero(np.abs(v) > 1e-12 * max(scale, 1e-300))
    return -v if nz.size and v[nz[0]] < 0 else v


def eigenportfolios(returns) -> EigenBasis:
    """Eigen-decompose the correlation of ``returns`` (n x M).

    Portfolio weights are the eigenvectors deflated by the per-asset
    standard deviations and scaled to unit L1 norm.
    """
    x = np.asarray(returns, float)
    if x.ndim != 2:
        raise DomainError("returns must be an n x M matrix")
    n, m = x.shape
    if n <= m:
        raise DomainError(f"need more samples than assets, got n={n}, M={m}")
    std = x.std(axis=0, ddof=1)
    if not np.all(std > 0):
        raise DomainError("every asset needs positive standard deviation")
    corr = np.corrcoef(x, rowvar=False).reshape(m, m)
    vals, vecs = np.linalg.eigh(corr)
    order = np.argsort(-vals, kind="stable")
    vals, vecs = vals[order], vecs[:, order]
    if vals[-1] < 1e-10 * vals[0]:
        warnings.warn("correlation matrix is rank deficient", RuntimeWarning, stacklevel=2)
    vals = np.where(np.abs(vals) < 1e-12, 0.0, vals)
    vecs = np.column_stack([_fix_sign(vecs[:, i]) for i in range(m)])
    raw = vecs / std[:, None]
    weights = np.column_stack([_fix_sign(raw[:, i]) / np.abs(raw[:, i]).sum()
                               for i in range(m)]).T
    return EigenBasis(eigenvalues=vals, eigenvectors=vecs, stds=std, weights=weights, corr=corr)


def explained_variance_ratio(basis: EigenBasis) -> np.ndarray:
    lam = np.clip(basis.eigenvalues, 0.0, None)
    return lam / lam.sum()
