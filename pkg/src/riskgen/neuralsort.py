"""Differentiable relaxation of descending sort (NeuralSort).

Row ``i`` (1-based) of the relaxed permutation is a softmax over ``j`` of
``((n + 1 - 2i) * x_j - sum_l |x_j - x_l|) / tau``.

:func:`soft_sort_rows` / :func:`soft_sort_rows_backward` are the batched
kernels used by the autodiff op.  For row ``i`` the logits, read in
descending-sorted order, are a concave function evaluated at monotone points
and hence unimodal with the peak near position ``i``.  The kernel evaluates
only a band around the peak and widens it until every dropped logit sits at
least ``_BAND_GAP`` below the row max, so dropped softmax weights are below
``exp(-_BAND_GAP)`` and the result matches the dense computation to rounding.
The band loops run as compiled numba kernels; the vectorised numpy versions
are kept as a reference (``backend="numpy"``).
"""

from dataclasses import dataclass

import numba
import numpy as np

from riskgen.errors import DomainError

DEFAULT_TAU = 0.1
_BAND_GAP = 50.0


@dataclass(frozen=True)
class SortConfig:
    temperature: float = DEFAULT_TAU

    def __post_init__(self):
        if not (self.temperature > 0 and np.isfinite(self.temperature)):
            raise DomainError(f"temperature must be positive, got {self.temperature}")


def pairwise_abs_diff(x) -> np.ndarray:
    x = np.asarray(x, float).ravel()
    return np.abs(x[:, None] - x[None, :])


def _stable_softmax_rows(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    return z


def _rank_coefficients(n):
    return n + 1.0 - 2.0 * np.arange(1, n + 1)


def relaxed_perm(x, cfg: SortConfig = SortConfig()) -> np.ndarray:
    x = np.asarray(x, float).ravel()
    n = x.size
    if n == 0:
        raise DomainError("relaxed_perm needs n >= 1")
    b = pairwise_abs_diff(x).sum(axis=1)
    logits = (_rank_coefficients(n)[:, None] * x[None, :] - b[None, :]) / cfg.temperature
    return _stable_softmax_rows(logits)


def soft_sort(x, cfg: SortConfig = SortConfig()) -> np.ndarray:
    x = np.asarray(x, float).ravel()
    return relaxed_perm(x, cfg) @ x


def hard_sort_desc(x) -> np.ndarray:
    x = np.asarray(x, float).ravel()
    order = np.argsort(-x, kind="stable")
    return x[order]


# ---------------------------------------------------------------------------
# batched kernels


def _abs_diff_row_sums(xs_asc):
    """sum_l |x_j - x_l| for rows already sorted ascending, O(n) per row."""
    n = xs_asc.shape[1]
    csum = np.cumsum(xs_asc, axis=1)
    total = csum[:, -1:]
    r = np.arange(n)
    below = r * xs_asc - (csum - xs_asc)
    above = (total - csum) - (n - 1 - r) * xs_asc
    return below + above


@dataclass
class _SortCache:
    order: np.ndarray  # descending order, K x n
    xs: np.ndarray  # x in descending order
    half: int  # band half-width, in sorted positions
    p: np.ndarray  # softmax weights over the band, K x n x (2*half + 1)
    y: np.ndarray  # output, K x n
    tau: float


def _band_half_width(xs, b, coef, tau):
    """Smallest half-width whose band edges are negligible in every row.

    Row ``i`` peaks within the band once both edge logits fall ``_BAND_GAP``
    below the logit at position ``i``; by unimodality everything beyond the
    edges is smaller still.
    """
    k, n = xs.shape
    if n <= 2:
        return max(n - 1, 0)
    xt, bt = xs / tau, b / tau
    centre = coef * xt - bt
    floor = centre - _BAND_GAP

    def enough(half):
        # logit of row i at sorted position i - half, and at i + half
        left = coef[half:] * xt[:, :n - half] - bt[:, :n - half]
        right = coef[:n - half] * xt[:, half:] - bt[:, half:]
        return bool(np.all(left <= floor[:, half:]) and np.all(right <= floor[:, :n - half]))

    hi = 1
    while hi < n - 1 and not enough(hi):
        hi *= 2
    if hi >= n - 1:
        return n - 1
    lo = hi // 2  # not enough (or zero)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if enough(mid):
            hi = mid
        else:
            lo = mid
    return hi


def _windows(a, half, fill):
    k, n = a.shape
    padded = np.full((k, n + 2 * half), fill)
    padded[:, half:half + n] = a
    return np.lib.stride_tricks.sliding_window_view(padded, 2 * half + 1, axis=1)


@numba.njit(cache=True)
def _band_forward_jit(xs, bt, ct, half, gap):
    """Band softmax rows, walking out from each row's peak.

    ``bt = b / tau`` and ``ct = coef / tau``. Logits are unimodal along a row,
    so the walk stops at the first position ``gap`` below the peak on each
    side; positions beyond it have weight below ``exp(-gap)`` and stay zero.
    The global ``half`` bounds every walk.
    """
    k, n = xs.shape
    p = np.zeros((k, n, 2 * half + 1))
    y = np.empty((k, n))
    for r in range(k):
        xr = xs[r]
        br = bt[r]
        for i in range(n):
            lo = max(0, i - half)
            hi = min(n, i + half + 1)
            ci = ct[i]
            # climb to the peak from position i
            j = i
            top = ci * xr[j] - br[j]
            while j + 1 < hi and ci * xr[j + 1] - br[j + 1] > top:
                j += 1
                top = ci * xr[j] - br[j]
            while j - 1 >= lo and ci * xr[j - 1] - br[j - 1] > top:
                j -= 1
                top = ci * xr[j] - br[j]
            row = p[r, i]
            off = half - i
            tot = 0.0
            acc = 0.0
            a = j
            while a >= lo:
                d = ci * xr[a] - br[a] - top
                if d <= -gap:
                    break
                w = np.exp(d)
                row[a + off] = w
                tot += w
                acc += w * xr[a]
                a -= 1
            c = j + 1
            while c < hi:
                d = ci * xr[c] - br[c] - top
                if d <= -gap:
                    break
                w = np.exp(d)
                row[c + off] = w
                tot += w
                acc += w * xr[c]
                c += 1
            for q in range(a + 1 + off, c + off):
                row[q] /= tot
            y[r, i] = acc / tot
    return p, y


@numba.njit(cache=True)
def _band_backward_jit(xs, p, y, gy, coef, tau, half):
    k, n = xs.shape
    g_xs = np.zeros((k, n))
    g_b = np.zeros((k, n))
    for r in range(k):
        for i in range(n):
            lo = max(0, i - half)
            hi = min(n, i + half + 1)
            ci = coef[i] / tau
            g = gy[r, i]
            for j in range(lo, hi):
                direct = g * p[r, i, j - i + half]
                glog = direct * (xs[r, j] - y[r, i])
                g_xs[r, j] += direct + glog * ci
                g_b[r, j] -= glog / tau
    return g_xs, g_b


def _prepare_sort(x, tau, dense):
    x = np.asarray(x, float)
    if x.ndim != 2:
        raise DomainError("soft_sort_rows expects a 2-D array")
    k, n = x.shape
    order = np.argsort(-x, axis=1, kind="stable")
    xs = np.take_along_axis(x, order, axis=1)
    b = _abs_diff_row_sums(xs[:, ::-1])[:, ::-1]
    coef = _rank_coefficients(n)
    half = max(n - 1, 0) if dense else _band_half_width(xs, b, coef, tau)
    return order, xs, np.ascontiguousarray(b), coef, half


def soft_sort_rows(x: np.ndarray, tau: float, dense: bool = False, backend: str = "jit"):
    """Soft-sort every row of ``x`` (K x n) in decreasing order.

    Returns ``(y, cache)``; ``cache`` feeds :func:`soft_sort_rows_backward`.
    """
    order, xs, b, coef, half = _prepare_sort(x, tau, dense)
    if backend == "jit":
        p, y = _band_forward_jit(xs, b / tau, coef / tau, half, _BAND_GAP)
    else:
        xw = _windows(xs, half, 0.0)
        # padding positions get -inf logits through b
        bw = _windows(b / tau, half, np.inf)
        p = xw * (coef / tau)[None, :, None]
        p -= bw
        p -= p.max(axis=-1, keepdims=True)
        np.exp(p, out=p)
        p /= p.sum(axis=-1, keepdims=True)
        y = np.einsum("kiw,kiw->ki", p, xw)
    return y, _SortCache(order=order, xs=xs, half=half, p=p, y=y, tau=tau)


def _scatter_band(w, half):
    """out[:, i + o] += w[:, i, o + half] for all in-range positions."""
    k, n, _ = w.shape
    out = np.zeros((k, n))
    for j, o in enumerate(range(-half, half + 1)):
        lo, hi = max(0, -o), min(n, n - o)
        if lo < hi:
            out[:, lo + o:hi + o] += w[:, lo:hi, j]
    return out


def soft_sort_rows_backward(cache: _SortCache, gy: np.ndarray, backend: str = "jit") -> np.ndarray:
    """Vector-Jacobian product of :func:`soft_sort_rows`."""
    gy = np.ascontiguousarray(gy, dtype=float)
    k, n = gy.shape
    tau = cache.tau
    coef = _rank_coefficients(n)
    if backend == "jit":
        g_xs, g_b = _band_backward_jit(cache.xs, cache.p, cache.y, gy, coef, float(tau),
                                       cache.half)
    else:
        xw = _windows(cache.xs, cache.half, 0.0)
        direct = gy[:, :, None] * cache.p
        glog = direct * (xw - cache.y[:, :, None])
        g_xs = _scatter_band(direct + glog * (coef[None, :, None] / tau), cache.half)
        g_b = _scatter_band(glog, cache.half) * (-1.0 / tau)

    # d b_j / d x_m = delta_jm * sum_l sign(x_m - x_l) + sign(x_m - x_j)
    xa = cache.xs[:, ::-1]
    ga = g_b[:, ::-1]
    g_from_b = np.empty_like(ga)
    for row in range(k):
        xr, gr = xa[row], ga[row]
        lo = np.searchsorted(xr, xr, side="left")
        hi = np.searchsorted(xr, xr, side="right")
        cg = np.concatenate([[0.0], np.cumsum(gr)])
        less_g, greater_g = cg[lo], cg[-1] - cg[hi]
        g_from_b[row] = gr * (lo - (n - hi)) + less_g - greater_g
    g_xs += g_from_b[:, ::-1]

    gx = np.empty_like(g_xs)
    np.put_along_axis(gx, cache.order, g_xs, axis=1)
    return gx
