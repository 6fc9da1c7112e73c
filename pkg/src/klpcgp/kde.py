"""Tensor-product Gaussian kernel density models.

A fitted model supplies joint/marginal densities, one-dimensional
conditional CDFs, and the triangular transform built from them: mapping a
point to the vector of conditional CDF values (each dimension conditioned
on the ones before it) sends the fitted distribution to independent
uniforms, and the inverse map turns uniform draws into samples from the
fitted density.  The inverse is solved per coordinate: the first coordinate
shares one CDF across a whole batch, so it is inverted on a fine grid with
local cubic refinement; later coordinates depend on each row's conditioning
values and fall back to bracketed bisection, vectorized across the batch.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .errors import BoundaryError, DegenerateDataError, FarFromSupportError

_INV_SQRT_2PI = 0.3989422804014327
_DEN_FLOOR = 1e-300        # conditional weight mass below this = off support
_U_EDGE = 1e-12            # inverse transform undefined this close to 0/1
_BRACKET_FACTOR = 10.0     # bracket = sample range +- 10 bandwidths
_CHUNK_ELEMS = 1 << 22     # cap on temporary (rows x samples) blocks


@dataclass(frozen=True)
class KdeModel:
    """Gaussian product-kernel density: samples (M, d), bandwidth (d,)."""

    samples: np.ndarray
    bandwidth: np.ndarray

    @property
    def count(self):
        return self.samples.shape[0]

    @property
    def dim(self):
        return self.samples.shape[1]


def fit(samples, bandwidth="silverman"):
    """Fit a kernel model; bandwidth is the per-dimension rule-of-thumb
    h_i = sigma_i * (4 / ((d + 2) M))^(1/(d+4)) unless given explicitly
    (scalar or per-dimension array)."""
    x = np.asarray(samples, dtype=float)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    if x.ndim != 2:
        raise ValueError("samples must be (M, d), got shape {}".format(x.shape))
    m, d = x.shape
    if m < 2:
        raise DegenerateDataError("need at least 2 samples, got {}".format(m))
    if not np.all(np.isfinite(x)):
        raise DegenerateDataError("samples contain non-finite values")

    if isinstance(bandwidth, str):
        if bandwidth != "silverman":
            raise ValueError("unknown bandwidth rule {!r}".format(bandwidth))
        sigma = np.std(x, axis=0, ddof=1)
        for n in range(d):
            if sigma[n] <= 0.0:
                raise DegenerateDataError(
                    "dimension {} has zero spread; cannot place kernels".format(n + 1))
        h = sigma * (4.0 / ((d + 2.0) * m)) ** (1.0 / (d + 4.0))
    else:
        h = np.broadcast_to(np.asarray(bandwidth, dtype=float), (d,)).copy()
        if not np.all(np.isfinite(h)) or np.any(h <= 0.0):
            raise ValueError("bandwidths must be positive and finite")
    return KdeModel(samples=x.copy(), bandwidth=h)


def _phi(z):
    return _INV_SQRT_2PI * np.exp(-0.5 * z * z)


def _as_batch(x, dim, name="x"):
    arr = np.asarray(x, dtype=float)
    single = arr.ndim == 1
    if single:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise ValueError("{} must have {} columns, got shape {}".format(
            name, dim, np.asarray(x).shape))
    return arr, single


def pdf(model, x):
    """Joint density at x: a (d,) point or an (B, d) batch."""
    pts, single = _as_batch(x, model.dim)
    norm = model.count * np.prod(model.bandwidth)
    out = np.empty(len(pts))
    step = max(1, _CHUNK_ELEMS // max(model.count, 1))
    for lo in range(0, len(pts), step):
        block = pts[lo:lo + step]
        z = (block[:, None, :] - model.samples[None, :, :]) / model.bandwidth
        out[lo:lo + step] = np.exp(-0.5 * (z * z).sum(axis=2)).sum(axis=1)
    out *= _INV_SQRT_2PI ** model.dim / norm
    return float(out[0]) if single else out


def marginal_pdf(model, dim, x):
    """Density of dimension `dim` (1-based) from the joint model."""
    n0 = _check_dim(model, dim)
    pts = np.atleast_1d(np.asarray(x, dtype=float))
    h = model.bandwidth[n0]
    z = (pts[:, None] - model.samples[None, :, n0]) / h
    out = _phi(z).mean(axis=1) / h
    return float(out[0]) if np.isscalar(x) or np.ndim(x) == 0 else out


def _check_dim(model, dim):
    if not 1 <= int(dim) <= model.dim:
        raise ValueError("dimension must be in [1, {}], got {}".format(
            model.dim, dim))
    return int(dim) - 1


def _weights(model, n0, given):
    """Kernel weights from conditioning on the first n0 coordinates.

    given: (B, n0) -> (B, M) products of kernel values; None when n0 == 0.
    """
    if n0 == 0:
        return None
    z = ((given[:, None, :] - model.samples[None, :, :n0])
         / model.bandwidth[:n0])
    return np.exp(-0.5 * (z * z).sum(axis=2))  # common phi prefactor cancels


def _weighted_cdf(model, n0, x_col, weights):
    """Conditional CDF of coordinate n0 at x_col (B,), given weights (B, M)."""
    z = (x_col[:, None] - model.samples[None, :, n0]) / model.bandwidth[n0]
    kern = ndtr(z)
    if weights is None:
        return kern.mean(axis=1)
    den = weights.sum(axis=1)
    if np.any(den < _DEN_FLOOR):
        raise FarFromSupportError(
            "conditioning point(s) are too far from every fitted sample")
    return (weights * kern).sum(axis=1) / den


def conditional_cdf(model, dim, x, given):
    """CDF of dimension `dim` (1-based) conditioned on the first dim-1
    coordinates; `given` must supply exactly those dim-1 values."""
    n0 = _check_dim(model, dim)
    given = np.asarray(given, dtype=float).reshape(-1)
    if given.shape[0] != n0:
        raise ValueError("given must have length {}, got {}".format(
            n0, given.shape[0]))
    xs = np.atleast_1d(np.asarray(x, dtype=float))
    w = _weights(model, n0, given.reshape(1, -1))
    if w is not None:
        w = np.broadcast_to(w, (len(xs), model.count))
    out = _weighted_cdf(model, n0, xs, w)
    return float(out[0]) if np.ndim(x) == 0 else out


def rosenblatt(model, xi):
    """Map points to conditional-CDF coordinates u in (0,1)^d."""
    pts, single = _as_batch(xi, model.dim, "xi")
    u = np.empty_like(pts)
    step = max(1, _CHUNK_ELEMS // max(model.count, 1))
    for lo in range(0, len(pts), step):
        block = pts[lo:lo + step]
        for n0 in range(model.dim):
            w = _weights(model, n0, block[:, :n0])
            u[lo:lo + step, n0] = _weighted_cdf(model, n0, block[:, n0], w)
    return u[0] if single else u


def _bracket(model, n0):
    h = model.bandwidth[n0]
    col = model.samples[:, n0]
    return col.min() - _BRACKET_FACTOR * h, col.max() + _BRACKET_FACTOR * h


def _bisect_invert(model, n0, u, weights, tol=1e-8):
    """Solve weighted-CDF(x) = u per row by bisection on a fixed bracket."""
    lo0, hi0 = _bracket(model, n0)
    iters = max(1, int(math.ceil(math.log2((hi0 - lo0) / tol))))
    lo = np.full(len(u), lo0)
    hi = np.full(len(u), hi0)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        f = _weighted_cdf(model, n0, mid, weights)
        less = f < u
        lo = np.where(less, mid, lo)
        hi = np.where(less, hi, mid)
    return 0.5 * (lo + hi)


def _grid_invert(model, n0, u, tol=1e-8):
    """Invert the (unconditional) CDF of coordinate n0 for a batch of u.

    One shared CDF means the work can be done on a fine grid: bracket each
    u between grid nodes, refine with Newton on the local cubic (grid CDF
    and density values pin all four degrees of freedom), and push any row
    that lands in a too-flat cell through plain bisection instead.
    """
    col = model.samples[:, n0]
    h = model.bandwidth[n0]
    lo0, hi0 = _bracket(model, n0)
    spacing = h / 8.0
    g = int(min(max(math.ceil((hi0 - lo0) / spacing) + 1, 512), 400_000))
    grid = np.linspace(lo0, hi0, g)
    dx = grid[1] - grid[0]

    cdf = np.empty(g)
    dens = np.empty(g)
    step = max(1, _CHUNK_ELEMS // max(model.count, 1))
    for s in range(0, g, step):
        z = (grid[s:s + step, None] - col[None, :]) / h
        cdf[s:s + step] = ndtr(z).mean(axis=1)
        dens[s:s + step] = _phi(z).mean(axis=1) / h

    cell = np.clip(np.searchsorted(cdf, u) - 1, 0, g - 2)
    f0 = cdf[cell]
    f1 = cdf[cell + 1]
    p0 = dens[cell] * dx
    p1 = dens[cell + 1] * dx
    df = f1 - f0

    needs_fallback = df < 1e-13
    t = np.where(needs_fallback, 0.5, (u - f0) / np.where(df > 0, df, 1.0))
    for _ in range(4):
        t2 = t * t
        t3 = t2 * t
        val = ((2 * t3 - 3 * t2 + 1) * f0 + (t3 - 2 * t2 + t) * p0
               + (-2 * t3 + 3 * t2) * f1 + (t3 - t2) * p1)
        slope = ((6 * t2 - 6 * t) * f0 + (3 * t2 - 4 * t + 1) * p0
                 + (-6 * t2 + 6 * t) * f1 + (3 * t2 - 2 * t) * p1)
        t = np.clip(t - (val - u) / np.where(np.abs(slope) > 1e-300, slope, 1.0),
                    0.0, 1.0)
    # residual check in u units, scaled back to x through the cell slope
    t2 = t * t
    t3 = t2 * t
    val = ((2 * t3 - 3 * t2 + 1) * f0 + (t3 - 2 * t2 + t) * p0
           + (-2 * t3 + 3 * t2) * f1 + (t3 - t2) * p1)
    needs_fallback |= np.abs(val - u) * dx > tol * np.maximum(df, 1e-300)

    out = grid[cell] + t * dx
    if np.any(needs_fallback):
        idx = np.where(needs_fallback)[0]
        out[idx] = _bisect_invert(model, n0, u[idx], None, tol)
    return out


def inverse_rosenblatt(model, u, tol=1e-8):
    """Inverse of `rosenblatt`: map u in (0,1)^d back to sample space."""
    us, single = _as_batch(u, model.dim, "u")
    if not np.all(np.isfinite(us)):
        raise ValueError("u contains non-finite values")
    if np.any(us < _U_EDGE) or np.any(us > 1.0 - _U_EDGE):
        raise BoundaryError(
            "u values within {} of 0 or 1 cannot be inverted".format(_U_EDGE))
    xi = np.empty_like(us)
    xi[:, 0] = _grid_invert(model, 0, us[:, 0], tol)
    rows = max(1, _CHUNK_ELEMS // max(model.count, 1))
    for n0 in range(1, model.dim):
        for lo in range(0, len(us), rows):
            sl = slice(lo, lo + rows)
            w = _weights(model, n0, xi[sl, :n0])
            xi[sl, n0] = _bisect_invert(model, n0, us[sl, n0], w, tol)
    return xi[0] if single else xi


def sample(model, count, rng):
    """Draw `count` points from the fitted density via the inverse map."""
    u = rng.random((int(count), model.dim))
    np.clip(u, _U_EDGE, 1.0 - _U_EDGE, out=u)
    return inverse_rosenblatt(model, u)
