"""Hermite polynomial chaos expansions of kernel-density-transformed data.

The univariate basis is the probabilists' Hermite family (psi_0 = 1,
psi_1 = x, psi_{m+1} = x psi_m - m psi_{m-1}), orthogonal under the
standard normal weight with E[psi_m^2] = m!.  Multivariate terms are
tensor products indexed by graded-lexicographic multi-indices.

An expansion of a fitted kernel density is obtained non-intrusively: draw
uniforms u, push them through the density's inverse triangular transform g
to get data-space points and through the normal quantile l to get the
matching Gaussian germ, and average g(u) * Psi_k(l(u)) over the draws.
Using the same u for both maps is what couples the two spaces; the result
divided by E[Psi_k^2] is the k-th coefficient.
"""

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

from . import kde

_MC_CHUNK = 8192  # fixed chunk size keeps sums bit-identical for any worker count


class MonteCarloAccuracyWarning(UserWarning):
    """Projection standard error is large relative to the coefficients."""


def hermite(degree, x):
    """Probabilists' Hermite polynomial of the given degree, vectorized."""
    if degree < 0:
        raise ValueError("degree must be >= 0")
    x = np.asarray(x, dtype=float)
    if degree == 0:
        return np.ones_like(x)
    prev = np.ones_like(x)
    cur = x.copy()
    for m in range(1, degree):
        prev, cur = cur, x * cur - m * prev
    return cur


def hermite_table(max_degree, x):
    """All degrees 0..max_degree at once: shape x.shape + (max_degree + 1,)."""
    x = np.asarray(x, dtype=float)
    table = np.empty(x.shape + (max_degree + 1,))
    table[..., 0] = 1.0
    if max_degree >= 1:
        table[..., 1] = x
    for m in range(1, max_degree):
        table[..., m + 1] = x * table[..., m] - m * table[..., m - 1]
    return table


def _compositions(total, dim):
    if dim == 1:
        yield (total,)
        return
    for head in range(total + 1):
        for rest in _compositions(total - head, dim - 1):
            yield (head,) + rest


def multi_indices(dim, count):
    """First `count` multi-indices in graded order (total degree, then
    ascending lexicographic within a degree)."""
    if dim < 1 or count < 1:
        raise ValueError("dim and count must be >= 1")
    out = []
    degree = 0
    while len(out) < count:
        out.extend(_compositions(degree, dim))
        degree += 1
    return tuple(out[:count])


def norm_squared(alpha):
    """E[Psi_alpha^2] = product of factorials of the entries."""
    return float(math.prod(math.factorial(a) for a in alpha))


def multi_hermite(alpha, x):
    """Tensor-product Hermite term at x: (d,) point or (B, d) batch."""
    pts = np.asarray(x, dtype=float)
    single = pts.ndim == 1
    if single:
        pts = pts.reshape(1, -1)
    if pts.shape[1] != len(alpha):
        raise ValueError("x has {} columns, alpha has {} entries".format(
            pts.shape[1], len(alpha)))
    out = np.ones(len(pts))
    for d, a in enumerate(alpha):
        if a:
            out *= hermite(a, pts[:, d])
    return float(out[0]) if single else out


def orthogonality_estimate(max_degree, draws, rng):
    """Monte Carlo estimate of the Gram matrix E[psi_i psi_j], i,j <= max_degree."""
    z = rng.standard_normal(int(draws))
    table = hermite_table(max_degree, z)
    return table.T @ table / len(z)


@dataclass(frozen=True)
class PcExpansion:
    """Chaos expansion of a vector of coordinates.

    coeffs[k, n] multiplies term k of coordinate n; stderr (same shape)
    holds the Monte Carlo standard errors when the expansion came from
    projection.
    """

    coeffs: np.ndarray
    stderr: np.ndarray = None
    mc_count: int = 0
    sampler: str = "random"
    meta: dict = field(default_factory=dict)

    @property
    def terms(self):
        return self.coeffs.shape[0]

    @property
    def dim(self):
        return self.coeffs.shape[1]

    def indices(self):
        return multi_indices(self.dim, self.terms)


def _psi_matrix(zeta, indices, max_degree):
    table = hermite_table(max_degree, zeta)  # (B, d, D+1)
    out = np.ones((zeta.shape[0], len(indices)))
    for k, alpha in enumerate(indices):
        for d, a in enumerate(alpha):
            if a:
                out[:, k] *= table[:, d, a]
    return out


def _lhs_uniforms(count, dim, rng):
    u = np.empty((count, dim))
    for d in range(dim):
        u[:, d] = (rng.permutation(count) + rng.random(count)) / count
    return np.clip(u, 1e-12, 1.0 - 1e-12)


def project_coefficients(model, terms=8, mc_count=100_000, rng=None,
                         sampler="random", workers=1, tol=1e-8):
    """Project a fitted kernel density onto the first `terms` chaos terms.

    model    : kde.KdeModel over the coordinates being expanded.
    sampler  : "random" (iid uniforms, chunk substreams) or "lhs"
               (one stratified uniform set drawn up front).
    workers  : thread count; chunking is fixed at 8192 draws and partial
               sums combine in chunk order, so results are bit-identical
               for any worker count.
    """
    if rng is None:
        raise ValueError("pass an explicit numpy Generator for reproducibility")
    mc_count = int(mc_count)
    if mc_count < 1000:
        raise ValueError("mc_count must be >= 1000, got {}".format(mc_count))
    if terms < 1:
        raise ValueError("terms must be >= 1")
    if sampler not in ("random", "lhs"):
        raise ValueError("sampler must be 'random' or 'lhs', got {!r}".format(sampler))

    dim = model.dim
    indices = multi_indices(dim, terms)
    max_degree = max(max(a) for a in indices)
    norms = np.array([norm_squared(a) for a in indices])

    bounds = [(s, min(s + _MC_CHUNK, mc_count))
              for s in range(0, mc_count, _MC_CHUNK)]
    if sampler == "lhs":
        u_full = _lhs_uniforms(mc_count, dim, rng)
        chunk_u = [u_full[lo:hi] for lo, hi in bounds]
    else:
        streams = rng.spawn(len(bounds))
        chunk_u = None

    def run_chunk(c):
        lo, hi = bounds[c]
        if chunk_u is not None:
            u = chunk_u[c]
        else:
            u = np.clip(streams[c].random((hi - lo, dim)), 1e-12, 1.0 - 1e-12)
        xi = kde.inverse_rosenblatt(model, u, tol)      # data space
        psi = _psi_matrix(ndtri(u), indices, max_degree)  # germ space, same u
        return psi.T @ xi, (psi * psi).T @ (xi * xi)

    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            partials = list(pool.map(run_chunk, range(len(bounds))))
    else:
        partials = [run_chunk(c) for c in range(len(bounds))]

    s1 = np.zeros((terms, dim))
    s2 = np.zeros((terms, dim))
    for p1, p2 in partials:  # fixed combine order
        s1 += p1
        s2 += p2

    raw_mean = s1 / mc_count
    raw_var = np.maximum(s2 / mc_count - raw_mean ** 2, 0.0)
    coeffs = raw_mean / norms[:, None]
    stderr = np.sqrt(raw_var / mc_count) / norms[:, None]

    scale = max(1.0, float(np.max(np.abs(coeffs))))
    if float(np.max(stderr)) > 0.03 * scale:
        warnings.warn(
            "projection standard error {:.3g} is large relative to the "
            "coefficient scale {:.3g}; increase mc_count".format(
                float(np.max(stderr)), scale),
            MonteCarloAccuracyWarning, stacklevel=2)

    return PcExpansion(coeffs=coeffs, stderr=stderr, mc_count=mc_count,
                       sampler=sampler,
                       meta={"chunk": _MC_CHUNK, "workers": int(workers)})


def sample_expansion(exp, zeta):
    """Evaluate the expansion at germ points zeta: (d,) or (B, d) -> same."""
    pts = np.asarray(zeta, dtype=float)
    single = pts.ndim == 1
    if single:
        pts = pts.reshape(1, -1)
    if pts.shape[1] != exp.dim:
        raise ValueError("zeta has {} columns, expansion needs {}".format(
            pts.shape[1], exp.dim))
    indices = exp.indices()
    max_degree = max(max(a) for a in indices)
    out = _psi_matrix(pts, indices, max_degree) @ exp.coeffs
    return out[0] if single else out


def expansion_rows(exp):
    """Flatten an expansion for the debug dump: (n, k, alpha, coeff) with
    n the 1-based coordinate, k the 0-based term, alpha pipe-separated."""
    rows = []
    indices = exp.indices()
    for n in range(exp.dim):
        for k, alpha in enumerate(indices):
            rows.append((n + 1, k, "|".join(str(a) for a in alpha),
                         float(exp.coeffs[k, n])))
    return rows
