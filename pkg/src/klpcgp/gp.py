"""Bayesian Gaussian-process regression over the design points.

Coefficient vectors observed at m design points are standardized (per-row
center, one global scale), compressed by a truncated SVD into p_c weight
processes, and each process is modeled as an independent zero-mean GP over
the inputs with covariance

    R(theta, theta') = (1/lambda_w) * prod_k rho_k^(4 (theta_k - theta'_k)^2)

on inputs scaled to the unit box, plus white noise of precision
lambda_delta shared by all processes.  Hyperparameters carry Gamma priors
on the precisions and Beta priors on the correlations, explored by a
univariate random-walk Metropolis sampler in log/logit coordinates.
Prediction at new inputs is conditional-Gaussian per process; drawing from
the predictive and mapping back through the SVD basis and the
standardization gives coefficient vectors with regression uncertainty
attached.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import expit, gammaln

from . import streams
from .errors import DegenerateDataError, NumericalError

_LOG_2PI = math.log(2.0 * math.pi)
_JITTERS = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)


@dataclass(frozen=True)
class CoeffData:
    """Coefficient matrix (rows) observed at m design points (columns)."""

    design: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        design = np.atleast_2d(np.asarray(self.design, dtype=float))
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2:
            raise ValueError("values must be a 2-D (rows x design points) array")
        if values.shape[1] != design.shape[0]:
            raise ValueError("values columns must match the number of design points")
        if design.shape[0] < 2:
            raise DegenerateDataError("need at least two design points")
        if not (np.all(np.isfinite(design)) and np.all(np.isfinite(values))):
            raise DegenerateDataError("design and values must be finite")
        if len({tuple(row) for row in design}) < design.shape[0]:
            raise DegenerateDataError("design points must be distinct")
        object.__setattr__(self, "design", design)
        object.__setattr__(self, "values", values)


@dataclass(frozen=True)
class StandardizedBasis:
    """Standardization stats, SVD basis, weights, and the scaled design."""

    center: np.ndarray
    scale: float
    basis: np.ndarray      # (rows, p_c)
    weights: np.ndarray    # (p_c, m)
    design01: np.ndarray   # (m, p) in the unit box
    theta_min: np.ndarray
    theta_max: np.ndarray


@dataclass(frozen=True)
class Hyperparams:
    lambda_delta: float
    lambda_w: np.ndarray    # (p_c,)
    rho: np.ndarray         # (p_c, p)

    def __post_init__(self):
        object.__setattr__(self, "lambda_delta", float(self.lambda_delta))
        object.__setattr__(self, "lambda_w",
                           np.atleast_1d(np.asarray(self.lambda_w, float)))
        object.__setattr__(self, "rho",
                           np.atleast_2d(np.asarray(self.rho, float)))


@dataclass(frozen=True)
class PriorSpec:
    """Gamma(shape, rate) on precisions, Beta on correlations."""

    a_w: float = 5.0
    b_w: float = 5.0
    a_rho: float = 1.0
    b_rho: float = 0.1
    a_delta: float = 1.0
    b_delta: float = 1e-4

    def __post_init__(self):
        for name in ("a_w", "b_w", "a_rho", "b_rho", "a_delta", "b_delta"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class Predictive:
    mean: np.ndarray
    cov: np.ndarray


def standardize(values):
    """Per-row centering, one global scale. Returns (c_std, center, scale)."""
    values = np.asarray(values, dtype=float)
    center = values.mean(axis=1)
    centered = values - center[:, None]
    scale = float(centered.std())
    if not np.isfinite(scale) or scale < 1e-300:
        raise DegenerateDataError("coefficients carry no spread to standardize")
    return centered / scale, center, scale


def destandardize(c_std, center, scale):
    return c_std * scale + np.asarray(center, dtype=float)[:, None]


def svd_truncate(c_std, energy=0.99):
    """Keep the smallest p_c singular directions reaching the energy share."""
    if not 0.0 < energy <= 1.0:
        raise ValueError("energy must lie in (0, 1]")
    u, sing, vt = np.linalg.svd(np.asarray(c_std, dtype=float),
                                full_matrices=False)
    power = sing ** 2
    total = float(power.sum())
    if total <= 0.0:
        raise DegenerateDataError("matrix is identically zero")
    frac = np.cumsum(power) / total
    p_c = int(np.searchsorted(frac, energy - 1e-12)) + 1
    p_c = min(p_c, len(sing))
    return (u[:, :p_c].copy(), sing[:p_c, None] * vt[:p_c], p_c)


def build_basis(data, energy=0.99):
    """Scale the design to the unit box, standardize, truncate by SVD."""
    theta_min = data.design.min(axis=0)
    theta_max = data.design.max(axis=0)
    span = theta_max - theta_min
    if np.any(span <= 0):
        raise DegenerateDataError("a design dimension is collapsed to a point")
    design01 = (data.design - theta_min) / span
    c_std, center, scale = standardize(data.values)
    basis_mat, weights, _ = svd_truncate(c_std, energy)
    return StandardizedBasis(center=center, scale=scale, basis=basis_mat,
                             weights=weights, design01=design01,
                             theta_min=theta_min, theta_max=theta_max)


def covariance(theta, theta_prime, lambda_w, rho):
    """Kernel value for one input pair (inputs already in the unit box)."""
    d2 = (np.asarray(theta, float).ravel()
          - np.asarray(theta_prime, float).ravel()) ** 2
    return float(np.exp(4.0 * d2 @ np.log(np.asarray(rho, float).ravel()))
                 / lambda_w)


def _corr(a_pts, b_pts, lambda_w, rho):
    diff2 = (a_pts[:, None, :] - b_pts[None, :, :]) ** 2
    return np.exp(4.0 * diff2 @ np.log(rho)) / lambda_w


def _chol(mat):
    eye = np.eye(mat.shape[0])
    for jitter in _JITTERS:
        try:
            return np.linalg.cholesky(mat + jitter * eye if jitter else mat)
        except np.linalg.LinAlgError:
            continue
    low = float(np.linalg.eigvalsh(mat).min())
    raise NumericalError(
        f"covariance not positive definite (min eigenvalue {low:.3e}) "
        f"after jitter up to {_JITTERS[-1]:g}")


def _block_loglik(design01, w_i, lambda_w_i, rho_i, lambda_delta):
    m = len(w_i)
    cov = _corr(design01, design01, lambda_w_i, rho_i)
    cov[np.diag_indices(m)] += 1.0 / lambda_delta
    chol = _chol(cov)
    alpha = solve_triangular(chol, w_i, lower=True)
    return -0.5 * (m * _LOG_2PI
                   + 2.0 * float(np.sum(np.log(np.diag(chol))))
                   + float(alpha @ alpha))


def _gamma_logpdf(x, a, b):
    return a * math.log(b) - float(gammaln(a)) + (a - 1.0) * math.log(x) - b * x


def _beta_logpdf(x, a, b):
    norm = float(gammaln(a + b) - gammaln(a) - gammaln(b))
    return norm + (a - 1.0) * math.log(x) + (b - 1.0) * math.log1p(-x)


def _log_priors(hyper, priors):
    total = _gamma_logpdf(hyper.lambda_delta, priors.a_delta, priors.b_delta)
    for lam in hyper.lambda_w:
        total += _gamma_logpdf(float(lam), priors.a_w, priors.b_w)
    for r in np.ravel(hyper.rho):
        total += _beta_logpdf(float(r), priors.a_rho, priors.b_rho)
    return total


def _in_support(hyper):
    return (np.isfinite(hyper.lambda_delta) and hyper.lambda_delta > 0
            and np.all(np.isfinite(hyper.lambda_w))
            and np.all(hyper.lambda_w > 0)
            and np.all(np.isfinite(hyper.rho))
            and np.all(hyper.rho > 0) and np.all(hyper.rho < 1))


def log_posterior(hyper, basis, priors):
    """Fully normalized log posterior density; -inf outside the support."""
    if not _in_support(hyper):
        return -np.inf
    total = _log_priors(hyper, priors)
    if basis.weights.size:
        blocks = [_block_loglik(basis.design01, basis.weights[i],
                                float(hyper.lambda_w[i]), hyper.rho[i],
                                hyper.lambda_delta)
                  for i in range(basis.weights.shape[0])]
        total += float(np.sum(blocks))
    return float(total)


@dataclass(frozen=True)
class McmcConfig:
    iterations: int = 5000
    burn_in: int = 1000
    step: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.burn_in < self.iterations:
            raise ValueError("need iterations > burn_in >= 0")
        if self.step <= 0:
            raise ValueError("step must be positive")


@dataclass(frozen=True)
class GpChain:
    lambda_delta: np.ndarray   # (n,)
    lambda_w: np.ndarray       # (n, p_c)
    rho: np.ndarray            # (n, p_c, p)
    log_post: np.ndarray       # (n,)
    acceptance: np.ndarray     # per coordinate, sampler order

    @property
    def map_hyper(self):
        k = int(np.argmax(self.log_post))
        return Hyperparams(lambda_delta=float(self.lambda_delta[k]),
                           lambda_w=self.lambda_w[k].copy(),
                           rho=self.rho[k].copy())


def _softplus(x):
    return math.log1p(math.exp(-abs(x))) + max(x, 0.0)


def mcmc(basis, priors, config):
    """Univariate random-walk Metropolis in (log lambda, logit rho) space.

    The walk runs on transformed coordinates, so Jacobian terms (log lambda
    for precisions, log rho + log(1-rho) for correlations) enter the
    acceptance ratio; the recorded log_post column is the posterior density
    of the untransformed hyperparameters, which is what the MAP maximizes.
    One noise draw and one uniform are consumed per coordinate regardless
    of acceptance, so chains are bit-reproducible for a fixed seed.
    """
    rng = streams.substream(config.seed, streams.GP)
    p_c, _ = basis.weights.shape
    p = basis.design01.shape[1]

    # transformed state: [log lam_delta, log lam_w (p_c), logit rho (p_c*p)]
    y = np.concatenate((
        [math.log(priors.a_delta / priors.b_delta)],
        np.full(p_c, math.log(priors.a_w / priors.b_w)),
        np.zeros(p_c * p)))
    n_coords = y.size

    def lam_delta():
        return math.exp(y[0])

    def lam_w(i):
        return math.exp(y[1 + i])

    def rho_row(i):
        return expit(y[1 + p_c + i * p:1 + p_c + (i + 1) * p])

    def block_ll(i, ld=None, lw=None, rr=None):
        try:
            return _block_loglik(basis.design01, basis.weights[i],
                                 lw if lw is not None else lam_w(i),
                                 rr if rr is not None else rho_row(i),
                                 ld if ld is not None else lam_delta())
        except NumericalError:
            return -np.inf

    def lam_prior_jac(yv, a, b):
        # Gamma prior plus d(lambda)/d(log lambda) Jacobian, constants dropped
        return a * yv - b * math.exp(yv) if yv < 500.0 else -np.inf

    def rho_prior_jac(yv, a, b):
        # Beta prior plus logit Jacobian: a log(rho) + b log(1 - rho)
        return -a * _softplus(-yv) - b * _softplus(yv)

    blocks = np.array([block_ll(i) for i in range(p_c)])

    kept = config.iterations - config.burn_in
    out_ld = np.empty(config.iterations)
    out_lw = np.empty((config.iterations, p_c))
    out_rho = np.empty((config.iterations, p_c, p))
    out_lp = np.empty(config.iterations)
    accepts = np.zeros(n_coords)

    for _ in range(config.iterations):
        for c in range(n_coords):
            z = rng.standard_normal()
            u = math.log(rng.random())
            y_new = y[c] + config.step * z
            if c == 0:
                old = lam_prior_jac(y[c], priors.a_delta, priors.b_delta) \
                    + float(np.sum(blocks))
                cand = [block_ll(i, ld=math.exp(y_new)) for i in range(p_c)] \
                    if y_new < 500.0 else None
                new = (lam_prior_jac(y_new, priors.a_delta, priors.b_delta)
                       + float(np.sum(cand))) if cand is not None else -np.inf
                if u < new - old:
                    y[c] = y_new
                    blocks = np.array(cand)
                    accepts[c] += 1
            elif c < 1 + p_c:
                i = c - 1
                old = lam_prior_jac(y[c], priors.a_w, priors.b_w) + blocks[i]
                nb = block_ll(i, lw=math.exp(y_new)) if y_new < 500.0 else -np.inf
                new = lam_prior_jac(y_new, priors.a_w, priors.b_w) + nb
                if u < new - old:
                    y[c] = y_new
                    blocks[i] = nb
                    accepts[c] += 1
            else:
                i = (c - 1 - p_c) // p
                old = rho_prior_jac(y[c], priors.a_rho, priors.b_rho) + blocks[i]
                y_save = y[c]
                y[c] = y_new
                nb = block_ll(i)
                new = rho_prior_jac(y_new, priors.a_rho, priors.b_rho) + nb
                if u < new - old:
                    blocks[i] = nb
                    accepts[c] += 1
                else:
                    y[c] = y_save
        it = _
        out_ld[it] = lam_delta()
        out_lw[it] = [lam_w(i) for i in range(p_c)]
        out_rho[it] = [rho_row(i) for i in range(p_c)]
        hyper_now = Hyperparams(out_ld[it], out_lw[it], out_rho[it])
        out_lp[it] = float(np.sum(blocks)) + _log_priors(hyper_now, priors)

    sl = slice(config.burn_in, config.iterations)
    return GpChain(lambda_delta=out_ld[sl].copy(), lambda_w=out_lw[sl].copy(),
                   rho=out_rho[sl].copy(), log_post=out_lp[sl].copy(),
                   acceptance=accepts / config.iterations)


def predict(hyper, basis, theta_star01):
    """Conditional-Gaussian prediction, blockwise per weight process.

    The stacked mean/covariance are process-major: entries [i*s, (i+1)*s)
    belong to process i across the s star points.  Predictive covariance
    includes the white-noise term, matching the training model.
    """
    if not _in_support(hyper):
        raise ValueError("hyperparameters outside their support")
    stars = np.atleast_2d(np.asarray(theta_star01, dtype=float))
    s_count = stars.shape[0]
    p_c, m = basis.weights.shape
    mean = np.zeros(s_count * p_c)
    cov = np.zeros((s_count * p_c, s_count * p_c))
    if s_count == 0:
        return Predictive(mean=mean, cov=cov)
    for i in range(p_c):
        lam = float(hyper.lambda_w[i])
        train = _corr(basis.design01, basis.design01, lam, hyper.rho[i])
        train[np.diag_indices(m)] += 1.0 / hyper.lambda_delta
        chol = _chol(train)
        alpha = solve_triangular(chol, basis.weights[i], lower=True)
        k_star = _corr(stars, basis.design01, lam, hyper.rho[i])
        vmat = solve_triangular(chol, k_star.T, lower=True)
        omega = (_corr(stars, stars, lam, hyper.rho[i])
                 + np.eye(s_count) / hyper.lambda_delta - vmat.T @ vmat)
        block = slice(i * s_count, (i + 1) * s_count)
        mean[block] = vmat.T @ alpha
        cov[block, block] = 0.5 * (omega + omega.T)
    return Predictive(mean=mean, cov=cov)


def draw_coefficients(pred, basis, count, rng):
    """Sample the predictive weights and map back to coefficient vectors.

    Returns (count, rows, s) destandardized coefficient draws.  Sampling
    uses an eigendecomposition with negative eigenvalues clipped to zero,
    so a degenerate (zero) predictive covariance yields exact copies of the
    mean map.
    """
    n = pred.mean.size
    p_c = basis.weights.shape[0]
    rows = basis.basis.shape[0]
    if n == 0:
        return np.zeros((count, rows, 0))
    s_count = n // p_c
    evals, evecs = np.linalg.eigh(0.5 * (pred.cov + pred.cov.T))
    root = evecs * np.sqrt(np.clip(evals, 0.0, None))
    draws = pred.mean[None, :] + rng.standard_normal((count, n)) @ root.T
    wmat = draws.reshape(count, p_c, s_count)
    c_std = np.einsum("nk,cks->cns", basis.basis, wmat)
    return c_std * basis.scale + basis.center[None, :, None]
