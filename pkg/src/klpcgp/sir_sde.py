"""Stochastic SIR epidemic engine and outbreak summary statistics.

The model tracks susceptible and infected headcounts (s, i) in a closed
population.  Infections move mass from s to i at rate beta*s*i/N, recoveries
drain i at rate gamma*i, and demographic noise enters through the square
root of the event-rate covariance, giving the Ito system

    d(s, i) = drift(s, i) dt + diffusion_sqrt(s, i) dW.

Paths are integrated by Euler-Maruyama with the state projected onto the
feasible region after every step: both counts stay non-negative and their
sum never exceeds the population.  A path ends when the infected count
falls below the extinction threshold or the horizon is hit.

Each completed path is condensed to four outbreak statistics:

    p_inf  peak infected fraction, percent of N
    t_p    earliest time the peak is attained
    t_d    total time the infected count spends at or above half the peak
    c_inf  cumulative infections over the whole outbreak, percent of N

``generate_ensemble`` runs replicate batches at each design point
(beta, gamma), discarding minor outbreaks below a cumulative-infection
cutoff, and is the data source for emulator training.  Replicate r of
design point j always consumes the dedicated substream
(seed, streams.SIMULATE, j, r), so ensembles are reproducible run to run
and insensitive to batch sizing.
"""

import logging
from dataclasses import dataclass, replace
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from scipy.special import ndtri

from . import streams
from .errors import DegenerateDataError

log = logging.getLogger(__name__)

QOI_NAMES = ("p_inf", "t_p", "t_d", "c_inf")

# steps of pre-drawn noise per replicate; consumption happens at chunk
# granularity so single runs and batched runs see identical streams
_NOISE_CHUNK = 2048
_MAX_BATCH = 128
_ZERO_VAR = 1e-14


@dataclass(frozen=True)
class ModelParams:
    """Epidemic rates and initial state for one simulation."""

    beta: float
    gamma: float
    population: float = 10_000.0
    s0: float = 9_998.0
    i0: float = 2.0

    def __post_init__(self):
        if not (np.isfinite(self.beta) and self.beta > 0):
            raise ValueError(f"beta must be positive, got {self.beta}")
        if not (np.isfinite(self.gamma) and self.gamma > 0):
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if not (np.isfinite(self.population) and self.population > 0):
            raise ValueError("population must be positive")
        if self.s0 < 0 or self.i0 < 0:
            raise ValueError("initial counts must be non-negative")
        if self.s0 + self.i0 > self.population * (1 + 1e-12):
            raise ValueError("s0 + i0 exceeds the population")


@dataclass(frozen=True)
class SimConfig:
    """Integrator settings shared by every run in an ensemble."""

    dt: float = 0.01
    t_max: float = 365.0
    extinction_threshold: float = 0.5

    def __post_init__(self):
        if not (np.isfinite(self.dt) and self.dt > 0):
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.t_max < self.dt:
            raise ValueError("t_max must cover at least one step")
        if self.extinction_threshold < 0:
            raise ValueError("extinction threshold must be non-negative")


@dataclass(frozen=True)
class ParamDistribution:
    """Independent lognormal laws for the two epidemic rates.

    With ``scale="log"`` the four numbers are the mean and variance of the
    underlying normal in log space.  With ``scale="natural"`` they are the
    mean and variance of the rates themselves and are converted by moment
    matching.
    """

    mu_beta: float = 1.0
    sigma2_beta: float = 1.25e-4
    mu_gamma: float = 0.8
    sigma2_gamma: float = 1.25e-4
    scale: str = "log"

    def __post_init__(self):
        if self.scale not in ("log", "natural"):
            raise ValueError(f"scale must be 'log' or 'natural', got {self.scale!r}")
        if self.sigma2_beta <= 0 or self.sigma2_gamma <= 0:
            raise ValueError("variances must be positive")
        if self.scale == "natural" and (self.mu_beta <= 0 or self.mu_gamma <= 0):
            raise ValueError("natural-scale means must be positive")

    def log_params(self):
        """((mu, sigma) for beta, (mu, sigma) for gamma) in log space."""
        if self.scale == "log":
            return ((self.mu_beta, np.sqrt(self.sigma2_beta)),
                    (self.mu_gamma, np.sqrt(self.sigma2_gamma)))
        out = []
        for m, v in ((self.mu_beta, self.sigma2_beta),
                     (self.mu_gamma, self.sigma2_gamma)):
            s2 = np.log1p(v / (m * m))
            out.append((np.log(m) - 0.5 * s2, np.sqrt(s2)))
        return tuple(out)

    def median(self):
        (mb, _), (mg, _) = self.log_params()
        return (float(np.exp(mb)), float(np.exp(mg)))

    def ppf_beta(self, q):
        (mb, sb), _ = self.log_params()
        return float(np.exp(mb + sb * ndtri(q)))

    def ppf_gamma(self, q):
        _, (mg, sg) = self.log_params()
        return float(np.exp(mg + sg * ndtri(q)))


@dataclass(frozen=True)
class Trajectory:
    """One simulated path on a uniform grid (the last point may be the
    first sub-threshold state rather than the horizon)."""

    times: np.ndarray
    s: np.ndarray
    i: np.ndarray


@dataclass(frozen=True)
class QoiVector:
    p_inf: float
    t_p: float
    t_d: float
    c_inf: float

    def as_array(self):
        return np.array([self.p_inf, self.t_p, self.t_d, self.c_inf])


def drift(state, params):
    """Mean field rates: d(s, i)/dt without noise."""
    s, i = float(state[0]), float(state[1])
    v = params.beta * s * i / params.population
    return np.array([-v, v - params.gamma * i])


def diffusion(state, params):
    """Event-rate covariance matrix V of the pair process."""
    s, i = float(state[0]), float(state[1])
    v = params.beta * s * i / params.population
    gi = params.gamma * i
    return np.array([[v, -v], [-v, v + gi]])


def diffusion_sqrt(state, params):
    """Symmetric PSD square root of ``diffusion``.

    Uses the closed form for 2x2 matrices,
    B = (V + sqrt(det V) I) / sqrt(trace V + 2 sqrt(det V)),
    falling back to an eigendecomposition when the denominator underflows
    (both rates zero, e.g. no infected left).
    """
    v_mat = diffusion(state, params)
    det = max(v_mat[0, 0] * v_mat[1, 1] - v_mat[0, 1] * v_mat[1, 0], 0.0)
    den_sq = v_mat[0, 0] + v_mat[1, 1] + 2.0 * np.sqrt(det)
    if den_sq < _ZERO_VAR:
        w, q = np.linalg.eigh(v_mat)
        return (q * np.sqrt(np.maximum(w, 0.0))) @ q.T
    return (v_mat + np.sqrt(det) * np.eye(2)) / np.sqrt(den_sq)


def _advance(s, i, beta, gamma, population, dt, z1, z2):
    """One Euler-Maruyama update, elementwise over replicate arrays.

    The diffusion root is expanded inline (b11 = (v+sq)/den, b12 = -v/den,
    b22 = (v+gi+sq)/den) to avoid building per-replicate matrices.  The
    state is then projected back into the feasible region 0 <= s <= N,
    0 <= i, s + i <= N.  Any s+i overshoot is removed from i: the sum only
    fluctuates through the recovery flux, which lives in i's equation, so
    that is where the recovered-count-cannot-go-negative boundary acts.
    Nothing stronger is imposed; pathwise monotone s would suppress the
    branching fluctuations that decide whether a small outbreak takes off.
    """
    v = beta * s * i / population
    gi = gamma * i
    sq = np.sqrt(v * gi)
    den_sq = 2.0 * v + gi + 2.0 * sq
    safe = den_sq > _ZERO_VAR
    den = np.sqrt(np.where(safe, den_sq, 1.0))
    b11 = np.where(safe, (v + sq) / den, 0.0)
    b12 = np.where(safe, -v / den, 0.0)
    b22 = np.where(safe, (v + gi + sq) / den, 0.0)
    sdt = np.sqrt(dt)
    s_new = s - v * dt + sdt * (b11 * z1 + b12 * z2)
    i_new = i + (v - gi) * dt + sdt * (b12 * z1 + b22 * z2)
    s_new = np.clip(s_new, 0.0, population)
    i_new = np.minimum(np.clip(i_new, 0.0, None), population - s_new)
    return s_new, i_new


def step(state, params, dt, noise):
    """Advance one state vector by a single time step.

    ``noise`` holds the two standard normal increments.  Identical to one
    update of ``simulate``, clamps included.
    """
    s_new, i_new = _advance(np.float64(state[0]), np.float64(state[1]),
                            params.beta, params.gamma, params.population,
                            float(dt), np.float64(noise[0]),
                            np.float64(noise[1]))
    return np.array([float(s_new), float(i_new)])


def _run_rates(beta, gamma, population, s0, i0, config, generators):
    """Integrate one path per generator; ``beta``/``gamma`` may be scalars
    shared by the batch or arrays giving one rate pair per replicate.

    Noise is drawn in fixed chunks of ``_NOISE_CHUNK`` steps: a replicate
    that is alive at a chunk boundary consumes the whole chunk even if it
    goes extinct midway.  That makes stream consumption independent of who
    else is in the batch, so batched and single runs agree bit for bit.
    """
    r_count = len(generators)
    dt = config.dt
    n_max = int(np.floor(config.t_max / dt + 1e-9))
    thresh = config.extinction_threshold

    s = np.full(r_count, float(s0))
    i = np.full(r_count, float(i0))
    term = np.full(r_count, n_max, dtype=np.int64)
    active = i >= thresh
    term[~active] = 0

    s_chunks, i_chunks = [], []
    k = 0
    while k < n_max and active.any():
        clen = min(_NOISE_CHUNK, n_max - k)
        noise = np.zeros((r_count, clen, 2))
        for r in np.nonzero(active)[0]:
            noise[r] = generators[r].standard_normal((clen, 2))
        s_blk = np.empty((r_count, clen))
        i_blk = np.empty((r_count, clen))
        used = clen
        for j in range(clen):
            s_new, i_new = _advance(s, i, beta, gamma, population, dt,
                                    noise[:, j, 0], noise[:, j, 1])
            s = np.where(active, s_new, s)
            i = np.where(active, i_new, i)
            s_blk[:, j] = s
            i_blk[:, j] = i
            died = active & (i < thresh)
            if died.any():
                term[died] = k + j + 1
                active &= ~died
                if not active.any():
                    used = j + 1
                    break
        s_chunks.append(s_blk[:, :used])
        i_chunks.append(i_blk[:, :used])
        k += used

    if s_chunks:
        s_all = np.concatenate(s_chunks, axis=1)
        i_all = np.concatenate(i_chunks, axis=1)
    else:
        s_all = np.empty((r_count, 0))
        i_all = np.empty((r_count, 0))

    out = []
    for r in range(r_count):
        n_r = int(term[r])
        times = np.arange(n_r + 1) * dt
        out.append(Trajectory(
            times=times,
            s=np.concatenate(([s0], s_all[r, :n_r])),
            i=np.concatenate(([i0], i_all[r, :n_r]))))
    return out


def _run_batch(params, config, generators):
    return _run_rates(params.beta, params.gamma, params.population,
                      params.s0, params.i0, config, generators)


def simulate(params, config, rng):
    """Run a single path; ``rng`` only needs ``standard_normal(shape)``."""
    return _run_batch(params, config, [rng])[0]


def simulate_batch(params, config, generators):
    """Run one path per generator with shared parameters."""
    return _run_batch(params, config, generators)


def simulate_rates(rates, base_params, config, generators):
    """Run one path per generator, row r of ``rates`` giving its (beta,
    gamma); population and initial state come from ``base_params``."""
    rates = np.asarray(rates, dtype=float)
    if rates.shape != (len(generators), 2):
        raise ValueError("rates must be ({}, 2), got {}".format(
            len(generators), rates.shape))
    if not np.all(np.isfinite(rates)) or np.any(rates <= 0.0):
        raise ValueError("rates must be positive and finite")
    return _run_rates(rates[:, 0], rates[:, 1], base_params.population,
                      base_params.s0, base_params.i0, config, generators)


def extract_qoi(traj, params):
    """Condense a trajectory into the four outbreak statistics.

    The half-peak occupancy time t_d counts fractional grid cells by linear
    interpolation of the crossing inside each cell, so it converges with the
    grid instead of jumping by whole steps.
    """
    times, s, i = traj.times, traj.s, traj.i
    if not (len(times) == len(s) == len(i)) or len(times) == 0:
        raise DegenerateDataError("trajectory arrays must share a positive length")
    n = params.population
    i_max = float(np.max(i))
    p_inf = 100.0 * i_max / n
    t_p = float(times[int(np.argmax(i))])
    c_inf = 100.0 * (n - float(s[-1])) / n

    if len(times) < 2:
        return QoiVector(p_inf, t_p, 0.0, c_inf)
    half = 0.5 * i_max
    ia, ib = i[:-1], i[1:]
    widths = np.diff(times)
    frac = np.zeros_like(widths)
    above_a = ia >= half
    above_b = ib >= half
    frac[above_a & above_b] = 1.0
    enter = ~above_a & above_b
    leave = above_a & ~above_b
    # crossing position from linear interpolation inside the cell
    if enter.any():
        frac[enter] = (ib[enter] - half) / (ib[enter] - ia[enter])
    if leave.any():
        frac[leave] = (ia[leave] - half) / (ia[leave] - ib[leave])
    t_d = float(np.sum(frac * widths))
    return QoiVector(p_inf, t_p, t_d, c_inf)


def sample_parameters(dist, count, rng):
    """Draw (count, 2) rate pairs (beta, gamma) from ``dist``."""
    (mb, sb), (mg, sg) = dist.log_params()
    z = rng.standard_normal((int(count), 2))
    return np.exp(z * np.array([sb, sg]) + np.array([mb, mg]))


@dataclass(frozen=True)
class DesignPointEnsemble:
    """All replicate attempts at one design point.

    ``rows`` has one line per attempt: the four statistics followed by a
    0/1 acceptance flag (cumulative infections above the cutoff).  Attempt
    r always corresponds to substream (seed, SIMULATE, index, r).
    """

    index: int
    beta: float
    gamma: float
    target: int
    rows: np.ndarray

    @property
    def attempts(self):
        return self.rows.shape[0]

    @property
    def accepted_total(self):
        return int(np.sum(self.rows[:, 4] > 0.5))

    @property
    def accepted_count(self):
        return min(self.accepted_total, self.target)

    @property
    def acceptance_rate(self):
        if self.attempts == 0:
            return 0.0
        return self.accepted_total / self.attempts

    @property
    def budget_exhausted(self):
        return self.accepted_total < self.target

    @property
    def qois(self):
        """The first ``target`` accepted statistic rows, training order."""
        keep = self.rows[self.rows[:, 4] > 0.5, :4]
        return keep[:self.target]


@dataclass(frozen=True)
class EnsembleResult:
    points: tuple
    design: np.ndarray
    seed: int
    min_cinf_percent: float

    @property
    def all_qois(self):
        return np.vstack([p.qois for p in self.points])


def _fill_point(j, beta, gamma, reps, base_params, config, seed,
                min_cinf, max_attempts):
    params = replace(base_params, beta=float(beta), gamma=float(gamma))
    rows = []
    attempts = 0
    accepted = 0
    while accepted < reps and attempts < max_attempts:
        if attempts == 0:
            nb = min(max(reps, 8), max_attempts)
        else:
            # size the next batch from the acceptance rate seen so far
            rate = max(accepted / attempts, 0.05)
            nb = int(np.ceil((reps - accepted) / rate))
            nb = min(max(nb, 8), _MAX_BATCH, max_attempts - attempts)
        gens = [streams.substream(seed, streams.SIMULATE, j, attempts + r)
                for r in range(nb)]
        for traj in _run_batch(params, config, gens):
            q = extract_qoi(traj, params).as_array()
            ok = q[3] >= min_cinf
            rows.append(np.concatenate((q, [1.0 if ok else 0.0])))
            accepted += int(ok)
        attempts += nb
    point = DesignPointEnsemble(index=j, beta=float(beta), gamma=float(gamma),
                                target=reps, rows=np.array(rows).reshape(-1, 5))
    log.debug("design point %d: %d/%d accepted in %d attempts",
              j, point.accepted_count, reps, point.attempts)
    return point


def generate_ensemble(design, reps_per_point, base_params, config, *, seed,
                      min_cinf_percent=10.0, max_attempts=None, workers=1):
    """Simulate replicate ensembles at every design point.

    ``design`` is an (m, 2) array of (beta, gamma) pairs.  At each point,
    attempts run until ``reps_per_point`` paths pass the cumulative-infection
    cutoff or ``max_attempts`` (default 40x the target) is spent; exhaustion
    is reported on the point, not raised.  Everything derives from ``seed``
    through per-replicate substreams, so results do not depend on batch
    sizing or ``workers``.
    """
    design = np.atleast_2d(np.asarray(design, dtype=float))
    if design.ndim != 2 or design.shape[1] != 2:
        raise ValueError("design must be an (m, 2) array of (beta, gamma) pairs")
    if not np.all(np.isfinite(design)) or np.any(design <= 0):
        raise ValueError("design rates must be positive and finite")
    if reps_per_point < 1:
        raise ValueError("reps_per_point must be at least 1")
    if not 0.0 <= min_cinf_percent <= 100.0:
        raise ValueError("min_cinf_percent must lie in [0, 100]")
    if max_attempts is None:
        max_attempts = 40 * reps_per_point
    if max_attempts < reps_per_point:
        raise ValueError("max_attempts cannot undercut reps_per_point")

    args = [(j, b, g, reps_per_point, base_params, config, seed,
             min_cinf_percent, max_attempts)
            for j, (b, g) in enumerate(design)]
    if workers > 1 and len(args) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            points = list(pool.map(lambda a: _fill_point(*a), args))
    else:
        points = [_fill_point(*a) for a in args]
    return EnsembleResult(points=tuple(points), design=design, seed=int(seed),
                          min_cinf_percent=float(min_cinf_percent))


@dataclass(frozen=True)
class BruteForceSample:
    """Accepted simulator draws with parameters varied per attempt.

    rates    : (count, 2) accepted (beta, gamma) pairs.
    qois     : (count, 4) matching outbreak statistics.
    attempts : total attempts across all draws.
    """

    rates: np.ndarray
    qois: np.ndarray
    attempts: int


def brute_force_qois(dist, count, base_params, config, *, seed,
                     min_cinf_percent=10.0, max_rounds=1000, workers=1):
    """Reference Monte Carlo: ``count`` accepted draws of the full chain
    (rates from ``dist``, one path each, minor outbreaks rejected).

    Attempt a of draw i consumes substream (seed, streams.COMPARE, i, a):
    the rate pair first, then the path noise.  Rejected draws retry with a
    fresh rate pair, so the result samples the filtered joint law, and the
    addressing makes it independent of batch sizes and worker count.
    """
    count = int(count)
    if count < 1:
        raise ValueError("count must be >= 1")
    if not 0.0 <= min_cinf_percent <= 100.0:
        raise ValueError("min_cinf_percent must lie in [0, 100]")

    rates_out = np.empty((count, 2))
    qois_out = np.empty((count, 4))
    pending = np.arange(count)
    attempts = 0

    def run_chunk(chunk, round_index):
        rngs = [streams.substream(seed, streams.COMPARE, int(i), round_index)
                for i in chunk]
        rates = np.vstack([sample_parameters(dist, 1, rng)[0] for rng in rngs])
        trajs = _run_rates(rates[:, 0], rates[:, 1], base_params.population,
                           base_params.s0, base_params.i0, config, rngs)
        rows = np.empty((len(chunk), 4))
        for r, traj in enumerate(trajs):
            params = replace(base_params, beta=float(rates[r, 0]),
                             gamma=float(rates[r, 1]))
            rows[r] = extract_qoi(traj, params).as_array()
        return rates, rows

    for a in range(max_rounds):
        if pending.size == 0:
            break
        chunks = [pending[lo:lo + _MAX_BATCH]
                  for lo in range(0, pending.size, _MAX_BATCH)]
        if workers > 1 and len(chunks) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(lambda c: run_chunk(c, a), chunks))
        else:
            results = [run_chunk(c, a) for c in chunks]
        attempts += pending.size
        still = []
        for chunk, (rates, rows) in zip(chunks, results):
            ok = rows[:, 3] >= min_cinf_percent
            rates_out[chunk[ok]] = rates[ok]
            qois_out[chunk[ok]] = rows[ok]
            still.append(chunk[~ok])
        pending = np.concatenate(still) if still else np.empty(0, dtype=int)
        log.debug("brute force round %d: %d draws still open", a, pending.size)
    if pending.size:
        raise DegenerateDataError(
            "acceptance filter rejected all {} attempts for {} of {} draws; "
            "the filtered distribution is unreachable here".format(
                max_rounds, pending.size, count))
    return BruteForceSample(rates=rates_out, qois=qois_out, attempts=attempts)
