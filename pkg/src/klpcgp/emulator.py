"""End-to-end surrogate pipeline and the trained-model container.

Training pools every accepted simulator output into one covariance
eigenbasis (kl), expands each design point's basis coordinates in Hermite
chaos through a kernel-density transform (kde + pce), and regresses the
stacked chaos coefficients on the design with a Bayesian Gaussian process
(gp).  A trained model is sampled in layers, each with its own switch: the
regression posterior supplies coefficient draws (fit uncertainty), a
standard normal germ drives the chaos expansion (run-to-run scatter), and
the input distribution supplies parameter draws.  Models persist to a
single self-describing binary file and reload bit-exactly.
"""

import json
import struct
import warnings
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import gp, kde, kl, pce, sir_sde, streams
from .errors import (DegenerateDataError, KlpcgpError, ModelFileError,
                     ModelVersionError)

FORMAT_VERSION = "klpcgp-model-1"
_MAGIC = b"KLPCGPM1"
_MIN_REPS = 30          # replicates below this cannot support a kernel fit
_HULL_TOL = 1e-9
_PREDICT_BLOCK = 64     # star points per regression call when only means matter

# clamp bounds for the four epidemic statistics (percent, day, day, percent)
_QOI_LOWER = np.array([0.0, 0.0, 0.0, 0.0])
_QOI_UPPER = np.array([100.0, np.inf, np.inf, 100.0])


class ExtrapolationWarning(UserWarning):
    """A requested parameter point lies outside the training design box."""


@dataclass(frozen=True)
class TrainConfig:
    """Knobs for the training pipeline; defaults match the built-in study."""

    kl_energy: float = 1.0
    pc_terms: int = 8
    mc_count: int = 100_000
    sampler: str = "random"
    gp_energy: float = 0.99
    mcmc_iterations: int = 5000
    mcmc_burn_in: int = 1000
    mcmc_step: float = 0.2
    seed: int = 0
    workers: int = 1
    priors: gp.PriorSpec = field(default_factory=gp.PriorSpec)

    def __post_init__(self):
        if not 0.0 < self.kl_energy <= 1.0:
            raise ValueError("kl_energy must lie in (0, 1]")
        if not 0.0 < self.gp_energy <= 1.0:
            raise ValueError("gp_energy must lie in (0, 1]")
        if self.pc_terms < 1:
            raise ValueError("pc_terms must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


@dataclass(frozen=True)
class UncertaintyBudget:
    """Draw counts per uncertainty source; every count is at least 1."""

    n_theta: int = 1
    n_zeta: int = 1
    n_eta: int = 1

    def __post_init__(self):
        for name in ("n_theta", "n_zeta", "n_eta"):
            value = int(getattr(self, name))
            if value < 1:
                raise ValueError(f"{name} must be >= 1, got {value}")
            object.__setattr__(self, name, value)


@dataclass(frozen=True)
class EmulatorModel:
    """Everything needed to sample the surrogate.

    kl             : pooled output eigenbasis.
    design         : (m, p) simulator inputs of the training ensemble.
    pc_coeffs      : (m, terms, n_modes) chaos coefficients per design point.
    pc_stderr      : matching Monte Carlo projection errors.
    training_means : (m, qoi_dim) per-point means of the training outputs.
    gp_basis       : standardized coefficient basis over the design.
    gp_hyper       : posterior-mode regression hyperparameters.
    meta           : seeds, sizes, and the serialization format tag.
    """

    kl: kl.KlBasis
    design: np.ndarray
    pc_coeffs: np.ndarray
    pc_stderr: np.ndarray
    training_means: np.ndarray
    gp_basis: gp.StandardizedBasis
    gp_hyper: gp.Hyperparams
    meta: dict

    def __post_init__(self):
        design = np.atleast_2d(np.asarray(self.design, dtype=float))
        coeffs = np.asarray(self.pc_coeffs, dtype=float)
        stderr = np.asarray(self.pc_stderr, dtype=float)
        means = np.asarray(self.training_means, dtype=float)
        m, p = design.shape
        if coeffs.ndim != 3 or coeffs.shape[0] != m:
            raise ValueError("pc_coeffs must be (design points, terms, modes)")
        if coeffs.shape[2] != self.kl.n_keep:
            raise ValueError("chaos coefficient modes do not match the "
                             "retained basis size")
        if stderr.shape != coeffs.shape:
            raise ValueError("pc_stderr shape must match pc_coeffs")
        if means.shape != (m, self.kl.dim):
            raise ValueError("training_means must be (design points, output dim)")
        rows = coeffs.shape[1] * coeffs.shape[2]
        if self.gp_basis.center.size != rows:
            raise ValueError("regression rows do not equal terms x modes")
        if self.gp_basis.design01.shape != (m, p):
            raise ValueError("regression design does not match the ensemble design")
        p_c = self.gp_basis.weights.shape[0]
        if self.gp_basis.weights.shape[1] != m:
            raise ValueError("regression weights do not cover the design points")
        if self.gp_hyper.lambda_w.size != p_c or self.gp_hyper.rho.shape != (p_c, p):
            raise ValueError("hyperparameter shapes do not match the basis")
        if self.meta.get("format") != FORMAT_VERSION:
            raise ValueError("model format tag {!r} does not match {!r}".format(
                self.meta.get("format"), FORMAT_VERSION))
        object.__setattr__(self, "design", design)
        object.__setattr__(self, "pc_coeffs", coeffs)
        object.__setattr__(self, "pc_stderr", stderr)
        object.__setattr__(self, "training_means", means)

    @property
    def n_design(self):
        return self.design.shape[0]

    @property
    def n_modes(self):
        return self.kl.n_keep

    @property
    def n_terms(self):
        return self.pc_coeffs.shape[1]

    @property
    def qoi_names(self):
        if self.kl.dim == len(sir_sde.QOI_NAMES):
            return sir_sde.QOI_NAMES
        return tuple(f"coord_{n + 1}" for n in range(self.kl.dim))

    def pc_expansion(self, j):
        """The stored chaos expansion of design point j."""
        return pce.PcExpansion(coeffs=self.pc_coeffs[j],
                               stderr=self.pc_stderr[j],
                               mc_count=int(self.meta.get("mc_count", 0)),
                               sampler=self.meta.get("sampler", "random"))


@dataclass(frozen=True)
class EmulatorSamples:
    """Surrogate draws plus the source index of every row.

    values holds the physically clamped statistics; raw keeps the
    unbounded chaos output for diagnostics.
    """

    values: np.ndarray
    raw: np.ndarray
    theta: np.ndarray
    theta_index: np.ndarray
    eta_index: np.ndarray
    zeta_index: np.ndarray


@dataclass(frozen=True)
class VarianceDecomposition:
    """Per-output variances with one source varied at a time.

    var_intrinsic varies the germ at the median input with the regression
    fixed at its mean; var_parametric varies the input and keeps the
    germ-averaged prediction; var_emulator varies the regression draw at
    the median input.  var_total varies everything at once.  Each se_*
    entry is the Monte Carlo standard error of its estimate.
    """

    qoi_names: tuple
    var_total: np.ndarray
    var_intrinsic: np.ndarray
    var_parametric: np.ndarray
    var_emulator: np.ndarray
    se_total: np.ndarray
    se_intrinsic: np.ndarray
    se_parametric: np.ndarray
    se_emulator: np.ndarray

    def as_rows(self):
        rows = []
        for q, name in enumerate(self.qoi_names):
            rows.append({
                "qoi": name,
                "var_total": float(self.var_total[q]),
                "var_intrinsic": float(self.var_intrinsic[q]),
                "var_parametric": float(self.var_parametric[q]),
                "var_emulator": float(self.var_emulator[q]),
                "se_total": float(self.se_total[q]),
                "se_intrinsic": float(self.se_intrinsic[q]),
                "se_parametric": float(self.se_parametric[q]),
                "se_emulator": float(self.se_emulator[q]),
            })
        return rows


def train(ensemble, config=None, *, keep_chain=False):
    """Fit the full surrogate from a replicate ensemble.

    The covariance eigenbasis pools every accepted realization across all
    design points; the chaos identification runs per design point on
    substream (seed, PROJECT, point index), so results do not depend on
    worker count.  With ``keep_chain`` the return value is the pair
    (model, regression chain) for diagnostics dumps.
    """
    cfg = config if config is not None else TrainConfig()
    points = tuple(ensemble.points)
    if len(points) < 2:
        raise DegenerateDataError(
            "need at least two design points, got {}".format(len(points)))
    for pt in points:
        got = pt.qois.shape[0]
        if got < _MIN_REPS:
            raise DegenerateDataError(
                "design point {} (beta={:g}, gamma={:g}): {} accepted "
                "realizations, need at least {}".format(
                    pt.index, pt.beta, pt.gamma, got, _MIN_REPS))

    design = np.array([[pt.beta, pt.gamma] for pt in points])
    pooled = np.vstack([pt.qois for pt in points])
    basis = kl.decompose(pooled, energy=cfg.kl_energy)

    def fit_point(j):
        pt = points[j]
        rng = streams.substream(cfg.seed, streams.PROJECT, j)
        try:
            coords = kl.project(basis, pt.qois)
            density = kde.fit(coords)
            return pce.project_coefficients(density, terms=cfg.pc_terms,
                                            mc_count=cfg.mc_count, rng=rng,
                                            sampler=cfg.sampler)
        except KlpcgpError as err:
            raise type(err)("design point {} (beta={:g}, gamma={:g}): {}".format(
                pt.index, pt.beta, pt.gamma, err)) from err

    if cfg.workers > 1 and len(points) > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            expansions = list(pool.map(fit_point, range(len(points))))
    else:
        expansions = [fit_point(j) for j in range(len(points))]

    pc_coeffs = np.stack([e.coeffs for e in expansions])
    pc_stderr = np.stack([e.stderr for e in expansions])
    # regression rows are mode-major with the chaos term index innermost
    values = pc_coeffs.transpose(0, 2, 1).reshape(len(points), -1).T
    data = gp.CoeffData(design=design, values=values)
    gp_basis = gp.build_basis(data, energy=cfg.gp_energy)
    chain = gp.mcmc(gp_basis, cfg.priors,
                    gp.McmcConfig(iterations=cfg.mcmc_iterations,
                                  burn_in=cfg.mcmc_burn_in,
                                  step=cfg.mcmc_step, seed=cfg.seed))

    meta = {
        "format": FORMAT_VERSION,
        "seed": int(cfg.seed),
        "ensemble_seed": int(ensemble.seed),
        "min_cinf_percent": float(ensemble.min_cinf_percent),
        "design_points": len(points),
        "qoi_dim": int(basis.dim),
        "n_modes": int(basis.n_keep),
        "kl_energy": float(cfg.kl_energy),
        "pc_terms": int(cfg.pc_terms),
        "mc_count": int(cfg.mc_count),
        "sampler": cfg.sampler,
        "gp_energy": float(cfg.gp_energy),
        "mcmc_iterations": int(cfg.mcmc_iterations),
        "mcmc_burn_in": int(cfg.mcmc_burn_in),
        "mcmc_step": float(cfg.mcmc_step),
        "accepted_per_point": [int(pt.qois.shape[0]) for pt in points],
        "gp_acceptance": [float(a) for a in chain.acceptance],
    }
    model = EmulatorModel(kl=basis, design=design, pc_coeffs=pc_coeffs,
                          pc_stderr=pc_stderr,
                          training_means=np.stack([pt.qois.mean(axis=0)
                                                   for pt in points]),
                          gp_basis=gp_basis, gp_hyper=chain.map_hyper,
                          meta=meta)
    return (model, chain) if keep_chain else model


def _scale01(model, theta):
    span = model.gp_basis.theta_max - model.gp_basis.theta_min
    return (theta - model.gp_basis.theta_min) / span


def _clamp(raw, dim):
    if dim != len(_QOI_LOWER):
        return raw.copy()
    return np.clip(raw, _QOI_LOWER, _QOI_UPPER)


def _mean_coefficients(pred, basis):
    """Deterministic coefficient map of a predictive: (rows, star points)."""
    w = pred.mean.reshape(basis.weights.shape[0], -1)
    return basis.basis @ w * basis.scale + basis.center[:, None]


def sample_at(model, theta, budget, rng, *, fix_zeta=False, fix_eta=False):
    """Draw the surrogate at one parameter point.

    For each of budget.n_eta regression draws, budget.n_zeta germ vectors
    feed the chaos expansion; budget.n_theta is ignored here.  Rows come
    out regression-draw-major.  ``fix_zeta`` pins the germ at its central
    value (the zero vector) and ``fix_eta`` pins the regression at its
    predictive mean; a pinned source consumes no randomness.
    """
    theta = np.asarray(theta, dtype=float).reshape(-1)
    p = model.design.shape[1]
    if theta.size != p:
        raise ValueError("theta has {} entries, the model takes {}".format(
            theta.size, p))
    theta01 = _scale01(model, theta)
    if np.any(theta01 < -_HULL_TOL) or np.any(theta01 > 1.0 + _HULL_TOL):
        warnings.warn(
            "parameter point {} lies outside the training design box; the "
            "regression variance grows there but the fit is unchecked".format(
                theta.tolist()),
            ExtrapolationWarning, stacklevel=2)

    pred = gp.predict(model.gp_hyper, model.gp_basis, theta01[None, :])
    if fix_eta:
        draws = np.tile(_mean_coefficients(pred, model.gp_basis)[:, 0],
                        (budget.n_eta, 1))
    else:
        draws = gp.draw_coefficients(pred, model.gp_basis,
                                     budget.n_eta, rng)[:, :, 0]
    n_modes, terms = model.n_modes, model.n_terms
    if fix_zeta:
        zeta = np.zeros((budget.n_eta, budget.n_zeta, n_modes))
    else:
        zeta = rng.standard_normal((budget.n_eta, budget.n_zeta, n_modes))

    raw = np.empty((budget.n_eta * budget.n_zeta, model.kl.dim))
    for e in range(budget.n_eta):
        expansion = pce.PcExpansion(coeffs=draws[e].reshape(n_modes, terms).T)
        coords = pce.sample_expansion(expansion, zeta[e])
        raw[e * budget.n_zeta:(e + 1) * budget.n_zeta] = \
            kl.reconstruct(model.kl, coords)

    count = raw.shape[0]
    return EmulatorSamples(
        values=_clamp(raw, model.kl.dim), raw=raw,
        theta=np.tile(theta, (count, 1)),
        theta_index=np.zeros(count, dtype=int),
        eta_index=np.repeat(np.arange(budget.n_eta), budget.n_zeta),
        zeta_index=np.tile(np.arange(budget.n_zeta), budget.n_eta))


def sample_full(model, dist, budget, rng, *, fix_theta=False, fix_zeta=False,
                fix_eta=False):
    """Draw with every uncertainty source active: parameters from ``dist``,
    then per parameter point the regression and germ layers.

    Each ``fix_*`` flag pins that source at its central value instead of
    drawing it; ``fix_theta`` uses the distribution median.
    """
    if model.design.shape[1] != 2:
        raise ValueError("the rate distribution supplies 2 parameters, the "
                         "model takes {}".format(model.design.shape[1]))
    if fix_theta:
        thetas = np.tile(np.asarray(dist.median(), dtype=float),
                         (budget.n_theta, 1))
    else:
        thetas = sir_sde.sample_parameters(dist, budget.n_theta, rng)
    parts = [sample_at(model, thetas[t], budget, rng,
                       fix_zeta=fix_zeta, fix_eta=fix_eta)
             for t in range(budget.n_theta)]
    per_point = budget.n_eta * budget.n_zeta
    return EmulatorSamples(
        values=np.vstack([p.values for p in parts]),
        raw=np.vstack([p.raw for p in parts]),
        theta=np.vstack([p.theta for p in parts]),
        theta_index=np.repeat(np.arange(budget.n_theta), per_point),
        eta_index=np.concatenate([p.eta_index for p in parts]),
        zeta_index=np.concatenate([p.zeta_index for p in parts]))


def _var_se(x):
    """Sample variance per column and its asymptotic Monte Carlo error."""
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    var = x.var(axis=0, ddof=1)
    centered = x - x.mean(axis=0)
    fourth = np.mean(centered ** 4, axis=0)
    return var, np.sqrt(np.maximum(fourth - var ** 2, 0.0) / n)


def variance_decomposition(model, dist, budget, rng):
    """Variance of each output under one source of uncertainty at a time.

    Draw counts come from the budget, at least 100 per source.  The total
    row uses one germ vector and one regression draw per parameter draw,
    so its budget.n_theta full-uncertainty draws are independent and the
    reported standard error is valid.
    """
    for name in ("n_theta", "n_zeta", "n_eta"):
        if getattr(budget, name) < 100:
            raise ValueError("variance decomposition needs {} >= 100, "
                             "got {}".format(name, getattr(budget, name)))
    basis = model.gp_basis
    terms = model.n_terms
    theta_med = np.asarray(dist.median(), dtype=float)
    med01 = _scale01(model, theta_med)
    pred_med = gp.predict(model.gp_hyper, basis, med01[None, :])

    # germ only: regression held at its mean map, input held at the median
    c_mean = _mean_coefficients(pred_med, basis)[:, 0]
    expansion = pce.PcExpansion(coeffs=c_mean.reshape(model.n_modes, terms).T)
    zeta = rng.standard_normal((budget.n_zeta, model.n_modes))
    intrinsic = kl.reconstruct(model.kl, pce.sample_expansion(expansion, zeta))
    var_intr, se_intr = _var_se(intrinsic)

    # input only: germ-averaged prediction is the constant chaos term
    thetas = sir_sde.sample_parameters(dist, budget.n_theta, rng)
    thetas01 = _scale01(model, thetas)
    cond_means = np.empty((budget.n_theta, model.kl.dim))
    for lo in range(0, budget.n_theta, _PREDICT_BLOCK):
        hi = min(lo + _PREDICT_BLOCK, budget.n_theta)
        pred = gp.predict(model.gp_hyper, basis, thetas01[lo:hi])
        c0 = _mean_coefficients(pred, basis)[0::terms]
        cond_means[lo:hi] = kl.reconstruct(model.kl, c0.T)
    var_par, se_par = _var_se(cond_means)

    # regression only: germ-averaged draws at the median input
    draws = gp.draw_coefficients(pred_med, basis, budget.n_eta, rng)[:, :, 0]
    emu = kl.reconstruct(model.kl, draws[:, 0::terms])
    var_emu, se_emu = _var_se(emu)

    full = sample_full(model, dist,
                       UncertaintyBudget(n_theta=budget.n_theta), rng)
    var_tot, se_tot = _var_se(full.raw)

    return VarianceDecomposition(
        qoi_names=model.qoi_names,
        var_total=var_tot, var_intrinsic=var_intr,
        var_parametric=var_par, var_emulator=var_emu,
        se_total=se_tot, se_intrinsic=se_intr,
        se_parametric=se_par, se_emulator=se_emu)


# ------------------------------------------------------------- serialization

_ARRAY_NAMES = ("kl_mean", "kl_eigenvalues", "kl_modes", "design", "pc_coeffs",
                "pc_stderr", "training_means", "gp_center", "gp_basis",
                "gp_weights", "gp_design01", "gp_theta_min", "gp_theta_max",
                "gp_lambda_w", "gp_rho", "scalars")


def _model_arrays(model):
    basis, hyper = model.gp_basis, model.gp_hyper
    return (
        ("kl_mean", model.kl.mean),
        ("kl_eigenvalues", model.kl.eigenvalues),
        ("kl_modes", model.kl.modes),
        ("design", model.design),
        ("pc_coeffs", model.pc_coeffs),
        ("pc_stderr", model.pc_stderr),
        ("training_means", model.training_means),
        ("gp_center", basis.center),
        ("gp_basis", basis.basis),
        ("gp_weights", basis.weights),
        ("gp_design01", basis.design01),
        ("gp_theta_min", basis.theta_min),
        ("gp_theta_max", basis.theta_max),
        ("gp_lambda_w", hyper.lambda_w),
        ("gp_rho", hyper.rho),
        ("scalars", np.array([basis.scale, hyper.lambda_delta])),
    )


def save(model, path):
    """Write the model container: magic, JSON header, float payload, crc."""
    arrays = [(name, np.ascontiguousarray(arr, dtype="<f8"))
              for name, arr in _model_arrays(model)]
    header = {
        "format": FORMAT_VERSION,
        "kl_n_keep": int(model.kl.n_keep),
        "arrays": [[name, list(arr.shape)] for name, arr in arrays],
        "meta": model.meta,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob = bytearray()
    blob += _MAGIC
    blob += struct.pack("<Q", len(head))
    blob += head
    for _, arr in arrays:
        blob += arr.tobytes()
    blob += struct.pack("<I", zlib.crc32(bytes(blob)) & 0xFFFFFFFF)
    with open(path, "wb") as sink:
        sink.write(bytes(blob))


def load(path):
    """Read a model container written by :func:`save`."""
    with open(path, "rb") as source:
        blob = source.read()
    if len(blob) < len(_MAGIC) + 12:
        raise ModelFileError("file is too short to be a model container")
    if blob[:len(_MAGIC)] != _MAGIC:
        raise ModelFileError("not a klpcgp model file (bad leading magic)")
    stored = struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != stored:
        raise ModelFileError("checksum mismatch: file is truncated or corrupt")
    head_len = struct.unpack("<Q", blob[8:16])[0]
    if 16 + head_len + 4 > len(blob):
        raise ModelFileError("header length field exceeds the file size")
    try:
        header = json.loads(blob[16:16 + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise ModelFileError("model header is not valid JSON: {}".format(err)) \
            from err
    version = header.get("format")
    if version != FORMAT_VERSION:
        raise ModelVersionError(
            "model file declares format {!r}; this build reads {!r}".format(
                version, FORMAT_VERSION))

    payload = blob[16 + head_len:-4]
    arrays = {}
    offset = 0
    for name, shape in header["arrays"]:
        size = int(np.prod(shape, dtype=np.int64)) * 8
        if offset + size > len(payload):
            raise ModelFileError("payload ends before array {!r}".format(name))
        arrays[name] = np.frombuffer(
            payload[offset:offset + size], dtype="<f8").reshape(shape).copy()
        offset += size
    if offset != len(payload):
        raise ModelFileError("payload carries {} unexpected trailing bytes"
                             .format(len(payload) - offset))
    missing = set(_ARRAY_NAMES) - set(arrays)
    if missing:
        raise ModelFileError("model file lacks arrays: {}".format(
            ", ".join(sorted(missing))))

    basis = kl.KlBasis(mean=arrays["kl_mean"],
                       eigenvalues=arrays["kl_eigenvalues"],
                       modes=arrays["kl_modes"],
                       n_keep=int(header["kl_n_keep"]))
    gp_basis = gp.StandardizedBasis(
        center=arrays["gp_center"], scale=float(arrays["scalars"][0]),
        basis=arrays["gp_basis"], weights=arrays["gp_weights"],
        design01=arrays["gp_design01"], theta_min=arrays["gp_theta_min"],
        theta_max=arrays["gp_theta_max"])
    hyper = gp.Hyperparams(lambda_delta=float(arrays["scalars"][1]),
                           lambda_w=arrays["gp_lambda_w"],
                           rho=arrays["gp_rho"])
    try:
        return EmulatorModel(kl=basis, design=arrays["design"],
                             pc_coeffs=arrays["pc_coeffs"],
                             pc_stderr=arrays["pc_stderr"],
                             training_means=arrays["training_means"],
                             gp_basis=gp_basis, gp_hyper=hyper,
                             meta=header["meta"])
    except ValueError as err:
        raise ModelFileError("model file is internally inconsistent: {}"
                             .format(err)) from err
