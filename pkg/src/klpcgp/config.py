"""Experiment configuration: one TOML file drives every command.

Every model parameter has a named key with the built-in study's value as
default, so an empty file plus a seed reproduces the reference experiment.
Unknown keys are rejected with the section and key named, and the seed is
mandatory: a run without one would be silently nondeterministic.
"""

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, replace

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - py3.10 fallback
    import tomli as tomllib

from . import emulator, gp, streams
from .errors import ConfigError
from .sir_sde import ModelParams, ParamDistribution, SimConfig

_REQUIRED = object()


@dataclass(frozen=True)
class DesignSpec:
    """Where to place the training design in (beta, gamma) space.

    kind "grid" lays size x size points uniformly over the box whose
    corners are the quantile_lo and quantile_hi quantiles of the rate
    distribution; "lhs" draws a Latin hypercube of `size` points over the
    same quantile range; "explicit" takes the listed pairs verbatim.
    """

    kind: str = "grid"
    size: int = 3
    quantile_lo: float = 0.01
    quantile_hi: float = 0.99
    points: tuple = ()

    def __post_init__(self):
        if self.kind not in ("grid", "lhs", "explicit"):
            raise ConfigError("design.kind must be 'grid', 'lhs' or "
                              "'explicit', got {!r}".format(self.kind))
        if self.kind == "explicit":
            pts = tuple(tuple(float(v) for v in p) for p in self.points)
            if not pts or any(len(p) != 2 for p in pts):
                raise ConfigError("design.points must be a non-empty list "
                                  "of [beta, gamma] pairs")
            if any(not np.isfinite(v) or v <= 0 for p in pts for v in p):
                raise ConfigError("design.points entries must be positive")
            object.__setattr__(self, "points", pts)
        else:
            if int(self.size) < 1:
                raise ConfigError("design.size must be >= 1")
            object.__setattr__(self, "size", int(self.size))
            if not 0.0 < self.quantile_lo < self.quantile_hi < 1.0:
                raise ConfigError("design quantiles must satisfy "
                                  "0 < lo < hi < 1")

    def resolve(self, dist, seed):
        """The concrete (m, 2) design for this distribution and seed."""
        if self.kind == "explicit":
            return np.asarray(self.points, dtype=float)
        lo, hi = self.quantile_lo, self.quantile_hi
        if self.kind == "grid":
            betas = np.linspace(dist.ppf_beta(lo), dist.ppf_beta(hi),
                                self.size)
            gammas = np.linspace(dist.ppf_gamma(lo), dist.ppf_gamma(hi),
                                 self.size)
            return np.array([(b, g) for b in betas for g in gammas])
        rng = streams.substream(seed, streams.THETA)
        out = np.empty((self.size, 2))
        for axis, ppf in enumerate((dist.ppf_beta, dist.ppf_gamma)):
            # one stratum per point, a uniform draw inside each
            u = (rng.permutation(self.size) + rng.random(self.size))
            q = lo + (hi - lo) * u / self.size
            out[:, axis] = [ppf(v) for v in q]
        return out


@dataclass(frozen=True)
class CompareSettings:
    """Draw counts for the simulator-vs-surrogate comparison."""

    n_brute: int = 10_000
    n_theta: int = 10_000
    n_zeta: int = 1
    n_eta: int = 1
    max_rounds: int = 1000

    def __post_init__(self):
        for name in ("n_brute", "n_theta", "n_zeta", "n_eta", "max_rounds"):
            if int(getattr(self, name)) < 1:
                raise ConfigError("compare.{} must be >= 1".format(name))
            object.__setattr__(self, name, int(getattr(self, name)))

    @property
    def budget(self):
        return emulator.UncertaintyBudget(self.n_theta, self.n_zeta,
                                          self.n_eta)


@dataclass(frozen=True)
class ReportSettings:
    """Draw counts for variance attribution and the training self-check."""

    n_theta: int = 2000
    n_zeta: int = 2000
    n_eta: int = 200
    selfcheck_zeta: int = 2000
    selfcheck_eta: int = 20

    def __post_init__(self):
        for name in ("n_theta", "n_zeta", "n_eta",
                     "selfcheck_zeta", "selfcheck_eta"):
            if int(getattr(self, name)) < 1:
                raise ConfigError("report.{} must be >= 1".format(name))
            object.__setattr__(self, name, int(getattr(self, name)))

    @property
    def budget(self):
        return emulator.UncertaintyBudget(self.n_theta, self.n_zeta,
                                          self.n_eta)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a run needs, resolved and validated."""

    seed: int
    output: str = "out"
    threads: int = 0
    population: float = 10_000.0
    s0: float = 9_998.0
    i0: float = 2.0
    sim: SimConfig = field(default_factory=SimConfig)
    dist: ParamDistribution = field(default_factory=ParamDistribution)
    design: DesignSpec = field(default_factory=DesignSpec)
    replicates: int = 200
    min_cinf_percent: float = 10.0
    max_attempts: int = 0
    train: emulator.TrainConfig = field(
        default_factory=emulator.TrainConfig)
    sample: emulator.UncertaintyBudget = field(
        default_factory=lambda: emulator.UncertaintyBudget(100, 10, 100))
    compare: CompareSettings = field(default_factory=CompareSettings)
    report: ReportSettings = field(default_factory=ReportSettings)

    def __post_init__(self):
        if self.seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        if self.threads < 0:
            raise ConfigError("threads must be >= 0 (0 = all cores)")
        if self.replicates < 1:
            raise ConfigError("ensemble.replicates must be >= 1")
        if not 0.0 <= self.min_cinf_percent <= 100.0:
            raise ConfigError("ensemble.min_cinf_percent must lie in "
                              "[0, 100]")
        if self.max_attempts and self.max_attempts < self.replicates:
            raise ConfigError("ensemble.max_attempts cannot undercut "
                              "replicates")
        self.base_params()  # runs the state validation

    def base_params(self):
        """Model parameters at the distribution median; ensemble and
        brute-force runs substitute their own rates."""
        beta, gamma = self.dist.median()
        try:
            return ModelParams(beta=beta, gamma=gamma,
                               population=self.population,
                               s0=self.s0, i0=self.i0)
        except ValueError as err:
            raise ConfigError("model section: {}".format(err)) from None

    def train_config(self, workers):
        return replace(self.train, seed=self.seed, workers=max(1, workers))


def _section(data, name):
    raw = data.pop(name, {})
    if not isinstance(raw, dict):
        raise ConfigError("[{}] must be a table".format(name))
    return dict(raw)


def _take(table, section, key, default, kind):
    if key not in table:
        if default is _REQUIRED:
            raise ConfigError("missing required key {}.{}".format(
                section, key) if section else
                "missing required key {}".format(key))
        return default
    value = table.pop(key)
    label = "{}.{}".format(section, key) if section else key
    if kind is float and isinstance(value, (int, float)) \
            and not isinstance(value, bool):
        return float(value)
    if kind is int and isinstance(value, int) and not isinstance(value, bool):
        return int(value)
    if kind is str and isinstance(value, str):
        return value
    if kind is list and isinstance(value, list):
        return value
    raise ConfigError("{} must be a {}, got {!r}".format(
        label, kind.__name__, value))


def _reject_unknown(table, section):
    if table:
        key = sorted(table)[0]
        label = "{}.{}".format(section, key) if section else key
        raise ConfigError("unknown config key {}".format(label))


def config_from_dict(data):
    """Build and validate an ExperimentConfig from parsed TOML data."""
    data = dict(data)
    seed = _take(data, "", "seed", _REQUIRED, int)
    output = _take(data, "", "output", "out", str)
    threads = _take(data, "", "threads", 0, int)

    model = _section(data, "model")
    population = _take(model, "model", "population", 10_000.0, float)
    s0 = _take(model, "model", "s0", 9_998.0, float)
    i0 = _take(model, "model", "i0", 2.0, float)
    _reject_unknown(model, "model")

    integ = _section(data, "integrator")
    try:
        sim = SimConfig(
            dt=_take(integ, "integrator", "dt", 0.01, float),
            t_max=_take(integ, "integrator", "t_max", 365.0, float),
            extinction_threshold=_take(integ, "integrator",
                                       "extinction_threshold", 0.5, float))
    except ValueError as err:
        raise ConfigError("integrator section: {}".format(err)) from None
    _reject_unknown(integ, "integrator")

    rates = _section(data, "rates")
    try:
        dist = ParamDistribution(
            mu_beta=_take(rates, "rates", "mu_beta", 1.0, float),
            sigma2_beta=_take(rates, "rates", "sigma2_beta", 1.25e-4, float),
            mu_gamma=_take(rates, "rates", "mu_gamma", 0.8, float),
            sigma2_gamma=_take(rates, "rates", "sigma2_gamma", 1.25e-4,
                               float),
            scale=_take(rates, "rates", "scale", "log", str))
    except ValueError as err:
        raise ConfigError("rates section: {}".format(err)) from None
    _reject_unknown(rates, "rates")

    des = _section(data, "design")
    design = DesignSpec(
        kind=_take(des, "design", "kind", "grid", str),
        size=_take(des, "design", "size", 3, int),
        quantile_lo=_take(des, "design", "quantile_lo", 0.01, float),
        quantile_hi=_take(des, "design", "quantile_hi", 0.99, float),
        points=tuple(_take(des, "design", "points", [], list)))
    _reject_unknown(des, "design")

    ens = _section(data, "ensemble")
    replicates = _take(ens, "ensemble", "replicates", 200, int)
    min_cinf = _take(ens, "ensemble", "min_cinf_percent", 10.0, float)
    max_attempts = _take(ens, "ensemble", "max_attempts", 0, int)
    _reject_unknown(ens, "ensemble")

    tr = _section(data, "train")
    priors_tab = _section(tr, "priors")
    try:
        priors = gp.PriorSpec(
            a_w=_take(priors_tab, "train.priors", "a_w", 5.0, float),
            b_w=_take(priors_tab, "train.priors", "b_w", 5.0, float),
            a_rho=_take(priors_tab, "train.priors", "a_rho", 1.0, float),
            b_rho=_take(priors_tab, "train.priors", "b_rho", 0.1, float),
            a_delta=_take(priors_tab, "train.priors", "a_delta", 1.0, float),
            b_delta=_take(priors_tab, "train.priors", "b_delta", 1e-4,
                          float))
        _reject_unknown(priors_tab, "train.priors")
        train = emulator.TrainConfig(
            kl_energy=_take(tr, "train", "kl_energy", 1.0, float),
            pc_terms=_take(tr, "train", "pc_terms", 8, int),
            mc_count=_take(tr, "train", "mc_count", 100_000, int),
            sampler=_take(tr, "train", "sampler", "random", str),
            gp_energy=_take(tr, "train", "gp_energy", 0.99, float),
            mcmc_iterations=_take(tr, "train", "mcmc_iterations", 5000, int),
            mcmc_burn_in=_take(tr, "train", "mcmc_burn_in", 1000, int),
            mcmc_step=_take(tr, "train", "mcmc_step", 0.2, float),
            seed=seed, priors=priors)
    except ValueError as err:
        raise ConfigError("train section: {}".format(err)) from None
    _reject_unknown(tr, "train")

    samp = _section(data, "sample")
    try:
        sample = emulator.UncertaintyBudget(
            n_theta=_take(samp, "sample", "n_theta", 100, int),
            n_zeta=_take(samp, "sample", "n_zeta", 10, int),
            n_eta=_take(samp, "sample", "n_eta", 100, int))
    except ValueError as err:
        raise ConfigError("sample section: {}".format(err)) from None
    _reject_unknown(samp, "sample")

    comp = _section(data, "compare")
    compare = CompareSettings(
        n_brute=_take(comp, "compare", "n_brute", 10_000, int),
        n_theta=_take(comp, "compare", "n_theta", 10_000, int),
        n_zeta=_take(comp, "compare", "n_zeta", 1, int),
        n_eta=_take(comp, "compare", "n_eta", 1, int),
        max_rounds=_take(comp, "compare", "max_rounds", 1000, int))
    _reject_unknown(comp, "compare")

    rep = _section(data, "report")
    report = ReportSettings(
        n_theta=_take(rep, "report", "n_theta", 2000, int),
        n_zeta=_take(rep, "report", "n_zeta", 2000, int),
        n_eta=_take(rep, "report", "n_eta", 200, int),
        selfcheck_zeta=_take(rep, "report", "selfcheck_zeta", 2000, int),
        selfcheck_eta=_take(rep, "report", "selfcheck_eta", 20, int))
    _reject_unknown(rep, "report")

    _reject_unknown(data, "")
    return ExperimentConfig(
        seed=seed, output=output, threads=threads, population=population,
        s0=s0, i0=i0, sim=sim, dist=dist, design=design,
        replicates=replicates, min_cinf_percent=min_cinf,
        max_attempts=max_attempts, train=train, sample=sample,
        compare=compare, report=report)


def load_config(path):
    """Parse a TOML experiment file; all problems become ConfigError."""
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError("config file not found: {}".format(path)) from None
    except tomllib.TOMLDecodeError as err:
        raise ConfigError("{}: {}".format(path, err)) from None
    return config_from_dict(data)


def config_digest(cfg):
    """Stable hash of the fully resolved configuration."""
    blob = json.dumps(dataclasses.asdict(cfg), sort_keys=True,
                      default=repr).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()
