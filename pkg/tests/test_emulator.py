"""Tests for the pipeline orchestrator (emulator).

The synthetic ensembles used here have Gaussian outputs whose means move
linearly with the two rate parameters, so the trained surrogate has a known
first moment at every design point and a known degenerate limit (zero
coefficients reproduce the pooled mean exactly).  Serialization tests pin
the container layout byte-for-byte through crafted corruption.
"""

import dataclasses
import json
import struct
import warnings
import zlib

import numpy as np
import pytest

from klpcgp import emulator, gp, kl, pce, sir_sde
from klpcgp.errors import DegenerateDataError, ModelFileError, ModelVersionError

_DESIGN = ((1.0, 0.8), (1.3, 0.8), (1.0, 1.1), (1.3, 1.1))
_MIX = np.array([
    [2.0, 0.0, 0.0, 0.0],
    [0.6, 1.5, 0.0, 0.0],
    [0.2, 0.3, 1.0, 0.0],
    [1.0, 0.4, 0.2, 2.5],
])


def _point_mean(beta, gamma):
    return np.array([
        30.0 + 25.0 * (beta - 1.0) - 10.0 * (gamma - 0.8),
        40.0 - 12.0 * (beta - 1.0) + 20.0 * (gamma - 0.8),
        15.0 + 6.0 * (beta - 1.0) + 4.0 * (gamma - 0.8),
        55.0 + 30.0 * (beta - 1.0) - 18.0 * (gamma - 0.8),
    ])


def _make_ensemble(reps=60, seed=0, mean_fn=_point_mean, design=_DESIGN):
    """Synthetic accepted-only ensemble with Gaussian outputs."""
    rng = np.random.default_rng(seed)
    points = []
    for j, (beta, gamma) in enumerate(design):
        qois = mean_fn(beta, gamma) + rng.standard_normal((reps, 4)) @ _MIX.T
        rows = np.hstack([qois, np.ones((reps, 1))])
        points.append(sir_sde.DesignPointEnsemble(
            index=j, beta=beta, gamma=gamma, target=reps, rows=rows))
    return sir_sde.EnsembleResult(points=tuple(points),
                                  design=np.asarray(design, dtype=float),
                                  seed=seed, min_cinf_percent=10.0)


_CFG = emulator.TrainConfig(pc_terms=5, mc_count=4000, mcmc_iterations=400,
                            mcmc_burn_in=100, mcmc_step=0.3, seed=7)

# narrow rate distribution centered inside the design box
_DIST = sir_sde.ParamDistribution(mu_beta=1.15, sigma2_beta=1e-3,
                                  mu_gamma=0.95, sigma2_gamma=1e-3,
                                  scale="natural")


@pytest.fixture(scope="module")
def trained():
    return emulator.train(_make_ensemble(), _CFG)


# ---------------------------------------------------------------------- train

def test_train_builds_consistent_model(trained):
    model = trained
    assert model.n_design == 4
    assert model.n_modes == 4          # full-rank 4-dim noise, energy 1.0
    assert model.n_terms == 5
    assert model.pc_coeffs.shape == (4, 5, 4)
    assert model.pc_stderr.shape == (4, 5, 4)
    assert model.training_means.shape == (4, 4)
    assert model.gp_basis.center.size == 20
    assert model.gp_basis.design01.min() == 0.0
    assert model.gp_basis.design01.max() == 1.0
    assert model.meta["format"] == emulator.FORMAT_VERSION
    assert model.meta["seed"] == 7
    assert model.meta["accepted_per_point"] == [60, 60, 60, 60]
    np.testing.assert_allclose(
        model.training_means,
        np.vstack([p.qois.mean(axis=0) for p in _make_ensemble().points]))


def test_train_needs_two_design_points():
    ens = _make_ensemble()
    solo = sir_sde.EnsembleResult(points=ens.points[:1], design=ens.design[:1],
                                  seed=0, min_cinf_percent=10.0)
    with pytest.raises(DegenerateDataError):
        emulator.train(solo, _CFG)


def test_train_needs_thirty_accepted_rows():
    ens = _make_ensemble(reps=29)
    with pytest.raises(DegenerateDataError, match="design point 0"):
        emulator.train(ens, _CFG)


def test_train_attaches_design_point_context():
    ens = _make_ensemble()
    # constant rows at point 1: its basis coordinates have zero spread
    bad = ens.points[1]
    rows = np.hstack([np.tile(_point_mean(bad.beta, bad.gamma), (60, 1)),
                      np.ones((60, 1))])
    points = list(ens.points)
    points[1] = dataclasses.replace(bad, rows=rows)
    broken = sir_sde.EnsembleResult(points=tuple(points), design=ens.design,
                                    seed=0, min_cinf_percent=10.0)
    with pytest.raises(DegenerateDataError, match=r"design point 1 \(beta=1\.3"):
        emulator.train(broken, _CFG)


def test_train_deterministic_and_worker_invariant(trained, tmp_path):
    paths = [tmp_path / name for name in ("a.klpcgp", "b.klpcgp", "c.klpcgp")]
    emulator.save(trained, paths[0])
    emulator.save(emulator.train(_make_ensemble(), _CFG), paths[1])
    emulator.save(emulator.train(_make_ensemble(),
                                 dataclasses.replace(_CFG, workers=3)),
                  paths[2])
    blobs = [p.read_bytes() for p in paths]
    assert blobs[0] == blobs[1]
    assert blobs[0] == blobs[2]


def test_duplicated_data_across_two_points_trains_flat():
    # same realizations assigned to both design points: the only variation
    # across the design is projection noise, so the surface comes out flat
    rng = np.random.default_rng(3)
    qois = _point_mean(1.0, 0.8) + rng.standard_normal((40, 4)) @ _MIX.T
    rows = np.hstack([qois, np.ones((40, 1))])
    points = tuple(sir_sde.DesignPointEnsemble(index=j, beta=b, gamma=g,
                                               target=40, rows=rows)
                   for j, (b, g) in enumerate(((1.0, 0.8), (1.2, 1.0))))
    ens = sir_sde.EnsembleResult(points=points,
                                 design=np.array([[1.0, 0.8], [1.2, 1.0]]),
                                 seed=0, min_cinf_percent=10.0)
    model = emulator.train(ens, _CFG)
    assert np.all(model.gp_hyper.rho > 0.2)
    res = emulator.sample_at(model, (1.1, 0.9),
                             emulator.UncertaintyBudget(n_zeta=50, n_eta=2),
                             np.random.default_rng(0))
    assert np.all(np.isfinite(res.values))


def test_model_constructor_validates(trained):
    with pytest.raises(ValueError):
        dataclasses.replace(trained, pc_coeffs=trained.pc_coeffs[:, :, :2])
    with pytest.raises(ValueError):
        dataclasses.replace(trained, training_means=np.zeros((1, 4)))
    with pytest.raises(ValueError):
        dataclasses.replace(trained, meta={**trained.meta, "format": "nope"})


def test_pc_expansion_accessor(trained):
    exp = trained.pc_expansion(2)
    assert isinstance(exp, pce.PcExpansion)
    np.testing.assert_array_equal(exp.coeffs, trained.pc_coeffs[2])
    assert exp.mc_count == _CFG.mc_count


# ------------------------------------------------------------------ sample_at

def test_zero_coefficients_reproduce_the_pooled_mean(trained):
    basis = trained.gp_basis
    flat = dataclasses.replace(
        trained,
        gp_basis=gp.StandardizedBasis(
            center=np.zeros_like(basis.center), scale=basis.scale,
            basis=np.zeros_like(basis.basis), weights=basis.weights,
            design01=basis.design01, theta_min=basis.theta_min,
            theta_max=basis.theta_max))
    res = emulator.sample_at(flat, (1.1, 0.9),
                             emulator.UncertaintyBudget(n_zeta=7, n_eta=3),
                             np.random.default_rng(1))
    np.testing.assert_array_equal(res.raw, np.tile(trained.kl.mean, (21, 1)))


def test_sample_at_recovers_training_means(trained):
    budget = emulator.UncertaintyBudget(n_zeta=10_000, n_eta=1)
    for j, theta in enumerate(_DESIGN):
        res = emulator.sample_at(trained, theta, budget,
                                 np.random.default_rng(100 + j))
        got = res.values.mean(axis=0)
        want = trained.training_means[j]
        assert np.all(np.abs(got - want) <= 0.10 * np.abs(want)), (j, got, want)


def test_sample_at_reproducible(trained):
    budget = emulator.UncertaintyBudget(n_zeta=5, n_eta=4)
    a = emulator.sample_at(trained, (1.2, 0.9), budget, np.random.default_rng(9))
    b = emulator.sample_at(trained, (1.2, 0.9), budget, np.random.default_rng(9))
    c = emulator.sample_at(trained, (1.2, 0.9), budget, np.random.default_rng(10))
    np.testing.assert_array_equal(a.raw, b.raw)
    np.testing.assert_array_equal(a.values, b.values)
    assert not np.array_equal(a.raw, c.raw)


def test_sample_at_tags_and_shapes(trained):
    res = emulator.sample_at(trained, (1.1, 0.9),
                             emulator.UncertaintyBudget(n_zeta=3, n_eta=2),
                             np.random.default_rng(2))
    assert res.values.shape == (6, 4)
    assert res.raw.shape == (6, 4)
    np.testing.assert_array_equal(res.theta, np.tile([1.1, 0.9], (6, 1)))
    np.testing.assert_array_equal(res.theta_index, np.zeros(6, dtype=int))
    np.testing.assert_array_equal(res.eta_index, [0, 0, 0, 1, 1, 1])
    np.testing.assert_array_equal(res.zeta_index, [0, 1, 2, 0, 1, 2])


def test_sample_at_warns_outside_the_design_box(trained):
    budget = emulator.UncertaintyBudget(n_zeta=2, n_eta=1)
    with pytest.warns(emulator.ExtrapolationWarning):
        emulator.sample_at(trained, (1.6, 0.9), budget, np.random.default_rng(0))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        emulator.sample_at(trained, (1.15, 0.95), budget,
                           np.random.default_rng(0))


def test_sample_at_clamps_but_keeps_raw(trained):
    budget = emulator.UncertaintyBudget(n_zeta=20, n_eta=1)
    low = dataclasses.replace(
        trained, kl=dataclasses.replace(trained.kl,
                                        mean=trained.kl.mean - 1e4))
    res = emulator.sample_at(low, (1.1, 0.9), budget, np.random.default_rng(3))
    assert np.all(res.raw < 0.0)
    np.testing.assert_array_equal(res.values, np.zeros((20, 4)))

    high = dataclasses.replace(
        trained, kl=dataclasses.replace(trained.kl,
                                        mean=trained.kl.mean + 1e4))
    res = emulator.sample_at(high, (1.1, 0.9), budget, np.random.default_rng(3))
    assert np.all(res.values[:, 0] == 100.0)    # percentages capped
    assert np.all(res.values[:, 3] == 100.0)
    np.testing.assert_array_equal(res.values[:, 1], res.raw[:, 1])  # times free
    np.testing.assert_array_equal(res.values[:, 2], res.raw[:, 2])
    assert np.all(res.raw[:, 0] > 100.0)


# ---------------------------------------------------------------- sample_full

def test_sample_full_smallest_budget(trained):
    res = emulator.sample_full(trained, _DIST,
                               emulator.UncertaintyBudget(1, 1, 1),
                               np.random.default_rng(4))
    assert res.values.shape == (1, 4)
    assert res.theta_index[0] == 0 and res.eta_index[0] == 0
    assert res.zeta_index[0] == 0


def test_sample_full_tags_and_determinism(trained):
    budget = emulator.UncertaintyBudget(n_theta=2, n_zeta=3, n_eta=4)
    res = emulator.sample_full(trained, _DIST, budget, np.random.default_rng(5))
    again = emulator.sample_full(trained, _DIST, budget, np.random.default_rng(5))
    assert res.values.shape == (24, 4)
    np.testing.assert_array_equal(res.theta_index, np.repeat([0, 1], 12))
    np.testing.assert_array_equal(res.eta_index,
                                  np.tile(np.repeat(np.arange(4), 3), 2))
    np.testing.assert_array_equal(res.zeta_index, np.tile(np.arange(3), 8))
    # one parameter pair per theta block, distinct across blocks
    assert len(np.unique(res.theta[:12], axis=0)) == 1
    assert not np.array_equal(res.theta[0], res.theta[12])
    np.testing.assert_array_equal(res.raw, again.raw)


def test_full_variance_dominates_fixed_theta_variance(trained):
    full = emulator.sample_full(trained, _DIST,
                                emulator.UncertaintyBudget(40, 200, 2),
                                np.random.default_rng(6))
    fixed = emulator.sample_at(trained, _DIST.median(),
                               emulator.UncertaintyBudget(n_zeta=8000, n_eta=1),
                               np.random.default_rng(7))
    v_full = full.raw.var(axis=0, ddof=1)
    v_fixed = fixed.raw.var(axis=0, ddof=1)
    assert np.all(v_full >= 0.95 * v_fixed)


# ------------------------------------------------------- variance decomposition

def test_variance_decomposition_components(trained):
    budget = emulator.UncertaintyBudget(n_theta=300, n_zeta=2000, n_eta=300)
    dec = emulator.variance_decomposition(trained, _DIST, budget,
                                          np.random.default_rng(8))
    assert dec.qoi_names == sir_sde.QOI_NAMES
    for arr in (dec.var_total, dec.var_intrinsic, dec.var_parametric,
                dec.var_emulator):
        assert arr.shape == (4,)
        assert np.all(arr >= 0.0)
    # the mean surface moves with theta, so parametric variance is real
    assert np.all(dec.var_parametric > 5.0 * dec.se_parametric)
    slack = 3.0 * np.hypot(dec.se_total, dec.se_intrinsic)
    assert np.all(dec.var_total >= dec.var_intrinsic - slack)
    slack = 3.0 * np.hypot(dec.se_total, dec.se_parametric)
    assert np.all(dec.var_total >= dec.var_parametric - slack)


def test_variance_decomposition_needs_hundred_draws(trained):
    with pytest.raises(ValueError):
        emulator.variance_decomposition(
            trained, _DIST, emulator.UncertaintyBudget(99, 100, 100),
            np.random.default_rng(0))


def test_theta_invariant_data_has_tiny_parametric_share():
    ens = _make_ensemble(reps=100, seed=11,
                         mean_fn=lambda beta, gamma: _point_mean(1.15, 0.95))
    model = emulator.train(ens, dataclasses.replace(_CFG, mc_count=8000))
    dec = emulator.variance_decomposition(
        model, _DIST, emulator.UncertaintyBudget(200, 1000, 200),
        np.random.default_rng(12))
    assert np.all(dec.var_parametric < 0.05 * dec.var_total)


def test_zero_predictive_map_kills_regression_variance(trained):
    basis = trained.gp_basis
    frozen = dataclasses.replace(
        trained,
        gp_basis=gp.StandardizedBasis(
            center=basis.center, scale=basis.scale,
            basis=np.zeros_like(basis.basis), weights=basis.weights,
            design01=basis.design01, theta_min=basis.theta_min,
            theta_max=basis.theta_max))
    dec = emulator.variance_decomposition(
        frozen, _DIST, emulator.UncertaintyBudget(100, 400, 100),
        np.random.default_rng(13))
    # identical draws leave only mean-subtraction rounding dust
    assert np.all(dec.var_emulator < 1e-20)
    assert np.all(dec.var_parametric < 1e-20)
    assert np.all(dec.var_total >= dec.var_intrinsic
                  - 3.0 * np.hypot(dec.se_total, dec.se_intrinsic))


# ------------------------------------------------------------------ round trip

def test_closed_loop_recovers_first_moments(trained):
    # retrain on the surrogate's own output and compare emulated means
    rng = np.random.default_rng(21)
    points = []
    for j, theta in enumerate(_DESIGN):
        res = emulator.sample_at(trained, theta,
                                 emulator.UncertaintyBudget(n_zeta=200, n_eta=1),
                                 rng)
        rows = np.hstack([res.values, np.ones((200, 1))])
        points.append(sir_sde.DesignPointEnsemble(
            index=j, beta=theta[0], gamma=theta[1], target=200, rows=rows))
    ens = sir_sde.EnsembleResult(points=tuple(points),
                                 design=np.asarray(_DESIGN), seed=21,
                                 min_cinf_percent=10.0)
    retrained = emulator.train(ens, _CFG)
    for j, theta in enumerate(_DESIGN):
        res = emulator.sample_at(retrained, theta,
                                 emulator.UncertaintyBudget(n_zeta=4000, n_eta=1),
                                 np.random.default_rng(300 + j))
        got = res.values.mean(axis=0)
        want = retrained.training_means[j]
        assert np.all(np.abs(got - want) <= 0.05 * np.abs(want)), (j, got, want)


# -------------------------------------------------------------- save and load

def test_save_load_roundtrip_bit_identical(trained, tmp_path):
    path = tmp_path / "model.klpcgp"
    emulator.save(trained, path)
    loaded = emulator.load(path)
    np.testing.assert_array_equal(loaded.kl.mean, trained.kl.mean)
    np.testing.assert_array_equal(loaded.kl.modes, trained.kl.modes)
    assert loaded.kl.n_keep == trained.kl.n_keep
    np.testing.assert_array_equal(loaded.pc_coeffs, trained.pc_coeffs)
    np.testing.assert_array_equal(loaded.gp_basis.weights,
                                  trained.gp_basis.weights)
    assert loaded.gp_basis.scale == trained.gp_basis.scale
    assert loaded.gp_hyper.lambda_delta == trained.gp_hyper.lambda_delta
    np.testing.assert_array_equal(loaded.gp_hyper.rho, trained.gp_hyper.rho)
    assert loaded.meta == trained.meta

    budget = emulator.UncertaintyBudget(n_zeta=11, n_eta=3)
    a = emulator.sample_at(trained, (1.05, 0.85), budget,
                           np.random.default_rng(14))
    b = emulator.sample_at(loaded, (1.05, 0.85), budget,
                           np.random.default_rng(14))
    np.testing.assert_array_equal(a.raw, b.raw)


def test_load_rejects_garbage_and_truncation(trained, tmp_path):
    path = tmp_path / "model.klpcgp"
    emulator.save(trained, path)
    blob = path.read_bytes()

    (tmp_path / "junk.klpcgp").write_bytes(b"not a model at all")
    with pytest.raises(ModelFileError):
        emulator.load(tmp_path / "junk.klpcgp")

    (tmp_path / "cut.klpcgp").write_bytes(blob[:-10])
    with pytest.raises(ModelFileError):
        emulator.load(tmp_path / "cut.klpcgp")

    flipped = bytearray(blob)
    flipped[len(blob) // 2] ^= 0xFF
    (tmp_path / "flip.klpcgp").write_bytes(bytes(flipped))
    with pytest.raises(ModelFileError):
        emulator.load(tmp_path / "flip.klpcgp")


def test_load_names_both_versions_on_mismatch(trained, tmp_path):
    path = tmp_path / "model.klpcgp"
    emulator.save(trained, path)
    blob = bytearray(path.read_bytes())

    # rewrite the version tag in place (same length) and fix the checksum
    head_len = struct.unpack("<Q", blob[8:16])[0]
    header = json.loads(blob[16:16 + head_len].decode("utf-8"))
    assert header["format"] == emulator.FORMAT_VERSION
    other = emulator.FORMAT_VERSION[:-1] + "9"
    body = blob[16:16 + head_len].replace(
        emulator.FORMAT_VERSION.encode(), other.encode())
    assert len(body) == head_len
    blob[16:16 + head_len] = body
    blob[-4:] = struct.pack("<I", zlib.crc32(bytes(blob[:-4])) & 0xFFFFFFFF)
    path.write_bytes(bytes(blob))

    with pytest.raises(ModelVersionError) as err:
        emulator.load(path)
    assert other in str(err.value)
    assert emulator.FORMAT_VERSION in str(err.value)


def test_fix_theta_pins_parameters_at_median(trained):
    budget = emulator.UncertaintyBudget(n_theta=6, n_zeta=2, n_eta=2)
    out = emulator.sample_full(trained, _DIST, budget,
                               np.random.default_rng(3), fix_theta=True)
    med = np.asarray(_DIST.median())
    assert np.all(out.theta == med)


def test_fix_zeta_collapses_germ_scatter(trained):
    budget = emulator.UncertaintyBudget(n_zeta=7, n_eta=3)
    out = emulator.sample_at(trained, (1.1, 0.9), budget,
                             np.random.default_rng(4), fix_zeta=True)
    blocks = out.raw.reshape(3, 7, -1)
    for e in range(3):
        assert np.all(blocks[e] == blocks[e][0])
    # regression draws still vary across eta
    assert not np.array_equal(blocks[0], blocks[1])


def test_fix_zeta_and_eta_freeze_everything_but_theta(trained):
    budget = emulator.UncertaintyBudget(n_zeta=4, n_eta=3)
    out = emulator.sample_at(trained, (1.1, 0.9), budget,
                             np.random.default_rng(5),
                             fix_zeta=True, fix_eta=True)
    np.testing.assert_array_equal(out.raw, np.tile(out.raw[:1], (12, 1)))


def test_fix_eta_matches_predictive_mean_average(trained):
    # pinned regression rows should sit at the analytic chaos mean,
    # which the germ average approaches
    budget = emulator.UncertaintyBudget(n_zeta=4000, n_eta=1)
    out = emulator.sample_at(trained, (1.15, 0.95), budget,
                             np.random.default_rng(6), fix_eta=True)
    pinned = emulator.sample_at(trained, (1.15, 0.95),
                                emulator.UncertaintyBudget(n_zeta=1, n_eta=1),
                                np.random.default_rng(7),
                                fix_zeta=True, fix_eta=True)
    spread = out.raw.std(axis=0)
    gap = np.abs(out.raw.mean(axis=0) - pinned.raw[0])
    assert np.all(gap < 5 * spread / np.sqrt(4000) + 1e-9)


def test_keep_chain_returns_matching_diagnostics():
    ens = _make_ensemble()
    model, chain = emulator.train(ens, _CFG, keep_chain=True)
    assert chain.log_post.shape[0] == _CFG.mcmc_iterations - _CFG.mcmc_burn_in
    np.testing.assert_array_equal(chain.map_hyper.lambda_w,
                                  model.gp_hyper.lambda_w)
    np.testing.assert_array_equal(chain.map_hyper.rho, model.gp_hyper.rho)
