"""Command-line driver: simulate, train, sample, compare, report.

Each command reads one TOML experiment file, writes its outputs under the
configured directory, and drops a manifest recording the config digest,
seeds, package versions and wall-clock timings.  Primary outputs are byte
identical across reruns with the same config; manifests carry timestamps
and are not.

Exit codes: 0 success, 1 usage or configuration problem, 2 runtime
numerical failure.  The KLPC_LOG environment variable sets log verbosity.
"""

import argparse
import dataclasses
import datetime
import logging
import os
import platform
import sys
import time
import warnings
from pathlib import Path

import numpy as np
import scipy

from . import __version__, config, emulator, io, sir_sde, streams
from .errors import ConfigError, KlpcgpError, ModelFileError
from .sir_sde import QOI_NAMES

log = logging.getLogger(__name__)

_USAGE_ERRORS = (FileNotFoundError, NotADirectoryError, PermissionError,
                 ValueError)


def _setup_logging():
    raw = os.environ.get("KLPC_LOG", "INFO").upper()
    level = getattr(logging, raw, None)
    if not isinstance(level, int):
        level = logging.INFO
    logging.basicConfig(level=level, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def _resolve_threads(cfg_threads, flag_threads):
    threads = flag_threads if flag_threads is not None else cfg_threads
    if threads == 0:
        threads = os.cpu_count() or 1
    return max(1, threads)


def _summarize_extrapolation(fn):
    """Run fn, folding per-point extrapolation warnings into one log line."""
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        result = fn()
    outside = 0
    for item in caught:
        if issubclass(item.category, emulator.ExtrapolationWarning):
            outside += 1
        else:
            log.warning("%s", item.message)
    if outside:
        log.info("%d parameter draws fell outside the training design box",
                 outside)
    return result


class _Manifest:
    """Collects inputs, outputs and stage timings for one command."""

    def __init__(self, command, cfg):
        self.command = command
        self.cfg = cfg
        self.inputs = {}
        self.outputs = {}
        self.timings = {}
        self._started = time.time()

    def add_input(self, name, path):
        self.inputs[name] = {"path": str(path),
                             "sha256": io.sha256_file(path)}

    def add_output(self, name, path):
        self.outputs[name] = {"path": str(path),
                              "sha256": io.sha256_file(path)}

    def time(self, name, fn):
        start = time.time()
        result = fn()
        self.timings[name] = round(time.time() - start, 3)
        return result

    def write(self, out_dir):
        payload = {
            "command": self.command,
            "config_digest": config.config_digest(self.cfg),
            "seed": self.cfg.seed,
            "created_utc": datetime.datetime.now(
                datetime.timezone.utc).isoformat(),
            "wall_seconds": round(time.time() - self._started, 3),
            "timings_seconds": self.timings,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "versions": {
                "klpcgp": __version__,
                "numpy": np.__version__,
                "scipy": scipy.__version__,
                "python": platform.python_version(),
            },
        }
        path = out_dir / "manifest_{}.json".format(self.command)
        io.write_manifest(path, payload)
        return path


def _out_dir(cfg, args):
    out = Path(args.output) if args.output else Path(cfg.output)
    if not args.dry_run:
        out.mkdir(parents=True, exist_ok=True)
    return out


def _load_cfg(args):
    cfg = config.load_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _print_table(header, rows):
    cells = [header] + [[_format(v) for v in row] for row in rows]
    widths = [max(len(r[c]) for r in cells) for c in range(len(header))]
    for r, row in enumerate(cells):
        print("  ".join(v.rjust(w) for v, w in zip(row, widths)))
        if r == 0:
            print("  ".join("-" * w for w in widths))


def _format(value):
    if isinstance(value, str):
        return value
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return "{:.4g}".format(float(value))


def cmd_simulate(args):
    cfg = _load_cfg(args)
    out = _out_dir(cfg, args)
    threads = _resolve_threads(cfg.threads, args.threads)
    design = cfg.design.resolve(cfg.dist, cfg.seed)
    if args.dry_run:
        print("simulate: {} design points ({}), {} accepted replicates "
              "each, cutoff c_inf >= {:g}%".format(
                  design.shape[0], cfg.design.kind, cfg.replicates,
                  cfg.min_cinf_percent))
        for j, (b, g) in enumerate(design):
            print("  point {}: beta={:.6g} gamma={:.6g}".format(j, b, g))
        print("writes: {}".format(", ".join(
            str(out / n) for n in ("design.csv", "ensemble.csv",
                                   "manifest_simulate.json"))))
        return 0

    manifest = _Manifest("simulate", cfg)
    result = manifest.time("simulate", lambda: sir_sde.generate_ensemble(
        design, cfg.replicates, cfg.base_params(), cfg.sim, seed=cfg.seed,
        min_cinf_percent=cfg.min_cinf_percent,
        max_attempts=cfg.max_attempts or None, workers=threads))

    io.write_design(out / "design.csv", design)
    io.write_ensemble(out / "ensemble.csv", result)
    manifest.add_output("design", out / "design.csv")
    manifest.add_output("ensemble", out / "ensemble.csv")
    manifest.write(out)

    rows = [(p.index, p.beta, p.gamma, p.accepted_count, p.attempts,
             p.acceptance_rate) for p in result.points]
    _print_table(("point", "beta", "gamma", "accepted", "attempts",
                  "rate"), rows)
    short = [p.index for p in result.points if p.budget_exhausted]
    if short:
        log.warning("attempt budget exhausted at design points %s; "
                    "training may reject the ensemble", short)
    print("wrote {} and {}".format(out / "design.csv",
                                   out / "ensemble.csv"))
    return 0


def cmd_train(args):
    cfg = _load_cfg(args)
    out = _out_dir(cfg, args)
    threads = _resolve_threads(cfg.threads, args.threads)
    ensemble_path = Path(args.ensemble) if args.ensemble \
        else out / "ensemble.csv"
    design = cfg.design.resolve(cfg.dist, cfg.seed)
    if args.dry_run:
        print("train: {} <- {} design points, {} chaos terms, "
              "{} regression sweeps".format(
                  out / "model.klpcgp", design.shape[0], cfg.train.pc_terms,
                  cfg.train.mcmc_iterations))
        return 0

    manifest = _Manifest("train", cfg)
    ensemble = io.read_ensemble(ensemble_path, design, cfg.seed,
                                cfg.min_cinf_percent, cfg.replicates)
    manifest.add_input("ensemble", ensemble_path)
    model, chain = manifest.time("train", lambda: emulator.train(
        ensemble, cfg.train_config(threads), keep_chain=True))

    model_path = out / "model.klpcgp"
    emulator.save(model, model_path)
    io.write_kl_spectrum(out / "kl_spectrum.csv", model.kl)
    io.write_chain(out / "chain.csv", chain)
    io.write_pc_coeffs(out / "pc_coeffs.csv", model)
    for name in ("model.klpcgp", "kl_spectrum.csv", "chain.csv",
                 "pc_coeffs.csv"):
        manifest.add_output(name.split(".")[0], out / name)
    manifest.write(out)

    energy = model.kl.cumulative_energy()
    print("trained on {} design points, {} accepted replicates total"
          .format(model.n_design, ensemble.all_qois.shape[0]))
    print("kept {} of {} output modes ({:.4%} of variance)".format(
        model.n_modes, model.kl.dim, energy[model.n_modes - 1]))
    print("regression acceptance rate {:.2f}, model at {}".format(
        float(np.mean(chain.acceptance)), model_path))
    return 0


def cmd_sample(args):
    cfg = _load_cfg(args)
    out = _out_dir(cfg, args)
    model_path = Path(args.model) if args.model else out / "model.klpcgp"
    budget = cfg.sample
    total = budget.n_theta * budget.n_zeta * budget.n_eta
    if args.dry_run:
        print("sample: {} rows ({} theta x {} eta x {} zeta) from {}".format(
            total, budget.n_theta, budget.n_eta, budget.n_zeta, model_path))
        for flag in ("fix_theta", "fix_zeta", "fix_eta"):
            if getattr(args, flag):
                print("  {} held at its central value".format(flag))
        return 0

    manifest = _Manifest("sample", cfg)
    model = emulator.load(model_path)
    manifest.add_input("model", model_path)
    rng = streams.substream(cfg.seed, streams.SAMPLE, 0)
    samples = manifest.time("sample", lambda: _summarize_extrapolation(
        lambda: emulator.sample_full(
            model, cfg.dist, budget, rng, fix_theta=args.fix_theta,
            fix_zeta=args.fix_zeta, fix_eta=args.fix_eta)))

    io.write_samples(out / "samples.csv", samples)
    manifest.add_output("samples", out / "samples.csv")
    grids = manifest.time("grids", lambda: io.write_density_grids(
        out, samples.values, model.qoi_names))
    for path in grids:
        manifest.add_output(path.stem, path)
    manifest.write(out)

    print("wrote {} draws to {} and {} density grids".format(
        total, out / "samples.csv", len(grids)))
    return 0


def _compare_stats(brute, emu):
    """Per-QOI accuracy rows plus a same-simulator comparison floor."""
    rows = []
    half_a, half_b = brute[0::2], brute[1::2]
    for j, name in enumerate(QOI_NAMES):
        b, e = brute[:, j], emu[:, j]
        mean_b, mean_e = b.mean(), e.mean()
        std_b, std_e = b.std(ddof=1), e.std(ddof=1)
        q_b = np.quantile(b, (0.05, 0.50, 0.95))
        q_e = np.quantile(e, (0.05, 0.50, 0.95))
        rel = lambda x, y: abs(x - y) / max(abs(x), 1e-300)
        ks = _ks_statistic(b, e)
        ks_null = _ks_statistic(half_a[:, j], half_b[:, j])
        rows.append((name, mean_b, mean_e, rel(mean_b, mean_e),
                     std_b, std_e, rel(std_b, std_e),
                     rel(q_b[0], q_e[0]), rel(q_b[1], q_e[1]),
                     rel(q_b[2], q_e[2]), ks, ks_null))
    return rows


def _ks_statistic(a, b):
    joint = np.concatenate([a, b])
    joint.sort()
    cdf_a = np.searchsorted(np.sort(a), joint, side="right") / a.shape[0]
    cdf_b = np.searchsorted(np.sort(b), joint, side="right") / b.shape[0]
    return float(np.max(np.abs(cdf_a - cdf_b)))


_COMPARE_COLUMNS = ("qoi", "mean_sim", "mean_emu", "mean_rel_err",
                    "std_sim", "std_emu", "std_rel_err", "q05_rel_err",
                    "q50_rel_err", "q95_rel_err", "ks", "ks_null")


def cmd_compare(args):
    cfg = _load_cfg(args)
    out = _out_dir(cfg, args)
    threads = _resolve_threads(cfg.threads, args.threads)
    model_path = Path(args.model) if args.model else out / "model.klpcgp"
    settings = cfg.compare
    if args.dry_run:
        print("compare: {} simulator draws vs {} surrogate draws from {}"
              .format(settings.n_brute,
                      settings.n_theta * settings.n_zeta * settings.n_eta,
                      model_path))
        return 0

    manifest = _Manifest("compare", cfg)
    model = emulator.load(model_path)
    manifest.add_input("model", model_path)
    brute = manifest.time("simulator", lambda: sir_sde.brute_force_qois(
        cfg.dist, settings.n_brute, cfg.base_params(), cfg.sim,
        seed=cfg.seed, min_cinf_percent=cfg.min_cinf_percent,
        max_rounds=settings.max_rounds, workers=threads))
    emu = manifest.time("surrogate", lambda: _summarize_extrapolation(
        lambda: emulator.sample_full(
            model, cfg.dist, settings.budget,
            streams.substream(cfg.seed, streams.COMPARE))))

    rows = _compare_stats(brute.qois, emu.values)
    io.write_csv(out / "compare.csv", _COMPARE_COLUMNS, rows)
    manifest.add_output("compare", out / "compare.csv")
    manifest.write(out)

    print("{} simulator draws ({} attempts), {} surrogate draws".format(
        brute.qois.shape[0], brute.attempts, emu.values.shape[0]))
    _print_table(_COMPARE_COLUMNS, rows)
    return 0


def cmd_report(args):
    cfg = _load_cfg(args)
    out = _out_dir(cfg, args)
    model_path = Path(args.model) if args.model else out / "model.klpcgp"
    settings = cfg.report
    if args.dry_run:
        print("report: variance split over {}/{}/{} draws plus a "
              "training-point self check from {}".format(
                  settings.n_theta, settings.n_zeta, settings.n_eta,
                  model_path))
        return 0

    manifest = _Manifest("report", cfg)
    model = emulator.load(model_path)
    manifest.add_input("model", model_path)
    dec = manifest.time("variance", lambda: _summarize_extrapolation(
        lambda: emulator.variance_decomposition(
            model, cfg.dist, settings.budget,
            streams.substream(cfg.seed, streams.SAMPLE, 1))))

    var_rows = [(r["qoi"], r["var_total"], r["se_total"],
                 r["var_intrinsic"], r["se_intrinsic"],
                 r["var_parametric"], r["se_parametric"],
                 r["var_emulator"], r["se_emulator"])
                for r in dec.as_rows()]
    io.write_csv(out / "variance.csv",
                 ("qoi", "var_total", "se_total", "var_intrinsic",
                  "se_intrinsic", "var_parametric", "se_parametric",
                  "var_emulator", "se_emulator"), var_rows)

    check_budget = emulator.UncertaintyBudget(
        1, settings.selfcheck_zeta, settings.selfcheck_eta)
    check_rows = []
    for j in range(model.n_design):
        draws = emulator.sample_at(
            model, model.design[j], check_budget,
            streams.substream(cfg.seed, streams.SAMPLE, 2, j))
        means = draws.values.mean(axis=0)
        for q, name in enumerate(model.qoi_names):
            ref = model.training_means[j, q]
            check_rows.append((j, model.design[j, 0], model.design[j, 1],
                               name, ref, means[q], abs(means[q] - ref),
                               abs(means[q] - ref) / max(abs(ref), 1e-300)))
    io.write_csv(out / "selfcheck.csv",
                 ("design_index", "beta", "gamma", "qoi", "training_mean",
                  "surrogate_mean", "abs_err", "rel_err"), check_rows)
    manifest.add_output("variance", out / "variance.csv")
    manifest.add_output("selfcheck", out / "selfcheck.csv")
    manifest.write(out)

    print("variance by source (draws: theta {}, zeta {}, eta {})".format(
        settings.n_theta, settings.n_zeta, settings.n_eta))
    _print_table(("qoi", "total", "intrinsic", "parametric", "surrogate"),
                 [(r[0], r[1], r[3], r[5], r[7]) for r in var_rows])
    print()
    print("training-point self check")
    _print_table(("point", "qoi", "training_mean", "surrogate_mean",
                  "rel_err"),
                 [(r[0], r[3], r[4], r[5], r[7]) for r in check_rows])
    return 0


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="klpcgp",
        description="Surrogate models for stochastic simulations: "
                    "orthogonal output decomposition, polynomial chaos "
                    "and Gaussian-process regression over an SIR testbed.")
    parser.add_argument("--version", action="version",
                        version="klpcgp {}".format(__version__))
    sub = parser.add_subparsers(dest="command", required=True)

    defs = {
        "simulate": (cmd_simulate, "run the replicate ensembles over the "
                                   "training design"),
        "train": (cmd_train, "fit the surrogate from an ensemble CSV"),
        "sample": (cmd_sample, "draw from a trained surrogate and dump "
                               "density grids"),
        "compare": (cmd_compare, "benchmark the surrogate against direct "
                                 "simulation"),
        "report": (cmd_report, "variance attribution and training-point "
                               "self check"),
    }
    for name, (fn, help_text) in defs.items():
        cmd = sub.add_parser(name, help=help_text)
        cmd.set_defaults(fn=fn)
        cmd.add_argument("--config", required=True,
                         help="TOML experiment file")
        cmd.add_argument("--seed", type=int, default=None,
                         help="override the config seed")
        cmd.add_argument("--threads", type=int, default=None,
                         help="worker cap (0 = all cores)")
        cmd.add_argument("--output", default=None,
                         help="override the output directory")
        cmd.add_argument("--dry-run", action="store_true",
                         help="validate and print the plan, write nothing")
        if name == "train":
            cmd.add_argument("--ensemble", default=None,
                             help="ensemble CSV (default: "
                                  "<output>/ensemble.csv)")
        if name in ("sample", "compare", "report"):
            cmd.add_argument("--model", default=None,
                             help="model file (default: "
                                  "<output>/model.klpcgp)")
        if name == "sample":
            for source in ("theta", "zeta", "eta"):
                cmd.add_argument("--fix-{}".format(source),
                                 action="store_true",
                                 help="pin the {} source at its central "
                                      "value".format(source))
    return parser


def main(argv=None):
    _setup_logging()
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exit_:
        return 0 if exit_.code in (0, None) else 1
    try:
        return args.fn(args)
    except (ConfigError, ModelFileError) as err:
        print("error: {}".format(err), file=sys.stderr)
        return 1
    except (KlpcgpError, np.linalg.LinAlgError, FloatingPointError) as err:
        print("error: {}".format(err), file=sys.stderr)
        return 2
    except _USAGE_ERRORS as err:
        print("error: {}".format(err), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
