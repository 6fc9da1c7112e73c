"""File formats for the command-line driver.

All tables are headered CSV.  Floats are written with repr so a read-back
recovers the exact bit pattern, which is what makes rerun outputs byte
comparable.  Density grids use the plain x,density / x,y,density layout
so any plotting layer can consume them directly.
"""

import csv
import hashlib
import json
import logging

import numpy as np

from . import kde, pce
from .errors import ConfigError, DegenerateDataError
from .sir_sde import QOI_NAMES, DesignPointEnsemble, EnsembleResult

log = logging.getLogger(__name__)

ENSEMBLE_COLUMNS = ("design_index", "beta", "gamma", "replicate",
                    "p_inf", "t_p", "t_d", "c_inf", "accepted")
SAMPLE_COLUMNS = ("theta_index", "eta_index", "zeta_index", "beta", "gamma",
                  "p_inf", "t_p", "t_d", "c_inf",
                  "p_inf_raw", "t_p_raw", "t_d_raw", "c_inf_raw")

_GRID_POINTS = 201
_PAIR_POINTS = 61
_MAX_KDE = 20_000
_PAIR_MAX_KDE = 4000
_EVAL_BLOCK = 512


def _cell(value):
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(v) for v in row])


def _raw_rows(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ConfigError("{} is empty".format(path)) from None
        rows = list(reader)
    for row in rows:
        if len(row) != len(header):
            raise ConfigError("{}: a row has {} cells but the header "
                              "names {}".format(path, len(row), len(header)))
    return header, rows


def read_csv(path):
    """Read a numeric CSV back as (header, float array)."""
    header, rows = _raw_rows(path)
    try:
        data = np.array([[float(v) for v in row] for row in rows],
                        dtype=float)
    except ValueError as err:
        raise ConfigError("{}: non-numeric cell ({})".format(
            path, err)) from None
    if data.size == 0:
        data = data.reshape(0, len(header))
    return header, data


def _column(cells):
    try:
        return np.array([int(v) for v in cells], dtype=np.int64)
    except ValueError:
        pass
    try:
        return np.array([float(v) for v in cells], dtype=float)
    except ValueError:
        return list(cells)


def read_table(path):
    """Read any CSV the tool writes: (header, per-column arrays).

    Column types are recovered in int -> float -> string order, which
    matches how write_csv renders cells, so a read and rewrite reproduces
    the file byte for byte.
    """
    header, rows = _raw_rows(path)
    columns = [_column([row[c] for row in rows])
               for c in range(len(header))]
    return header, columns


def sha256_file(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def write_manifest(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_design(path, design):
    write_csv(path, ("design_index", "beta", "gamma"),
              [(j, b, g) for j, (b, g) in enumerate(design)])


def write_ensemble(path, result):
    rows = []
    for point in result.points:
        for r in range(point.attempts):
            stats = point.rows[r]
            rows.append((point.index, point.beta, point.gamma, r,
                         stats[0], stats[1], stats[2], stats[3],
                         int(stats[4] > 0.5)))
    write_csv(path, ENSEMBLE_COLUMNS, rows)


def read_ensemble(path, design, seed, min_cinf_percent, target):
    """Rebuild an ensemble from its CSV, checking it matches the design."""
    header, data = read_csv(path)
    if tuple(header) != ENSEMBLE_COLUMNS:
        raise ConfigError("{}: expected columns {}, found {}".format(
            path, ",".join(ENSEMBLE_COLUMNS), ",".join(header)))
    if data.shape[0] == 0:
        raise ConfigError("{} holds no attempts".format(path))
    design = np.asarray(design, dtype=float)
    indices = data[:, 0].astype(int)
    m = indices.max() + 1
    if m != design.shape[0]:
        raise ConfigError("{} covers {} design points but the config "
                          "resolves to {}".format(path, m, design.shape[0]))
    points = []
    for j in range(m):
        block = data[indices == j]
        if block.shape[0] == 0:
            raise ConfigError("{}: design point {} has no rows".format(
                path, j))
        beta, gamma = block[0, 1], block[0, 2]
        if not (np.all(block[:, 1] == beta) and np.all(block[:, 2] == gamma)):
            raise ConfigError("{}: design point {} mixes several rate "
                              "pairs".format(path, j))
        if not (beta == design[j, 0] and gamma == design[j, 1]):
            raise ConfigError(
                "{}: design point {} is (beta={:g}, gamma={:g}) but the "
                "config resolves to (beta={:g}, gamma={:g}); the file was "
                "built from a different design".format(
                    path, j, beta, gamma, design[j, 0], design[j, 1]))
        order = np.argsort(block[:, 3], kind="stable")
        rows = block[order][:, 4:9].copy()
        points.append(DesignPointEnsemble(index=j, beta=float(beta),
                                          gamma=float(gamma),
                                          target=int(target), rows=rows))
    return EnsembleResult(points=tuple(points), design=design,
                          seed=int(seed),
                          min_cinf_percent=float(min_cinf_percent))


def write_samples(path, samples):
    rows = np.column_stack([
        samples.theta_index, samples.eta_index, samples.zeta_index,
        samples.theta, samples.values, samples.raw])
    out = []
    for row in rows:
        out.append([int(row[0]), int(row[1]), int(row[2])]
                   + [float(v) for v in row[3:]])
    write_csv(path, SAMPLE_COLUMNS, out)


def write_kl_spectrum(path, basis):
    write_csv(path, ("n", "lambda_n"),
              [(n + 1, lam) for n, lam in enumerate(basis.eigenvalues)])


def write_chain(path, chain):
    n, p_c = chain.lambda_w.shape
    p = chain.rho.shape[2]
    header = ["iteration", "log_post", "lambda_delta"]
    header += ["lambda_w_{}".format(j + 1) for j in range(p_c)]
    header += ["rho_{}_{}".format(j + 1, k + 1)
               for j in range(p_c) for k in range(p)]
    rows = np.column_stack([np.arange(n), chain.log_post,
                            chain.lambda_delta,
                            chain.lambda_w,
                            chain.rho.reshape(n, p_c * p)])
    write_csv(path, header,
              [[int(r[0])] + [float(v) for v in r[1:]] for r in rows])


def write_pc_coeffs(path, model):
    rows = []
    for j in range(model.n_design):
        exp = model.pc_expansion(j)
        for n, k, alpha, coeff in pce.expansion_rows(exp):
            rows.append((j, n, k, alpha, coeff,
                         float(model.pc_stderr[j, k, n - 1])))
    write_csv(path, ("design_index", "coordinate", "term", "alpha",
                     "coefficient", "stderr"), rows)


def _strided(values, cap):
    n = values.shape[0]
    if n <= cap:
        return values
    idx = np.unique(np.linspace(0, n - 1, cap).round().astype(int))
    return values[idx]


def write_density_grids(out_dir, values, names=QOI_NAMES):
    """One x,density grid per column and one x,y,density grid per pair.

    Columns without spread (a clamp can pin every draw to one value) are
    skipped with a warning instead of failing the whole dump.
    """
    values = np.asarray(values, dtype=float)
    written = []
    for j, name in enumerate(names):
        col = _strided(values[:, j], _MAX_KDE)
        try:
            model = kde.fit(col)
        except DegenerateDataError as err:
            log.warning("skipping marginal grid for %s: %s", name, err)
            continue
        h = float(model.bandwidth[0])
        x = np.linspace(col.min() - 4 * h, col.max() + 4 * h, _GRID_POINTS)
        dens = kde.marginal_pdf(model, 1, x)
        path = out_dir / "marginal_{}.csv".format(name)
        write_csv(path, ("x", "density"), zip(x, dens))
        written.append(path)
    for a in range(len(names)):
        for b in range(a + 1, len(names)):
            pair = _strided(values[:, (a, b)], _PAIR_MAX_KDE)
            try:
                model = kde.fit(pair)
            except DegenerateDataError as err:
                log.warning("skipping joint grid for %s,%s: %s",
                            names[a], names[b], err)
                continue
            ha, hb = model.bandwidth
            xs = np.linspace(pair[:, 0].min() - 4 * ha,
                             pair[:, 0].max() + 4 * ha, _PAIR_POINTS)
            ys = np.linspace(pair[:, 1].min() - 4 * hb,
                             pair[:, 1].max() + 4 * hb, _PAIR_POINTS)
            grid = np.column_stack([np.repeat(xs, len(ys)),
                                    np.tile(ys, len(xs))])
            dens = np.empty(grid.shape[0])
            for start in range(0, grid.shape[0], _EVAL_BLOCK):
                stop = start + _EVAL_BLOCK
                dens[start:stop] = kde.pdf(model, grid[start:stop])
            path = out_dir / "joint_{}_{}.csv".format(names[a], names[b])
            write_csv(path, ("x", "y", "density"),
                      np.column_stack([grid, dens]))
            written.append(path)
    return written
