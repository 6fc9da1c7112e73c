"""Discrete orthogonal decomposition of an output ensemble.

Given M vector-valued outputs, this module builds the eigendecomposition of
their population covariance (the 1/M convention, matching how the ensemble
mean itself is estimated) and represents each output as mean plus a linear
combination of covariance eigenvectors.  The coordinates in that basis are
uncorrelated across the ensemble with variances equal to the eigenvalues,
which is what the downstream chaos expansion relies on.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateDataError, NumericalError


@dataclass(frozen=True)
class KlBasis:
    """Eigenbasis of an ensemble's population covariance.

    mean         : (d,) ensemble mean.
    eigenvalues  : (d,) full spectrum, non-increasing, >= 0.
    modes        : (d, d) orthonormal eigenvectors as columns, sign-fixed so
                   each column's largest-magnitude entry is positive (ties
                   resolved to the lowest index).
    n_keep       : number of leading modes retained for projection.
    """

    mean: np.ndarray
    eigenvalues: np.ndarray
    modes: np.ndarray
    n_keep: int

    @property
    def dim(self):
        return self.mean.shape[0]

    def cumulative_energy(self):
        """Fraction of total variance captured by the first 1..d modes."""
        total = self.eigenvalues.sum()
        if total <= 0.0:
            return np.ones_like(self.eigenvalues)
        return np.cumsum(self.eigenvalues) / total


def _resolve_n_keep(eigenvalues, energy, n_modes):
    d = len(eigenvalues)
    if n_modes is not None:
        n_modes = int(n_modes)
        if not 1 <= n_modes <= d:
            raise ValueError(
                "n_modes must be in [1, {}], got {}".format(d, n_modes))
        return n_modes
    if not 0.0 < energy <= 1.0:
        raise ValueError("energy must lie in (0, 1], got {}".format(energy))
    total = eigenvalues.sum()
    if total <= 0.0:
        return 1  # all-constant data: a single (zero-variance) mode
    frac = np.cumsum(eigenvalues) / total
    return int(np.searchsorted(frac, energy - 1e-12) + 1)


def decompose(samples, energy=0.99, n_modes=None):
    """Build the covariance eigenbasis of an (M, d) sample matrix.

    Truncation keeps the smallest leading set of modes whose eigenvalues sum
    to at least `energy` of the total variance; an explicit `n_modes`
    overrides the energy rule.
    """
    x = np.asarray(samples, dtype=float)
    if x.ndim != 2:
        raise ValueError("samples must be 2-D (M, d), got shape {}".format(x.shape))
    m, d = x.shape
    if m < 2:
        raise DegenerateDataError(
            "need at least 2 samples to estimate a covariance, got {}".format(m))
    if not np.all(np.isfinite(x)):
        raise DegenerateDataError("samples contain non-finite values")

    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / m
    vals, vecs = np.linalg.eigh(cov)

    order = np.argsort(-vals, kind="stable")
    vals = vals[order]
    vecs = vecs[:, order]

    # tolerate eigensolver round-off, reject anything genuinely negative
    floor = -1e-12 * max(float(vals[0]), 1.0)
    if np.any(vals < floor):
        raise NumericalError(
            "covariance eigenvalue {} below tolerance".format(vals.min()))
    vals = np.maximum(vals, 0.0)

    # sign convention: largest-magnitude entry of each mode is positive
    pivot = np.argmax(np.abs(vecs), axis=0)
    flip = vecs[pivot, np.arange(d)] < 0.0
    vecs = vecs * np.where(flip, -1.0, 1.0)

    n_keep = _resolve_n_keep(vals, energy, n_modes)
    return KlBasis(mean=mean, eigenvalues=vals, modes=vecs, n_keep=n_keep)


def truncate(basis, energy=None, n_modes=None):
    """Return a copy of `basis` with a different number of retained modes."""
    if energy is None and n_modes is None:
        raise ValueError("pass either energy or n_modes")
    n_keep = _resolve_n_keep(basis.eigenvalues, energy if energy is not None
                             else 0.99, n_modes)
    return KlBasis(mean=basis.mean, eigenvalues=basis.eigenvalues,
                   modes=basis.modes, n_keep=n_keep)


def project(basis, x):
    """Coordinates of x (d,) or (M, d) in the retained modes -> (..., n_keep)."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != basis.dim:
        raise ValueError("x has dimension {}, basis needs {}".format(
            x.shape[-1], basis.dim))
    return (x - basis.mean) @ basis.modes[:, :basis.n_keep]


def reconstruct(basis, coords):
    """Inverse of `project`: mean + coords in the retained modes -> (..., d)."""
    coords = np.asarray(coords, dtype=float)
    if coords.shape[-1] != basis.n_keep:
        raise ValueError("coords have dimension {}, basis keeps {}".format(
            coords.shape[-1], basis.n_keep))
    return basis.mean + coords @ basis.modes[:, :basis.n_keep].T
