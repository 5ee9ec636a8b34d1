"""
Karhunen-Loeve expansion of a log-conductivity field with exponential covariance.

The covariance is collocated at cell centers with uniform weights, so the
discrete eigenvectors are orthonormal in the plain Euclidean inner product and
``sum(eigenvalues) == trace(C) == n_cells * variance``.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.typing import NDArray
from scipy import linalg

from .grid import Field, Grid
from .io import read_json, read_tensor, write_json, write_tensor

logger = logging.getLogger(__name__)

# negative eigenvalues smaller than this fraction of the trace are round-off
NEGATIVE_EIG_TOL = 1e-10


class KLEError(ArithmeticError):
    """The covariance eigendecomposition failed or produced invalid eigenvalues."""


@dataclass(frozen=True)
class CovarianceSpec:
    """Exponential covariance ``var * exp(-sqrt((dx/lx)^2 + (dy/ly)^2))`` with constant mean."""

    variance: float = 0.5
    length_x: float = 4.0
    length_y: float = 2.0
    mean: float = 2.0

    def __post_init__(self):
        if self.variance <= 0:
            raise ValueError("variance must be positive")
        if self.length_x <= 0 or self.length_y <= 0:
            raise ValueError("correlation lengths must be positive")

    @classmethod
    def relative(cls, grid: Grid, ratio: float = 0.2, variance: float = 0.5, mean: float = 2.0):
        """Correlation lengths as ``ratio`` times each axis' extent."""
        return cls(variance, ratio * grid.domain_width, ratio * grid.domain_height, mean)

    def to_dict(self) -> dict:
        return {"variance": self.variance, "length_x": self.length_x,
                "length_y": self.length_y, "mean": self.mean}


def assemble_covariance(grid: Grid, spec: CovarianceSpec) -> NDArray[np.float64]:
    """Dense covariance matrix between all cell centers (row-major cell order)."""
    X, Y = grid.cell_centers()
    x = X.ravel() / spec.length_x
    y = Y.ravel() / spec.length_y
    lag = np.hypot(x[:, None] - x[None, :], y[:, None] - y[None, :])
    cov = spec.variance * np.exp(-lag)
    # hypot is symmetric in its arguments, but make it exact
    return 0.5 * (cov + cov.T)


@dataclass(frozen=True)
class KLEBasis:
    """Truncated eigenpairs of a discretized covariance.

    Attributes
    ----------
    eigenvalues : ndarray, shape (n_kl,)
        Descending, non-negative.
    eigenvectors : ndarray, shape (n_kl, n_cells)
        Rows are orthonormal modes in row-major cell order.
    trace : float
        Trace of the full covariance (total variance).
    """

    grid: Grid | None
    eigenvalues: NDArray[np.float64]
    eigenvectors: NDArray[np.float64]
    trace: float
    mean: float = 2.0

    @property
    def n_kl(self) -> int:
        return self.eigenvalues.size

    @property
    def energy_fraction(self) -> float:
        return float(self.eigenvalues.sum() / self.trace)

    def mode(self, i: int) -> NDArray[np.float64]:
        """Eigenvector ``i`` reshaped onto the grid."""
        return self.eigenvectors[i].reshape(self.grid.shape)

    def pointwise_variance(self) -> NDArray[np.float64]:
        """Variance of the truncated expansion at every cell."""
        return (self.eigenvalues[:, None] * self.eigenvectors**2).sum(axis=0).reshape(self.grid.shape)

    def truncate(self, n_kl: int) -> "KLEBasis":
        return KLEBasis(self.grid, self.eigenvalues[:n_kl], self.eigenvectors[:n_kl], self.trace, self.mean)


def _count_for_energy(eigenvalues: NDArray, trace: float, target_energy: float) -> int:
    if target_energy >= 1.0:
        return eigenvalues.size
    cumulative = np.cumsum(eigenvalues)
    # tiny relative slack so a target hit exactly is not missed through round-off
    n = int(np.searchsorted(cumulative, target_energy * trace * (1 - 1e-14))) + 1
    return min(n, eigenvalues.size)


def decompose(cov: NDArray[np.float64], target_energy: float, grid: Grid | None = None,
              mean: float = 2.0) -> KLEBasis:
    """Eigendecompose ``cov`` and keep the fewest modes reaching ``target_energy``.

    Parameters
    ----------
    cov : ndarray, shape (n, n)
        Symmetric covariance matrix.
    target_energy : float
        Fraction of ``trace(cov)`` to retain, in ``(0, 1]``.
    grid : Grid, optional
        Grid the covariance lives on; required later to turn modes into fields.
    """
    if not 0.0 < target_energy <= 1.0:
        raise ValueError("target_energy must lie in (0, 1]")
    cov = np.asarray(cov, dtype=np.float64)
    n = cov.shape[0]
    if grid is not None and grid.n_cells != n:
        raise ValueError("covariance size does not match the grid")
    trace = float(np.trace(cov))
    try:
        w, v = linalg.eigh(cov, driver="evd")
    except (linalg.LinAlgError, ValueError) as exc:
        cond = np.linalg.cond(cov)
        raise KLEError(f"eigendecomposition failed (condition number {cond:.3e})") from exc
    order = np.argsort(w)[::-1]
    w = w[order]
    v = v[:, order]
    if w[-1] < -NEGATIVE_EIG_TOL * trace:
        cond = abs(w[0] / w[-1])
        raise KLEError(f"covariance is not positive semidefinite: min eigenvalue {w[-1]:.3e} "
                       f"(|max/min| = {cond:.3e})")
    w = np.clip(w, 0.0, None)
    n_kl = _count_for_energy(w, trace, target_energy)
    logger.debug("KLE keeps %d of %d modes (%.4f energy)", n_kl, n, w[:n_kl].sum() / trace)
    return KLEBasis(grid, w[:n_kl].copy(), np.ascontiguousarray(v[:, :n_kl].T), trace, mean)


def build_basis(grid: Grid, spec: CovarianceSpec, target_energy: float = 0.95) -> KLEBasis:
    """Assemble and decompose the covariance for ``grid``."""
    return decompose(assemble_covariance(grid, spec), target_energy, grid=grid, mean=spec.mean)


def synthesize(basis: KLEBasis, xi, mean: float | None = None) -> Field:
    """Log-conductivity field ``mean + sum_i xi_i sqrt(lambda_i) phi_i``."""
    xi = np.asarray(xi, dtype=np.float64)
    if xi.shape != (basis.n_kl,):
        raise ValueError(f"expected {basis.n_kl} KLE coefficients, got shape {xi.shape}")
    mean = basis.mean if mean is None else mean
    values = mean + (xi * np.sqrt(basis.eigenvalues)) @ basis.eigenvectors
    return Field(basis.grid, values.reshape(basis.grid.shape), "log-conductivity")


def synthesize_many(basis: KLEBasis, xi, mean: float | None = None) -> NDArray[np.float64]:
    """Vectorized :func:`synthesize` for ``xi`` of shape ``(n, n_kl)``; returns ``(n, H, W)``."""
    xi = np.atleast_2d(np.asarray(xi, dtype=np.float64))
    mean = basis.mean if mean is None else mean
    values = mean + (xi * np.sqrt(basis.eigenvalues)) @ basis.eigenvectors
    return values.reshape(-1, *basis.grid.shape)


def basis_key(grid: Grid, spec: CovarianceSpec, target_energy: float) -> str:
    """Short hash identifying a basis; used to name cache entries."""
    blob = json.dumps([grid.to_dict(), spec.to_dict(), target_energy], sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def save_basis(basis: KLEBasis, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_tensor(d / "eigenvalues.aqtn", basis.eigenvalues)
    write_tensor(d / "eigenvectors.aqtn", basis.eigenvectors)
    write_json(d / "basis.json", {"grid": basis.grid.to_dict(), "trace": basis.trace, "mean": basis.mean})


def load_basis(directory) -> KLEBasis:
    d = Path(directory)
    meta = read_json(d / "basis.json")
    return KLEBasis(Grid(**meta["grid"]), read_tensor(d / "eigenvalues.aqtn"),
                    read_tensor(d / "eigenvectors.aqtn"), meta["trace"], meta["mean"])


def cached_basis(grid: Grid, spec: CovarianceSpec, target_energy: float, cache_dir) -> KLEBasis:
    """Load the basis from ``cache_dir`` or build and store it there."""
    d = Path(cache_dir) / f"kle_{basis_key(grid, spec, target_energy)}"
    if (d / "basis.json").exists():
        try:
            return load_basis(d)
        except (OSError, KeyError, ValueError) as exc:
            logger.warning("ignoring unreadable cached basis in %s: %s", d, exc)
    basis = build_basis(grid, spec, target_energy)
    save_basis(basis, d)
    return basis
