"""
Steady-state saturated flow on a cell-centered grid.

Five-point finite volumes with harmonic-mean interface conductivity, fixed
heads on the left/right faces (half-cell transmissibility) and no-flow top and
bottom. Unit aquifer thickness throughout, so face fluxes are [L^2/T].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from numpy.typing import NDArray

from .grid import Field, Grid


class SolverError(ArithmeticError):
    """An iterative solve did not converge."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


@dataclass(frozen=True)
class FlowBC:
    left_head: float = 1.0
    right_head: float = 0.0

    def __post_init__(self):
        if not (np.isfinite(self.left_head) and np.isfinite(self.right_head)):
            raise ValueError("boundary heads must be finite")


@dataclass(frozen=True)
class VelocityField:
    """Pore velocities at cell centers plus the face fluxes they came from.

    ``qx`` has shape ``(H, W+1)``: volumetric flux through each x-face, positive
    toward +x. ``qy`` has shape ``(H+1, W)``, positive toward +y.
    """

    vx: NDArray[np.float64]
    vy: NDArray[np.float64]
    qx: NDArray[np.float64] | None = None
    qy: NDArray[np.float64] | None = None

    def __post_init__(self):
        if np.shape(self.vx) != np.shape(self.vy):
            raise ValueError("vx and vy must have the same shape")

    @property
    def speed(self):
        return np.hypot(self.vx, self.vy)


def _harmonic(a, b):
    return 2.0 * a * b / (a + b)


def _transmissibilities(grid: Grid, K: NDArray) -> tuple[NDArray, NDArray, NDArray, NDArray]:
    """Interior x/y face transmissibilities and left/right boundary ones."""
    tx = _harmonic(K[:, :-1], K[:, 1:]) * grid.dy / grid.dx
    ty = _harmonic(K[:-1, :], K[1:, :]) * grid.dx / grid.dy
    t_left = K[:, 0] * grid.dy / (0.5 * grid.dx)
    t_right = K[:, -1] * grid.dy / (0.5 * grid.dx)
    return tx, ty, t_left, t_right


def _as_values(K) -> NDArray[np.float64]:
    return np.asarray(K.values if isinstance(K, Field) else K, dtype=np.float64)


def assemble_flow_system(grid: Grid, K, bc: FlowBC) -> tuple[sp.csr_matrix, NDArray[np.float64]]:
    """Sparse SPD matrix and right-hand side of the discrete flow equation."""
    K = _as_values(K)
    if K.shape != grid.shape:
        raise ValueError("conductivity shape does not match grid")
    if not np.all(K > 0):
        raise ValueError("conductivity must be strictly positive")
    H, W = grid.shape
    idx = np.arange(grid.n_cells).reshape(H, W)
    tx, ty, t_left, t_right = _transmissibilities(grid, K)

    diag = np.zeros((H, W))
    diag[:, :-1] += tx
    diag[:, 1:] += tx
    diag[:-1, :] += ty
    diag[1:, :] += ty
    diag[:, 0] += t_left
    diag[:, -1] += t_right

    rows = [idx.ravel(), idx[:, :-1].ravel(), idx[:, 1:].ravel(), idx[:-1, :].ravel(), idx[1:, :].ravel()]
    cols = [idx.ravel(), idx[:, 1:].ravel(), idx[:, :-1].ravel(), idx[1:, :].ravel(), idx[:-1, :].ravel()]
    vals = [diag.ravel(), -tx.ravel(), -tx.ravel(), -ty.ravel(), -ty.ravel()]
    A = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(grid.n_cells, grid.n_cells))
    b = np.zeros((H, W))
    b[:, 0] += t_left * bc.left_head
    b[:, -1] += t_right * bc.right_head
    return A, b.ravel()


def pcg(A, b, x0=None, rtol: float = 1e-12, maxiter: int | None = None):
    """Jacobi-preconditioned conjugate gradients.

    Returns ``(x, iterations, relative_residual)``; raises :class:`SolverError`
    if ``||b - A x|| / ||b||`` does not drop below ``rtol`` within ``maxiter``.
    """
    n = b.size
    maxiter = 10 * n if maxiter is None else maxiter
    inv_diag = 1.0 / A.diagonal()
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    r = b - A @ x
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(n), 0, 0.0
    z = inv_diag * r
    p = z.copy()
    rz = r @ z
    for it in range(1, maxiter + 1):
        Ap = A @ p
        alpha = rz / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        if np.linalg.norm(r) <= rtol * bnorm:
            # recompute the true residual to guard against drift
            res = np.linalg.norm(b - A @ x) / bnorm
            if res <= rtol:
                return x, it, res
            r = b - A @ x
        z = inv_diag * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    res = np.linalg.norm(b - A @ x) / bnorm
    raise SolverError(f"CG did not converge in {maxiter} iterations (relative residual {res:.3e})", res)


def solve_head(grid: Grid, K, bc: FlowBC = FlowBC(), rtol: float = 1e-12) -> Field:
    """Steady head field for conductivity ``K`` (Field or array of ``grid.shape``)."""
    A, b = assemble_flow_system(grid, K, bc)
    # linear interpolation between the boundary heads is a good starting guess
    X, _ = grid.cell_centers()
    x0 = bc.left_head + (bc.right_head - bc.left_head) * X.ravel() / grid.domain_width
    h, _, _ = pcg(A, b, x0=x0, rtol=rtol)
    return Field(grid, h.reshape(grid.shape), "head")


def face_fluxes(grid: Grid, K, h, bc: FlowBC = FlowBC()) -> tuple[NDArray, NDArray]:
    """Volumetric fluxes through every cell face, consistent with :func:`solve_head`."""
    K = _as_values(K)
    h = _as_values(h)
    H, W = grid.shape
    tx, ty, t_left, t_right = _transmissibilities(grid, K)
    qx = np.zeros((H, W + 1))
    qx[:, 1:-1] = tx * (h[:, :-1] - h[:, 1:])
    qx[:, 0] = t_left * (bc.left_head - h[:, 0])
    qx[:, -1] = t_right * (h[:, -1] - bc.right_head)
    qy = np.zeros((H + 1, W))
    qy[1:-1, :] = ty * (h[:-1, :] - h[1:, :])
    return qx, qy


def darcy_velocity(grid: Grid, K, h, porosity: float, bc: FlowBC = FlowBC()) -> VelocityField:
    """Pore velocity ``v = q / porosity`` at cell centers, plus face fluxes."""
    if not 0.0 < porosity < 1.0:
        raise ValueError("porosity must lie in (0, 1)")
    qx, qy = face_fluxes(grid, K, h, bc)
    vx = 0.5 * (qx[:, :-1] + qx[:, 1:]) / grid.dy / porosity
    vy = 0.5 * (qy[:-1, :] + qy[1:, :]) / grid.dx / porosity
    return VelocityField(vx, vy, qx, qy)


def boundary_imbalance(qx: NDArray) -> float:
    """Relative difference between total inflow (left face) and outflow (right face)."""
    inflow = qx[:, 0].sum()
    outflow = qx[:, -1].sum()
    return abs(inflow - outflow) / max(abs(inflow), abs(outflow))


def cell_divergence(qx: NDArray, qy: NDArray) -> NDArray:
    """Net outflow of every cell from its face fluxes."""
    return (qx[:, 1:] - qx[:, :-1]) + (qy[1:, :] - qy[:-1, :])
