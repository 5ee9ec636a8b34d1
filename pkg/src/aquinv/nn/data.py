"""
Training arrays for the surrogate: raw simulation sets, input scaling, and the
two pair layouts (one-shot and autoregressive).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from ..grid import Grid, SourceSpec, locate_cell, source_images


@dataclass(frozen=True)
class SimulationSet:
    """Stacked forward-model runs in physical units.

    Attributes
    ----------
    log_k : (N, H, W)
    images : (N, n_t, H, W)
        Source images, one per snapshot step.
    head : (N, H, W)
    conc : (N, n_t, H, W)
    cells : (N, 2)
        Source cell ``(row, col)`` of each run.
    n_release : int
        Number of snapshot steps during which the source is active.
    """

    log_k: NDArray
    images: NDArray
    head: NDArray
    conc: NDArray
    cells: NDArray
    n_release: int

    def __post_init__(self):
        N, n_t = self.conc.shape[:2]
        if self.images.shape != self.conc.shape:
            raise ValueError("need one source image per concentration snapshot")
        if self.log_k.shape[0] != N or self.head.shape != self.log_k.shape:
            raise ValueError("inconsistent run counts or field shapes")
        if not 0 < self.n_release <= n_t:
            raise ValueError("n_release must lie in [1, n_t]")

    def __len__(self):
        return self.conc.shape[0]

    @property
    def n_t(self) -> int:
        return self.conc.shape[1]

    def subset(self, idx) -> "SimulationSet":
        idx = np.asarray(idx)
        return SimulationSet(self.log_k[idx], self.images[idx], self.head[idx], self.conc[idx],
                             self.cells[idx], self.n_release)

    def stacked_outputs(self) -> NDArray:
        """``(N, n_t + 1, H, W)``: head then concentrations."""
        return np.concatenate([self.head[:, None], self.conc], axis=1)


def inputs_for(grid: Grid, sources: list[SourceSpec], n_t: int) -> tuple[NDArray, NDArray, int]:
    """Source images ``(N, n_t, H, W)``, source cells and release-step count for a list of sources."""
    images = np.stack([source_images(grid, s, n_t) for s in sources])
    cells = np.array([locate_cell(grid, s.location) for s in sources]).reshape(-1, 2)
    n_release = max(s.n_segments for s in sources)
    return images, cells, n_release


@dataclass(frozen=True)
class Normalizer:
    """Channel scaling: standardized log-K, source / max strength, concentration / ``conc_scale``.

    :meth:`fit` leaves concentrations in physical units by default. Dividing by
    the dataset maximum (a spike at the source cell) puts typical plume values
    far below the natural scale ``1 / beta`` of the softplus output, and the
    concentration outputs then collapse to zero during training.
    """

    logk_mean: float
    logk_std: float
    source_scale: float = 8.0
    conc_scale: float = 1.0

    def __post_init__(self):
        if min(self.logk_std, self.source_scale, self.conc_scale) <= 0:
            raise ValueError("scales must be positive")

    @classmethod
    def fit(cls, data: SimulationSet, logk_mean: float, logk_std: float, source_scale: float = 8.0,
            conc: str = "unit"):
        """``conc="max"`` scales concentrations by the dataset maximum instead."""
        if conc not in ("unit", "max"):
            raise ValueError("conc must be 'unit' or 'max'")
        cmax = float(np.max(data.conc)) if conc == "max" else 1.0
        return cls(float(logk_mean), float(logk_std), float(source_scale), cmax if cmax > 0 else 1.0)

    def k(self, log_k):
        return (np.asarray(log_k) - self.logk_mean) / self.logk_std

    def s(self, images):
        return np.asarray(images) / self.source_scale

    def c(self, conc):
        return np.asarray(conc) / self.conc_scale

    def to_dict(self) -> dict:
        return {"logk_mean": self.logk_mean, "logk_std": self.logk_std,
                "source_scale": self.source_scale, "conc_scale": self.conc_scale}

    @classmethod
    def from_dict(cls, d) -> "Normalizer":
        return cls(**d)


@dataclass(frozen=True)
class PairSet:
    """Input/target tensors plus the source mask used by the weighted loss."""

    x: NDArray  # (P, C_in, H, W)
    y: NDArray  # (P, C_out, H, W)
    cells: NDArray  # (P, 2)
    active: NDArray  # (P, C_out) bool
    run: NDArray  # (P,) originating run
    step: NDArray  # (P,) snapshot index, -1 for one-shot pairs

    def __len__(self):
        return len(self.x)


def reorganize_autoregressive(data: SimulationSet, norm: Normalizer | None = None, dtype=np.float64) -> PairSet:
    """``N * n_t`` pairs ``(K, S_j, c_{j-1}) -> (h, c_j)`` with ``c_0 = 0``.

    Pairs are ordered run by run. Without ``norm`` the tensors stay in physical units.
    """
    N, n_t, H, W = data.conc.shape
    if data.images.shape[1] != n_t:
        raise ValueError("missing snapshot")
    k = data.log_k if norm is None else norm.k(data.log_k)
    s = data.images if norm is None else norm.s(data.images)
    c = data.conc if norm is None else norm.c(data.conc)
    prev = np.concatenate([np.zeros((N, 1, H, W)), c[:, :-1]], axis=1)
    x = np.empty((N, n_t, 3, H, W), dtype=dtype)
    x[:, :, 0] = k[:, None]
    x[:, :, 1] = s
    x[:, :, 2] = prev
    y = np.empty((N, n_t, 2, H, W), dtype=dtype)
    y[:, :, 0] = data.head[:, None]
    y[:, :, 1] = c
    active = np.zeros((N, n_t, 2), bool)
    active[:, : data.n_release, 1] = True
    return PairSet(
        x.reshape(N * n_t, 3, H, W), y.reshape(N * n_t, 2, H, W),
        np.repeat(data.cells, n_t, axis=0), active.reshape(N * n_t, 2),
        np.repeat(np.arange(N), n_t), np.tile(np.arange(n_t), N),
    )


def one_shot_pairs(data: SimulationSet, norm: Normalizer | None = None, dtype=np.float64) -> PairSet:
    """``N`` pairs ``(K, S_1..S_r) -> (h, c_1..c_{n_t})`` with ``r`` release images."""
    N, n_t, H, W = data.conc.shape
    r = data.n_release
    k = data.log_k if norm is None else norm.k(data.log_k)
    s = data.images if norm is None else norm.s(data.images)
    c = data.conc if norm is None else norm.c(data.conc)
    x = np.concatenate([k[:, None], s[:, :r]], axis=1).astype(dtype)
    y = np.concatenate([data.head[:, None], c], axis=1).astype(dtype)
    active = np.zeros((N, n_t + 1), bool)
    active[:, 1 : r + 1] = True
    return PairSet(x, y, data.cells.copy(), active, np.arange(N), np.full(N, -1))
