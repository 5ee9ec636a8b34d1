"""
Forward model ``f(m)``: KLE field -> steady flow -> transport -> observations.

Also holds the observation design, the synthetic noise model and the
observation perturbation used by the ensemble smoother.
"""

from __future__ import annotations

import csv
import hashlib
import threading
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .flow import FlowBC, darcy_velocity, solve_head
from .grid import Grid, ParameterVector, locate_cell, pack, unpack
from .kle import CovarianceSpec, KLEBasis, synthesize
from .transport import DEFAULT_DT, DispersionSpec, TransportOperator, dispersion_tensor, run_operator

SNAPSHOT_TIMES = (2.0, 4.0, 6.0, 8.0, 10.0, 12.0, 14.0)

_lock = threading.Lock()
_calls = 0


def simulator_calls() -> int:
    """Number of forward simulations run in this process."""
    return _calls


def _count_call():
    global _calls
    with _lock:
        _calls += 1


def default_wells(grid: Grid) -> tuple[tuple[float, float], ...]:
    """3 x 7 lattice over the domain interior."""
    xs = np.linspace(0.125, 0.875, 7) * grid.domain_width
    ys = np.linspace(0.25, 0.75, 3) * grid.domain_height
    return tuple((float(x), float(y)) for y in ys for x in xs)


@dataclass(frozen=True)
class ObservationDesign:
    """Well locations and concentration sampling times.

    Observation vector layout, for each well in order: one concentration per
    time, then the head.
    """

    wells: tuple[tuple[float, float], ...]
    times: tuple[float, ...] = SNAPSHOT_TIMES

    def __post_init__(self):
        object.__setattr__(self, "wells", tuple((float(x), float(y)) for x, y in self.wells))
        object.__setattr__(self, "times", tuple(float(t) for t in self.times))

    @property
    def n_data(self) -> int:
        return len(self.wells) * (len(self.times) + 1)

    def cells(self, grid: Grid) -> list[tuple[int, int]]:
        return [locate_cell(grid, w) for w in self.wells]

    def concentration_mask(self) -> NDArray[np.bool_]:
        per_well = np.r_[np.ones(len(self.times), bool), False]
        return np.tile(per_well, len(self.wells))

    def labels(self) -> list[str]:
        out = []
        for i in range(len(self.wells)):
            out += [f"w{i:02d}_c_t{t:g}" for t in self.times]
            out.append(f"w{i:02d}_h")
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["well", "x", "y"])
            for i, (x, y) in enumerate(self.wells):
                w.writerow([i, x, y])


@dataclass(frozen=True)
class ForwardConfig:
    """Physical settings shared by every forward run."""

    grid: Grid = Grid()
    covariance: CovarianceSpec = CovarianceSpec()
    bc: FlowBC = FlowBC()
    porosity: float = 0.25
    dispersion: DispersionSpec = DispersionSpec()
    dt: float = DEFAULT_DT
    times: tuple[float, ...] = SNAPSHOT_TIMES
    wells: tuple[tuple[float, float], ...] | None = None

    @property
    def design(self) -> ObservationDesign:
        wells = self.wells if self.wells is not None else default_wells(self.grid)
        return ObservationDesign(wells, self.times)

    @property
    def n_t(self) -> int:
        return len(self.times)


@dataclass(frozen=True)
class ForwardOutputs:
    log_k: NDArray[np.float64]
    head: NDArray[np.float64]
    concentrations: NDArray[np.float64]  # (n_t, H, W)
    observations: NDArray[np.float64]

    def stacked(self) -> NDArray[np.float64]:
        """``(n_t + 1, H, W)`` array: head then the concentration snapshots."""
        return np.concatenate([self.head[None], self.concentrations])


def observe(head, concentrations, design: ObservationDesign, grid: Grid) -> NDArray[np.float64]:
    """Extract the observation vector from head and concentration snapshots."""
    head = np.asarray(head)
    concentrations = np.asarray(concentrations)
    if concentrations.shape[0] != len(design.times):
        raise ValueError("need one concentration field per observation time")
    rows, cols = np.array(design.cells(grid)).T
    conc = concentrations[:, rows, cols].T  # (wells, times)
    return np.concatenate([conc, head[rows, cols][:, None]], axis=1).ravel()


def observe_batch(heads, concentrations, design: ObservationDesign, grid: Grid) -> NDArray[np.float64]:
    """Vectorized :func:`observe` for ``heads (n, H, W)`` and ``concentrations (n, n_t, H, W)``."""
    rows, cols = np.array(design.cells(grid)).T
    conc = np.asarray(concentrations)[:, :, rows, cols].transpose(0, 2, 1)
    h = np.asarray(heads)[:, rows, cols][:, :, None]
    return np.concatenate([conc, h], axis=2).reshape(len(h), -1)


def params_hash(vector) -> str:
    return hashlib.sha1(np.ascontiguousarray(vector, dtype=np.float64).tobytes()).hexdigest()[:12]


class ForwardError(RuntimeError):
    """A forward simulation failed; carries the hash of the offending parameter vector."""


class ForwardModel:
    """Reusable simulator. Caches the flow solution and the factorized transport
    operator of the most recent conductivity field, so repeated runs with the
    same KLE coefficients (e.g. known conductivity) only redo transport."""

    def __init__(self, config: ForwardConfig, basis: KLEBasis):
        if basis.grid != config.grid:
            raise ValueError("KLE basis grid does not match the forward grid")
        self.config = config
        self.basis = basis
        self.design = config.design
        self._cache_key = None
        self._cache = None

    def _physics(self, xi):
        key = np.asarray(xi, dtype=np.float64).tobytes()
        if key != self._cache_key:
            cfg = self.config
            log_k = synthesize(self.basis, xi).values
            K = np.exp(log_k)
            h = solve_head(cfg.grid, K, cfg.bc)
            v = darcy_velocity(cfg.grid, K, h, cfg.porosity, cfg.bc)
            op = TransportOperator(cfg.grid, v, dispersion_tensor(v, cfg.dispersion), cfg.porosity, cfg.dt)
            self._cache = (log_k, h.values, op)
            self._cache_key = key
        return self._cache

    def run(self, params: ParameterVector | NDArray, with_balance: bool = False):
        if not isinstance(params, ParameterVector):
            params = unpack(params, self.basis.n_kl)
        try:
            log_k, head, op = self._physics(params.xi)
            conc, balance = run_operator(op, params.source, self.config.times)
        except Exception as exc:
            raise ForwardError(f"forward run failed for parameters {params_hash(pack(params))}: {exc}") from exc
        _count_call()
        obs = observe(head, conc, self.design, self.config.grid)
        out = ForwardOutputs(log_k, head, conc, obs)
        return (out, balance) if with_balance else out

    __call__ = run


def run_forward(params: ParameterVector | NDArray, basis: KLEBasis, config: ForwardConfig = ForwardConfig()) -> ForwardOutputs:
    """Noiseless forward model for one parameter vector."""
    return ForwardModel(config, basis).run(params)


@dataclass(frozen=True)
class NoiseModel:
    """Independent Gaussian measurement errors with standard deviations ``sigma``."""

    sigma: NDArray[np.float64]
    level: float = 0.05
    floor: float = 0.0

    @property
    def variance(self) -> NDArray[np.float64]:
        return self.sigma**2

    def inflated(self, beta: float) -> NDArray[np.float64]:
        return beta * self.variance


def noise_sigma(truth, level: float, conc_mask=None) -> tuple[NDArray, float]:
    """Per-datum ``sigma_i = max(level |truth_i|, eps)`` and the floor ``eps``.

    ``eps = level * 0.01 * max concentration observation``; without a mask
    every entry counts as a concentration.
    """
    if level <= 0:
        raise ValueError("noise level must be positive")
    truth = np.asarray(truth, dtype=float)
    mask = np.ones(truth.shape, bool) if conc_mask is None else np.asarray(conc_mask, bool)
    cmax = float(np.max(np.abs(truth[mask]))) if mask.any() else 0.0
    eps = level * 0.01 * cmax
    if eps <= 0:
        eps = level * 0.01
    return np.maximum(level * np.abs(truth), eps), eps


def make_noise(truth, level: float, seed, conc_mask=None) -> tuple[NDArray, NoiseModel]:
    """Synthetic observations ``truth + sigma * z`` and their noise model."""
    sigma, eps = noise_sigma(truth, level, conc_mask)
    rng = np.random.default_rng(seed)
    d = np.asarray(truth, dtype=float) + sigma * rng.standard_normal(sigma.shape)
    return d, NoiseModel(sigma, level, eps)


def perturb_observations(d, cov_diag, count: int, seed) -> NDArray[np.float64]:
    """``count`` rows of ``d + sqrt(cov_diag) * z``."""
    d = np.asarray(d, dtype=float)
    cov_diag = np.asarray(cov_diag, dtype=float)
    if np.any(cov_diag < 0):
        raise ValueError("covariance diagonal must be non-negative")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return d + np.sqrt(cov_diag) * rng.standard_normal((count, d.size))


def write_observations_csv(path, vectors, design: ObservationDesign, index=None) -> None:
    """One row per observation vector; header names well, quantity and time."""
    vectors = np.atleast_2d(vectors)
    index = range(len(vectors)) if index is None else index
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["record"] + design.labels())
        for i, row in zip(index, vectors):
            w.writerow([i] + [repr(float(x)) for x in row])


def read_observations_csv(path) -> tuple[list[str], NDArray[np.float64]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header = rows[0][1:]
    return header, np.array([[float(x) for x in r[1:]] for r in rows[1:]])
