"""
Prior sampling and forward evaluators for the ensemble smoother.

An evaluator maps a batch of parameter rows to predicted observations through
``evaluate_batch(M) -> (D, ok)``. Rows are either full parameter vectors
(KLE coefficients followed by the seven source parameters) or, when the
conductivity is known, only the seven source parameters.
"""

from __future__ import annotations

import logging

import numpy as np
from numpy.typing import NDArray

from .forward import ForwardError, ForwardModel, observe_batch
from .grid import (
    N_SOURCE_PARAMS,
    RELEASE_TIMES,
    SOURCE_BOUNDS,
    ParameterVector,
    SourceSpec,
    source_bounds_arrays,
)
from .kle import KLEBasis, synthesize_many
from .nn.data import inputs_for
from .nn.train import Surrogate

logger = logging.getLogger(__name__)


def sample_sources(count: int, rng, bounds=SOURCE_BOUNDS) -> NDArray[np.float64]:
    """``(count, 7)`` uniform draws of location and release strengths."""
    lo, hi = source_bounds_arrays(bounds)
    return lo + (hi - lo) * rng.random((count, lo.size))


def sample_prior(count: int, n_kl: int, seed, bounds=SOURCE_BOUNDS) -> NDArray[np.float64]:
    """``(count, n_kl + 7)``: standard-normal KLE coefficients, then uniform source parameters."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    xi = rng.standard_normal((count, n_kl))
    return np.hstack([xi, sample_sources(count, rng, bounds)])


def parameter_bounds(n_kl: int, bounds=SOURCE_BOUNDS, source_only=False) -> tuple[NDArray, NDArray]:
    lo, hi = source_bounds_arrays(bounds)
    if source_only:
        return lo, hi
    return np.r_[np.full(n_kl, -np.inf), lo], np.r_[np.full(n_kl, np.inf), hi]


def _split(M, n_kl, xi_fixed):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if xi_fixed is not None:
        if M.shape[1] != N_SOURCE_PARAMS:
            raise ValueError(f"expected {N_SOURCE_PARAMS} source parameters per row, got {M.shape[1]}")
        return np.broadcast_to(xi_fixed, (len(M), n_kl)), M
    if M.shape[1] != n_kl + N_SOURCE_PARAMS:
        raise ValueError(f"expected {n_kl + N_SOURCE_PARAMS} parameters per row, got {M.shape[1]}")
    return M[:, :n_kl], M[:, n_kl:]


def _sources(S) -> list[SourceSpec]:
    return [SourceSpec((r[0], r[1]), tuple(r[2:]), RELEASE_TIMES) for r in S]


class SimulatorEvaluator:
    """Runs the physical forward model for every row."""

    def __init__(self, model: ForwardModel, xi=None):
        self.model = model
        self.xi = None if xi is None else np.asarray(xi, dtype=float)
        self.n_kl = model.basis.n_kl

    def evaluate_batch(self, M) -> tuple[NDArray, NDArray]:
        XI, S = _split(M, self.n_kl, self.xi)
        D = np.zeros((len(S), self.model.design.n_data))
        ok = np.ones(len(S), bool)
        for i, (xi, src) in enumerate(zip(XI, _sources(S))):
            try:
                D[i] = self.model.run(ParameterVector(xi, src)).observations
            except (ForwardError, ValueError) as exc:
                logger.warning("forward evaluation %d failed: %s", i, exc)
                ok[i] = False
        return D, ok


class SurrogateEvaluator:
    """Predicts observations with a trained network; never calls the simulator."""

    def __init__(self, surrogate: Surrogate, basis: KLEBasis, design, xi=None, chunk: int = 64):
        self.surrogate = surrogate
        self.basis = basis
        self.grid = basis.grid
        self.design = design
        self.xi = None if xi is None else np.asarray(xi, dtype=float)
        self.chunk = chunk
        self.n_kl = basis.n_kl

    def evaluate_batch(self, M) -> tuple[NDArray, NDArray]:
        XI, S = _split(M, self.n_kl, self.xi)
        log_k = synthesize_many(self.basis, XI)
        images, _, _ = inputs_for(self.grid, _sources(S), self.surrogate.n_t)
        head, conc = self.surrogate.predict(log_k, images, self.chunk)
        D = observe_batch(head, conc, self.design, self.grid)
        return D, np.all(np.isfinite(D), axis=1)
