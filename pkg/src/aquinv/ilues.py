"""
Iterative local-updating ensemble smoother.

Each sweep visits every ensemble member ``m_i``:

1. score all members by ``J = J_d / max J_d + J_m / max J_m``, where ``J_d``
   is the data misfit and ``J_m`` the distance to ``m_i`` in the ensemble
   parameter metric;
2. draw a local ensemble with probabilities proportional to ``1 / J``;
3. update the local ensemble with an ensemble-smoother step against
   perturbed observations and an inflated error covariance;
4. pick one updated member at random, run the forward model on it, and
   accept it in place of ``m_i`` with probability ``min(1, exp(-dJ_d / 2))``.

Members are independent within a sweep (the ensemble is frozen at the start),
so all candidates of a sweep are evaluated in one batch. Every member has its
own random stream derived from ``(seed, sweep, member)``.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla
from numpy.typing import NDArray

from .io import write_json, write_tensor

logger = logging.getLogger(__name__)

ZERO_J_FLOOR = 1e-12


class IluesError(ArithmeticError):
    """A linear-algebra step of the smoother failed."""


@dataclass(frozen=True)
class IluesConfig:
    n_e: int = 6000
    alpha: float = 0.1
    n_iter: int = 20
    beta: float | None = None  # observation-error inflation, defaults to n_iter
    seed: int = 0
    jitter: float = 1e-6  # relative ridge on the parameter covariance

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must lie in (0, 1]")
        if self.n_iter < 0:
            raise ValueError("n_iter must be non-negative")
        if self.n_local < 2 or self.n_local > self.n_e:
            raise ValueError("local ensemble size must lie in [2, n_e]")

    @property
    def n_local(self) -> int:
        return max(2, int(round(self.alpha * self.n_e)))

    @property
    def inflation(self) -> float:
        return float(self.n_iter if self.beta is None else self.beta) or 1.0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Ensemble:
    M: NDArray[np.float64]  # (N_e, N_m)
    D: NDArray[np.float64]  # (N_e, N_d)
    iteration: int = 0

    def __post_init__(self):
        if self.M.shape[0] != self.D.shape[0]:
            raise ValueError("parameter and prediction ensembles differ in size")


def rng_for(seed: int, iteration: int, member: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(iteration), int(member)]))


# -- building blocks ---------------------------------------------------------


def data_misfit(D, d, cd_diag) -> NDArray:
    """``J_d`` of every row of ``D``: ``(f - d)^T C_D^-1 (f - d)`` with diagonal ``C_D``."""
    r = np.atleast_2d(D) - np.asarray(d)
    return np.sum(r * r / np.asarray(cd_diag), axis=1)


def parameter_metric(M, jitter: float = 1e-6):
    """Cholesky factor of the ridge-regularized sample covariance of ``M``."""
    M = np.atleast_2d(M)
    C = np.atleast_2d(np.cov(M, rowvar=False))
    mean_diag = float(np.mean(np.diag(C)))
    C = C + jitter * (mean_diag if mean_diag > 0 else 1.0) * np.eye(len(C))
    try:
        return sla.cho_factor(C, lower=True)
    except np.linalg.LinAlgError as exc:
        raise IluesError("parameter covariance is singular after regularization") from exc


def whiten(M, factor) -> NDArray:
    """Rows of ``M`` mapped so that Euclidean distance equals the ``C_MM^-1`` distance."""
    L = factor[0]
    return sla.solve_triangular(L, np.atleast_2d(M).T, lower=True).T


def j_values(M, D, anchor: int, d, cd_diag, cmm_factor=None, jitter: float = 1e-6, Z=None) -> NDArray:
    """Combined normalized distance of every member to member ``anchor``.

    ``Z`` (whitened ``M``) may be passed to avoid recomputing it per anchor.
    """
    jd = data_misfit(D, d, cd_diag)
    if Z is None:
        Z = whiten(M, parameter_metric(M, jitter) if cmm_factor is None else cmm_factor)
    diff = Z - Z[anchor]
    jm = np.sum(diff * diff, axis=1)
    return _combine(jd, jm)


def _combine(jd, jm):
    jd_max, jm_max = jd.max(), jm.max()
    return (jd / jd_max if jd_max > 0 else np.zeros_like(jd)) + (jm / jm_max if jm_max > 0 else np.zeros_like(jm))


def roulette_select(J, n_local: int, seed) -> NDArray[np.int64]:
    """``n_local`` distinct indices, drawn one at a time with probability proportional to ``1 / J``."""
    J = np.asarray(J, dtype=float)
    if n_local > J.size:
        raise ValueError("cannot select more members than the ensemble holds")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    w = 1.0 / np.maximum(J, ZERO_J_FLOOR)
    # sequential draws without replacement are equivalent to sorting
    # exponential race times E_i / w_i
    keys = rng.standard_exponential(J.size) / w
    return np.argsort(keys, kind="stable")[:n_local]


def es_update(M_local, D_local, d_perturbed, cd_inflated) -> NDArray:
    """Ensemble-smoother update ``m_j + C_MD (C_DD + C_D)^-1 (d_j - f(m_j))``.

    Parameters
    ----------
    M_local : (N_l, N_m)
    D_local : (N_l, N_d)
    d_perturbed : (N_l, N_d)
        Perturbed observations, one row per member.
    cd_inflated : (N_d,)
        Diagonal of the (inflated) observation-error covariance.
    """
    M_local = np.atleast_2d(M_local)
    D_local = np.atleast_2d(D_local)
    n = len(M_local)
    if n < 2:
        raise ValueError("need at least two members for an ensemble update")
    dM = M_local - M_local.mean(axis=0)
    dD = D_local - D_local.mean(axis=0)
    C = dD.T @ dD / (n - 1)
    C[np.diag_indices_from(C)] += np.asarray(cd_inflated, dtype=float)
    innov = np.asarray(d_perturbed) - D_local
    try:
        fac = sla.cho_factor(C, lower=True)
    except np.linalg.LinAlgError:
        C[np.diag_indices_from(C)] += 1e-10 * np.trace(C) / len(C)
        try:
            fac = sla.cho_factor(C, lower=True)
        except np.linalg.LinAlgError as exc:
            raise IluesError("C_DD + C_D is not positive definite") from exc
    # K^T = (C_DD + C_D)^-1 C_DM, and C_DM = dD^T dM / (n - 1)
    X = sla.cho_solve(fac, innov.T)  # (N_d, N_l)
    return M_local + (dM.T @ (dD @ X) / (n - 1)).T


def acceptance_probability(jd_new, jd_old):
    return np.minimum(1.0, np.exp(-0.5 * (np.asarray(jd_new, float) - np.asarray(jd_old, float))))


def accept_reject(jd_new: float, jd_old: float, seed) -> bool:
    """Metropolis-style acceptance of a candidate with misfit ``jd_new``."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if jd_new <= jd_old:
        return True
    return bool(rng.random() < acceptance_probability(jd_new, jd_old))


def reflect(M, lower, upper) -> NDArray:
    """Fold values back into ``[lower, upper]`` by reflection at the bounds."""
    M = np.array(M, dtype=float)
    lo = np.broadcast_to(lower, M.shape[-1:])
    hi = np.broadcast_to(upper, M.shape[-1:])
    finite = np.isfinite(lo) & np.isfinite(hi)
    if finite.any():
        a, b = lo[finite], hi[finite]
        x = M[..., finite]
        width = b - a
        y = np.mod(x - a, 2 * width)
        M[..., finite] = a + np.where(y > width, 2 * width - y, y)
    lo_only = np.isfinite(lo) & ~finite
    M[..., lo_only] = np.where(M[..., lo_only] < lo[lo_only], 2 * lo[lo_only] - M[..., lo_only], M[..., lo_only])
    hi_only = np.isfinite(hi) & ~finite
    M[..., hi_only] = np.where(M[..., hi_only] > hi[hi_only], 2 * hi[hi_only] - M[..., hi_only], M[..., hi_only])
    return M


# -- driver -------------------------------------------------------------------


@dataclass
class IterationStats:
    iteration: int
    median_sswr: float
    mean_sswr: float
    accepted: int
    failures: int
    seconds: float


@dataclass
class IluesResult:
    history: list[Ensemble]
    stats: list[IterationStats] = field(default_factory=list)

    @property
    def final(self) -> Ensemble:
        return self.history[-1]


def run_ilues(prior: NDArray, evaluator, d, sigma, config: IluesConfig, lower=None, upper=None,
              out_dir=None, evaluator_name: str | None = None) -> IluesResult:
    """Run the smoother from a prior ensemble.

    Parameters
    ----------
    prior : (N_e, N_m)
        Initial parameter ensemble.
    evaluator
        Object with ``evaluate_batch(M) -> (D, ok)``; rows with ``ok`` False
        failed and are ignored.
    d, sigma : (N_d,)
        Observations and their standard deviations (uninflated).
    lower, upper : (N_m,), optional
        Bounds enforced by reflection after each update; ``+-inf`` for none.
    out_dir : path, optional
        Write ``M_iterNN.aqtn``, ``D_iterNN.aqtn``, ``sswr.csv`` and ``manifest.json``.
    """
    cfg = config
    M = np.array(prior, dtype=float)
    if M.shape[0] != cfg.n_e:
        raise ValueError(f"prior has {M.shape[0]} members, config expects {cfg.n_e}")
    n_m = M.shape[1]
    lower = np.full(n_m, -np.inf) if lower is None else np.asarray(lower, float)
    upper = np.full(n_m, np.inf) if upper is None else np.asarray(upper, float)
    d = np.asarray(d, dtype=float)
    cd = np.asarray(sigma, dtype=float) ** 2
    cd_infl = cfg.inflation * cd
    out = None if out_dir is None else Path(out_dir)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    t0 = time.perf_counter()
    D, ok = evaluator.evaluate_batch(M)
    if not np.all(ok):
        raise IluesError(f"{int(np.sum(~ok))} prior members failed to evaluate")
    history = [Ensemble(M.copy(), np.array(D, float), 0)]
    stats = [_stats(0, D, d, cd, cfg.n_e, 0, time.perf_counter() - t0)]
    _persist(out, history[-1], stats)

    for it in range(1, cfg.n_iter + 1):
        t0 = time.perf_counter()
        jd = data_misfit(D, d, cd)
        Z = whiten(M, parameter_metric(M, cfg.jitter))
        zz = np.sum(Z * Z, axis=1)
        jd_norm = jd / jd.max() if jd.max() > 0 else np.zeros_like(jd)
        candidates = np.empty_like(M)
        rngs = []
        for i in range(cfg.n_e):
            rng = rng_for(cfg.seed, it, i)
            jm = np.maximum(zz + zz[i] - 2.0 * (Z @ Z[i]), 0.0)
            jm[i] = 0.0
            J = jd_norm + (jm / jm.max() if jm.max() > 0 else 0.0)
            local = roulette_select(J, cfg.n_local, rng)
            d_pert = d + np.sqrt(cd_infl) * rng.standard_normal((len(local), d.size))
            updated = reflect(es_update(M[local], D[local], d_pert, cd_infl), lower, upper)
            candidates[i] = updated[rng.integers(len(local))]
            rngs.append(rng)
        if not np.all(np.isfinite(candidates)):
            raise IluesError(f"non-finite parameters produced in sweep {it}")
        D_new, ok = evaluator.evaluate_batch(candidates)
        jd_new = data_misfit(np.where(ok[:, None], D_new, D), d, cd)
        accepted = 0
        M_next, D_next = M.copy(), D.copy()
        for i in range(cfg.n_e):
            if not ok[i]:
                continue
            if accept_reject(jd_new[i], jd[i], rngs[i]):
                M_next[i], D_next[i] = candidates[i], D_new[i]
                accepted += 1
        failures = int(np.sum(~ok))
        if failures:
            logger.warning("sweep %d: %d forward failures, members kept", it, failures)
        M, D = M_next, D_next
        history.append(Ensemble(M.copy(), D.copy(), it))
        stats.append(_stats(it, D, d, cd, accepted, failures, time.perf_counter() - t0))
        logger.info("sweep %d: median SSWR %.4g, accepted %d/%d", it, stats[-1].median_sswr, accepted, cfg.n_e)
        _persist(out, history[-1], stats)

    if out is not None:
        write_json(out / "manifest.json", {
            "config": cfg.to_dict(),
            "evaluator": evaluator_name or type(evaluator).__name__,
            "n_m": n_m,
            "n_d": int(d.size),
            "wall_clock_seconds": [s.seconds for s in stats],
        })
    return IluesResult(history, stats)


def _stats(it, D, d, cd, accepted, failures, seconds) -> IterationStats:
    s = data_misfit(D, d, cd)  # with diagonal C_D this is the SSWR
    return IterationStats(it, float(np.median(s)), float(np.mean(s)), int(accepted), int(failures), float(seconds))


def _persist(out, ens: Ensemble, stats) -> None:
    if out is None:
        return
    write_tensor(out / f"M_iter{ens.iteration:02d}.aqtn", ens.M)
    write_tensor(out / f"D_iter{ens.iteration:02d}.aqtn", ens.D)
    write_stats_csv(out / "sswr.csv", stats)


def write_stats_csv(path, stats) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "median_sswr", "mean_sswr", "accepted", "failures"])
        for s in stats:
            w.writerow([s.iteration, repr(s.median_sswr), repr(s.mean_sswr), s.accepted, s.failures])


def write_boxplot_csv(path, history: list[Ensemble], columns, names) -> None:
    """Five-number summaries of selected parameter columns per iteration."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "parameter", "min", "q1", "median", "q3", "max", "mean", "std"])
        for ens in history:
            for col, name in zip(columns, names):
                x = ens.M[:, col]
                q = np.percentile(x, [0, 25, 50, 75, 100])
                w.writerow([ens.iteration, name, *(repr(float(v)) for v in q),
                            repr(float(x.mean())), repr(float(x.std(ddof=1)))])
