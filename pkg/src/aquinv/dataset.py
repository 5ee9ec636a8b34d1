"""
On-disk simulation datasets.

A dataset is a directory::

    manifest.json       config hash, counts, per-record failures
    params.aqtn         (N, N_m) parameter rows
    fields_0000.aqtn    (1 + n_t, H, W): head then concentrations, one per record
    obs.csv             noiseless observation vector of every completed record

Simulation is resumable: records whose field file already exists and reads
back cleanly are skipped.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from .forward import ForwardConfig, ForwardModel, observe, read_observations_csv, write_observations_csv
from .grid import RELEASE_TIMES, unpack
from .io import TensorFileError, read_json, read_tensor, write_json, write_tensor
from .kle import KLEBasis, synthesize_many
from .nn.data import SimulationSet, inputs_for

logger = logging.getLogger(__name__)


def field_path(directory, index: int) -> Path:
    return Path(directory) / f"fields_{index:04d}.aqtn"


def _record_done(directory, index) -> bool:
    p = field_path(directory, index)
    if not p.exists():
        return False
    try:
        read_tensor(p)
        return True
    except (TensorFileError, OSError, ValueError):
        return False


# worker state for process pools
_worker_model: ForwardModel | None = None


def _init_worker(config: ForwardConfig, basis: KLEBasis):
    global _worker_model
    _worker_model = ForwardModel(config, basis)


def _simulate_one(args):
    index, row, directory = args
    try:
        out = _worker_model.run(unpack(row, _worker_model.basis.n_kl))
    except Exception as exc:  # recorded per record, the run continues
        return index, str(exc)
    write_tensor(field_path(directory, index), out.stacked())
    return index, None


def simulate_dataset(params: NDArray, config: ForwardConfig, basis: KLEBasis, directory,
                     jobs: int = 1, meta: dict | None = None) -> dict:
    """Run every parameter row not yet simulated; returns the manifest."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    params = np.atleast_2d(np.asarray(params, dtype=np.float64))
    params_file = d / "params.aqtn"
    if params_file.exists():
        old = read_tensor(params_file)
        if old.shape != params.shape or not np.array_equal(old, params):
            raise ValueError(f"{d} already holds a dataset for different parameters")
    else:
        write_tensor(params_file, params)
    manifest_file = d / "manifest.json"
    previous = read_json(manifest_file) if manifest_file.exists() else {}
    todo = [i for i in range(len(params)) if not _record_done(d, i)]
    logger.info("%d of %d records to simulate", len(todo), len(params))
    failures = {}
    tasks = [(i, params[i], str(d)) for i in todo]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(jobs, initializer=_init_worker, initargs=(config, basis)) as pool:
            results = list(pool.map(_simulate_one, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))
    else:
        _init_worker(config, basis)
        results = [_simulate_one(t) for t in tasks]
    for index, err in results:
        if err is not None:
            failures[str(index)] = err
            logger.warning("record %d failed: %s", index, err)
    # failures from earlier runs that have since completed are dropped
    for k, v in previous.get("failures", {}).items():
        if k not in failures and not _record_done(d, int(k)):
            failures[k] = v
    done = [i for i in range(len(params)) if _record_done(d, i)]
    design = config.design
    obs = np.array([_observations(d, i, design, config) for i in done]).reshape(len(done), design.n_data)
    write_observations_csv(d / "obs.csv", obs, design, index=done)
    manifest = {
        **(meta or {}),
        "n_records": len(params),
        "n_complete": len(done),
        "n_kl": basis.n_kl,
        "grid": config.grid.to_dict(),
        "times": list(config.times),
        "failures": dict(sorted(failures.items(), key=lambda kv: int(kv[0]))),
    }
    write_json(manifest_file, manifest)
    return manifest


def _observations(d, i, design, config):
    fields = read_tensor(field_path(d, i))
    return observe(fields[0], fields[1:], design, config.grid)


@dataclass
class Dataset:
    directory: Path
    params: NDArray
    manifest: dict

    @classmethod
    def open(cls, directory) -> "Dataset":
        d = Path(directory)
        return cls(d, read_tensor(d / "params.aqtn"), read_json(d / "manifest.json"))

    def complete(self) -> list[int]:
        return [i for i in range(len(self.params)) if _record_done(self.directory, i)]

    def fields(self, index: int) -> NDArray:
        return read_tensor(field_path(self.directory, index))

    def observations(self) -> tuple[list[str], NDArray]:
        return read_observations_csv(self.directory / "obs.csv")

    def simulation_set(self, basis: KLEBasis, indices=None) -> SimulationSet:
        """Training arrays for the completed records (or ``indices``)."""
        idx = self.complete() if indices is None else list(indices)
        n_kl = self.manifest["n_kl"]
        if basis.n_kl != n_kl:
            raise ValueError("KLE basis does not match the dataset")
        stacks = np.array([self.fields(i) for i in idx])
        rows = self.params[idx]
        sources = [unpack(r, n_kl, boundaries=RELEASE_TIMES).source for r in rows]
        images, cells, n_release = inputs_for(basis.grid, sources, stacks.shape[1] - 1)
        return SimulationSet(synthesize_many(basis, rows[:, :n_kl]), images, stacks[:, 0],
                             stacks[:, 1:], cells, n_release)
