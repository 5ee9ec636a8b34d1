"""
Experiment configuration: a strict JSON document validated against a schema.

Every section is optional; missing keys take the defaults of the corresponding
library types. Unknown keys anywhere are an error.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema

from .flow import FlowBC
from .forward import SNAPSHOT_TIMES, ForwardConfig
from .grid import SOURCE_BOUNDS, Grid
from .ilues import IluesConfig
from .io import sha256_hex
from .kle import CovarianceSpec
from .nn.network import PRESETS, NetworkSpec
from .nn.train import MODES, TrainConfig
from .transport import DEFAULT_DT, DispersionSpec


class ConfigError(ValueError):
    """The configuration file is missing, malformed or invalid."""


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False, "required": list(required)}


_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_int = {"type": "integer", "minimum": 0}
_range = {"type": "array", "items": _num, "minItems": 2, "maxItems": 2}

SCHEMA = _obj({
    "grid": _obj({"height_cells": {"type": "integer", "minimum": 2}, "width_cells": {"type": "integer", "minimum": 2},
                  "domain_height": _pos, "domain_width": _pos}),
    "covariance": _obj({"variance": _pos, "length_x": _pos, "length_y": _pos, "mean": _num,
                        "target_energy": {"type": "number", "exclusiveMinimum": 0, "maximum": 1}}),
    "prior": _obj({"x": _range, "y": _range, "strength": _range}),
    "observation": _obj({
        "wells": {"type": ["array", "null"], "items": {"type": "array", "items": _num, "minItems": 2, "maxItems": 2}},
        "times": {"type": "array", "items": _pos, "minItems": 1},
        "noise_level": _pos,
    }),
    "physics": _obj({"porosity": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                     "alpha_l": {"type": "number", "minimum": 0}, "alpha_t": {"type": "number", "minimum": 0},
                     "left_head": _num, "right_head": _num, "dt": _pos}),
    "network": _obj({"preset": {"enum": sorted(PRESETS)}}),
    "train": _obj({"mode": {"enum": list(MODES)}, "batch_size": {"type": "integer", "minimum": 2},
                   "epochs": _int, "lr": _pos, "weight_decay": {"type": "number", "minimum": 0},
                   "w_c": {"type": "number", "minimum": 0}, "factor": {"type": "number", "exclusiveMinimum": 1},
                   "patience": _int, "threshold": {"type": "number", "minimum": 0}}),
    "ilues": _obj({"n_e": {"type": "integer", "minimum": 2}, "alpha": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                   "n_iter": _int, "beta": {"type": ["number", "null"], "exclusiveMinimum": 0},
                   "jitter": {"type": "number", "minimum": 0}, "unknowns": {"enum": ["all", "source"]},
                   "known_xi": {"type": ["string", "null"]}}),
    "seeds": _obj({k: _int for k in ("prior", "noise", "train", "ilues")}),
    "paths": _obj({"cache": {"type": "string"}}),
})


@dataclass(frozen=True)
class ExperimentConfig:
    grid: Grid = Grid()
    covariance: CovarianceSpec = CovarianceSpec()
    target_energy: float = 0.95
    prior: dict = field(default_factory=lambda: {k: tuple(v) for k, v in SOURCE_BOUNDS.items()})
    wells: tuple | None = None
    times: tuple = SNAPSHOT_TIMES
    noise_level: float = 0.05
    porosity: float = 0.25
    dispersion: DispersionSpec = DispersionSpec()
    bc: FlowBC = FlowBC()
    dt: float = DEFAULT_DT
    network_preset: str = "full"
    mode: str = "ar-net-wl"
    train: TrainConfig = TrainConfig()
    ilues: IluesConfig = IluesConfig()
    unknowns: str = "all"
    known_xi: str | None = None
    seeds: dict = field(default_factory=lambda: {"prior": 0, "noise": 1, "train": 0, "ilues": 0})
    cache_dir: str = ".aquinv_cache"
    source_path: str | None = None
    raw: dict = field(default_factory=dict)

    @property
    def forward(self) -> ForwardConfig:
        return ForwardConfig(self.grid, self.covariance, self.bc, self.porosity, self.dispersion,
                             self.dt, tuple(self.times), self.wells)

    @property
    def network(self) -> NetworkSpec:
        return PRESETS[self.network_preset]

    def to_dict(self) -> dict:
        return self.raw

    def hash(self) -> str:
        return sha256_hex(json.dumps(self.raw, sort_keys=True))[:16]



def from_dict(raw: dict, source_path=None) -> ExperimentConfig:
    try:
        jsonschema.validate(raw, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {where}: {exc.message}") from None
    try:
        g = Grid(**raw.get("grid", {}))
        cov_raw = dict(raw.get("covariance", {}))
        energy = cov_raw.pop("target_energy", 0.95)
        cov = CovarianceSpec(**cov_raw)
        prior = {k: tuple(v) for k, v in SOURCE_BOUNDS.items()}
        for k, v in raw.get("prior", {}).items():
            if v[0] >= v[1]:
                raise ValueError(f"prior range for {k} is empty")
            prior[k] = tuple(v)
        obs = raw.get("observation", {})
        phys = raw.get("physics", {})
        train_raw = dict(raw.get("train", {}))
        mode = train_raw.pop("mode", "ar-net-wl")
        seeds = {"prior": 0, "noise": 1, "train": 0, "ilues": 0, **raw.get("seeds", {})}
        train = TrainConfig(**train_raw, seed=seeds["train"])
        il = dict(raw.get("ilues", {}))
        unknowns = il.pop("unknowns", "all")
        known_xi = il.pop("known_xi", None)
        ilues = IluesConfig(**il, seed=seeds["ilues"])
        cfg = ExperimentConfig(
            grid=g, covariance=cov, target_energy=energy, prior=prior,
            wells=None if obs.get("wells") is None else tuple(tuple(w) for w in obs["wells"]),
            times=tuple(obs.get("times", SNAPSHOT_TIMES)),
            noise_level=obs.get("noise_level", 0.05),
            porosity=phys.get("porosity", 0.25),
            dispersion=DispersionSpec(phys.get("alpha_l", 1.0), phys.get("alpha_t", 0.1)),
            bc=FlowBC(phys.get("left_head", 1.0), phys.get("right_head", 0.0)),
            dt=phys.get("dt", DEFAULT_DT),
            network_preset=raw.get("network", {}).get("preset", "full"),
            mode=mode, train=train, ilues=ilues, unknowns=unknowns, known_xi=known_xi,
            seeds=seeds, cache_dir=raw.get("paths", {}).get("cache", ".aquinv_cache"),
            source_path=None if source_path is None else str(source_path), raw=raw,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config: {exc}") from None
    return cfg


def load_config(path=None) -> ExperimentConfig:
    """Read and validate a JSON config; ``None`` gives the defaults."""
    if path is None:
        return from_dict({})
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {p} is not valid JSON: {exc}") from None
    return from_dict(raw, p)


def resolve(cfg: ExperimentConfig, path) -> Path:
    """Interpret ``path`` relative to the config file's directory."""
    p = Path(path)
    if p.is_absolute() or cfg.source_path is None:
        return p
    return Path(cfg.source_path).parent / p
