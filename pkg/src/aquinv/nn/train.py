"""
Surrogate training, autoregressive rollout and checkpoints.

Three modes share one loop:

``net``
    one network maps ``(K, S_1..S_r)`` to ``(h, c_1..c_nt)`` in a single pass.
``ar-net``
    one network maps ``(K, S_j, c_{j-1})`` to ``(h, c_j)``; predictions are chained.
``ar-net-wl``
    as ``ar-net`` with extra loss weight around the source.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from ..io import read_json, read_tensor, sha256_hex, write_json, write_tensor
from .data import Normalizer, PairSet, SimulationSet, one_shot_pairs, reorganize_autoregressive
from .loss import data_loss, neighborhood_mask, weight_penalty
from .network import EncoderDecoder, NetworkSpec
from .optim import Adam, PlateauScheduler

logger = logging.getLogger(__name__)

MODES = ("net", "ar-net", "ar-net-wl")


class TrainingError(ArithmeticError):
    """Training diverged (non-finite loss)."""


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 200
    epochs: int = 200
    lr: float = 0.005
    weight_decay: float = 5e-5
    w_c: float = 5.0
    factor: float = 10.0
    patience: int = 10
    threshold: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 (batch normalization)")
        if self.epochs < 0 or self.lr <= 0 or self.weight_decay < 0 or self.w_c < 0:
            raise ValueError("invalid training settings")

    def to_dict(self) -> dict:
        return asdict(self)


def is_autoregressive(mode: str) -> bool:
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    return mode != "net"


def network_spec_for(spec: NetworkSpec, mode: str, n_t: int, n_release: int) -> NetworkSpec:
    if is_autoregressive(mode):
        return spec.with_channels(3, 2)
    return spec.with_channels(1 + n_release, 1 + n_t)


def _batches(n: int, size: int, rng) -> list[np.ndarray]:
    """Shuffled, nearly equal batches; never a batch of one unless ``n == 1``."""
    order = rng.permutation(n)
    return np.array_split(order, max(1, int(np.ceil(n / size))))


@dataclass
class TrainResult:
    surrogate: "Surrogate"
    history: list[tuple[int, float, float]]  # (epoch, loss, lr)

    def write_history(self, path) -> None:
        write_history_csv(path, self.history)


def write_history_csv(path, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss", "lr"])
        for row in history:
            w.writerow([row[0], repr(row[1]), repr(row[2])])


def train(data: SimulationSet, spec: NetworkSpec, cfg: TrainConfig, mode: str,
          norm: Normalizer, out_dir=None, dtype=np.float32) -> TrainResult:
    """Fit a surrogate to ``data``.

    Parameters
    ----------
    data : SimulationSet
        Training runs in physical units.
    spec : NetworkSpec
        Architecture; channel counts are set from ``mode``.
    norm : Normalizer
        Input and target scaling, stored with the checkpoint.
    out_dir : path, optional
        If given, a checkpoint is written here after every learning-rate drop
        (``drop_EEEE``) and at the end (``checkpoint``), together with
        ``loss_history.csv``.
    """
    ar = is_autoregressive(mode)
    w_c = cfg.w_c if mode == "ar-net-wl" else 0.0
    pairs: PairSet = (reorganize_autoregressive if ar else one_shot_pairs)(data, norm, dtype)
    net_spec = network_spec_for(spec, mode, data.n_t, data.n_release)
    H, W = pairs.x.shape[2:]
    if (net_spec.height, net_spec.width) != (H, W):
        net_spec = replace(net_spec, height=H, width=W)
    net = EncoderDecoder(net_spec, seed=cfg.seed, dtype=dtype)
    surrogate = Surrogate(net, norm, mode, data.n_t, data.n_release)
    surrogate.meta = {"train_config": cfg.to_dict(), "data_hash": data_hash(data)}

    params = net.parameters()
    opt = Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = PlateauScheduler(opt, cfg.factor, cfg.patience, cfg.threshold)
    rng = np.random.default_rng(cfg.seed)
    out_dir = None if out_dir is None else Path(out_dir)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    history = []
    for epoch in range(1, cfg.epochs + 1):
        total = 0.0
        for b, idx in enumerate(_batches(len(pairs), cfg.batch_size, rng)):
            x, y = pairs.x[idx], pairs.y[idx]
            mask = neighborhood_mask(y.shape, pairs.cells[idx], pairs.active[idx]) if w_c else None
            net.zero_grad()
            pred = net.forward(x, training=True)
            value, grad = data_loss(pred, y, mask, w_c)
            value += weight_penalty(params, cfg.weight_decay)
            if not np.isfinite(value):
                gmax = max((float(np.max(np.abs(g))) for g in net.gradients().values()), default=0.0)
                finite = np.isfinite(pred)
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch {b} (lr {opt.lr:g}, "
                    f"{int((~finite).sum())} non-finite outputs, "
                    f"max finite |pred| {float(np.max(np.abs(pred[finite]), initial=0.0)):.3e}, "
                    f"non-finite targets {int((~np.isfinite(y)).sum())}, max |grad| {gmax:.3e})"
                )
            net.backward(grad)
            opt.step(net.gradients())
            total += value * len(idx)
        loss = total / len(pairs)
        history.append((epoch, loss, opt.lr))
        logger.info("epoch %d loss %.6g lr %g", epoch, loss, opt.lr)
        if sched.step(loss) and out_dir is not None:
            surrogate.save(out_dir / f"drop_{epoch:04d}")
    if out_dir is not None:
        surrogate.save(out_dir / "checkpoint")
        write_history_csv(out_dir / "loss_history.csv", history)
    return TrainResult(surrogate, history)


def data_hash(data: SimulationSet) -> str:
    h = [sha256_hex(np.asarray(a, dtype=np.float64)) for a in (data.log_k, data.images, data.head, data.conc)]
    return sha256_hex("".join(h))


def predict_sequence(net: EncoderDecoder, norm: Normalizer, log_k, images, chunk: int = 64):
    """Autoregressive rollout ``c_j = net(K, S_j, c_{j-1})`` from ``c_0 = 0``.

    Parameters
    ----------
    log_k : (n, H, W)
    images : (n, n_t, H, W)
        Source images in physical units.

    Returns
    -------
    head : (n, H, W)
        Mean of the head outputs over all steps.
    conc : (n, n_t, H, W)
        Concentrations in physical units.
    """
    log_k = np.asarray(log_k)
    images = np.asarray(images)
    n, n_t, H, W = images.shape
    head = np.zeros((n, H, W))
    conc = np.zeros((n, n_t, H, W))
    for a in range(0, n, chunk):
        b = min(a + chunk, n)
        x = np.zeros((b - a, 3, H, W), dtype=net.dtype)
        x[:, 0] = norm.k(log_k[a:b])
        for j in range(n_t):
            x[:, 1] = norm.s(images[a:b, j])
            y = net.forward(x, training=False)
            head[a:b] += y[:, 0]
            conc[a:b, j] = y[:, 1] * norm.conc_scale
            x[:, 2] = y[:, 1]
    return head / n_t, conc


class Surrogate:
    """A trained network plus everything needed to run it on physical inputs."""

    def __init__(self, net: EncoderDecoder, norm: Normalizer, mode: str, n_t: int, n_release: int):
        is_autoregressive(mode)
        self.net, self.norm, self.mode = net, norm, mode
        self.n_t, self.n_release = n_t, n_release
        self.meta: dict = {}

    def predict(self, log_k, images, chunk: int = 64):
        """``(head (n, H, W), conc (n, n_t, H, W))`` for physical inputs."""
        if is_autoregressive(self.mode):
            return predict_sequence(self.net, self.norm, log_k, images, chunk)
        log_k = np.asarray(log_k)
        images = np.asarray(images)
        n, n_t, H, W = images.shape
        head = np.zeros((n, H, W))
        conc = np.zeros((n, n_t, H, W))
        for a in range(0, n, chunk):
            b = min(a + chunk, n)
            x = np.concatenate([self.norm.k(log_k[a:b])[:, None], self.norm.s(images[a:b, : self.n_release])], axis=1)
            y = self.net.forward(x.astype(self.net.dtype), training=False)
            head[a:b] = y[:, 0]
            conc[a:b] = y[:, 1:] * self.norm.conc_scale
        return head, conc

    def predict_set(self, data: SimulationSet):
        return self.predict(data.log_k, data.images)

    # checkpoints: a flat parameter tensor plus a JSON manifest

    def save(self, path) -> None:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        state = self.net.state()
        layout, offset = [], 0
        for name, arr in state.items():
            layout.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.size
        flat = np.concatenate([a.ravel() for a in state.values()]).astype(self.net.dtype)
        write_tensor(path / "params.aqtn", flat)
        write_json(path / "manifest.json", {
            "format": "aquinv-checkpoint",
            "mode": self.mode,
            "n_t": self.n_t,
            "n_release": self.n_release,
            "network": self.net.spec.to_dict(),
            "normalizer": self.norm.to_dict(),
            "dtype": np.dtype(self.net.dtype).name,
            "tensors": layout,
            "params_sha256": sha256_hex(flat),
            **self.meta,
        })

    @classmethod
    def load(cls, path) -> "Surrogate":
        path = Path(path)
        man = read_json(path / "manifest.json")
        flat = read_tensor(path / "params.aqtn")
        if sha256_hex(flat) != man["params_sha256"]:
            raise IOError("checkpoint parameters do not match their manifest")
        spec = NetworkSpec(**man["network"])
        net = EncoderDecoder(spec, dtype=np.dtype(man["dtype"]))
        state = {}
        for t in man["tensors"]:
            size = int(np.prod(t["shape"], dtype=np.int64))
            state[t["name"]] = flat[t["offset"] : t["offset"] + size].reshape(t["shape"])
        net.load_state(state)
        sur = cls(net, Normalizer.from_dict(man["normalizer"]), man["mode"], man["n_t"], man["n_release"])
        sur.meta = {k: man[k] for k in ("train_config", "data_hash") if k in man}
        return sur
