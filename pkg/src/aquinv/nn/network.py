"""
Dense convolutional encoder-decoder.

Layout: Conv(k7 s2 p3) -> dense block -> encoding layer -> dense block ->
decoding layer -> dense block -> decoding layer (output) -> output activation.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .layers import (
    Conv2d,
    DenseBlock,
    Module,
    OutputActivation,
    decoding_layer,
    encoding_layer,
)


@dataclass(frozen=True)
class NetworkSpec:
    in_channels: int = 3
    out_channels: int = 2
    init_features: int = 48
    blocks: tuple[int, int, int] = (5, 10, 5)
    growth: int = 40
    height: int = 41
    width: int = 81
    softplus_beta: float = 5.0
    n_sigmoid: int = 1

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(int(b) for b in self.blocks))
        if len(self.blocks) != 3:
            raise ValueError("the encoder-decoder has exactly three dense blocks")
        if min(self.in_channels, self.out_channels, self.init_features, self.growth) < 1:
            raise ValueError("channel counts must be positive")

    def with_channels(self, in_channels: int, out_channels: int) -> "NetworkSpec":
        return NetworkSpec(**{**asdict(self), "in_channels": in_channels, "out_channels": out_channels})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blocks"] = list(self.blocks)
        return d


FULL_SPEC = NetworkSpec()
DESK_SPEC = NetworkSpec(init_features=16, blocks=(3, 5, 3), growth=16, height=21, width=41)
PRESETS = {"full": FULL_SPEC, "desk": DESK_SPEC}


class EncoderDecoder(Module):
    """The surrogate network; input ``(N, in_channels, H, W)``, output ``(N, out_channels, H, W)``."""

    def __init__(self, spec: NetworkSpec, seed: int = 0, dtype=np.float32):
        super().__init__()
        self.spec = spec
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        L1, L2, L3 = spec.blocks
        R = spec.growth
        c = spec.init_features
        stages = [("conv", Conv2d(spec.in_channels, c, 7, 2, 3, rng, dtype))]
        stages.append(("dense1", DenseBlock(c, L1, R, rng, dtype)))
        c += L1 * R
        stages.append(("encode", encoding_layer(c, rng, dtype)))
        c //= 2
        stages.append(("dense2", DenseBlock(c, L2, R, rng, dtype)))
        c += L2 * R
        stages.append(("decode1", decoding_layer(c, rng, dtype=dtype)))
        c //= 2
        stages.append(("dense3", DenseBlock(c, L3, R, rng, dtype)))
        c += L3 * R
        stages.append(("decode2", decoding_layer(c, rng, k=5, p=2, c_out=spec.out_channels, dtype=dtype)))
        stages.append(("activation", OutputActivation(spec.n_sigmoid, spec.softplus_beta)))
        self.stages = stages
        for name, module in stages:
            self.children[name] = module
        self.zero_grad()

    def trace_shapes(self) -> list[tuple[str, tuple[int, int, int]]]:
        """Feature-map shape ``(channels, height, width)`` after each stage, starting with the input."""
        shape = (self.spec.in_channels, self.spec.height, self.spec.width)
        out = [("input", shape)]
        for name, module in self.stages:
            shape = module.out_shape(shape)
            out.append((name, shape))
        return out

    def forward(self, x, training=True):
        s = self.spec
        if x.ndim != 4 or x.shape[1] != s.in_channels:
            raise ValueError(f"expected input (N, {s.in_channels}, H, W), got {x.shape}")
        x = np.ascontiguousarray(x.transpose(1, 0, 2, 3), dtype=self.dtype)
        for _, module in self.stages:
            x = module.forward(x, training)
        return np.ascontiguousarray(x.transpose(1, 0, 2, 3))

    def backward(self, g):
        """Back-propagate ``dL/d output`` (N, C, H, W); returns ``dL/d input``."""
        g = np.ascontiguousarray(g.transpose(1, 0, 2, 3), dtype=self.dtype)
        for _, module in reversed(self.stages):
            g = module.backward(g)
        return np.ascontiguousarray(g.transpose(1, 0, 2, 3))

    def parameters(self) -> dict[str, np.ndarray]:
        return self.named("params")

    def gradients(self) -> dict[str, np.ndarray]:
        return self.named("grads")

    def state(self) -> dict[str, np.ndarray]:
        """Parameters and running statistics, in a stable order."""
        out = self.named("params")
        out.update({k: v for k, v in self.named("buffers").items()})
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        own = self.state()
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"state is missing {sorted(missing)[:3]}...")
        for name, arr in own.items():
            if arr.shape != state[name].shape:
                raise ValueError(f"shape mismatch for {name}")
            arr[...] = state[name]

    def n_parameters(self) -> int:
        return sum(a.size for a in self.parameters().values())


def layer_count(spec: NetworkSpec) -> int:
    """Convolutional layers: the first conv, every dense-block layer and two per transition."""
    return 1 + sum(spec.blocks) + 2 * 3
