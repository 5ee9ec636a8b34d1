"""
Layers with hand-written backward passes, no bias terms.

Modules take and return ``(C, N, H, W)`` arrays (channels leading) so that
convolutions reduce to one matrix product each; the public ``conv2d`` style
functions accept the usual ``(N, C, H, W)`` layout. Every module caches what its backward pass needs during ``forward`` and
accumulates parameter gradients into ``self.grads`` during ``backward``.
Weights follow the usual conventions: ``(out, in, k, k)`` for convolution and
``(in, out, k, k)`` for transposed convolution.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    pass


def conv_output_size(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def conv_transpose_output_size(n: int, k: int, s: int, p: int) -> int:
    return s * (n - 1) + k - 2 * p


def _im2col(x, k, s, p, Ho, Wo):
    """Columns ``(C*k*k, N*Ho*Wo)`` of a ``(C, N, H, W)`` array."""
    C, N = x.shape[:2]
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = np.empty((C, k, k, N, Ho, Wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = x[:, :, i : i + s * Ho : s, j : j + s * Wo : s]
    return cols.reshape(C * k * k, N * Ho * Wo)


def _col2im(cols, C, N, H, W, k, s, p, Ho, Wo):
    cols = cols.reshape(C, k, k, N, Ho, Wo)
    out = np.zeros((C, N, H + 2 * p, W + 2 * p), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + s * Ho : s, j : j + s * Wo : s] += cols[:, i, j]
    return out[:, :, p : p + H, p : p + W] if p else out


# Internal kernels work on (C, N, H, W) arrays so that every convolution is a
# single matrix product and channel concatenation is a contiguous copy.

# im2col buffers up to this many bytes are kept from forward to backward
COLS_CACHE_BYTES = 1 << 28


def _conv(x, w, s, p, keep=None):
    C, N, H, W = x.shape
    O, Cw, k, k2 = w.shape
    if C != Cw or k != k2:
        raise ShapeError(f"input has {C} channels, kernel expects {Cw}")
    Ho, Wo = conv_output_size(H, k, s, p), conv_output_size(W, k, s, p)
    if Ho < 1 or Wo < 1:
        raise ShapeError("convolution output would be empty")
    if k == 1 and s == 1 and p == 0:
        return (w.reshape(O, C) @ x.reshape(C, -1)).reshape(O, N, H, W)
    cols = _im2col(x, k, s, p, Ho, Wo)
    if keep is not None and cols.nbytes <= COLS_CACHE_BYTES:
        keep.append(cols)
    return (w.reshape(O, -1) @ cols).reshape(O, N, Ho, Wo)


def _conv_grad_input(gy, w, in_hw, s, p):
    O, N, Ho, Wo = gy.shape
    _, C, k, _ = w.shape
    H, W = in_hw
    if k == 1 and s == 1 and p == 0:
        return (w.reshape(O, C).T @ gy.reshape(O, -1)).reshape(C, N, H, W)
    cols = w.reshape(O, -1).T @ gy.reshape(O, -1)
    return _col2im(cols, C, N, H, W, k, s, p, Ho, Wo)


def _conv_grad_weight(x, gy, k, s, p, cols=None):
    O, N, Ho, Wo = gy.shape
    C = x.shape[0]
    if k == 1 and s == 1 and p == 0:
        return (gy.reshape(O, -1) @ x.reshape(C, -1).T).reshape(O, C, 1, 1)
    if cols is None:
        cols = _im2col(x, k, s, p, Ho, Wo)
    return (gy.reshape(O, -1) @ cols.T).reshape(O, C, k, k)


def _conv_transpose(x, w, s, p):
    C, N, H, W = x.shape
    if C != w.shape[0]:
        raise ShapeError(f"input has {C} channels, kernel expects {w.shape[0]}")
    k = w.shape[2]
    Ho, Wo = conv_transpose_output_size(H, k, s, p), conv_transpose_output_size(W, k, s, p)
    if Ho < 1 or Wo < 1:
        raise ShapeError("transposed convolution output would be empty")
    return _conv_grad_input(x, w, (Ho, Wo), s, p)


def _cnhw(x):
    return np.ascontiguousarray(np.asarray(x).transpose(1, 0, 2, 3))


def conv2d(x, w, s=1, p=0):
    """Cross-correlation of ``x (N, C, H, W)`` with ``w (O, C, k, k)``, zero padding, no bias."""
    return _cnhw(_conv(_cnhw(x), w, s, p))


def conv2d_grad_input(gy, w, in_hw, s=1, p=0):
    """Adjoint of :func:`conv2d` with respect to its input."""
    return _cnhw(_conv_grad_input(_cnhw(gy), w, in_hw, s, p))


def conv2d_grad_weight(x, gy, k, s=1, p=0):
    """Gradient of :func:`conv2d` with respect to its kernel."""
    return _conv_grad_weight(_cnhw(x), _cnhw(gy), k, s, p)


def conv_transpose2d(x, w, s=1, p=0):
    """Transposed convolution of ``x (N, Cin, H, W)`` with ``w (Cin, Cout, k, k)``."""
    return _cnhw(_conv_transpose(_cnhw(x), w, s, p))


class Module:
    """Base class: ``params`` and ``grads`` are dicts of arrays, ``children`` nested modules."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.children: dict[str, Module] = {}

    def forward(self, x, training=True):
        raise NotImplementedError

    def backward(self, g):
        raise NotImplementedError

    def __call__(self, x, training=True):
        return self.forward(x, training)

    def named(self, kind="params", prefix=""):
        """Flattened ``name -> array`` mapping over this module and its children."""
        out = {prefix + n: a for n, a in getattr(self, kind).items()}
        for cname, child in self.children.items():
            out.update(child.named(kind, f"{prefix}{cname}."))
        return out

    def zero_grad(self):
        for n, a in self.params.items():
            self.grads[n] = np.zeros_like(a)
        for child in self.children.values():
            child.zero_grad()

    def astype(self, dtype):
        for d in (self.params, self.buffers):
            for n in d:
                d[n] = d[n].astype(dtype)
        for child in self.children.values():
            child.astype(dtype)
        self.zero_grad()
        return self

    def _accumulate(self, name, g):
        if name in self.grads:
            self.grads[name] += g
        else:
            self.grads[name] = g


def kaiming(rng, shape, fan_in, dtype=np.float32):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Conv2d(Module):
    def __init__(self, c_in, c_out, k, s=1, p=0, rng=None, dtype=np.float32):
        super().__init__()
        rng = np.random.default_rng(0) if rng is None else rng
        self.k, self.s, self.p = k, s, p
        self.params["weight"] = kaiming(rng, (c_out, c_in, k, k), c_in * k * k, dtype)

    def out_shape(self, shape):
        c, h, w = shape
        return (self.params["weight"].shape[0], conv_output_size(h, self.k, self.s, self.p),
                conv_output_size(w, self.k, self.s, self.p))

    def forward(self, x, training=True):
        self._x = x
        self._cols = [] if training else None
        return _conv(x, self.params["weight"], self.s, self.p, self._cols)

    def backward(self, g):
        w = self.params["weight"]
        cols = self._cols[0] if self._cols else None
        self._accumulate("weight", _conv_grad_weight(self._x, g, self.k, self.s, self.p, cols))
        gx = _conv_grad_input(g, w, self._x.shape[2:], self.s, self.p)
        self._x = self._cols = None
        return gx


class ConvTranspose2d(Module):
    def __init__(self, c_in, c_out, k, s=1, p=0, rng=None, dtype=np.float32):
        super().__init__()
        rng = np.random.default_rng(0) if rng is None else rng
        self.k, self.s, self.p = k, s, p
        # each output pixel sees about c_in * k^2 / s^2 inputs
        self.params["weight"] = kaiming(rng, (c_in, c_out, k, k), max(c_in * k * k // (s * s), 1), dtype)

    def out_shape(self, shape):
        c, h, w = shape
        return (self.params["weight"].shape[1], conv_transpose_output_size(h, self.k, self.s, self.p),
                conv_transpose_output_size(w, self.k, self.s, self.p))

    def forward(self, x, training=True):
        self._x = x
        return _conv_transpose(x, self.params["weight"], self.s, self.p)

    def backward(self, g):
        w = self.params["weight"]
        # as a function of w the output is the input-adjoint of a convolution applied
        # to x, so its weight gradient is the correlation of g with x
        self._accumulate("weight", _conv_grad_weight(g, self._x, self.k, self.s, self.p))
        gx = _conv(g, w, self.s, self.p)
        self._x = None
        return gx


class BatchNorm2d(Module):
    """Per-channel batch normalization with running statistics (momentum 0.1)."""

    def __init__(self, channels, eps=1e-5, momentum=0.1, dtype=np.float32):
        super().__init__()
        self.eps, self.momentum = eps, momentum
        self.params["gamma"] = np.ones(channels, dtype)
        self.params["beta"] = np.zeros(channels, dtype)
        self.buffers["running_mean"] = np.zeros(channels, dtype)
        self.buffers["running_var"] = np.ones(channels, dtype)

    def out_shape(self, shape):
        return shape

    def forward(self, x, training=True):
        gamma, beta = self.params["gamma"], self.params["beta"]
        C = x.shape[0]
        flat = x.reshape(C, -1)
        if training:
            if x.shape[1] < 2:
                raise ShapeError("batch normalization in training mode needs a batch of at least 2")
            n = flat.shape[1]
            mean = flat.mean(axis=1)
            var = flat.var(axis=1)
            m = self.momentum
            rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
            rm *= 1 - m
            rm += m * mean.astype(rm.dtype)
            rv *= 1 - m
            rv += m * (var * n / max(n - 1, 1)).astype(rv.dtype)
        else:
            mean, var = self.buffers["running_mean"], self.buffers["running_var"]
        inv_std = (1.0 / np.sqrt(var + self.eps)).astype(x.dtype)
        xhat = (flat - mean.astype(x.dtype)[:, None]) * inv_std[:, None]
        self._cache = (xhat, inv_std, training)
        return (xhat * gamma[:, None] + beta[:, None]).reshape(x.shape)

    def backward(self, g):
        xhat, inv_std, training = self._cache
        self._cache = None
        shape = g.shape
        g = g.reshape(shape[0], -1)
        gamma = self.params["gamma"]
        self._accumulate("gamma", (g * xhat).sum(axis=1))
        self._accumulate("beta", g.sum(axis=1))
        gxhat = g * gamma[:, None]
        if not training:
            return (gxhat * inv_std[:, None]).reshape(shape)
        mean_g = gxhat.mean(axis=1, keepdims=True)
        mean_gx = (gxhat * xhat).mean(axis=1, keepdims=True)
        return ((gxhat - mean_g - xhat * mean_gx) * inv_std[:, None]).reshape(shape)


class ReLU(Module):
    def out_shape(self, shape):
        return shape

    def forward(self, x, training=True):
        self._mask = x > 0
        return x * self._mask

    def backward(self, g):
        out = g * self._mask
        self._mask = None
        return out


def softplus(x, beta=5.0):
    return np.logaddexp(0.0, beta * x) / beta


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class OutputActivation(Module):
    """Sigmoid on the leading ``n_sigmoid`` channels, softplus(beta) on the rest."""

    def __init__(self, n_sigmoid=1, beta=5.0):
        super().__init__()
        self.n_sigmoid, self.beta = n_sigmoid, beta

    def out_shape(self, shape):
        return shape

    def forward(self, x, training=True):
        k = self.n_sigmoid
        y = np.empty_like(x)
        y[:k] = sigmoid(x[:k])
        y[k:] = softplus(x[k:], self.beta)
        self._x = x
        self._y = y
        return y

    def backward(self, g):
        k = self.n_sigmoid
        x, y = self._x, self._y
        gx = np.empty_like(g)
        gx[:k] = g[:k] * y[:k] * (1.0 - y[:k])
        # d softplus / dx = sigmoid(beta x)
        gx[k:] = g[k:] * sigmoid(self.beta * x[k:])
        self._x = self._y = None
        return gx


class Sequential(Module):
    def __init__(self, *layers):
        super().__init__()
        self.layers = list(layers)
        for i, layer in enumerate(self.layers):
            self.children[str(i)] = layer

    def out_shape(self, shape):
        for layer in self.layers:
            shape = layer.out_shape(shape)
        return shape

    def forward(self, x, training=True):
        for layer in self.layers:
            x = layer.forward(x, training)
        return x

    def backward(self, g):
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g


def bn_relu_conv(c_in, c_out, k, s, p, rng, dtype, transpose=False):
    conv = (ConvTranspose2d if transpose else Conv2d)(c_in, c_out, k, s, p, rng, dtype)
    return Sequential(BatchNorm2d(c_in, dtype=dtype), ReLU(), conv)


class DenseBlock(Module):
    """``n_layers`` of BN-ReLU-Conv(3x3), each seeing all earlier feature maps."""

    def __init__(self, c_in, n_layers, growth, rng=None, dtype=np.float32):
        super().__init__()
        rng = np.random.default_rng(0) if rng is None else rng
        self.c_in, self.growth = c_in, growth
        self.layers = []
        for i in range(n_layers):
            layer = bn_relu_conv(c_in + i * growth, growth, 3, 1, 1, rng, dtype)
            self.layers.append(layer)
            self.children[str(i)] = layer

    def out_shape(self, shape):
        c, h, w = shape
        return (c + len(self.layers) * self.growth, h, w)

    def forward(self, x, training=True):
        C, N, H, W = x.shape
        R = self.growth
        out = np.empty((C + len(self.layers) * R, N, H, W), dtype=x.dtype)
        out[:C] = x
        for i, layer in enumerate(self.layers):
            c = C + i * R
            out[c : c + R] = layer.forward(out[:c], training)
        return out

    def backward(self, g):
        g = g.copy()
        R = self.growth
        for i in reversed(range(len(self.layers))):
            c = self.c_in + i * R
            g[:c] += self.layers[i].backward(g[c : c + R])
        return g[: self.c_in]


def encoding_layer(c_in, rng, dtype=np.float32):
    """Halve channels (1x1 conv), then halve the feature size (3x3 conv, stride 2)."""
    half = c_in // 2
    return Sequential(bn_relu_conv(c_in, half, 1, 1, 0, rng, dtype),
                      bn_relu_conv(half, half, 3, 2, 1, rng, dtype))


def decoding_layer(c_in, rng, k=3, p=1, c_out=None, dtype=np.float32):
    """Halve channels (1x1 conv), then double the feature size (transposed conv, stride 2)."""
    half = c_in // 2
    c_out = half if c_out is None else c_out
    return Sequential(bn_relu_conv(c_in, half, 1, 1, 0, rng, dtype),
                      bn_relu_conv(half, c_out, k, 2, p, rng, dtype, transpose=True))
