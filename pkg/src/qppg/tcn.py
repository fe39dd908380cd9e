"""Temporal convolutional network primitives in plain numpy.

Activations are batched ``(N, C, T)`` arrays with time on the last axis;
fully connected layers see ``(N, F)``. Every layer implements ``forward``
and ``backward`` by hand. Float32 is the training dtype; casting a network
with :meth:`Network.astype` to float64 gives the exact mode used by the
gradient and equivalence checks.
"""
from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .numerics import Rng64


class ShapeError(ValueError):
    pass


class StateError(RuntimeError):
    pass


# ---------------------------------------------------------------- convolution

def conv_out_len(t: int, s: int) -> int:
    return -(-t // s)


def _pad_left(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    out = np.zeros(x.shape[:-1] + (x.shape[-1] + pad,), dtype=x.dtype)
    out[..., pad:] = x
    return out


def _tap_columns(xp: np.ndarray, k: int, d: int, s: int, t_out: int) -> np.ndarray:
    """View ``cols[n, c, t, j] = xp[n, c, t*s + d*j]`` (j counts taps oldest first)."""
    n, c, _ = xp.shape
    sn, sc, st = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp, shape=(n, c, t_out, k), strides=(sn, sc, s * st, d * st), writeable=False
    )


def conv1d_forward(x: np.ndarray, w: np.ndarray, d: int = 1, s: int = 1) -> np.ndarray:
    """Causal dilated strided convolution.

    ``y[m, t] = sum_i sum_l x[l, t*s - d*i] * w[m, l, i]``, reading zeros for
    negative time indices. Accepts ``(C, T)`` or ``(N, C, T)`` input.
    """
    y, _ = _conv_fwd(x, w, d, s)
    return y


def _conv_fwd(x, w, d, s):
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    if x.ndim != 3 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv expects (N, {w.shape[1]}, T) input, got {x.shape}")
    c_out, c_in, k = w.shape
    n, _, t = x.shape
    t_out = conv_out_len(t, s)
    xp = _pad_left(x, (k - 1) * d)
    cols = _tap_columns(xp, k, d, s, t_out)
    # taps are stored oldest first in cols, while w[..., i] multiplies lag d*i
    wm = np.ascontiguousarray(w[:, :, ::-1]).reshape(c_out, c_in * k)
    a = cols.transpose(0, 2, 1, 3).reshape(n * t_out, c_in * k)
    y = (a @ wm.T).reshape(n, t_out, c_out).transpose(0, 2, 1)
    y = np.ascontiguousarray(y)
    if squeeze:
        y = y[0]
    return y, (a, xp.shape, t_out)


def _conv_bwd(dy, w, d, s, cache):
    a, xp_shape, t_out = cache
    c_out, c_in, k = w.shape
    n = dy.shape[0]
    g = dy.transpose(0, 2, 1).reshape(n * t_out, c_out)
    wm = np.ascontiguousarray(w[:, :, ::-1]).reshape(c_out, c_in * k)
    dw = (g.T @ a).reshape(c_out, c_in, k)[:, :, ::-1]
    da = (g @ wm).reshape(n, t_out, c_in, k)
    dxp = np.zeros(xp_shape, dtype=dy.dtype)
    for j in range(k):
        start = d * j
        dxp[:, :, start:start + s * (t_out - 1) + 1:s] += da[:, :, :, j].transpose(0, 2, 1)
    pad = (k - 1) * d
    return dxp[:, :, pad:], np.ascontiguousarray(dw)


# ---------------------------------------------------------------------- layers

class Layer:
    """Base class. Subclasses keep trainable arrays in ``params()``."""

    kind = "layer"
    passthrough = False      # shape-preserving wrappers (quantisers) after the output layer

    def __init__(self):
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def params(self) -> dict[str, np.ndarray]:
        return {}

    def set_param(self, name: str, value: np.ndarray) -> None:
        setattr(self, name, value)

    def hooks(self) -> list:
        return []

    def out_shape(self, in_shape: tuple) -> tuple:
        return in_shape

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def astype(self, dtype) -> None:
        for name, arr in self.params().items():
            self.set_param(name, arr.astype(dtype))
        for h in self.hooks():
            h.astype(dtype)

    def _need_cache(self):
        if self._cache is None:
            raise StateError(f"{self.kind}: backward called without a cached forward pass")
        return self._cache


class Conv1d(Layer):
    """Causal 1-D convolution; bias is optional (absent when BN follows).

    ``weight_hook`` lets masking and fake-quantisation wrappers rewrite the
    weights on the fly; it must expose ``forward(w)`` and ``backward(dw_eff)``.
    """

    kind = "conv"

    def __init__(self, c_in, c_out, k, d=1, s=1, weight=None, bias=None):
        super().__init__()
        if min(c_in, c_out, k, d, s) < 1:
            raise ValueError("conv dimensions must be positive")
        self.c_in, self.c_out, self.k, self.d, self.s = c_in, c_out, k, d, s
        self.weight = (np.zeros((c_out, c_in, k), np.float32) if weight is None
                       else np.asarray(weight))
        if self.weight.shape != (c_out, c_in, k):
            raise ShapeError(f"conv weight shape {self.weight.shape} != {(c_out, c_in, k)}")
        self.bias = None if bias is None else np.asarray(bias)
        self.weight_hook = None

    def params(self):
        p = {"weight": self.weight}
        if self.bias is not None:
            p["bias"] = self.bias
        return p

    def hooks(self):
        return [] if self.weight_hook is None else [self.weight_hook]

    def effective_weight(self) -> np.ndarray:
        if self.weight_hook is None:
            return self.weight
        return self.weight_hook.forward(self.weight)

    def out_shape(self, in_shape):
        if len(in_shape) != 2 or in_shape[0] != self.c_in:
            raise ShapeError(f"conv expects ({self.c_in}, T), got {in_shape}")
        return (self.c_out, conv_out_len(in_shape[1], self.s))

    def forward(self, x, train=False):
        w = self.effective_weight()
        y, cache = _conv_fwd(x, w, self.d, self.s)
        if self.bias is not None:
            y += self.bias[:, None]
        self._cache = (cache, w)
        return y

    def backward(self, dy):
        cache, w = self._need_cache()
        dx, dw = _conv_bwd(dy, w, self.d, self.s, cache)
        if self.weight_hook is not None:
            dw = self.weight_hook.backward(dw)
        self.grads = {"weight": dw}
        if self.bias is not None:
            self.grads["bias"] = dy.sum(axis=(0, 2))
        return dx

    def __repr__(self):
        return f"Conv1d({self.c_in}->{self.c_out}, k={self.k}, d={self.d}, s={self.s})"


class BatchNorm(Layer):
    """Per-channel batch normalisation over batch (and time) axes."""

    kind = "bn"

    def __init__(self, channels, gamma=None, beta=None, running_mean=None,
                 running_var=None, eps=1e-5, momentum=0.1, dtype=np.float32):
        super().__init__()
        self.channels = channels
        self.gamma = np.ones(channels, dtype) if gamma is None else np.asarray(gamma)
        self.beta = np.zeros(channels, dtype) if beta is None else np.asarray(beta)
        self.running_mean = (np.zeros(channels, dtype) if running_mean is None
                             else np.asarray(running_mean))
        self.running_var = (np.ones(channels, dtype) if running_var is None
                            else np.asarray(running_var))
        self.eps = eps
        self.momentum = momentum
        self.frozen = False

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def astype(self, dtype):
        super().astype(dtype)
        self.running_mean = self.running_mean.astype(dtype)
        self.running_var = self.running_var.astype(dtype)

    def out_shape(self, in_shape):
        if in_shape[0] != self.channels:
            raise ShapeError(f"bn expects {self.channels} channels, got {in_shape}")
        return in_shape

    def _bshape(self, x):
        return (1, -1, 1) if x.ndim == 3 else (1, -1)

    def scale_shift(self):
        """Eval-mode affine map ``y = a * x + b`` per channel."""
        inv = 1.0 / np.sqrt(self.running_var + self.eps)
        a = self.gamma * inv
        return a, self.beta - a * self.running_mean

    def forward(self, x, train=False):
        bs = self._bshape(x)
        if train and not self.frozen:
            axes = (0, 2) if x.ndim == 3 else (0,)
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = x.size // x.shape[1]
            inv = 1.0 / np.sqrt(var + self.eps)
            xhat = (x - mean.reshape(bs)) * inv.reshape(bs)
            mom = self.momentum
            unbiased = var * (m / max(m - 1, 1))
            self.running_mean = ((1 - mom) * self.running_mean + mom * mean).astype(x.dtype)
            self.running_var = ((1 - mom) * self.running_var + mom * unbiased).astype(x.dtype)
            self._cache = ("batch", xhat, inv, axes, m)
            return xhat * self.gamma.reshape(bs) + self.beta.reshape(bs)
        inv = 1.0 / np.sqrt(self.running_var + self.eps)
        xhat = (x - self.running_mean.reshape(bs)) * inv.reshape(bs)
        self._cache = ("stats", xhat, inv, (0, 2) if x.ndim == 3 else (0,), None)
        return xhat * self.gamma.reshape(bs) + self.beta.reshape(bs)

    def backward(self, dy):
        mode, xhat, inv, axes, m = self._need_cache()
        bs = self._bshape(dy)
        self.grads = {"gamma": (dy * xhat).sum(axis=axes), "beta": dy.sum(axis=axes)}
        if mode == "stats":
            return dy * (self.gamma * inv).reshape(bs)
        g = self.gamma.reshape(bs) * inv.reshape(bs)
        sum_dy = dy.sum(axis=axes).reshape(bs)
        sum_dyx = self.grads["gamma"].reshape(bs)
        return g * (dy - sum_dy / m - xhat * sum_dyx / m)


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=False):
        mask = x > 0
        self._cache = mask
        return x * mask

    def backward(self, dy):
        return dy * self._need_cache()


class AvgPool(Layer):
    kind = "pool"

    def __init__(self, k=2, s=2):
        super().__init__()
        self.k, self.s = k, s

    def out_shape(self, in_shape):
        c, t = in_shape
        if t < self.k:
            raise ShapeError(f"pool window {self.k} longer than input {t}")
        return (c, (t - self.k) // self.s + 1)

    def forward(self, x, train=False):
        n, c, t = x.shape
        t_out = (t - self.k) // self.s + 1
        sn, sc, st = x.strides
        win = np.lib.stride_tricks.as_strided(
            x, shape=(n, c, t_out, self.k), strides=(sn, sc, self.s * st, st), writeable=False)
        self._cache = x.shape
        return win.mean(axis=-1)

    def backward(self, dy):
        shape = self._need_cache()
        dx = np.zeros(shape, dtype=dy.dtype)
        t_out = dy.shape[-1]
        g = dy / self.k
        for j in range(self.k):
            dx[:, :, j:j + self.s * (t_out - 1) + 1:self.s] += g
        return dx


class Flatten(Layer):
    kind = "flatten"

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, train=False):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        return dy.reshape(self._need_cache())


class FullyConnected(Layer):
    kind = "fc"

    def __init__(self, n_in, n_out, weight=None, bias=None):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        self.weight = (np.zeros((n_out, n_in), np.float32) if weight is None
                       else np.asarray(weight))
        self.bias = np.zeros(n_out, self.weight.dtype) if bias is None else np.asarray(bias)
        self.weight_hook = None

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def hooks(self):
        return [] if self.weight_hook is None else [self.weight_hook]

    def effective_weight(self):
        if self.weight_hook is None:
            return self.weight
        return self.weight_hook.forward(self.weight)

    def out_shape(self, in_shape):
        if len(in_shape) != 1 or in_shape[0] != self.n_in:
            raise ShapeError(f"fc expects ({self.n_in},), got {in_shape}")
        return (self.n_out,)

    def forward(self, x, train=False):
        w = self.effective_weight()
        self._cache = (x, w)
        return x @ w.T + self.bias

    def backward(self, dy):
        x, w = self._need_cache()
        dw = dy.T @ x
        if self.weight_hook is not None:
            dw = self.weight_hook.backward(dw)
        self.grads = {"weight": dw, "bias": dy.sum(axis=0)}
        return dy @ w

    def __repr__(self):
        return f"FullyConnected({self.n_in}->{self.n_out})"


class ChannelScale(Layer):
    """Trainable per-channel multiplier; masks layers that have no BN after them."""

    kind = "scale"

    def __init__(self, channels, scale=None):
        super().__init__()
        self.channels = channels
        self.scale = np.ones(channels, np.float32) if scale is None else np.asarray(scale)

    def params(self):
        return {"scale": self.scale}

    def forward(self, x, train=False):
        bs = (1, -1, 1) if x.ndim == 3 else (1, -1)
        self._cache = (x, bs)
        return x * self.scale.reshape(bs)

    def backward(self, dy):
        x, bs = self._need_cache()
        axes = (0, 2) if x.ndim == 3 else (0,)
        self.grads = {"scale": (dy * x).sum(axis=axes)}
        return dy * self.scale.reshape(bs)


# --------------------------------------------------------------------- network

@dataclass
class Network:
    """Ordered layer list ending in a single-output FC layer.

    ``input_mean``/``input_std`` (per input channel) hold the z-score
    statistics of the training set; they are applied at the start of
    :meth:`forward` when present.
    """

    layers: list
    input_shape: tuple = (4, 256)
    input_mean: np.ndarray | None = None
    input_std: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self._forward_done = False

    def shapes(self) -> list[tuple]:
        """Per-layer output shapes; raises ShapeError naming the bad layer."""
        shape = tuple(self.input_shape)
        out = []
        for i, layer in enumerate(self.layers):
            try:
                shape = layer.out_shape(shape)
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({layer.kind}): {exc}") from None
            out.append(shape)
        return out

    def validate(self) -> None:
        shapes = self.shapes()
        core = [l for l in self.layers if not l.passthrough]
        if not core or not isinstance(core[-1], FullyConnected) \
                or core[-1].n_out != 1 or shapes[-1] != (1,):
            raise ShapeError("network must end in FullyConnected with one output")

    def normalize(self, x: np.ndarray) -> np.ndarray:
        if self.input_mean is None:
            return x
        dt = self.dtype
        return ((x - self.input_mean[:, None]) / self.input_std[:, None]).astype(dt, copy=False)

    @property
    def dtype(self):
        for layer in self.layers:
            for arr in layer.params().values():
                return arr.dtype
        return np.dtype(np.float32)

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        """Predictions of shape ``(N,)`` for input ``(N, C, T)`` or ``(C, T)``."""
        x = np.asarray(x)
        if x.ndim == 2:
            x = x[None]
        if tuple(x.shape[1:]) != tuple(self.input_shape):
            raise ShapeError(f"input shape {x.shape[1:]} != {tuple(self.input_shape)}")
        h = self.normalize(x).astype(self.dtype, copy=False)
        for i, layer in enumerate(self.layers):
            try:
                h = layer.forward(h, train)
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({layer.kind}): {exc}") from None
        self._forward_done = True
        return h.reshape(-1)

    def backward(self, upstream: np.ndarray) -> np.ndarray:
        """Back-propagate ``dLoss/dprediction``; fills every layer's ``grads``."""
        if not self._forward_done:
            raise StateError("backward called before forward")
        g = np.asarray(upstream, dtype=self.dtype).reshape(-1, 1)
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g

    def param_refs(self, include_hooks: bool = True) -> list[tuple[object, str]]:
        refs = []
        for layer in self.layers:
            refs.extend((layer, name) for name in layer.params())
            if include_hooks:
                for h in layer.hooks():
                    refs.extend((h, name) for name in h.params())
        return refs

    def parameters(self) -> Iterator[np.ndarray]:
        for owner, name in self.param_refs():
            yield owner.params()[name]

    def astype(self, dtype) -> "Network":
        for layer in self.layers:
            layer.astype(dtype)
        return self

    def copy(self) -> "Network":
        for layer in self.layers:
            layer._cache = None
        return copy.deepcopy(self)

    def state(self) -> list[np.ndarray]:
        """Snapshot of every trainable array plus BN running statistics."""
        out = [p.copy() for p in self.parameters()]
        for layer in self.layers:
            if isinstance(layer, BatchNorm):
                out += [layer.running_mean.copy(), layer.running_var.copy()]
        return out

    def load_state(self, state: list[np.ndarray]) -> None:
        it = iter(state)
        for owner, name in self.param_refs():
            owner.params()[name][...] = next(it)
        for layer in self.layers:
            if isinstance(layer, BatchNorm):
                layer.running_mean[...] = next(it)
                layer.running_var[...] = next(it)


# ------------------------------------------------------------------ seed + cost

@dataclass
class SeedConfig:
    block_channels: tuple = (32, 64, 128)
    layers_per_block: int = 3
    block_last_strides: tuple = (1, 2, 4)
    conv_k: int = 9
    pool: tuple = (2, 2)
    fc_sizes: tuple = (128, 64, 1)
    input: tuple = (4, 256)

    def __post_init__(self):
        h = math.log2(self.conv_k - 1) if self.conv_k > 1 else 0
        if self.conv_k < 3 or h != int(h):
            raise ValueError("conv_k must be 2**H + 1 with H >= 1")
        if len(self.block_channels) != len(self.block_last_strides):
            raise ValueError("one stride per block required")
        if self.fc_sizes[-1] != 1:
            raise ValueError("last FC layer must have one unit")


def he_normal(rng: Rng64, shape, fan_in: int) -> np.ndarray:
    return (rng.normal(shape) * math.sqrt(2.0 / fan_in)).astype(np.float32)


def build_seed(cfg: SeedConfig | None = None, seed: int = 0, output_bias: float = 0.0) -> Network:
    """Adapted TEMPONet: conv blocks with BN+ReLU, avg pooling, FC head."""
    cfg = cfg or SeedConfig()
    rng = Rng64(seed)
    c_in, t = cfg.input
    layers: list = []
    for ch, last_s in zip(cfg.block_channels, cfg.block_last_strides):
        for j in range(cfg.layers_per_block):
            s = last_s if j == cfg.layers_per_block - 1 else 1
            w = he_normal(rng, (ch, c_in, cfg.conv_k), c_in * cfg.conv_k)
            layers += [Conv1d(c_in, ch, cfg.conv_k, 1, s, weight=w), BatchNorm(ch), ReLU()]
            c_in = ch
            t = conv_out_len(t, s)
        layers.append(AvgPool(*cfg.pool))
        t = (t - cfg.pool[0]) // cfg.pool[1] + 1
    layers.append(Flatten())
    n_in = c_in * t
    for i, n_out in enumerate(cfg.fc_sizes):
        w = he_normal(rng, (n_out, n_in), n_in)
        last = i == len(cfg.fc_sizes) - 1
        b = np.full(n_out, output_bias if last else 0.0, np.float32)
        layers.append(FullyConnected(n_in, n_out, weight=w, bias=b))
        if not last:
            layers += [BatchNorm(n_out), ReLU()]
        n_in = n_out
    net = Network(layers, input_shape=tuple(cfg.input))
    net.validate()
    return net


def count_params(net: Network) -> int:
    total = 0
    for layer in net.layers:
        if isinstance(layer, Conv1d):
            total += layer.c_out * layer.c_in * layer.k
            if layer.bias is not None:
                total += layer.c_out
        elif isinstance(layer, FullyConnected):
            total += layer.n_in * layer.n_out + layer.n_out
        elif isinstance(layer, BatchNorm):
            total += 2 * layer.channels
        elif isinstance(layer, ChannelScale):
            total += layer.channels
    return total


def layer_macs(net: Network, input_t: int | None = None) -> list[int]:
    """MACs per layer (1 OP = 1 MAC); zero for BN, ReLU, pooling and reshapes."""
    shape = (net.input_shape[0], input_t if input_t is not None else net.input_shape[1])
    out = []
    for layer in net.layers:
        nxt = layer.out_shape(shape)
        if isinstance(layer, Conv1d):
            out.append(layer.c_out * nxt[1] * layer.k * layer.c_in)
        elif isinstance(layer, FullyConnected):
            out.append(layer.n_in * layer.n_out)
        else:
            out.append(0)
        shape = nxt
    return out


def count_macs(net: Network, input_t: int | None = None) -> int:
    return sum(layer_macs(net, input_t))


# --------------------------------------------------------------- persistence

def save_network(net: Network, path) -> None:
    """Store a hook-free network as ``.npz`` (arrays plus a JSON layer list)."""
    arrays = {}
    spec = []
    for i, layer in enumerate(net.layers):
        if layer.hooks():
            raise StateError(f"layer {i}: strip hooks before saving")
        d = {"kind": layer.kind}
        if isinstance(layer, Conv1d):
            d.update(c_in=layer.c_in, c_out=layer.c_out, k=layer.k, d=layer.d, s=layer.s)
        elif isinstance(layer, FullyConnected):
            d.update(n_in=layer.n_in, n_out=layer.n_out)
        elif isinstance(layer, BatchNorm):
            d.update(channels=layer.channels, eps=layer.eps, momentum=layer.momentum)
            arrays[f"{i}.running_mean"] = layer.running_mean
            arrays[f"{i}.running_var"] = layer.running_var
        elif isinstance(layer, ChannelScale):
            d.update(channels=layer.channels)
        elif isinstance(layer, AvgPool):
            d.update(k=layer.k, s=layer.s)
        for name, arr in layer.params().items():
            arrays[f"{i}.{name}"] = arr
        spec.append(d)
    if net.input_mean is not None:
        arrays["input_mean"] = np.asarray(net.input_mean)
        arrays["input_std"] = np.asarray(net.input_std)
    header = {"layers": spec, "input_shape": list(net.input_shape), "meta": net.meta}
    arrays["header"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_network(path) -> Network:
    with np.load(path) as z:
        header = json.loads(bytes(z["header"]).decode())
        arr = {k: z[k] for k in z.files if k != "header"}
    layers = []
    for i, d in enumerate(header["layers"]):
        g = lambda name: arr.get(f"{i}.{name}")
        kind = d["kind"]
        if kind == "conv":
            layers.append(Conv1d(d["c_in"], d["c_out"], d["k"], d["d"], d["s"],
                                 weight=g("weight"), bias=g("bias")))
        elif kind == "fc":
            layers.append(FullyConnected(d["n_in"], d["n_out"], weight=g("weight"), bias=g("bias")))
        elif kind == "bn":
            layers.append(BatchNorm(d["channels"], g("gamma"), g("beta"), g("running_mean"),
                                    g("running_var"), eps=d["eps"], momentum=d["momentum"]))
        elif kind == "scale":
            layers.append(ChannelScale(d["channels"], g("scale")))
        elif kind == "pool":
            layers.append(AvgPool(d["k"], d["s"]))
        elif kind == "relu":
            layers.append(ReLU())
        elif kind == "flatten":
            layers.append(Flatten())
        else:
            raise StateError(f"unknown layer kind {kind!r} in {path}")
    net = Network(layers, tuple(header["input_shape"]), arr.get("input_mean"), arr.get("input_std"),
                  header.get("meta", {}))
    net.validate()
    return net
