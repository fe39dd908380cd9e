"""Channel-count search: L1-regularised BN scales as per-channel masks (MorphNet style)."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import Rng64
from .tcn import (AvgPool, BatchNorm, ChannelScale, Conv1d, Flatten, FullyConnected,
                  Network, ReLU, he_normal)
from .training import GroupedOptimizer, logcosh_loss


@dataclass
class MNConfig:
    lam: float = 1e-5
    tau: float = 1e-2
    omega: float = 1.0
    cost_mode: str = "size"      # size | ops
    mask_lr_scale: float = 10.0

    def __post_init__(self):
        if self.lam < 0 or self.tau <= 0 or self.omega < 1:
            raise ValueError("need lam >= 0, tau > 0, omega >= 1")
        if self.cost_mode not in ("size", "ops"):
            raise ValueError(f"unknown cost mode {self.cost_mode!r}")


@dataclass
class MaskedLayer:
    producer: int        # index of the conv/FC whose output channels are masked
    mask_layer: int      # index of the BN (or ChannelScale) holding the mask
    param: str           # "gamma" or "scale"
    weight: float        # cost per unit of |mask|

    def owner(self, net: Network):
        return net.layers[self.mask_layer]

    def values(self, net: Network) -> np.ndarray:
        return self.owner(net).params()[self.param]


@dataclass
class ChannelMasks:
    net: Network
    layers: list

    def values(self) -> list[np.ndarray]:
        return [m.values(self.net) for m in self.layers]

    def mean_abs(self) -> float:
        v = np.concatenate([np.abs(x).astype(np.float64) for x in self.values()])
        return float(v.mean())


def _producers(net: Network) -> list[int]:
    idx = [i for i, l in enumerate(net.layers) if isinstance(l, (Conv1d, FullyConnected))]
    return idx[:-1]  # the output layer is never masked


def _consumer(net: Network, i: int):
    """Next conv/FC after layer ``i`` and the time length it sees per input channel."""
    shapes = net.shapes()
    t_seen = 1
    for j in range(i + 1, len(net.layers)):
        layer = net.layers[j]
        if isinstance(layer, Flatten):
            t_seen = shapes[j - 1][1]
        if isinstance(layer, (Conv1d, FullyConnected)):
            return j, t_seen, shapes
    return None, 1, shapes


def channel_cost_weight(net: Network, i: int, mode: str = "size") -> float:
    """Parameters (or MACs) removed per output channel pruned at layer ``i``.

    Counts the channel's own filter plus the weights that consume it downstream.
    """
    layer = net.layers[i]
    shapes = net.shapes()
    j, t_seen, _ = _consumer(net, i)
    if isinstance(layer, Conv1d):
        own = layer.c_in * layer.k
        own_t = shapes[i][1]
    else:
        own, own_t = layer.n_in, 1
    nxt = net.layers[j]
    if isinstance(nxt, Conv1d):
        down, down_t = nxt.c_out * nxt.k, shapes[j][1]
    else:
        down, down_t = nxt.n_out * t_seen, 1
    if mode == "size":
        return float(own + down)
    return float(own * own_t + down * down_t)


def attach_masks(net: Network, cost_mode: str = "size") -> ChannelMasks:
    """Use each producer's following BN gamma as its channel mask.

    A producer without a BN right after it gets a ChannelScale inserted.
    """
    i = 0
    while i < len(net.layers):
        layer = net.layers[i]
        if i in _producers(net) and not (i + 1 < len(net.layers)
                                         and isinstance(net.layers[i + 1], (BatchNorm, ChannelScale))):
            ch = layer.c_out if isinstance(layer, Conv1d) else layer.n_out
            net.layers.insert(i + 1, ChannelScale(ch, np.ones(ch, net.dtype)))
        i += 1
    out = []
    for p in _producers(net):
        m = net.layers[p + 1]
        out.append(MaskedLayer(p, p + 1, "gamma" if isinstance(m, BatchNorm) else "scale",
                               channel_cost_weight(net, p, cost_mode)))
    return ChannelMasks(net, out)


def mn_cost(masks: ChannelMasks) -> tuple[float, dict]:
    """Weighted group-L1 of the mask vectors; subgradient 0 at exactly 0."""
    cost = 0.0
    grads = {}
    for m in masks.layers:
        g = m.values(masks.net)
        cost += m.weight * float(np.abs(g).sum(dtype=np.float64))
        grads[(id(m.owner(masks.net)), m.param)] = (m.weight * np.sign(g)).astype(g.dtype)
    return cost, grads


def mn_regularizer(masks: ChannelMasks):
    return lambda net: mn_cost(masks)


def mask_refs(masks: ChannelMasks) -> set:
    return {(id(m.owner(masks.net)), m.param) for m in masks.layers}


class MaskedOptimizer(GroupedOptimizer):
    """Network weights at ``lr``; masks at ``lr * mask_lr_scale``."""

    def __init__(self, net: Network, masks: ChannelMasks, train_cfg, cfg: MNConfig):
        super().__init__(net.param_refs(), mask_refs(masks), train_cfg, cfg.mask_lr_scale)


def mn_train_step(net: Network, masks: ChannelMasks, x, y, cfg: MNConfig, opt) -> float:
    """One step on LogCosh + lam * mn_cost; only the masks see the regulariser."""
    pred = net.forward(x, train=True)
    loss, grad = logcosh_loss(pred, y)
    net.backward(grad)
    extra = None
    if cfg.lam != 0.0:
        cost, grads = mn_cost(masks)
        loss += cfg.lam * cost
        extra = {k: cfg.lam * g for k, g in grads.items()}
    opt.step(extra)
    return loss


# ------------------------------------------------------------------ extraction

def _dead_value(net: Network, mask_idx: int) -> np.ndarray:
    """Constant each channel emits when its mask is zero (before the consumer)."""
    m = net.layers[mask_idx]
    v = m.beta.astype(np.float64) if isinstance(m, BatchNorm) else np.zeros(m.channels)
    if mask_idx + 1 < len(net.layers) and isinstance(net.layers[mask_idx + 1], ReLU):
        v = np.maximum(v, 0.0)
    return v


def extract_arch(net: Network, masks: ChannelMasks | None = None, tau: float = 1e-2) -> Network:
    """Drop channels whose |mask| <= tau and shrink every consumer to match.

    At least the largest-|mask| channel survives per layer. A dropped channel
    still emits a constant (its BN shift after ReLU); that constant is folded
    into the consumer exactly for FC layers and in steady state for convs.
    """
    if masks is None:
        masks = attach_masks(net.copy())
    keep_of: dict[int, np.ndarray] = {}
    for m in masks.layers:
        g = np.abs(m.values(masks.net))
        keep = np.flatnonzero(g > tau)
        if keep.size == 0:
            keep = np.array([int(np.argmax(g))])
        keep_of[m.producer] = keep
    mask_idx = {m.producer: m.mask_layer for m in masks.layers}
    src = masks.net.copy()

    new_layers = []
    cur_keep = None          # surviving channel ids of the current activation
    cur_dead = None          # constant emitted by dropped channels (full length)
    t_last = None
    shapes = src.shapes()
    for i, layer in enumerate(src.layers):
        if isinstance(layer, Conv1d):
            w = layer.weight
            bias = None if layer.bias is None else layer.bias.astype(np.float64).copy()
            shift = None
            if cur_keep is not None:
                dead = np.setdiff1d(np.arange(layer.c_in), cur_keep)
                if dead.size and np.any(cur_dead[dead] != 0):
                    shift = np.einsum("mck,c->m", w[:, dead, :].astype(np.float64), cur_dead[dead])
                w = w[:, cur_keep, :]
            out_keep = keep_of.get(i)
            if out_keep is not None:
                w = w[out_keep]
                if bias is not None:
                    bias = bias[out_keep]
                if shift is not None:
                    shift = shift[out_keep]
            new = Conv1d(w.shape[1], w.shape[0], layer.k, layer.d, layer.s,
                         weight=np.ascontiguousarray(w).copy())
            if shift is not None:
                _absorb_shift(new, bias, shift, src.layers, i, out_keep, new_layers)
            elif bias is not None:
                new.bias = bias.astype(layer.weight.dtype)
            new_layers.append(new)
            cur_keep = out_keep
            cur_dead = _dead_value(src, mask_idx[i]) if out_keep is not None else None
        elif isinstance(layer, FullyConnected):
            w = layer.weight
            b = layer.bias.astype(np.float64).copy()
            if cur_keep is not None:
                t = t_last if t_last is not None else 1
                cols = (cur_keep[:, None] * t + np.arange(t)[None]).reshape(-1)
                n_ch = layer.n_in // t
                dead = np.setdiff1d(np.arange(n_ch), cur_keep)
                if dead.size:
                    dcols = (dead[:, None] * t + np.arange(t)[None]).reshape(-1)
                    b += w[:, dcols].astype(np.float64) @ np.repeat(cur_dead[dead], t)
                w = w[:, cols]
            out_keep = keep_of.get(i)
            if out_keep is not None:
                w, b = w[out_keep], b[out_keep]
            new_layers.append(FullyConnected(w.shape[1], w.shape[0],
                                             weight=np.ascontiguousarray(w).copy(),
                                             bias=b.astype(layer.weight.dtype)))
            cur_keep = out_keep
            cur_dead = _dead_value(src, mask_idx[i]) if out_keep is not None else None
            t_last = None
        elif isinstance(layer, BatchNorm):
            sel = slice(None) if cur_keep is None else cur_keep
            bn = BatchNorm(len(layer.gamma[sel]), layer.gamma[sel].copy(), layer.beta[sel].copy(),
                           layer.running_mean[sel].copy(), layer.running_var[sel].copy(),
                           eps=layer.eps, momentum=layer.momentum)
            new_layers.append(bn)
        elif isinstance(layer, ChannelScale):
            sel = slice(None) if cur_keep is None else cur_keep
            new_layers.append(ChannelScale(len(layer.scale[sel]), layer.scale[sel].copy()))
        elif isinstance(layer, Flatten):
            t_last = shapes[i - 1][1]
            new_layers.append(Flatten())
        elif isinstance(layer, AvgPool):
            new_layers.append(AvgPool(layer.k, layer.s))
        elif isinstance(layer, ReLU):
            new_layers.append(ReLU())
        else:
            raise TypeError(f"cannot extract through layer {layer.kind}")
    out = Network(new_layers, tuple(src.input_shape), src.input_mean, src.input_std, dict(src.meta))
    out.validate()
    return out


def _absorb_shift(new_conv, bias, shift, src_layers, i, out_keep, new_layers):
    """Fold a steady-state constant input contribution into the conv's successor.

    With a BN right after the conv the running mean moves by ``-shift``;
    otherwise the conv gets (or updates) a bias.
    """
    nxt = src_layers[i + 1] if i + 1 < len(src_layers) else None
    if isinstance(nxt, BatchNorm):
        # the BN is copied right after this conv; patch its source stats in a copy
        sel = slice(None) if out_keep is None else out_keep
        rm = nxt.running_mean.astype(np.float64).copy()
        rm[sel] = rm[sel] - shift
        nxt_copy = BatchNorm(nxt.channels, nxt.gamma, nxt.beta, rm.astype(nxt.running_mean.dtype),
                             nxt.running_var, eps=nxt.eps, momentum=nxt.momentum)
        src_layers[i + 1] = nxt_copy
        if bias is not None:
            new_conv.bias = bias.astype(new_conv.weight.dtype)
    else:
        b = shift if bias is None else bias + shift
        new_conv.bias = b.astype(new_conv.weight.dtype)


# ------------------------------------------------------------------- expansion

def expand_uniform(net: Network, omega: float, seed: int = 0,
                   zero_outgoing: bool = False) -> Network:
    """Widen every masked producer by ``ceil(c * omega)`` channels.

    Existing weights occupy the leading slice; new filters are He-normal.
    New channels' outgoing weights are He-normal too unless ``zero_outgoing``.
    """
    if omega < 1:
        raise ValueError("omega must be >= 1")
    if omega == 1:
        return net.copy()
    rng = Rng64(seed)
    src = net.copy()
    prods = set(_producers(src))
    layers = src.layers
    shapes = src.shapes()
    dt = src.dtype
    old_c = new_c = None
    t_last = None
    for i, layer in enumerate(layers):
        if isinstance(layer, Conv1d):
            w = layer.weight
            if old_c is not None and new_c > old_c:
                extra = (np.zeros((w.shape[0], new_c - old_c, layer.k), dt) if zero_outgoing else
                         he_normal(rng, (w.shape[0], new_c - old_c, layer.k), new_c * layer.k).astype(dt))
                w = np.concatenate([w, extra], axis=1)
                layer.c_in = new_c
            if i in prods:
                c = layer.c_out
                c2 = int(math.ceil(c * omega))
                add = he_normal(rng, (c2 - c, w.shape[1], layer.k), w.shape[1] * layer.k).astype(dt)
                w = np.concatenate([w, add], axis=0)
                if layer.bias is not None:
                    layer.bias = np.concatenate([layer.bias, np.zeros(c2 - c, dt)])
                layer.c_out = c2
                old_c, new_c = c, c2
            else:
                old_c = new_c = None
            layer.weight = np.ascontiguousarray(w)
        elif isinstance(layer, FullyConnected):
            w = layer.weight
            if old_c is not None and new_c > old_c:
                t = t_last or 1
                rows = w.shape[0]
                w3 = w.reshape(rows, old_c, t)
                extra = (np.zeros((rows, new_c - old_c, t), dt) if zero_outgoing else
                         he_normal(rng, (rows, new_c - old_c, t), new_c * t).astype(dt))
                w = np.concatenate([w3, extra], axis=1).reshape(rows, new_c * t)
                layer.n_in = new_c * t
            if i in prods:
                c = layer.n_out
                c2 = int(math.ceil(c * omega))
                add = he_normal(rng, (c2 - c, w.shape[1]), w.shape[1]).astype(dt)
                w = np.concatenate([w, add], axis=0)
                layer.bias = np.concatenate([layer.bias, np.zeros(c2 - c, dt)])
                layer.n_out = c2
                old_c, new_c = c, c2
            else:
                old_c = new_c = None
            layer.weight = np.ascontiguousarray(w)
            t_last = None
        elif isinstance(layer, BatchNorm) and old_c is not None and new_c > layer.channels:
            add = new_c - layer.channels
            layer.gamma = np.concatenate([layer.gamma, np.ones(add, dt)])
            layer.beta = np.concatenate([layer.beta, np.zeros(add, dt)])
            layer.running_mean = np.concatenate([layer.running_mean, np.zeros(add, dt)])
            layer.running_var = np.concatenate([layer.running_var, np.ones(add, dt)])
            layer.channels = new_c
        elif isinstance(layer, ChannelScale) and old_c is not None and new_c > layer.channels:
            layer.scale = np.concatenate([layer.scale, np.ones(new_c - layer.channels, dt)])
            layer.channels = new_c
        elif isinstance(layer, Flatten):
            t_last = shapes[i - 1][1]
    src.validate()
    return src
