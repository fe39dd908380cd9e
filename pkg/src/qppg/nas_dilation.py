"""Dilation search with binarised time-step gates that only realise regular dilations.

For a kernel of size ``K = 2**H + 1`` each conv owns ``H`` gate parameters
``theta``. Tap ``j`` (lag ``j`` at dilation 1) is kept with mask

    beta_j = prod_{h = l(j)+1 .. H} b_h,    b_h = [theta_h >= 0.5]

where ``l(j)`` is the exponent of the largest power of two dividing ``j``
(``l(0) = H``). Any bit pattern therefore keeps exactly the multiples of
``2**max{h : b_h = 0}``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tcn import Conv1d, Network, conv1d_forward


class GateConfigError(ValueError):
    pass


@dataclass
class PITConfig:
    lam: float = 1e-6
    binarize_threshold: float = 0.5
    cost_mode: str = "size"
    theta_lr_scale: float = 10.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")


def n_gates(k: int) -> int:
    h = math.log2(k - 1) if k > 1 else -1
    if k < 3 or h != int(h):
        raise GateConfigError(f"kernel size {k} is not 2**H + 1")
    return int(h)


def pow2_exponent(j: int, h: int) -> int:
    """Exponent of the largest power of two dividing ``j``; ``h`` for ``j == 0``."""
    if j == 0:
        return h
    return (j & -j).bit_length() - 1


def gate_table(k: int) -> np.ndarray:
    """``table[j, h-1] = 1`` when gate ``h`` enters the product for tap ``j``."""
    h = n_gates(k)
    t = np.zeros((k, h), dtype=bool)
    for j in range(k):
        for g in range(pow2_exponent(j, h) + 1, h + 1):
            t[j, g - 1] = True
    return t


def gate_binarize(theta, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(theta) >= threshold).astype(np.float64)


def ste_pass(theta, threshold: float = 0.5) -> np.ndarray:
    """Clipped straight-through window: gradient flows where |theta - 0.5| <= 0.5."""
    return (np.abs(np.asarray(theta) - threshold) <= 0.5).astype(np.float64)


def tap_mask(bits, k: int) -> np.ndarray:
    table = gate_table(k)
    bits = np.asarray(bits, dtype=np.float64)
    return np.array([np.prod(bits[table[j]]) for j in range(k)])


def dilation_of(bits) -> int:
    bits = np.asarray(bits)
    zeros = [h + 1 for h in range(len(bits)) if bits[h] == 0]
    return 2 ** max([0] + zeros)


class DilationGates:
    """Weight hook multiplying tap ``j`` of every filter by ``beta_j``."""

    def __init__(self, k: int, theta=None, threshold: float = 0.5, dtype=np.float32):
        self.k = k
        self.h = n_gates(k)
        self.table = gate_table(k)
        self.theta = np.ones(self.h, dtype) if theta is None else np.asarray(theta, dtype)
        self.threshold = threshold
        self.grads: dict[str, np.ndarray] = {}
        self._w = None

    def params(self):
        return {"theta": self.theta}

    def astype(self, dtype):
        self.theta = self.theta.astype(dtype)

    def bits(self) -> np.ndarray:
        return gate_binarize(self.theta, self.threshold)

    def beta(self) -> np.ndarray:
        return tap_mask(self.bits(), self.k)

    def dilation(self) -> int:
        return dilation_of(self.bits())

    def forward(self, w: np.ndarray) -> np.ndarray:
        self._w = w
        return w * self.beta().astype(w.dtype)[None, None, :]

    def backward(self, dw_eff: np.ndarray) -> np.ndarray:
        w = self._w
        beta = self.beta()
        dbeta = np.einsum("mlj,mlj->j", dw_eff.astype(np.float64), w.astype(np.float64))
        b = self.bits()
        db = np.zeros(self.h)
        for g in range(self.h):
            for j in range(self.k):
                if self.table[j, g]:
                    others = [x for x in range(self.h) if self.table[j, x] and x != g]
                    db[g] += dbeta[j] * np.prod(b[others])
        self.grads = {"theta": (db * ste_pass(self.theta, self.threshold)).astype(self.theta.dtype)}
        return dw_eff * beta.astype(dw_eff.dtype)[None, None, :]


def masked_conv_forward(x, conv: Conv1d, gates: DilationGates) -> np.ndarray:
    if conv.d != 1:
        raise GateConfigError("dilation gates need a conv with d = 1")
    if gates.k != conv.k:
        raise GateConfigError("gate kernel size does not match the conv")
    return conv1d_forward(x, conv.weight * gates.beta()[None, None, :], 1, conv.s)


@dataclass
class GatedLayer:
    index: int
    gates: DilationGates
    weight: float


def tap_cost_weight(net: Network, i: int, mode: str = "size") -> float:
    conv = net.layers[i]
    per_tap = conv.c_in * conv.c_out
    if mode == "size":
        return float(per_tap)
    return float(per_tap * net.shapes()[i][1])


def attach_gates(net: Network, cost_mode: str = "size", threshold: float = 0.5) -> list[GatedLayer]:
    """Gate every conv with ``d == 1`` and a ``2**H + 1`` kernel."""
    out = []
    for i, layer in enumerate(net.layers):
        if isinstance(layer, Conv1d) and layer.d == 1:
            try:
                n_gates(layer.k)
            except GateConfigError:
                continue
            g = DilationGates(layer.k, threshold=threshold, dtype=layer.weight.dtype)
            layer.weight_hook = g
            out.append(GatedLayer(i, g, tap_cost_weight(net, i, cost_mode)))
    return out


def surrogate_taps(theta, k: int) -> tuple[float, np.ndarray]:
    """Sum of continuous tap masks on clamped theta, and its gradient."""
    theta = np.asarray(theta, dtype=np.float64)
    table = gate_table(k)
    c = np.clip(theta, 0.0, 1.0)
    pass_ = ((theta >= 0.0) & (theta <= 1.0)).astype(np.float64)
    total = 0.0
    grad = np.zeros_like(theta)
    for j in range(k):
        idx = np.flatnonzero(table[j])
        total += float(np.prod(c[idx]))
        for g in idx:
            grad[g] += np.prod(c[[x for x in idx if x != g]])
    return total, grad * pass_


def pit_cost(gated: list[GatedLayer]) -> tuple[float, dict]:
    cost = 0.0
    grads = {}
    for gl in gated:
        s, g = surrogate_taps(gl.gates.theta, gl.gates.k)
        cost += gl.weight * s
        grads[(id(gl.gates), "theta")] = (gl.weight * g).astype(gl.gates.theta.dtype)
    return cost, grads


def extract_dilation(net: Network) -> Network:
    """Replace gated convs by explicit dilated convs keeping taps 0, d, ..., K-1."""
    out = net.copy()
    for layer in out.layers:
        if isinstance(layer, Conv1d) and isinstance(layer.weight_hook, DilationGates):
            d = layer.weight_hook.dilation()
            taps = np.arange(0, layer.k, d)
            layer.weight = np.ascontiguousarray(layer.weight[:, :, taps])
            layer.k = len(taps)
            layer.d = d
            layer.weight_hook = None
    out.validate()
    return out


def strip_gates(net: Network) -> None:
    for layer in net.layers:
        if isinstance(layer, Conv1d) and isinstance(layer.weight_hook, DilationGates):
            layer.weight_hook = None


def gate_refs(gated: list[GatedLayer]) -> set:
    return {(id(gl.gates), "theta") for gl in gated}


def pit_regularizer(gated: list[GatedLayer]):
    return lambda net: pit_cost(gated)


def dilations(net: Network) -> list[int]:
    return [l.d for l in net.layers if isinstance(l, Conv1d)]
