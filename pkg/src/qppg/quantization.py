"""Affine linear quantisation, fake-quant training and mixed-precision search.

Codes follow ``code = round((t - alpha) / eps)`` with
``eps = (beta - alpha) / (2**N - 1)`` and round-half-away-from-zero,
clamped to ``[0, 2**N - 1]``. Ranges built by :meth:`QuantParams.from_range`
are nudged so that real zero falls exactly on a code, which is what lets
the integer runtime pad with the zero point.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tcn import (AvgPool, BatchNorm, ChannelScale, Conv1d, Flatten, FullyConnected, Layer,
                  Network, ReLU)
from .training import TrainConfig, train

FORMATS = (2, 4, 8)


class QuantStateError(RuntimeError):
    pass


def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass(frozen=True)
class QuantParams:
    alpha: float
    beta: float
    n_bits: int

    def __post_init__(self):
        if self.n_bits not in FORMATS:
            raise ValueError(f"unsupported bit width {self.n_bits}")
        if not self.beta > self.alpha:
            raise ValueError("quant range needs beta > alpha")

    @property
    def levels(self) -> int:
        return (1 << self.n_bits) - 1

    @property
    def eps(self) -> float:
        return (self.beta - self.alpha) / self.levels

    @property
    def zero_point(self) -> int:
        return int(round_half_away(-self.alpha / self.eps))

    @classmethod
    def from_range(cls, lo: float, hi: float, n_bits: int, include_zero: bool = True,
                   min_span: float = 1e-8) -> "QuantParams":
        """Smallest grid with an integer zero point that covers ``[lo, hi]``."""
        lo, hi = float(lo), float(hi)
        if include_zero:
            lo, hi = min(lo, 0.0), max(hi, 0.0)
        if hi - lo < min_span:
            hi = lo + min_span
        levels = (1 << n_bits) - 1
        eps = (hi - lo) / levels
        if include_zero:
            # zero sits exactly on code z; widen eps until both ends fit
            def need(z):
                if (z == 0 and lo < 0) or (z == levels and hi > 0):
                    return math.inf
                return max(eps, -lo / z if z > 0 else 0.0, hi / (levels - z) if z < levels else 0.0)
            base = -lo / eps
            z_lo, z_hi = (1 if lo < 0 else 0), (levels - 1 if hi > 0 else levels)
            z = min({min(max(c, z_lo), z_hi) for c in (math.floor(base), math.ceil(base))}, key=need)
            eps = need(z)
        else:
            # the grid may miss zero; one spare level absorbs the alignment
            eps = (hi - lo) / (levels - 1)
            z = int(math.ceil(-lo / eps))
        for _ in range(64):
            alpha = -z * eps
            beta = alpha + levels * eps
            if alpha <= lo and beta >= hi:
                break
            eps = float(np.nextafter(eps, np.inf))
        return cls(alpha, beta, n_bits)

    def as_float32(self) -> "QuantParams":
        """Same params rounded through float32 (what the model file stores)."""
        a, b = float(np.float32(self.alpha)), float(np.float32(self.beta))
        if not b > a:
            b = float(np.nextafter(np.float32(a), np.float32(np.inf)))
        return QuantParams(a, b, self.n_bits)


def quantize(t, q: QuantParams) -> np.ndarray:
    codes = round_half_away((np.asarray(t, dtype=np.float64) - q.alpha) / q.eps)
    return np.clip(codes, 0, q.levels).astype(np.int64)


def dequantize(codes, q: QuantParams) -> np.ndarray:
    return q.alpha + np.asarray(codes, dtype=np.float64) * q.eps


def fake_quant(t, q: QuantParams) -> tuple[np.ndarray, np.ndarray]:
    """Quantise-dequantise; also returns the straight-through pass mask."""
    t = np.asarray(t)
    out = dequantize(quantize(t, q), q).astype(t.dtype if t.dtype.kind == "f" else np.float64)
    mask = (t >= q.alpha) & (t <= q.beta)
    return out, mask


def softmax(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    e = np.exp(v - v.max())
    return e / e.sum()


def softmax_backward(sm: np.ndarray, dsm: np.ndarray) -> np.ndarray:
    return sm * (dsm - float(np.dot(sm, dsm)))


# ---------------------------------------------------------------- observers

@dataclass
class RangeObserver:
    momentum: float | None = 0.99     # None keeps the plain running min/max
    lo: float | None = None
    hi: float | None = None
    frozen: bool = False

    def observe(self, t) -> "RangeObserver":
        if self.frozen:
            raise QuantStateError("observer is frozen")
        t = np.asarray(t)
        bmin, bmax = float(t.min()), float(t.max())
        if self.lo is None:
            self.lo, self.hi = bmin, bmax
        elif self.momentum is None:
            self.lo, self.hi = min(self.lo, bmin), max(self.hi, bmax)
        else:
            m = self.momentum
            self.lo = m * self.lo + (1 - m) * bmin
            self.hi = m * self.hi + (1 - m) * bmax
        return self

    def freeze(self) -> None:
        self.frozen = True

    @property
    def ready(self) -> bool:
        return self.lo is not None

    def qparams(self, n_bits: int, include_zero: bool = True) -> QuantParams:
        if self.lo is None:
            raise QuantStateError("observer has not seen any data")
        return QuantParams.from_range(self.lo, self.hi, n_bits, include_zero)


def observe(obs: RangeObserver, t) -> RangeObserver:
    return obs.observe(t)


# ------------------------------------------------------- fake-quant layers

class ActQuant(Layer):
    """Fake-quantises activations with an observed range.

    ``tied_to`` reuses another quantiser's observer and bit width (used after
    average pooling, which stays on its input's grid).
    """

    kind = "actq"
    passthrough = True

    def __init__(self, n_bits: int = 8, include_zero: bool = True, tied_to: "ActQuant | None" = None):
        super().__init__()
        self.n_bits = n_bits
        self.include_zero = include_zero
        self.tied_to = tied_to
        self.observer = RangeObserver() if tied_to is None else None
        self.observing = True

    def source(self) -> "ActQuant":
        return self.tied_to.source() if self.tied_to is not None else self

    def qparams(self) -> QuantParams:
        src = self.source()
        return src.observer.qparams(src.n_bits, src.include_zero)

    def forward(self, x, train=False):
        if self.tied_to is None and self.observing and not self.observer.frozen:
            self.observer.observe(x)
        y, mask = fake_quant(x, self.qparams())
        self._cache = mask
        return y

    def backward(self, dy):
        return dy * self._need_cache()


class WeightQuant:
    """Weight hook: per-tensor fake quantisation with the range recomputed each call."""

    def __init__(self, n_bits: int):
        self.n_bits = n_bits
        self.grads: dict = {}
        self._mask = None
        self.last_q: QuantParams | None = None

    def params(self):
        return {}

    def astype(self, dtype):
        pass

    def qparams(self, w) -> QuantParams:
        return QuantParams.from_range(float(w.min()), float(w.max()), self.n_bits)

    def forward(self, w):
        q = self.qparams(w)
        self.last_q = q
        out, self._mask = fake_quant(w, q)
        return out

    def backward(self, dw):
        return dw * self._mask


class MixedWeightQuant:
    """Weight hook mixing fake-quantised copies: ``W_hat = sum_p softmax(gamma)_p Wq_p``."""

    def __init__(self, formats=FORMATS, gamma=None, dtype=np.float32):
        self.formats = tuple(formats)
        self.gamma = np.zeros(len(self.formats), dtype) if gamma is None else np.asarray(gamma, dtype)
        self.grads: dict = {}
        self._cache = None

    def params(self):
        return {"gamma": self.gamma}

    def astype(self, dtype):
        self.gamma = self.gamma.astype(dtype)

    def forward(self, w):
        sm = softmax(self.gamma)
        qs, masks = [], []
        for bits in self.formats:
            out, m = fake_quant(w, QuantParams.from_range(float(w.min()), float(w.max()), bits))
            qs.append(out)
            masks.append(m)
        self._cache = (sm, qs, masks)
        return sum(s * q for s, q in zip(sm, qs)).astype(w.dtype)

    def backward(self, dw_hat):
        sm, qs, masks = self._cache
        dsm = np.array([float(np.sum(dw_hat * q, dtype=np.float64)) for q in qs])
        self.grads = {"gamma": softmax_backward(sm, dsm).astype(self.gamma.dtype)}
        return sum(s * dw_hat * m for s, m in zip(sm, masks)).astype(dw_hat.dtype)


class MixedActQuant(Layer):
    """Output mixture ``y = sum_p softmax(delta)_p * fq_p(x)`` over one observed range."""

    kind = "mixq"
    passthrough = True

    def __init__(self, formats=FORMATS, delta=None, dtype=np.float32):
        super().__init__()
        self.formats = tuple(formats)
        self.delta = np.zeros(len(self.formats), dtype) if delta is None else np.asarray(delta, dtype)
        self.observer = RangeObserver()
        self.observing = True
        self.include_zero = True

    def params(self):
        return {"delta": self.delta}

    def forward(self, x, train=False):
        if self.observing and not self.observer.frozen:
            self.observer.observe(x)
        sm = softmax(self.delta)
        qs, masks = [], []
        for bits in self.formats:
            out, m = fake_quant(x, self.observer.qparams(bits))
            qs.append(out)
            masks.append(m)
        self._cache = (sm, qs, masks)
        return sum(s * q for s, q in zip(sm, qs)).astype(x.dtype)

    def backward(self, dy):
        sm, qs, masks = self._need_cache()
        dsm = np.array([float(np.sum(dy * q, dtype=np.float64)) for q in qs])
        self.grads = {"delta": softmax_backward(sm, dsm).astype(self.delta.dtype)}
        return sum(s * dy * m for s, m in zip(sm, masks)).astype(dy.dtype)


def edmips_forward(x, conv: Conv1d, wq: MixedWeightQuant, aq: MixedActQuant, train=False):
    """One meta-layer: conv with mixed fake-quantised weights, then mixed output quantisers."""
    conv.weight_hook = wq
    return aq.forward(conv.forward(x, train), train)


# ------------------------------------------------------------ BN folding

def fold_batchnorm(net: Network) -> Network:
    """Eval-mode equivalent network with every BN (and ChannelScale) folded
    into the preceding conv/FC weights and bias."""
    src = net.copy()
    layers = []
    for layer in src.layers:
        if isinstance(layer, (BatchNorm, ChannelScale)):
            prev = layers[-1] if layers else None
            if not isinstance(prev, (Conv1d, FullyConnected)):
                raise ValueError("BN/scale must directly follow a conv or FC layer to fold")
            if isinstance(layer, BatchNorm):
                var = layer.running_var.astype(np.float64)
                if np.any(var < 1e-12):
                    raise ValueError("near-zero variance channel, cannot fold")
                a, b = (v.astype(np.float64) for v in layer.scale_shift())
            else:
                a, b = layer.scale.astype(np.float64), np.zeros(layer.channels)
            dt = prev.weight.dtype
            shape = (-1, 1, 1) if isinstance(prev, Conv1d) else (-1, 1)
            prev.weight = (prev.weight.astype(np.float64) * a.reshape(shape)).astype(dt)
            old_b = np.zeros(len(a)) if prev.bias is None else prev.bias.astype(np.float64)
            prev.bias = (old_b * a + b).astype(dt)
            continue
        layers.append(layer)
    out = Network(layers, tuple(src.input_shape), src.input_mean, src.input_std, dict(src.meta))
    out.validate()
    return out


# ---------------------------------------------------------------- QAT network

@dataclass
class QuantPlan:
    """Per compute layer (conv/FC in order) weight and output-activation bits."""

    weight_bits: list
    act_bits: list
    input_bits: int = 8
    output_bits: int = 8

    @classmethod
    def uniform(cls, n_layers: int, bits: int) -> "QuantPlan":
        return cls([bits] * n_layers, [bits] * n_layers)


def compute_layers(net: Network) -> list[int]:
    return [i for i, l in enumerate(net.layers) if isinstance(l, (Conv1d, FullyConnected))]


def prepare_qat(net: Network, plan: QuantPlan | None = None, bits: int | None = None,
                mixed: bool = False, formats=FORMATS) -> Network:
    """BN-folded copy of ``net`` with fake quantisers on weights and activations.

    Layout: input quantiser, then each conv/FC (+ReLU) followed by its
    output quantiser; pooling is followed by a quantiser tied to its input.
    The final output quantiser does not force zero into its range.
    ``mixed`` installs the mixed-precision meta-layers instead.
    """
    folded = fold_batchnorm(net)
    n_compute = len(compute_layers(folded))
    if plan is None and not mixed:
        plan = QuantPlan.uniform(n_compute, bits or 8)
    layers: list = []
    inq = ActQuant(plan.input_bits if plan else 8)
    layers.append(inq)
    last_q: Layer = inq
    ci = 0
    src = folded.layers
    i = 0
    while i < len(src):
        layer = src[i]
        if isinstance(layer, (Conv1d, FullyConnected)):
            is_last = ci == n_compute - 1
            if mixed:
                layer.weight_hook = MixedWeightQuant(formats, dtype=layer.weight.dtype)
            else:
                layer.weight_hook = WeightQuant(plan.weight_bits[ci])
            layers.append(layer)
            if i + 1 < len(src) and isinstance(src[i + 1], ReLU):
                layers.append(src[i + 1])
                i += 1
            if is_last:
                q = ActQuant(plan.output_bits if plan else 8, include_zero=False)
            elif mixed:
                q = MixedActQuant(formats, dtype=layer.weight.dtype)
            else:
                q = ActQuant(plan.act_bits[ci])
            layers.append(q)
            last_q = q
            ci += 1
        elif isinstance(layer, AvgPool):
            layers.append(layer)
            layers.append(ActQuant(tied_to=last_q) if isinstance(last_q, ActQuant)
                          else _TiedMixed(last_q))
        elif isinstance(layer, (Flatten, ReLU)):
            layers.append(layer)
        else:
            raise TypeError(f"unexpected layer {layer.kind} in folded network")
        i += 1
    out = Network(layers, tuple(folded.input_shape), folded.input_mean, folded.input_std,
                  dict(folded.meta))
    out.validate()
    return out


class _TiedMixed(Layer):
    """Re-applies a MixedActQuant's mixture after pooling, without observing."""

    kind = "mixq_tied"
    passthrough = True

    def __init__(self, src: MixedActQuant):
        super().__init__()
        self.src = src

    def forward(self, x, train=False):
        sm = softmax(self.src.delta)
        qs, masks = [], []
        for bits in self.src.formats:
            out, m = fake_quant(x, self.src.observer.qparams(bits))
            qs.append(out)
            masks.append(m)
        self._cache = (sm, masks)
        return sum(s * q for s, q in zip(sm, qs)).astype(x.dtype)

    def backward(self, dy):
        sm, masks = self._need_cache()
        return sum(s * dy * m for s, m in zip(sm, masks)).astype(dy.dtype)


def observers(qnet: Network) -> list[RangeObserver]:
    return [l.observer for l in qnet.layers
            if isinstance(l, (ActQuant, MixedActQuant)) and l.observer is not None]


def calibrate(qnet: Network, inputs: np.ndarray, batch_size: int = 256) -> None:
    """Eval-mode pass that widens every unfrozen activation observer to the
    global min/max of ``inputs``; the momentum is restored afterwards."""
    obs = observers(qnet)
    saved = [o.momentum for o in obs]
    for o in obs:
        o.momentum = None
    try:
        for i in range(0, len(inputs), batch_size):
            qnet.forward(inputs[i:i + batch_size], train=False)
    finally:
        for o, m in zip(obs, saved):
            o.momentum = m


def freeze_observers(qnet: Network) -> None:
    for o in observers(qnet):
        o.freeze()


def qat_train(net: Network, train_set, val_set, cfg: TrainConfig, bits: int | None = 8,
              plan: QuantPlan | None = None, regularizer=None, reg_weight: float = 0.0,
              mixed: bool = False, formats=FORMATS, refs=None):
    """Quantisation-aware training of a float network.

    Observers are calibrated on the training set, keep tracking during the
    first epoch and freeze afterwards; weight ranges follow the weights at
    every step. With ``cfg.epochs == 0`` this is post-training quantisation.
    """
    qnet = prepare_qat(net, plan=plan, bits=bits, mixed=mixed, formats=formats)
    calibrate(qnet, train_set.inputs)
    if cfg.epochs == 0:
        freeze_observers(qnet)
        return qnet, []

    def after_epoch(n, epoch):
        if epoch == 0:
            freeze_observers(n)

    qnet, trace = train(qnet, train_set, val_set, cfg, regularizer=regularizer,
                        reg_weight=reg_weight, on_epoch=after_epoch, refs=refs)
    freeze_observers(qnet)
    return qnet, trace


# -------------------------------------------------------- mixed precision

@dataclass
class MetaLayer:
    """One searchable layer: weight mixture, output mixture and their sizes."""

    wq: MixedWeightQuant
    aq: MixedActQuant | None
    n_weights: int
    n_acts: int


def meta_layers(qnet: Network) -> list[MetaLayer]:
    shapes = qnet.shapes()
    out = []
    layers = qnet.layers
    for i, l in enumerate(layers):
        if isinstance(l, (Conv1d, FullyConnected)) and isinstance(l.weight_hook, MixedWeightQuant):
            aq = None
            n_acts = int(np.prod(shapes[i]))
            for j in range(i + 1, len(layers)):
                if isinstance(layers[j], (Conv1d, FullyConnected)):
                    break
                if isinstance(layers[j], MixedActQuant):
                    aq = layers[j]
                    break
            out.append(MetaLayer(l.weight_hook, aq, int(l.weight.size), n_acts))
    return out


def edmips_cost(metas: list[MetaLayer]) -> tuple[float, dict]:
    """Expected storage bits: weights by softmax(gamma), activations by softmax(delta)."""
    cost = 0.0
    grads = {}
    for m in metas:
        bits = np.array(m.wq.formats, dtype=np.float64)
        sm = softmax(m.wq.gamma)
        cost += m.n_weights * float(sm @ bits)
        grads[(id(m.wq), "gamma")] = (m.n_weights * softmax_backward(sm, bits)).astype(m.wq.gamma.dtype)
        if m.aq is not None:
            abits = np.array(m.aq.formats, dtype=np.float64)
            sa = softmax(m.aq.delta)
            cost += m.n_acts * float(sa @ abits)
            grads[(id(m.aq), "delta")] = (m.n_acts * softmax_backward(sa, abits)).astype(m.aq.delta.dtype)
    return cost, grads


def _argmax_more_bits(coef, formats) -> int:
    sm = softmax(coef)
    best = max(range(len(formats)), key=lambda p: (round(float(sm[p]), 12), formats[p]))
    return formats[best]


def assign_precisions(metas: list[MetaLayer], default_act_bits: int = 8) -> list[tuple[int, int]]:
    """Largest coefficient wins; exact ties go to the wider format."""
    out = []
    for m in metas:
        wb = _argmax_more_bits(m.wq.gamma, m.wq.formats)
        ab = _argmax_more_bits(m.aq.delta, m.aq.formats) if m.aq is not None else default_act_bits
        out.append((wb, ab))
    return out


def plan_from_assignment(assign: list[tuple[int, int]]) -> QuantPlan:
    return QuantPlan([w for w, _ in assign], [a for _, a in assign])


def strip_to_float(qnet: Network) -> Network:
    """Float network (no quantisers) with the trained weights of a QAT network."""
    layers = []
    for l in qnet.copy().layers:
        if isinstance(l, (ActQuant, MixedActQuant, _TiedMixed)):
            continue
        if isinstance(l, (Conv1d, FullyConnected)):
            l.weight_hook = None
        layers.append(l)
    return Network(layers, tuple(qnet.input_shape), qnet.input_mean, qnet.input_std, dict(qnet.meta))
