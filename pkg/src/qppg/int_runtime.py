"""Integer-only inference: packed sub-byte weights, requantisation and the model file.

Each compute record evaluates

    acc[m, t] = sum (x_code - z_x) * (w_code - z_w) + bias[m]
    y_code    = clamp(((acc * M + 2**(sh-1)) >> sh) + z_out, lo, 2**bits - 1)

where ``lo`` is ``z_out`` for records with a fused ReLU and 0 otherwise.
Accumulation is done on float64 BLAS, which is exact for the integer
magnitudes admitted by the overflow guard (< 2**31), then cast back to int64.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .quantization import (ActQuant, QuantParams, WeightQuant, _TiedMixed, MixedActQuant,
                           quantize, dequantize, round_half_away)
from .tcn import AvgPool, BatchNorm, Conv1d, Flatten, FullyConnected, Network, ReLU, conv1d_forward

MAGIC = b"QPPG"
VERSION = 1
HEADER_BYTES = 8
RECORD_FIXED_BYTES = 40      # kind..sh without per-channel bias and packed weights

KIND_CONV, KIND_CONV_RELU, KIND_FC, KIND_FC_RELU, KIND_POOL = range(5)
KIND_NAMES = {KIND_CONV: "conv", KIND_CONV_RELU: "conv+relu", KIND_FC: "fc",
              KIND_FC_RELU: "fc+relu", KIND_POOL: "avgpool"}
_INT32_LIMIT = 1 << 31


class PackRangeError(ValueError):
    pass


class FormatError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (at byte {offset})")
        self.offset = offset


class ModelError(ValueError):
    pass


class FoldError(ValueError):
    pass


# --------------------------------------------------------------------- packing

@dataclass(frozen=True)
class PackedTensor:
    bit_width: int
    shape: tuple
    data: bytes

    @property
    def size(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 1

    def __post_init__(self):
        if self.bit_width not in (2, 4, 8):
            raise ValueError(f"unsupported bit width {self.bit_width}")
        if len(self.data) != packed_len(self.size, self.bit_width):
            raise ValueError("byte count does not match shape")


def packed_len(n: int, bits: int) -> int:
    return (n * bits + 7) // 8


def pack(values, bit_width: int) -> PackedTensor:
    """Pack unsigned codes LSB-first: element 0 lands in the low bits of byte 0."""
    v = np.asarray(values)
    if v.size and (v.min() < 0 or v.max() > (1 << bit_width) - 1):
        raise PackRangeError(f"value outside [0, {(1 << bit_width) - 1}]")
    flat = v.reshape(-1).astype(np.uint8)
    per = 8 // bit_width
    pad = (-flat.size) % per
    if pad:
        flat = np.concatenate([flat, np.zeros(pad, np.uint8)])
    groups = flat.reshape(-1, per)
    out = np.zeros(len(groups), np.uint8)
    for j in range(per):
        out |= groups[:, j] << np.uint8(j * bit_width)
    return PackedTensor(bit_width, tuple(v.shape), out.tobytes())


def unpack(p: PackedTensor) -> np.ndarray:
    per = 8 // p.bit_width
    raw = np.frombuffer(p.data, np.uint8)
    mask = np.uint8((1 << p.bit_width) - 1)
    fields = np.stack([(raw >> np.uint8(j * p.bit_width)) & mask for j in range(per)], axis=1)
    return fields.reshape(-1)[:p.size].astype(np.int64).reshape(p.shape)


# --------------------------------------------------------------- requantising

def choose_multiplier(scale: float) -> tuple[int, int]:
    """``(M, sh)`` with ``M < 2**31`` and ``sh`` in [0, 31] closest to ``scale``."""
    if not scale >= 0 or not math.isfinite(scale):
        raise ValueError("requant scale must be finite and >= 0")
    best = None
    for sh in range(32):
        m = int(round_half_away(scale * (1 << sh)))
        if m >= _INT32_LIMIT:
            break
        err = abs(m / (1 << sh) - scale)
        if best is None or err < best[0]:
            best = (err, m, sh)
    if best is None:
        return _INT32_LIMIT - 1, 0
    return best[1], best[2]


def requantize(acc, M: int, sh: int, z_out: int, out_bits: int, lo: int = 0) -> np.ndarray:
    acc = np.asarray(acc, dtype=np.int64)
    prod = acc * np.int64(M)
    if sh > 0:
        prod = (prod + np.int64(1 << (sh - 1))) >> np.int64(sh)
    return np.clip(prod + z_out, lo, (1 << out_bits) - 1)


# ------------------------------------------------------------------- records

@dataclass
class QLayer:
    kind: int
    weight_bits: int
    act_bits: int
    c_in: int
    c_out: int
    k: int
    d: int
    s: int
    q_in: QuantParams
    q_out: QuantParams
    z_w: int
    bias: np.ndarray
    M: int
    sh: int
    weights: PackedTensor | None

    @property
    def relu(self) -> bool:
        return self.kind in (KIND_CONV_RELU, KIND_FC_RELU)

    @property
    def is_conv(self) -> bool:
        return self.kind in (KIND_CONV, KIND_CONV_RELU)

    @property
    def is_fc(self) -> bool:
        return self.kind in (KIND_FC, KIND_FC_RELU)

    @property
    def scale(self) -> float:
        return self.M / (1 << self.sh)

    def weight_codes(self) -> np.ndarray:
        return unpack(self.weights)

    def acc_bound(self) -> int:
        if self.kind == KIND_POOL:
            return self.k * ((1 << self.act_bits) - 1)
        taps = self.k if self.is_conv else 1
        bmax = int(np.abs(self.bias).max()) if self.bias.size else 0
        return taps * self.c_in * ((1 << self.q_in.n_bits) - 1) * ((1 << self.weight_bits) - 1) + bmax

    def n_bytes(self) -> int:
        w = len(self.weights.data) if self.weights is not None else 0
        return RECORD_FIXED_BYTES + 4 * self.c_out + w

    def check(self) -> None:
        if self.kind not in KIND_NAMES:
            raise ModelError(f"unknown layer kind {self.kind}")
        if self.act_bits != self.q_out.n_bits:
            raise ModelError("act_bits does not match output quant params")
        if self.M < 0 or self.M >= _INT32_LIMIT or not 0 <= self.sh <= 31:
            raise ModelError("requant multiplier/shift out of range")
        if self.bias.shape != (self.c_out,) or np.any(np.abs(self.bias) >= _INT32_LIMIT):
            raise ModelError("bias must be int32 per output channel")
        if self.kind == KIND_POOL:
            if self.c_in != self.c_out or self.weights is not None or self.q_in != self.q_out:
                raise ModelError("pool record must keep channels and quant params")
        else:
            shape = (self.c_out, self.c_in, self.k) if self.is_conv else (self.c_out, self.c_in)
            if self.weights is None or tuple(self.weights.shape) != shape \
                    or self.weights.bit_width != self.weight_bits:
                raise ModelError("packed weights do not match the record dims")
            if self.is_fc and (self.k, self.d, self.s) != (1, 1, 1):
                raise ModelError("fc records need k = d = s = 1")
        if min(self.c_in, self.c_out, self.k, self.d, self.s) < 1:
            raise ModelError("record dims must be positive")
        if self.acc_bound() >= _INT32_LIMIT:
            raise ModelError(f"accumulator bound {self.acc_bound()} overflows int32")


@dataclass
class QModel:
    layers: list
    input_mean: np.ndarray | None = None
    input_std: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def check(self) -> None:
        prev = None
        for i, l in enumerate(self.layers):
            try:
                l.check()
            except ModelError as exc:
                raise ModelError(f"layer {i}: {exc}") from None
            if prev is not None:
                ok = l.c_in == prev.c_out if not l.is_fc or prev.is_fc else l.c_in % prev.c_out == 0
                if not ok:
                    raise ModelError(f"layer {i}: input channels do not match layer {i - 1}")
            prev = l
        if self.layers and not self.layers[-1].is_fc:
            raise ModelError("model must end in an fc record")

    def layer_bits(self) -> list[tuple[int, int]]:
        return [(l.weight_bits, l.act_bits) for l in self.layers if l.kind != KIND_POOL]


def make_record(weight: np.ndarray, bias, q_in: QuantParams, q_out: QuantParams,
                weight_bits: int, relu: bool, d: int = 1, s: int = 1,
                q_w: QuantParams | None = None) -> QLayer:
    """Quantise a float conv ``(C_out, C_in, K)`` or FC ``(N_out, N_in)`` layer."""
    weight = np.asarray(weight, dtype=np.float64)
    q_in, q_out = q_in.as_float32(), q_out.as_float32()
    if q_w is None:
        q_w = QuantParams.from_range(float(weight.min()), float(weight.max()), weight_bits)
    codes = quantize(weight, q_w)
    eps_acc = q_in.eps * q_w.eps
    c_out = weight.shape[0]
    b = np.zeros(c_out) if bias is None else np.asarray(bias, dtype=np.float64)
    bias_int = round_half_away(b / eps_acc).astype(np.int64)
    M, sh = choose_multiplier(eps_acc / q_out.eps)
    conv = weight.ndim == 3
    kind = (KIND_CONV_RELU if relu else KIND_CONV) if conv else (KIND_FC_RELU if relu else KIND_FC)
    rec = QLayer(kind, weight_bits, q_out.n_bits, weight.shape[1], c_out,
                 weight.shape[2] if conv else 1, d if conv else 1, s if conv else 1,
                 q_in, q_out, q_w.zero_point, bias_int, M, sh, pack(codes, weight_bits))
    rec.check()
    return rec


def pool_record(channels: int, k: int, s: int, q: QuantParams) -> QLayer:
    q = q.as_float32()
    return QLayer(KIND_POOL, 0, q.n_bits, channels, channels, k, 1, s, q, q, 0,
                  np.zeros(channels, np.int64), 0, 0, None)


def fold_bn(layer: Conv1d | FullyConnected, bn: BatchNorm | None, q_in: QuantParams,
            q_out: QuantParams, weight_bits: int, relu: bool = False) -> QLayer:
    """Fold eval-mode BN into the layer, then quantise it into one record."""
    w = layer.weight.astype(np.float64)
    b = np.zeros(w.shape[0]) if layer.bias is None else layer.bias.astype(np.float64)
    if bn is not None:
        if np.any(bn.running_var < 1e-12):
            raise FoldError("near-zero variance channel, cannot fold")
        a = bn.gamma.astype(np.float64) / np.sqrt(bn.running_var.astype(np.float64) + bn.eps)
        shift = bn.beta.astype(np.float64) - a * bn.running_mean.astype(np.float64)
        w = w * a.reshape((-1,) + (1,) * (w.ndim - 1))
        b = b * a + shift
    d, s = (layer.d, layer.s) if isinstance(layer, Conv1d) else (1, 1)
    return make_record(w, b, q_in, q_out, weight_bits, relu, d, s)


def from_qat(qnet: Network) -> QModel:
    """Convert a BN-folded fake-quant network into integer records."""
    layers = qnet.layers
    if not layers or not isinstance(layers[0], ActQuant):
        raise ModelError("network must start with an input quantiser")
    q_cur = layers[0].qparams()
    recs = []
    i = 1
    while i < len(layers):
        l = layers[i]
        if isinstance(l, (Conv1d, FullyConnected)):
            hook = l.weight_hook
            if not isinstance(hook, WeightQuant):
                raise ModelError(f"layer {i}: expected a uniform weight quantiser")
            relu = i + 1 < len(layers) and isinstance(layers[i + 1], ReLU)
            j = i + 2 if relu else i + 1
            if j >= len(layers) or not isinstance(layers[j], ActQuant):
                raise ModelError(f"layer {i}: missing output quantiser")
            q_out = layers[j].qparams()
            d, s = (l.d, l.s) if isinstance(l, Conv1d) else (1, 1)
            recs.append(make_record(l.weight, l.bias, q_cur, q_out, hook.n_bits, relu, d, s,
                                    q_w=hook.qparams(l.weight.astype(np.float64))))
            q_cur = q_out
            i = j + 1
        elif isinstance(l, AvgPool):
            if i + 1 >= len(layers) or not isinstance(layers[i + 1], ActQuant) \
                    or layers[i + 1].qparams() != q_cur:
                raise ModelError(f"layer {i}: pool must be followed by its tied quantiser")
            recs.append(pool_record(recs[-1].c_out, l.k, l.s, q_cur))
            i += 2
        elif isinstance(l, Flatten):
            i += 1
        elif isinstance(l, (MixedActQuant, _TiedMixed, BatchNorm)):
            raise ModelError(f"layer {i}: {l.kind} must be resolved before export")
        else:
            raise ModelError(f"layer {i}: unexpected {l.kind}")
    m = QModel(recs, qnet.input_mean, qnet.input_std, dict(qnet.meta))
    m.check()
    return m


# ----------------------------------------------------------------- inference

def _run_record(rec: QLayer, codes: np.ndarray) -> np.ndarray:
    z_in = rec.q_in.zero_point
    if rec.kind == KIND_POOL:
        n, c, t = codes.shape
        t_out = (t - rec.k) // rec.s + 1
        tot = np.zeros((n, c, t_out), np.int64)
        for j in range(rec.k):
            tot += codes[:, :, j:j + rec.s * (t_out - 1) + 1:rec.s]
        return (tot + rec.k // 2) // rec.k
    w = (rec.weight_codes() - rec.z_w).astype(np.float64)
    xc = (codes - z_in).astype(np.float64)
    if rec.is_conv:
        acc = conv1d_forward(xc, w, rec.d, rec.s)
        acc = np.rint(acc).astype(np.int64) + rec.bias[None, :, None]
    else:
        xc = xc.reshape(xc.shape[0], -1)
        if xc.shape[1] != rec.c_in:
            raise ModelError(f"fc expects {rec.c_in} inputs, got {xc.shape[1]}")
        acc = np.rint(xc @ w.T).astype(np.int64) + rec.bias[None, :]
    z_out = rec.q_out.zero_point
    lo = max(z_out, 0) if rec.relu else 0
    return requantize(acc, rec.M, rec.sh, z_out, rec.act_bits, lo)


def quantize_input(model: QModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if model.input_mean is not None:
        x = (x - np.asarray(model.input_mean, np.float64)[:, None]) \
            / np.asarray(model.input_std, np.float64)[:, None]
    return quantize(x, model.layers[0].q_in)


def run_codes(model: QModel, x: np.ndarray) -> np.ndarray:
    """Output codes ``(N, 1)`` for raw windows ``(N, C, T)``."""
    codes = quantize_input(model, x)
    for rec in model.layers:
        codes = _run_record(rec, codes)
    return codes


def run_inference(model: QModel, x, batch_size: int = 256) -> np.ndarray | float:
    """BPM prediction(s) for one window ``(C, T)`` or a batch ``(N, C, T)``."""
    x = np.asarray(x)
    single = x.ndim == 2
    if single:
        x = x[None]
    out = []
    for i in range(0, len(x), batch_size):
        codes = run_codes(model, x[i:i + batch_size])
        out.append(dequantize(codes.reshape(-1), model.layers[-1].q_out))
    pred = np.concatenate(out) if out else np.zeros(0)
    return float(pred[0]) if single else pred


# ------------------------------------------------------------------- format

_HDR = struct.Struct("<4sHH")
_REC = struct.Struct("<BBBHHHHH")
_QP = struct.Struct("<ffB")


def _qp_bytes(q: QuantParams) -> bytes:
    return _QP.pack(q.alpha, q.beta, q.n_bits)


def export_model(model: QModel) -> bytes:
    model.check()
    parts = [_HDR.pack(MAGIC, VERSION, len(model.layers))]
    for r in model.layers:
        parts.append(_REC.pack(r.kind, r.weight_bits, r.act_bits, r.c_in, r.c_out, r.k, r.d, r.s))
        parts.append(_qp_bytes(r.q_in) + _qp_bytes(r.q_out))
        parts.append(struct.pack("<i", r.z_w))
        parts.append(r.bias.astype("<i4").tobytes())
        parts.append(struct.pack("<iB", r.M, r.sh))
        if r.weights is not None:
            parts.append(r.weights.data)
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated {what}", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, st: struct.Struct, what: str):
        return st.unpack(self.take(st.size, what))


def _read_qp(rd: _Reader, what: str) -> QuantParams:
    at = rd.pos
    a, b, bits = rd.unpack(_QP, what)
    try:
        return QuantParams(float(a), float(b), bits)
    except ValueError as exc:
        raise FormatError(f"invalid {what}: {exc}", at) from None


def import_model(buf: bytes) -> QModel:
    rd = _Reader(bytes(buf))
    magic, version, n = rd.unpack(_HDR, "header")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    layers = []
    for li in range(n):
        start = rd.pos
        kind, wb, ab, c_in, c_out, k, d, s = rd.unpack(_REC, f"layer {li} header")
        if kind not in KIND_NAMES:
            raise FormatError(f"layer {li}: unknown kind {kind}", start)
        q_in = _read_qp(rd, f"layer {li} input params")
        q_out = _read_qp(rd, f"layer {li} output params")
        (z_w,) = struct.unpack("<i", rd.take(4, f"layer {li} z_w"))
        bias = np.frombuffer(rd.take(4 * c_out, f"layer {li} bias"), "<i4").astype(np.int64)
        M, sh = struct.unpack("<iB", rd.take(5, f"layer {li} requant"))
        weights = None
        if kind != KIND_POOL:
            if wb not in (2, 4, 8):
                raise FormatError(f"layer {li}: bad weight bits {wb}", start + 1)
            shape = (c_out, c_in, k) if kind in (KIND_CONV, KIND_CONV_RELU) else (c_out, c_in)
            nbytes = packed_len(int(np.prod(shape)), wb)
            weights = PackedTensor(wb, shape, rd.take(nbytes, f"layer {li} weights"))
        rec = QLayer(kind, wb, ab, c_in, c_out, k, d, s, q_in, q_out, z_w, bias, M, sh, weights)
        try:
            rec.check()
        except ModelError as exc:
            raise FormatError(f"layer {li}: {exc}", start) from None
        layers.append(rec)
    if rd.pos != len(rd.buf):
        raise FormatError("trailing bytes after last layer", rd.pos)
    model = QModel(layers)
    try:
        model.check()
    except ModelError as exc:
        raise FormatError(str(exc), HEADER_BYTES) from None
    return model


def model_bytes(model: QModel) -> int:
    """File size: 8-byte header + per record 40 + 4*c_out + packed weight bytes."""
    return HEADER_BYTES + sum(r.n_bytes() for r in model.layers)


# ------------------------------------------------------------------ files

def save_model(model: QModel, path) -> None:
    """Write the model file plus a ``.json`` sidecar with input normalisation."""
    path = Path(path)
    path.write_bytes(export_model(model))
    side = {"input_mean": None if model.input_mean is None else np.asarray(model.input_mean).tolist(),
            "input_std": None if model.input_std is None else np.asarray(model.input_std).tolist(),
            "meta": model.meta}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(side, indent=2, sort_keys=True))


def load_model(path) -> QModel:
    path = Path(path)
    model = import_model(path.read_bytes())
    side = path.with_suffix(path.suffix + ".json")
    if side.exists():
        meta = json.loads(side.read_text())
        if meta.get("input_mean") is not None:
            model.input_mean = np.asarray(meta["input_mean"], np.float64)
            model.input_std = np.asarray(meta["input_std"], np.float64)
        model.meta = meta.get("meta", {})
    return model
