"""Pareto fronts and the MCU deployment model (memory, latency, energy, selection).

Latency is linear in MACs with one throughput constant per (weight bits,
activation bits) pair. The int8 constant is calibrated so that a 17.5M-MAC
int8 network takes 1.90 s; sub-byte constants are lower, uncalibrated
defaults since unpacking makes them slower on Cortex-M class cores.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

INT8_MACS_PER_S = 17.5e6 / 1.90
INT4_MACS_PER_S = 5.5e6
INT2_MACS_PER_S = 4.0e6
UNCALIBRATED = ("4x4", "4x8", "8x4", "2x2", "2x4", "2x8", "4x2", "8x2", "32x32")
BUNDLED = ("stm32wb", "mkv4", "stm32l0")


class ProfileError(ValueError):
    pass


class RealTimeError(RuntimeError):
    pass


def bit_key(weight_bits: int, act_bits: int) -> str:
    return f"{weight_bits}x{act_bits}"


def default_throughput() -> dict[str, float]:
    table = {}
    for w in (2, 4, 8):
        for a in (2, 4, 8):
            low = min(w, a)
            table[bit_key(w, a)] = (INT8_MACS_PER_S if low == 8 else
                                    INT4_MACS_PER_S if low == 4 else INT2_MACS_PER_S)
    # float layers are not deployed; kept so float candidates can still be costed
    table[bit_key(32, 32)] = INT8_MACS_PER_S / 4
    return table


@dataclass
class PlatformProfile:
    name: str
    flash_bytes: int
    flash_fraction: float = 0.5
    p_active_mw: float = 25.0
    p_idle_mw: float = 13.7
    p_stop_mw: float = 0.0081
    sensor_ppg_mw: float = 5.5
    sensor_imu_mw: float = 0.03
    t_comm_ms: float = 15.4
    window_s: float = 2.0
    throughput_macs_per_s: dict = field(default_factory=default_throughput)

    def __post_init__(self):
        powers = (self.p_active_mw, self.p_idle_mw, self.p_stop_mw, self.sensor_ppg_mw,
                  self.sensor_imu_mw)
        if min(powers) < 0:
            raise ProfileError("powers must be >= 0")
        if not self.window_s > 0:
            raise ProfileError("window_s must be > 0")
        if not 0 < self.flash_fraction <= 1 or self.flash_bytes <= 0:
            raise ProfileError("flash budget must be positive")

    @property
    def budget_bytes(self) -> float:
        return self.flash_fraction * self.flash_bytes

    def throughput(self, weight_bits: int, act_bits: int) -> float:
        key = bit_key(weight_bits, act_bits)
        if key not in self.throughput_macs_per_s:
            raise ProfileError(f"profile {self.name!r} has no throughput for {key}")
        return float(self.throughput_macs_per_s[key])


def load_profile(src) -> PlatformProfile:
    """Profile from a bundled name, a JSON path or a dict; missing throughputs use defaults."""
    if isinstance(src, dict):
        doc = dict(src)
    elif str(src) in BUNDLED:
        doc = json.loads(resources.files("qppg.profiles").joinpath(f"{src}.json").read_text())
    else:
        doc = json.loads(Path(src).read_text())
    tp = default_throughput()
    tp.update(doc.pop("throughput_macs_per_s", {}) or {})
    try:
        return PlatformProfile(throughput_macs_per_s=tp, **doc)
    except TypeError as exc:
        raise ProfileError(f"bad profile document: {exc}") from None


@dataclass
class CandidateModel:
    id: str
    mae_bpm: float
    bytes: int
    macs: int
    layer_bits: list = field(default_factory=list)     # [(weight_bits, act_bits)] per compute layer
    layer_macs: list = field(default_factory=list)     # MACs per compute layer, same order
    stage: str = ""
    lam: float | None = None
    parent: str | None = None
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.bytes <= 0 or self.macs <= 0:
            raise ValueError(f"candidate {self.id}: bytes and macs must be > 0")

    def bits_label(self) -> str:
        if not self.layer_bits:
            return "fp32"
        wbits = {w for w, _ in self.layer_bits}
        # the output layer always emits 8-bit codes, so it does not decide uniformity
        abits = {a for _, a in self.layer_bits[:-1]} or {self.layer_bits[-1][1]}
        if len(wbits) == 1 and len(abits) == 1:
            return f"w{wbits.pop()}a{abits.pop()}"
        return "mixed:" + ",".join(f"{w}/{a}" for w, a in self.layer_bits)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layer_bits"] = [list(p) for p in self.layer_bits]
        return d


def pareto_front(candidates, cost_axis: str = "bytes") -> list[CandidateModel]:
    """Non-dominated candidates sorted by cost; exact duplicates keep the lowest id."""
    if cost_axis not in ("bytes", "macs"):
        raise ValueError("cost_axis must be 'bytes' or 'macs'")
    order = sorted(candidates, key=lambda c: (getattr(c, cost_axis), c.mae_bpm, c.id))
    front = []
    best = math.inf
    for c in order:
        if c.mae_bpm < best:
            front.append(c)
            best = c.mae_bpm
    return front


def estimate_latency(model: CandidateModel, prof: PlatformProfile) -> float:
    if model.layer_macs:
        bits = model.layer_bits or [(32, 32)] * len(model.layer_macs)
        if len(bits) != len(model.layer_macs):
            raise ValueError(f"candidate {model.id}: layer_bits and layer_macs differ in length")
        return sum(m / prof.throughput(w, a) for m, (w, a) in zip(model.layer_macs, bits))
    w, a = model.layer_bits[0] if model.layer_bits else (32, 32)
    return model.macs / prof.throughput(w, a)


@dataclass
class EnergyBreakdown:
    latency_s: float
    inference_mj: float
    comm_mj: float
    sensors_mj: float
    stop_mj: float

    @property
    def window_mj(self) -> float:
        return self.inference_mj + self.comm_mj + self.sensors_mj + self.stop_mj


def energy_for_latency(latency_s: float, prof: PlatformProfile) -> EnergyBreakdown:
    t_comm = prof.t_comm_ms / 1000.0
    rest = max(prof.window_s - latency_s - t_comm, 0.0)
    return EnergyBreakdown(
        latency_s,
        prof.p_active_mw * latency_s,
        prof.p_idle_mw * t_comm,
        (prof.sensor_ppg_mw + prof.sensor_imu_mw) * prof.window_s,
        prof.p_stop_mw * rest,
    )


def estimate_energy(model: CandidateModel, prof: PlatformProfile) -> EnergyBreakdown:
    lat = estimate_latency(model, prof)
    if lat > prof.window_s:
        raise RealTimeError(f"model {model.id} needs {lat:.3f} s > {prof.window_s} s window")
    return energy_for_latency(lat, prof)


def select_for_device(front, prof: PlatformProfile) -> CandidateModel | None:
    """Most accurate member fitting the flash budget and the real-time window; None if none fits."""
    best = None
    for c in front:
        if c.bytes > prof.budget_bytes:
            continue
        try:
            if estimate_latency(c, prof) > prof.window_s:
                continue
        except ProfileError:
            continue
        if best is None or (c.mae_bpm, c.bytes, c.id) < (best.mae_bpm, best.bytes, best.id):
            best = c
    return best
