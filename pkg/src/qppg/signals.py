"""PPG + accelerometer records, 8 s windowing, LOSO splits and a synthetic generator."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import Rng64

FS = 32
WINDOW = 256
SHIFT = 64
CHANNELS = ("ppg", "ax", "ay", "az")


class ParseError(ValueError):
    pass


class SchemaError(ValueError):
    pass


class ProtocolError(ValueError):
    pass


@dataclass
class SignalRecord:
    subject_id: str
    channels: np.ndarray            # (4, L) float32
    label_index: np.ndarray         # (n_labels,) int64, strictly increasing
    label_bpm: np.ndarray           # (n_labels,) float64

    def __post_init__(self):
        self.channels = np.asarray(self.channels, dtype=np.float32)
        self.label_index = np.asarray(self.label_index, dtype=np.int64)
        self.label_bpm = np.asarray(self.label_bpm, dtype=np.float64)
        if self.channels.ndim != 2 or self.channels.shape[0] != 4:
            raise SchemaError(f"expected 4 channels, got shape {self.channels.shape}")
        if self.label_index.shape != self.label_bpm.shape:
            raise SchemaError("label index/bpm length mismatch")
        if np.any(np.diff(self.label_index) <= 0):
            raise SchemaError("label sample indices must be strictly increasing")
        if np.any((self.label_bpm <= 20) | (self.label_bpm >= 300)):
            raise SchemaError("label bpm outside (20, 300)")

    @property
    def length(self) -> int:
        return self.channels.shape[1]


@dataclass
class WindowSet:
    inputs: np.ndarray              # (n, 4, 256)
    targets: np.ndarray             # (n,)
    subject_ids: np.ndarray         # (n,) str

    def __len__(self):
        return len(self.targets)

    def subset(self, idx) -> "WindowSet":
        idx = np.asarray(idx, dtype=np.int64)
        return WindowSet(self.inputs[idx], self.targets[idx], self.subject_ids[idx])

    @staticmethod
    def concat(sets: list["WindowSet"]) -> "WindowSet":
        return WindowSet(np.concatenate([s.inputs for s in sets]),
                         np.concatenate([s.targets for s in sets]),
                         np.concatenate([s.subject_ids for s in sets]))

    def channel_stats(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-channel mean and std over all windows (z-score statistics)."""
        mean = self.inputs.mean(axis=(0, 2), dtype=np.float64)
        std = self.inputs.std(axis=(0, 2), dtype=np.float64)
        std[std < 1e-8] = 1.0
        return mean.astype(np.float32), std.astype(np.float32)


# ------------------------------------------------------------------------ I/O

def read_samples(path) -> np.ndarray:
    """``(4, L)`` float32 channels from a ``t,ppg,ax,ay,az`` CSV."""
    path = Path(path)
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError(f"{path}: empty file")
        if len(header) != 5 or header[0] != "t":
            raise SchemaError(f"{path}: expected 4 channels with header t,ppg,ax,ay,az, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 5:
                raise SchemaError(f"{path}:{lineno}: expected 5 columns, got {len(row)}")
            try:
                rows.append([float(v) for v in row[1:]])
            except ValueError:
                raise ParseError(f"{path}:{lineno}: malformed row {row!r}") from None
    return np.array(rows, dtype=np.float32).T if rows else np.zeros((4, 0), np.float32)


def signal_windows(chans: np.ndarray) -> np.ndarray:
    """All complete 256-sample windows every 64 samples, ``(n, 4, 256)``."""
    if chans.shape[1] < WINDOW:
        raise ValueError(f"{chans.shape[1]} samples < one window")
    n = (chans.shape[1] - WINDOW) // SHIFT + 1
    sw = np.lib.stride_tricks.sliding_window_view(chans, WINDOW, axis=1)
    return np.ascontiguousarray(sw[:, ::SHIFT][:, :n].transpose(1, 0, 2))


def load_record(path, labels_path=None, subject_id: str | None = None) -> SignalRecord:
    """Read ``t,ppg,ax,ay,az`` samples plus a companion ``t_index,bpm`` label file.

    The label file defaults to ``<stem>.labels.csv`` next to the signal file.
    """
    path = Path(path)
    labels_path = Path(labels_path) if labels_path else path.with_suffix(".labels.csv")
    chans = read_samples(path)
    idx, bpm = [], []
    with open(labels_path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        for lineno, row in enumerate(reader, start=2):
            try:
                idx.append(int(row[0]))
                bpm.append(float(row[1]))
            except (ValueError, IndexError):
                raise ParseError(f"{labels_path}:{lineno}: malformed row {row!r}") from None
    return SignalRecord(subject_id or path.stem, chans, np.array(idx), np.array(bpm))


def save_record(rec: SignalRecord, path) -> None:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        fh.write("t,ppg,ax,ay,az\n")
        for t in range(rec.length):
            vals = ",".join(repr(float(v)) for v in rec.channels[:, t])
            fh.write(f"{t},{vals}\n")
    with open(path.with_suffix(".labels.csv"), "w", newline="") as fh:
        fh.write("t_index,bpm\n")
        for i, b in zip(rec.label_index, rec.label_bpm):
            fh.write(f"{int(i)},{repr(float(b))}\n")


# ------------------------------------------------------------------ windowing

def make_windows(rec: SignalRecord) -> WindowSet:
    """8 s windows every 2 s; target = label nearest the window's last sample."""
    length = rec.length
    if length < WINDOW:
        raise ValueError(f"record {rec.subject_id}: {length} samples < one window")
    if len(rec.label_index) == 0:
        raise ProtocolError(f"record {rec.subject_id} has no labels")
    n = (length - WINDOW) // SHIFT + 1
    starts = np.arange(n) * SHIFT
    ends = starts + WINDOW - 1
    li = rec.label_index
    # nearest label, ties to the later one
    pos = np.searchsorted(li, ends, side="left")
    right = np.clip(pos, 0, len(li) - 1)
    left = np.clip(pos - 1, 0, len(li) - 1)
    pick = np.where(np.abs(li[right] - ends) <= np.abs(ends - li[left]), right, left)
    near = np.abs(li[pick] - ends) < WINDOW
    if not np.all(near):
        bad = int(np.flatnonzero(~near)[0])
        raise ProtocolError(f"record {rec.subject_id}: no label within 8 s of window {bad}")
    sw = np.lib.stride_tricks.sliding_window_view(rec.channels, WINDOW, axis=1)
    inputs = np.ascontiguousarray(sw[:, ::SHIFT][:, :n].transpose(1, 0, 2))
    return WindowSet(inputs, rec.label_bpm[pick].copy(), np.full(n, rec.subject_id, dtype=object))


def split_loso(windows: WindowSet, n_folds: int = 4, seed: int = 0) -> list[tuple]:
    """Leave-one-subject-out partitions as (train, validation, test) index arrays.

    Subjects are dealt into ``n_folds`` seeded random folds. For each test
    subject, its own fold minus itself is validation and the other folds train.
    When that fold holds no other subject, the last 20 % (in time) of each
    training subject's windows are moved to validation instead.
    """
    subjects = list(dict.fromkeys(windows.subject_ids.tolist()))
    if len(subjects) < 2:
        raise ProtocolError("LOSO needs at least two subjects")
    if n_folds < 2:
        raise ProtocolError("n_folds must be >= 2")
    order = Rng64(seed).permutation(len(subjects))
    fold_of = {subjects[j]: pos % n_folds for pos, j in enumerate(order)}
    sid = windows.subject_ids
    parts = []
    for test_subj in subjects:
        test = np.flatnonzero(sid == test_subj)
        fold = fold_of[test_subj]
        val_subj = [s for s in subjects if fold_of[s] == fold and s != test_subj]
        train_subj = [s for s in subjects if fold_of[s] != fold]
        if not train_subj:
            train_subj, val_subj = val_subj, []
        if val_subj:
            val = np.flatnonzero(np.isin(sid, val_subj))
            train = np.flatnonzero(np.isin(sid, train_subj))
        else:
            train_l, val_l = [], []
            for s in train_subj:
                idx = np.flatnonzero(sid == s)
                cut = len(idx) - max(1, len(idx) // 5)
                train_l.append(idx[:cut])
                val_l.append(idx[cut:])
            train, val = np.concatenate(train_l), np.concatenate(val_l)
        parts.append((train, val, test))
    return parts


# ------------------------------------------------------------------ synthesis

@dataclass
class SynthConfig:
    n_subjects: int = 2
    duration_s: float = 600.0
    hr_range: tuple = (50.0, 150.0)
    harmonic_gains: tuple = (1.0, 0.4, 0.15)
    motion_gain: float = 0.5
    noise_std: float = 0.1
    seed: int = 0
    hr_step_std: float = 0.5        # BPM per second
    hr_start: float | None = None   # None: uniform in hr_range

    def __post_init__(self):
        lo, hi = self.hr_range
        if not (20 < lo <= hi < 300):
            raise ValueError("hr_range must lie within (20, 300)")
        if self.duration_s < 16:
            raise ValueError("duration_s must be >= 16")
        if self.n_subjects < 1:
            raise ValueError("n_subjects must be >= 1")

    @staticmethod
    def windows_to_duration(n_windows: int) -> float:
        return ((n_windows - 1) * SHIFT + WINDOW) / FS


def _reflect(x: float, lo: float, hi: float) -> float:
    width = hi - lo
    if width <= 0:
        return lo
    y = (x - lo) % (2 * width)
    return lo + (y if y <= width else 2 * width - y)


def band_limited(rng: Rng64, n: int, lo_hz: float = 0.5, hi_hz: float = 4.0) -> np.ndarray:
    """Unit-variance Gaussian noise restricted to [lo_hz, hi_hz] by FFT masking."""
    white = rng.normal((n,))
    spec = np.fft.rfft(white)
    f = np.fft.rfftfreq(n, 1.0 / FS)
    spec[(f < lo_hz) | (f > hi_hz)] = 0.0
    out = np.fft.irfft(spec, n)
    sd = out.std()
    return out / sd if sd > 0 else out


def synth_subject(cfg: SynthConfig, rng: Rng64, subject_id: str) -> SignalRecord:
    n = int(round(cfg.duration_s * FS))
    lo, hi = cfg.hr_range
    hr0 = cfg.hr_start if cfg.hr_start is not None else lo + (hi - lo) * rng.uniform()
    steps = rng.normal((n,)) * (cfg.hr_step_std / math.sqrt(FS))
    hr = np.empty(n)
    h = float(hr0)
    for i in range(n):
        hr[i] = h
        h = _reflect(h + steps[i], lo, hi)
    phase = np.concatenate([[0.0], np.cumsum(hr[:-1] / 60.0 / FS)])
    cardiac = np.zeros(n)
    for k, g in enumerate(cfg.harmonic_gains):
        cardiac += g * np.sin(2 * np.pi * (k + 1) * phase)
    motion = band_limited(rng, n)
    mix = rng.normal((3,))
    accel = np.stack([mix[a] * motion + 0.3 * band_limited(rng, n) for a in range(3)])
    noise = rng.normal((n,)) * cfg.noise_std
    ppg = cardiac + cfg.motion_gain * motion + noise
    # one label every 2 s, aligned with window ends, mean HR over the past 8 s
    idx = np.arange(WINDOW - 1, n, SHIFT)
    csum = np.concatenate([[0.0], np.cumsum(hr)])
    bpm = (csum[idx + 1] - csum[idx + 1 - WINDOW]) / WINDOW
    chans = np.vstack([ppg[None], accel]).astype(np.float32)
    return SignalRecord(subject_id, chans, idx, bpm)


def synth_generate(cfg: SynthConfig) -> list[SignalRecord]:
    root = Rng64(cfg.seed)
    return [synth_subject(cfg, root.spawn(), f"S{i + 1}") for i in range(cfg.n_subjects)]


def windows_from_records(records: list[SignalRecord]) -> WindowSet:
    return WindowSet.concat([make_windows(r) for r in records])


def split_holdout(windows: WindowSet, fractions=(0.7, 0.15, 0.15)) -> tuple:
    """Chronological per-subject split into (train, validation, test) index arrays.

    Each subject contributes its first windows to training, the next slice
    to validation and the last slice to test. A 3-window guard (the 6 s
    overlap span) is dropped at each boundary so no sample is shared.
    """
    f_tr, f_va, _ = fractions
    guard = WINDOW // SHIFT - 1
    tr, va, te = [], [], []
    for s in dict.fromkeys(windows.subject_ids.tolist()):
        idx = np.flatnonzero(windows.subject_ids == s)
        n = len(idx)
        a, b = int(round(n * f_tr)), int(round(n * (f_tr + f_va)))
        tr.append(idx[:a])
        va.append(idx[min(a + guard, b):b])
        te.append(idx[min(b + guard, n):])
    return tuple(np.concatenate(p) for p in (tr, va, te))
