"""LogCosh regression training, MAE evaluation, LOSO cross-validation and fine-tuning."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .numerics import Rng64
from .signals import ProtocolError, WindowSet, split_loso
from .tcn import BatchNorm, Network

log = logging.getLogger(__name__)

_LOG2 = math.log(2.0)


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 30
    batch_size: int = 128
    seed: int = 0
    optimizer: str = "adam"          # adam | sgd
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    momentum: float = 0.9
    lr_finetune_scale: float = 0.1

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def replace(self, **kw) -> "TrainConfig":
        d = dict(self.__dict__)
        d.update(kw)
        return TrainConfig(**d)


@dataclass
class Metrics:
    mae_bpm: float
    per_subject: dict = field(default_factory=dict)


# ---------------------------------------------------------------- loss / metric

def logcosh_loss(pred, target) -> tuple[float, np.ndarray]:
    """Mean log(cosh(pred - target)) and its gradient w.r.t. ``pred``."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.size == 0:
        raise ValueError("pred and target must have equal non-zero length")
    z = pred - target
    a = np.abs(z)
    loss = float(np.mean(a + np.log1p(np.exp(-2.0 * a)) - _LOG2))
    return loss, np.tanh(z) / z.size


def mae(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.size == 0:
        raise ValueError("pred and target must have equal non-zero length")
    return float(np.mean(np.abs(pred - target)))


def predict(net, inputs: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = [net.forward(inputs[i:i + batch_size], train=False)
           for i in range(0, len(inputs), batch_size)]
    return np.concatenate(out).astype(np.float64) if out else np.zeros(0)


def evaluate(net, ws: WindowSet) -> Metrics:
    pred = predict(net, ws.inputs)
    per = {}
    for s in dict.fromkeys(ws.subject_ids.tolist()):
        m = ws.subject_ids == s
        per[s] = mae(pred[m], ws.targets[m])
    return Metrics(mae(pred, ws.targets), per)


# ------------------------------------------------------------------ optimizers

class Optimizer:
    """Adam or momentum SGD over ``(owner, name)`` parameter references."""

    def __init__(self, refs, cfg: TrainConfig, lr: float | None = None):
        self.refs = list(refs)
        self.cfg = cfg
        self.lr = cfg.lr if lr is None else lr
        self.t = 0
        self.m = [np.zeros_like(o.params()[n]) for o, n in self.refs]
        self.v = [np.zeros_like(o.params()[n]) for o, n in self.refs]

    def step(self, extra: dict | None = None) -> None:
        """Apply one update from each owner's ``grads`` (plus ``extra[(id, name)]``)."""
        self.t += 1
        cfg = self.cfg
        b1, b2 = cfg.betas
        for i, (owner, name) in enumerate(self.refs):
            p = owner.params()[name]
            g = owner.grads.get(name)
            if g is None:
                continue
            if extra and (id(owner), name) in extra:
                g = g + extra[(id(owner), name)]
            if self.lr == 0:
                continue
            if cfg.optimizer == "adam":
                self.m[i] = b1 * self.m[i] + (1 - b1) * g
                self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
                mhat = self.m[i] / (1 - b1 ** self.t)
                vhat = self.v[i] / (1 - b2 ** self.t)
                p -= (self.lr * mhat / (np.sqrt(vhat) + cfg.adam_eps)).astype(p.dtype)
            else:
                self.m[i] = cfg.momentum * self.m[i] + g
                p -= (self.lr * self.m[i]).astype(p.dtype)


class GroupedOptimizer:
    """Two optimizers: ``special`` refs (keyed ``(id(owner), name)``) run at ``lr * scale``."""

    def __init__(self, refs, special: set, cfg: TrainConfig, scale: float, lr: float | None = None):
        refs = list(refs)
        base = cfg.lr if lr is None else lr
        self.groups = [
            Optimizer([r for r in refs if (id(r[0]), r[1]) not in special], cfg, lr=base),
            Optimizer([r for r in refs if (id(r[0]), r[1]) in special], cfg, lr=base * scale),
        ]

    def step(self, extra: dict | None = None) -> None:
        for g in self.groups:
            g.step(extra)


# A regulariser returns (cost, {(id(owner), name): grad}) for the current parameters.
Regularizer = Callable[[Network], tuple]


def train_step(net: Network, opt: Optimizer, x: np.ndarray, y: np.ndarray,
               regularizer: Regularizer | None = None, reg_weight: float = 0.0) -> float:
    pred = net.forward(x, train=True)
    loss, grad = logcosh_loss(pred, y)
    net.backward(grad)
    extra = None
    if regularizer is not None and reg_weight != 0.0:
        cost, grads = regularizer(net)
        loss += reg_weight * cost
        extra = {k: reg_weight * g for k, g in grads.items()}
    opt.step(extra)
    return loss


def train(net: Network, train_set: WindowSet, val_set: WindowSet | None, cfg: TrainConfig,
          *, regularizer: Regularizer | None = None, reg_weight: float = 0.0,
          refs=None, lr: float | None = None, freeze_bn: bool = False,
          select_best: bool = True, on_epoch: Callable | None = None, optimizer=None):
    """Mini-batch training on LogCosh; returns ``(net, val_mae_trace)``.

    The parameter snapshot with the lowest validation MAE is restored at the
    end unless ``select_best`` is false or there is no validation set.
    """
    if len(train_set) == 0:
        raise ValueError("empty training set")
    if refs is None:
        refs = net.param_refs()
    opt = optimizer if optimizer is not None else Optimizer(refs, cfg, lr)
    bns = [l for l in net.layers if isinstance(l, BatchNorm)]
    for bn in bns:
        bn.frozen = freeze_bn
    rng = Rng64(cfg.seed)
    trace: list[float] = []
    best = (math.inf, None)
    n = len(train_set)
    bs = max(1, cfg.batch_size)
    try:
        for epoch in range(cfg.epochs):
            order = rng.permutation(n)
            for i in range(0, n, bs):
                idx = np.sort(order[i:i + bs])
                if len(idx) < 2 and not freeze_bn and bns:
                    continue
                loss = train_step(net, opt, train_set.inputs[idx], train_set.targets[idx],
                                  regularizer, reg_weight)
                if not math.isfinite(loss):
                    raise DivergenceError(f"non-finite loss at epoch {epoch} (lr {lr or cfg.lr:g})")
            if on_epoch is not None:
                on_epoch(net, epoch)
            if val_set is not None and len(val_set):
                v = evaluate(net, val_set).mae_bpm
                trace.append(v)
                log.debug("epoch %d val MAE %.3f", epoch, v)
                if select_best and v < best[0]:
                    best = (v, net.state())
    finally:
        for bn in bns:
            bn.frozen = False
    if select_best and best[1] is not None:
        net.load_state(best[1])
    return net, trace


def target_mean(ws: WindowSet) -> float:
    return float(np.mean(ws.targets))


def crossval_loso(builder: Callable[[WindowSet], Network], windows: WindowSet,
                  cfg: TrainConfig, n_folds: int = 4) -> Metrics:
    """Train one model per LOSO partition; per-subject test MAE and their mean.

    ``builder`` receives the partition's training set (for normalisation
    statistics and output-bias initialisation) and returns a fresh network.
    """
    per = {}
    for train_idx, val_idx, test_idx in split_loso(windows, n_folds, cfg.seed):
        tr, va, te = windows.subset(train_idx), windows.subset(val_idx), windows.subset(test_idx)
        test_subj = te.subject_ids[0]
        if test_subj in set(tr.subject_ids.tolist()) | set(va.subject_ids.tolist()):
            raise ProtocolError(f"subject {test_subj} leaked into training")
        net = builder(tr)
        train(net, tr, va, cfg)
        per[test_subj] = evaluate(net, te).mae_bpm
    return Metrics(float(np.mean(list(per.values()))), per)


def fine_tune(net: Network, subject_windows: WindowSet, cfg: TrainConfig):
    """Adapt on the first 25 % of a subject's windows; MAE on the remaining 75 %.

    BN statistics stay frozen so a zero learning-rate scale is a no-op.
    """
    if len(set(subject_windows.subject_ids.tolist())) != 1:
        raise ProtocolError("fine-tuning expects windows of a single subject")
    n = len(subject_windows)
    if n < 8:
        raise ProtocolError(f"fine-tuning needs >= 8 windows, got {n}")
    cut = n // 4
    head, tail = subject_windows.subset(np.arange(cut)), subject_windows.subset(np.arange(cut, n))
    tuned = net.copy()
    train(tuned, head, None, cfg, lr=cfg.lr * cfg.lr_finetune_scale, freeze_bn=True,
          select_best=False)
    return tuned, evaluate(tuned, tail)
