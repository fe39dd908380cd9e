import math

import numpy as np
import pytest

from conftest import tiny_cfg
from qppg.numerics import finite_diff_grad
from qppg.signals import ProtocolError, WindowSet
from qppg.tcn import Flatten, FullyConnected, Network, build_seed
from qppg.training import (DivergenceError, Optimizer, TrainConfig, crossval_loso, evaluate,
                           fine_tune, logcosh_loss, mae, train)


def _set(rng, n=40, t=64, subjects=("A",), target=None):
    x = rng.normal(size=(n, 4, t)).astype(np.float32)
    y = np.full(n, target) if target is not None else 70 + 10 * x[:, 0, -8:].mean(axis=1)
    sid = np.array([subjects[i % len(subjects)] for i in range(n)], dtype=object)
    return WindowSet(x, y.astype(np.float64), sid)


def _fc_net(t=64):
    return Network([Flatten(), FullyConnected(4 * t, 1)], (4, t))


class TestLoss:
    def test_zero(self):
        loss, g = logcosh_loss([1.0, 2.0], [1.0, 2.0])
        assert loss == 0 and np.all(g == 0)

    def test_two(self):
        loss, g = logcosh_loss([2.0], [0.0])
        assert loss == pytest.approx(math.log(math.cosh(2)), abs=1e-12)
        assert g[0] == pytest.approx(0.96403, abs=1e-5)

    def test_no_overflow(self):
        loss, _ = logcosh_loss([1000.0, -1000.0], [950.0, -950.0])
        assert loss == pytest.approx(50 - math.log(2), abs=1e-12)

    def test_gradient_fd(self, rng):
        t = rng.uniform(-10, 10, 7)
        p = rng.uniform(-10, 10, 7)
        num = finite_diff_grad(lambda v: logcosh_loss(v, t)[0], p, 1e-5)
        _, g = logcosh_loss(p, t)
        assert np.max(np.abs(num - g)) / np.max(np.abs(g)) < 1e-6

    def test_mae(self):
        assert mae([70, 80], [72, 78]) == 2.0
        assert mae([60], [75]) == 15.0
        assert mae([1, 2], [1, 2]) == 0.0
        with pytest.raises(ValueError):
            mae([1], [1, 2])


class TestTrain:
    def test_constant_target(self, rng):
        ws = _set(rng, target=72.0)
        ws.inputs *= 0.01
        net, _ = train(_fc_net(), ws, ws, TrainConfig(lr=0.5, epochs=50, batch_size=4))
        assert evaluate(net, ws).mae_bpm < 0.1

    def test_deterministic(self, rng):
        ws = _set(rng)
        cfg = TrainConfig(epochs=3, batch_size=8, seed=4)
        traces = [train(build_seed(tiny_cfg(), seed=1), ws, ws, cfg)[1] for _ in range(2)]
        assert traces[0] == traces[1]

    def test_learns(self, rng):
        ws = _set(rng, n=64)
        net = build_seed(tiny_cfg(), seed=0)
        net.layers[-1].bias[:] = ws.targets.mean()
        before = evaluate(net, ws).mae_bpm
        net, trace = train(net, ws, ws, TrainConfig(epochs=10, batch_size=16, lr=3e-3))
        assert min(trace) < before
        assert evaluate(net, ws).mae_bpm == pytest.approx(min(trace))

    def test_divergence(self, rng):
        ws = _set(rng)
        ws.inputs[0, 0, 0] = np.nan
        with pytest.raises(DivergenceError, match="epoch 0"):
            train(_fc_net(), ws, None, TrainConfig(epochs=1))

    def test_zero_lr_step(self, rng):
        net = build_seed(tiny_cfg())
        before = [p.copy() for p in net.parameters()]
        opt = Optimizer(net.param_refs(), TrainConfig(), lr=0.0)
        x = rng.normal(size=(4, 4, 64))
        net.backward(logcosh_loss(net.forward(x, train=True), np.zeros(4))[1])
        opt.step()
        for a, b in zip(before, net.parameters()):
            np.testing.assert_array_equal(a, b)

    def test_sgd(self, rng):
        ws = _set(rng, target=65.0)
        ws.inputs *= 0.01
        net, _ = train(_fc_net(), ws, ws, TrainConfig(lr=0.5, epochs=50, batch_size=2,
                                                      optimizer="sgd"))
        assert evaluate(net, ws).mae_bpm < 1.0

    def test_bad_config(self):
        with pytest.raises(ValueError):
            TrainConfig(lr=0)
        with pytest.raises(ValueError):
            TrainConfig(optimizer="rmsprop")


class TestProtocols:
    def test_loso_two_subjects(self, rng):
        ws = _set(rng, n=40, subjects=("A", "B"))
        seen = []

        def builder(tr):
            seen.append(set(tr.subject_ids.tolist()))
            net = _fc_net()
            net.layers[-1].bias[:] = tr.targets.mean()
            return net

        m = crossval_loso(builder, ws, TrainConfig(epochs=2, batch_size=8), n_folds=2)
        assert set(m.per_subject) == {"A", "B"}
        assert m.mae_bpm == pytest.approx(np.mean(list(m.per_subject.values())))
        assert {"A"} in seen and {"B"} in seen
        again = crossval_loso(builder, ws, TrainConfig(epochs=2, batch_size=8), n_folds=2)
        assert again.per_subject == m.per_subject

    def test_fine_tune_split(self, rng):
        ws = _set(rng, n=100)
        net = build_seed(tiny_cfg())
        tuned, m = fine_tune(net, ws, TrainConfig(epochs=1, batch_size=8))
        tail = ws.subset(np.arange(25, 100))
        assert m.mae_bpm == pytest.approx(evaluate(tuned, tail).mae_bpm)

    def test_fine_tune_zero_scale(self, rng):
        ws = _set(rng, n=40)
        net = build_seed(tiny_cfg())
        tuned, m = fine_tune(net, ws, TrainConfig(epochs=2, batch_size=8, lr_finetune_scale=0.0))
        assert m.mae_bpm == evaluate(net, ws.subset(np.arange(10, 40))).mae_bpm

    def test_fine_tune_too_short(self, rng):
        with pytest.raises(ProtocolError):
            fine_tune(_fc_net(), _set(rng, n=7), TrainConfig())
