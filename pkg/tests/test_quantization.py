import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import randomize_bn, tiny_cfg
from qppg.numerics import finite_diff_grad
from qppg.quantization import (ActQuant, MetaLayer, MixedActQuant, MixedWeightQuant,
                               QuantParams, QuantPlan, QuantStateError, RangeObserver,
                               WeightQuant, assign_precisions, calibrate, dequantize,
                               edmips_cost, edmips_forward, fake_quant, fold_batchnorm,
                               meta_layers, observe, prepare_qat, qat_train, quantize,
                               round_half_away, softmax, softmax_backward)
from qppg.signals import WindowSet
from qppg.tcn import Conv1d, build_seed, conv1d_forward
from qppg.training import TrainConfig

bits_st = st.sampled_from([2, 4, 8])
real = st.floats(-1e3, 1e3, allow_nan=False)


@st.composite
def qparams(draw):
    lo = draw(st.floats(-100, 100))
    span = draw(st.floats(1e-3, 200))
    return QuantParams(lo, lo + span, draw(bits_st))


class TestQuantize:
    def test_alpha_is_zero_code(self):
        assert quantize(-1.5, QuantParams(-1.5, 2.0, 8)) == 0

    def test_integer_grid(self):
        assert quantize(100.4, QuantParams(0, 255, 8)) == 100

    def test_half_away(self):
        assert quantize(0.5, QuantParams(0, 1, 8)) == 128
        np.testing.assert_array_equal(round_half_away([-2.5, -0.5, 0.5, 1.5, 2.4]),
                                      [-3, -1, 1, 2, 2])

    def test_dequantize_ends(self):
        q = QuantParams(-0.7, 1.3, 4)
        assert dequantize(0, q) == pytest.approx(-0.7)
        assert dequantize(15, q) == pytest.approx(1.3)

    def test_invalid(self):
        with pytest.raises(ValueError):
            QuantParams(1.0, 1.0, 8)
        with pytest.raises(ValueError):
            QuantParams(0.0, 1.0, 3)

    @settings(max_examples=200, deadline=None)
    @given(qparams(), st.floats(0, 1))
    def test_roundtrip_bound(self, q, u):
        t = q.alpha + u * (q.beta - q.alpha)
        assert abs(t - dequantize(quantize(t, q), q)) <= q.eps / 2 + 1e-6

    @settings(max_examples=200, deadline=None)
    @given(qparams(), real, real)
    def test_monotone(self, q, a, b):
        lo, hi = min(a, b), max(a, b)
        assert quantize(lo, q) <= quantize(hi, q)

    @settings(max_examples=200, deadline=None)
    @given(qparams(), st.lists(real, min_size=1, max_size=20))
    def test_clamped(self, q, ts):
        c = quantize(np.array(ts), q)
        assert c.min() >= 0 and c.max() <= q.levels

    @settings(max_examples=100, deadline=None)
    @given(st.floats(-50, 50), st.floats(-50, 50), bits_st)
    def test_from_range_no_zero_covers(self, a, b, n):
        lo, hi = min(a, b), max(a, b) + 0.5
        q = QuantParams.from_range(lo, hi, n, include_zero=False)
        tol = 1e-12 * (q.beta - q.alpha)
        assert q.alpha <= lo + tol and q.beta >= hi - tol

    @settings(max_examples=100, deadline=None)
    @given(qparams())
    def test_codes_identity(self, q):
        codes = np.arange(q.levels + 1)
        np.testing.assert_array_equal(quantize(dequantize(codes, q), q), codes)

    @settings(max_examples=100, deadline=None)
    @given(st.floats(-50, 50), st.floats(-50, 50), bits_st)
    def test_from_range_zero_exact(self, a, b, n):
        q = QuantParams.from_range(min(a, b), max(a, b), n)
        tol = 1e-12 * (q.beta - q.alpha)
        assert q.alpha <= min(a, b, 0) + tol and q.beta >= max(a, b, 0) - tol
        assert q.eps <= (max(a, b, 0) - min(a, b, 0) + 1e-8) / (q.levels - 1) * (1 + 1e-9)
        assert dequantize(quantize(0.0, q), q) == pytest.approx(0.0, abs=1e-12)

    def test_from_range_tiny_positive_end(self):
        q = QuantParams.from_range(-1.0, 1e-190, 2)
        assert q.alpha <= -1.0 and q.beta >= 1e-190 and q.zero_point == 2

    def test_calibration_uses_global_range(self):
        obs = RangeObserver(momentum=None)
        for b in ([0.0, 1.0], [0.5, 3.0], [-2.0, 0.1]):
            obs.observe(np.array(b))
        assert (obs.lo, obs.hi) == (-2.0, 3.0)


class TestFakeQuant:
    def test_on_grid(self):
        q = QuantParams(0, 255, 8)
        t = np.array([0.0, 17.0, 255.0])
        np.testing.assert_array_equal(fake_quant(t, q)[0], t)

    def test_ste_mask(self):
        q = QuantParams(-1, 1, 4)
        _, mask = fake_quant(np.array([-2.0, -1.0, 0.3, 1.0, 1.5]), q)
        np.testing.assert_array_equal(mask, [0, 1, 1, 1, 0])

    def test_act_quant_gradient_in_range(self, rng):
        aq = ActQuant(8)
        x = rng.normal(size=(2, 3, 5))
        aq.forward(x)
        np.testing.assert_array_equal(aq.backward(np.ones_like(x)), np.ones_like(x))


class TestObserver:
    def test_single_batch(self):
        o = observe(RangeObserver(), np.array([-1.0, 0.5, 2.0]))
        assert (o.lo, o.hi) == (-1.0, 2.0)

    def test_frozen_errors(self):
        o = RangeObserver()
        o.observe(np.ones(3))
        o.freeze()
        with pytest.raises(QuantStateError):
            o.observe(np.ones(3))

    def test_constant_stream(self):
        o = RangeObserver()
        o.observe(np.array([0.0, 10.0]))
        for _ in range(3000):
            o.observe(np.full(4, 3.0))
        assert o.lo == pytest.approx(3.0, abs=1e-9) and o.hi == pytest.approx(3.0, abs=1e-9)

    def test_momentum(self):
        o = RangeObserver()
        o.observe(np.array([0.0, 1.0]))
        o.observe(np.array([-1.0, 3.0]))
        assert o.lo == pytest.approx(-0.01) and o.hi == pytest.approx(1.02)

    def test_unobserved(self):
        with pytest.raises(QuantStateError):
            RangeObserver().qparams(8)


class TestMixed:
    @pytest.mark.parametrize("bits", [2, 4, 8])
    def test_single_format_is_uniform(self, rng, bits):
        w = rng.normal(size=(3, 2, 5))
        x = rng.normal(size=(2, 2, 20))
        conv = Conv1d(2, 3, 5, weight=w.copy())
        aq = MixedActQuant((bits,), dtype=np.float64)
        y = edmips_forward(x, conv, MixedWeightQuant((bits,), dtype=np.float64), aq)
        wq = fake_quant(w, QuantParams.from_range(w.min(), w.max(), bits))[0]
        raw = np.stack([conv1d_forward(xi, wq) for xi in x])
        ref = fake_quant(raw, aq.observer.qparams(bits))[0]
        assert np.max(np.abs(y - ref)) <= 1e-6

    def test_one_hot_delta(self, rng):
        x = rng.normal(size=(4, 7))
        aq = MixedActQuant((2, 4, 8), delta=np.array([-60.0, -60.0, 60.0]), dtype=np.float64)
        y = aq.forward(x)
        ref = fake_quant(x, aq.observer.qparams(8))[0]
        assert np.max(np.abs(y - ref)) <= 1e-6

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-30, 30), min_size=1, max_size=5))
    def test_softmax_sums_to_one(self, v):
        assert abs(softmax(v).sum() - 1.0) <= 1e-7

    def test_weight_gamma_gradient(self, rng):
        w = rng.normal(size=(2, 2, 3))
        up = rng.normal(size=w.shape)
        g0 = rng.normal(size=3)

        def f(g):
            return float(np.sum(MixedWeightQuant(gamma=g, dtype=np.float64).forward(w) * up))

        wq = MixedWeightQuant(gamma=g0.copy(), dtype=np.float64)
        wq.forward(w)
        wq.backward(up)
        np.testing.assert_allclose(wq.grads["gamma"], finite_diff_grad(f, g0, 1e-6), rtol=1e-6,
                                   atol=1e-9)

    def test_softmax_backward(self, rng):
        v, d = rng.normal(size=4), rng.normal(size=4)
        num = finite_diff_grad(lambda u: float(softmax(u) @ d), v, 1e-6)
        np.testing.assert_allclose(softmax_backward(softmax(v), d), num, rtol=1e-6, atol=1e-10)


def _meta(n_w, n_a, formats=(2, 4, 8), gamma=None, delta=None):
    wq = MixedWeightQuant(formats, gamma, dtype=np.float64)
    aq = MixedActQuant(formats, delta, dtype=np.float64) if n_a else None
    return MetaLayer(wq, aq, n_w, n_a)


class TestCost:
    def test_single_int8(self):
        cost, _ = edmips_cost([_meta(100, 50, formats=(8,))])
        assert cost == 1200

    def test_uniform_softmax(self):
        cost, _ = edmips_cost([_meta(1, 0)])
        assert cost == pytest.approx(14 / 3)

    def test_monotone_in_int2(self):
        costs = [edmips_cost([_meta(10, 10, gamma=np.array([g, 0.0, 0.0]))])[0]
                 for g in (-2, 0, 1, 3)]
        assert all(a > b for a, b in zip(costs, costs[1:]))

    def test_gradient(self, rng):
        m = _meta(37, 11, gamma=rng.normal(size=3), delta=rng.normal(size=3))
        _, grads = edmips_cost([m])
        g0 = m.wq.gamma.copy()

        def f(g):
            m.wq.gamma[:] = g
            return edmips_cost([m])[0]

        num = finite_diff_grad(f, g0, 1e-5)
        m.wq.gamma[:] = g0
        rel = np.max(np.abs(num - grads[(id(m.wq), "gamma")])) / np.max(np.abs(num))
        assert rel < 1e-5


class TestAssign:
    def test_argmax(self):
        assert assign_precisions([_meta(1, 0, gamma=np.array([0.1, 0.9, 0.2]))]) == [(4, 8)]

    def test_tie_more_bits(self):
        m = _meta(1, 1, gamma=np.array([0.0, 1.0, 1.0]), delta=np.array([2.0, 2.0, 0.0]))
        assert assign_precisions([m]) == [(8, 4)]

    def test_single_format(self):
        m = _meta(1, 1, formats=(2,), gamma=np.array([5.0]), delta=np.array([-3.0]))
        assert assign_precisions([m]) == [(2, 2)]


def _windows(rng, n=48, t=64):
    x = rng.normal(size=(n, 4, t))
    y = 70 + 5 * x[:, 0, -4:].mean(axis=1)
    return WindowSet(x, y, np.array(["A"] * n, dtype=object))


class TestQAT:
    def test_fold_batchnorm(self, tiny_net64, rng):
        x = rng.normal(size=(6, 4, 64))
        folded = fold_batchnorm(tiny_net64)
        np.testing.assert_allclose(folded.forward(x), tiny_net64.forward(x), atol=1e-10)

    def test_fold_zero_variance(self, tiny_net64):
        next(l for l in tiny_net64.layers if hasattr(l, "running_var")).running_var[0] = 0.0
        with pytest.raises(ValueError):
            fold_batchnorm(tiny_net64)

    def test_layout(self, tiny_net64):
        q = prepare_qat(tiny_net64, bits=4)
        kinds = [type(l).__name__ for l in q.layers]
        assert kinds[0] == "ActQuant" and kinds[-1] == "ActQuant"
        assert not q.layers[-1].include_zero
        assert all(isinstance(l.weight_hook, WeightQuant) and l.weight_hook.n_bits == 4
                   for l in q.layers if hasattr(l, "weight_hook"))

    def test_error_grows_as_bits_shrink(self, tiny_net64, rng):
        ws = _windows(rng)
        ref = tiny_net64.forward(ws.inputs)
        errs = []
        for bits in (8, 4, 2):
            q, _ = qat_train(tiny_net64, ws, None, TrainConfig(epochs=0), bits=bits)
            errs.append(np.mean(np.abs(q.forward(ws.inputs) - ref)))
        assert errs[0] < errs[1] < errs[2]
        assert errs[0] < 0.1 * np.std(ref)

    def test_zero_epochs_is_ptq(self, tiny_net64, rng):
        ws = _windows(rng)
        q, trace = qat_train(tiny_net64, ws, ws, TrainConfig(epochs=0), bits=4)
        ref = prepare_qat(tiny_net64, bits=4)
        calibrate(ref, ws.inputs)
        assert trace == []
        np.testing.assert_array_equal(q.forward(ws.inputs), ref.forward(ws.inputs))

    def test_deterministic(self, rng):
        ws = _windows(rng)
        outs = []
        for _ in range(2):
            net = randomize_bn(build_seed(tiny_cfg(), seed=2), np.random.default_rng(0))
            q, trace = qat_train(net, ws, ws, TrainConfig(epochs=2, batch_size=16))
            outs.append((trace, q.forward(ws.inputs)))
        assert outs[0][0] == outs[1][0]
        np.testing.assert_array_equal(outs[0][1], outs[1][1])

    def test_observers_frozen_after_training(self, tiny_net64, rng):
        ws = _windows(rng)
        q, _ = qat_train(tiny_net64, ws, None, TrainConfig(epochs=1, batch_size=16))
        assert all(l.observer.frozen for l in q.layers
                   if isinstance(l, ActQuant) and l.observer is not None)

    def test_plan(self, tiny_net64):
        plan = QuantPlan([8, 4, 2, 8, 4, 2], [4, 4, 8, 2, 8, 8])
        q = prepare_qat(tiny_net64, plan=plan)
        hooks = [l.weight_hook.n_bits for l in q.layers if getattr(l, "weight_hook", None)]
        assert hooks == plan.weight_bits
        acts = [l.n_bits for l in q.layers if isinstance(l, ActQuant) and l.tied_to is None]
        assert acts == [8] + plan.act_bits[:-1] + [8]

    def test_mixed_meta_layers(self, tiny_net64):
        q = prepare_qat(tiny_net64, mixed=True)
        metas = meta_layers(q)
        assert len(metas) == 6
        assert metas[-1].aq is None and all(m.aq is not None for m in metas[:-1])
