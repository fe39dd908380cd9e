import itertools

import numpy as np
import pytest

from _oracles import conv_reference
from conftest import randomize_bn, tiny_cfg
from qppg.nas_dilation import (DilationGates, GateConfigError, attach_gates, dilation_of,
                               extract_dilation, gate_binarize, masked_conv_forward, n_gates,
                               pit_cost, ste_pass, surrogate_taps, tap_mask)
from qppg.numerics import finite_diff_grad
from qppg.tcn import Conv1d, build_seed, conv1d_forward


def _alive(bits, k=9):
    return set(np.flatnonzero(tap_mask(bits, k)).tolist())


class TestGates:
    def test_binarize(self):
        np.testing.assert_array_equal(gate_binarize([0.9, 0.2, 0.7]), [1, 0, 1])
        np.testing.assert_array_equal(gate_binarize([0.5, 1.0, 3.0]), [1, 1, 1])

    def test_ste_window(self):
        np.testing.assert_array_equal(ste_pass([-0.1, 0.0, 0.5, 1.0, 1.2]), [0, 1, 1, 1, 0])

    def test_n_gates(self):
        assert [n_gates(k) for k in (3, 5, 9, 17)] == [1, 2, 3, 4]
        for k in (1, 2, 4, 8, 10):
            with pytest.raises(GateConfigError):
                n_gates(k)

    def test_tap_sets(self):
        assert _alive((1, 1, 1)) == set(range(9))
        assert _alive((0, 1, 1)) == {0, 2, 4, 6, 8}
        assert _alive((1, 0, 1)) == {0, 4, 8}
        assert _alive((0, 0, 1)) == {0, 4, 8}
        for b1, b2 in itertools.product((0, 1), repeat=2):
            assert _alive((b1, b2, 0)) == {0, 8}
            assert dilation_of((b1, b2, 0)) == 8

    @pytest.mark.parametrize("k", [3, 5, 9, 17])
    def test_all_configs_regular(self, k):
        h = n_gates(k)
        for bits in itertools.product((0, 1), repeat=h):
            d = dilation_of(bits)
            assert _alive(bits, k) == set(range(0, k, d))


class TestMaskedConv:
    def test_all_ones(self, rng):
        conv = Conv1d(3, 2, 9, weight=rng.normal(size=(2, 3, 9)))
        x = rng.normal(size=(3, 40))
        np.testing.assert_array_equal(masked_conv_forward(x, conv, DilationGates(9, np.ones(3))),
                                      conv1d_forward(x, conv.weight))

    @pytest.mark.parametrize("bits,d", [((0, 1, 1), 2), ((1, 0, 1), 4), ((0, 0, 0), 8)])
    def test_equals_dilated(self, rng, bits, d):
        conv = Conv1d(3, 2, 9, weight=rng.normal(size=(2, 3, 9)))
        x = rng.normal(size=(3, 40))
        y = masked_conv_forward(x, conv, DilationGates(9, np.array(bits, float)))
        ref = conv_reference(x, conv.weight[:, :, ::d], d, 1)
        np.testing.assert_allclose(y, ref, atol=1e-12)

    def test_wrong_kernel(self, rng):
        conv = Conv1d(1, 1, 8, weight=rng.normal(size=(1, 1, 8)))
        with pytest.raises(GateConfigError):
            masked_conv_forward(rng.normal(size=(1, 10)), conv, DilationGates(9))


class TestCost:
    def test_all_ones(self):
        assert surrogate_taps(np.ones(3), 9)[0] == 9.0

    def test_alive_count(self):
        assert surrogate_taps(np.array([0.0, 1.0, 1.0]), 9)[0] == 5.0

    def test_gradient(self, rng):
        th = rng.uniform(0.05, 0.95, 3)
        num = finite_diff_grad(lambda t: surrogate_taps(t, 9)[0], th, 1e-6)
        np.testing.assert_allclose(surrogate_taps(th, 9)[1], num, rtol=1e-6)

    def test_layer_weight(self):
        net = build_seed(tiny_cfg())
        gated = attach_gates(net)
        cost, _ = pit_cost(gated)
        assert cost == pytest.approx(9 * sum(g.weight for g in gated))


class TestExtract:
    def test_identity(self, rng):
        net = build_seed(tiny_cfg())
        attach_gates(net)
        small = extract_dilation(net)
        assert all(l.k == 9 and l.d == 1 for l in small.layers if isinstance(l, Conv1d))

    def test_kernel_shrinks(self):
        net = build_seed(tiny_cfg())
        gated = attach_gates(net)
        gated[0].gates.theta[:] = [0, 0, 1]
        gated[1].gates.theta[:] = [1, 1, 0]
        small = extract_dilation(net)
        convs = [l for l in small.layers if isinstance(l, Conv1d)]
        assert (convs[0].d, convs[0].k) == (4, 3)
        assert (convs[1].d, convs[1].k) == (8, 2)

    @pytest.mark.parametrize("seed", range(3))
    def test_outputs_equal(self, seed):
        rng = np.random.default_rng(seed)
        net = randomize_bn(build_seed(tiny_cfg(), seed=seed).astype(np.float64), rng)
        for g in attach_gates(net):
            g.gates.theta[:] = rng.random(3)
        small = extract_dilation(net)
        x = rng.normal(size=(100, 4, 64))
        assert np.max(np.abs(small.forward(x) - net.forward(x))) <= 1e-12

    def test_theta_gradient_product_rule(self, rng):
        g = DilationGates(9, np.array([0.7, 0.3, 0.9]), dtype=np.float64)
        w = rng.normal(size=(2, 2, 9))
        g.forward(w)
        up = rng.normal(size=w.shape)
        g.backward(up)
        # the tap mask is multilinear in the binary gates, so differencing it is exact
        dbeta = np.einsum("mlj,mlj->j", up, w)
        num = finite_diff_grad(lambda b: float(tap_mask(b, 9) @ dbeta), np.array([1.0, 0.0, 1.0]), 0.5)
        np.testing.assert_allclose(g.grads["theta"], num, atol=1e-12)
        np.testing.assert_allclose(num, [0.0, dbeta[1::2].sum() + dbeta[2] + dbeta[6], dbeta[4]],
                                   atol=1e-12)
