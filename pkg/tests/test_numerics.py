import math

import numpy as np
import pytest

from qppg.numerics import Rng64, finite_diff_grad, next_u64, rand_normal


class TestSplitMix:
    def test_known_first_output(self):
        assert next_u64(Rng64(0)) == 0xE220A8397B1DCDAF

    def test_bulk_matches_scalar_stream(self):
        a, b = Rng64(99), Rng64(99)
        bulk = a.u64_array(50)
        assert [int(v) for v in bulk] == [b.next_u64() for _ in range(50)]
        assert a.state == b.state

    def test_same_seed_same_stream(self):
        assert np.array_equal(Rng64(7).normal((100,)), Rng64(7).normal((100,)))
        assert not np.array_equal(Rng64(7).normal((100,)), Rng64(8).normal((100,)))

    def test_uniform_range(self):
        u = Rng64(1).uniform(100000)
        assert u.min() > 0.0 and u.max() <= 1.0
        assert abs(u.mean() - 0.5) < 0.01

    def test_normal_moments(self):
        z = Rng64(2).normal((200000,))
        assert abs(z.mean()) < 0.01
        assert abs(z.std() - 1.0) < 0.01
        assert math.isfinite(rand_normal(Rng64(3)))

    def test_permutation_is_permutation(self):
        p = Rng64(4).permutation(1000)
        assert sorted(p.tolist()) == list(range(1000))

    def test_spawn_independent(self):
        r = Rng64(5)
        c1, c2 = r.spawn(), r.spawn()
        assert c1.next_u64() != c2.next_u64()


class TestFiniteDiff:
    def test_quadratic(self):
        a = np.array([[2.0, 0.5], [0.5, 1.0]])
        x0 = np.array([0.3, -1.2])
        g = finite_diff_grad(lambda x: 0.5 * x @ a @ x, x0)
        np.testing.assert_allclose(g, a @ x0, rtol=1e-8)

    def test_rejects_bad_step(self):
        with pytest.raises(ValueError):
            finite_diff_grad(lambda x: float(x.sum()), np.zeros(2), h=0.0)
