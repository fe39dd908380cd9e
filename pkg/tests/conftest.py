import numpy as np
import pytest

from qppg.tcn import SeedConfig, build_seed


def tiny_cfg(channels=(4, 6), strides=(1, 2), fc=(8, 1), t=64, k=9):
    return SeedConfig(block_channels=channels, block_last_strides=strides, fc_sizes=fc,
                      input=(4, t), conv_k=k, layers_per_block=2)


def randomize_bn(net, rng):
    from qppg.tcn import BatchNorm
    for layer in net.layers:
        if isinstance(layer, BatchNorm):
            c = layer.channels
            layer.gamma[:] = rng.uniform(0.5, 1.5, c)
            layer.beta[:] = rng.normal(size=c) * 0.3
            layer.running_mean[:] = rng.normal(size=c) * 0.3
            layer.running_var[:] = rng.uniform(0.5, 2.0, c)
    return net


@pytest.fixture
def tiny_net64():
    rng = np.random.default_rng(3)
    net = build_seed(tiny_cfg(), seed=5).astype(np.float64)
    return randomize_bn(net, rng)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
