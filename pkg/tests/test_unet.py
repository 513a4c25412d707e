import numpy as np
import pytest

from rand25d.autodiff import Tensor
from rand25d.metrics import dice_loss
from rand25d.unet import UNetConfig, build_unet, param_count, unet_forward

from conftest import fd_over_seeds


def test_param_count_hand_enumeration():
    # down: 1->1 (9+1), 1->1 (9+1); bottom: 1->2 (18+2), 2->2 (36+2)
    # up: concat 2+1 -> 1 (27+1), 1->1 (9+1); head 1x1: 1+1
    hand = 10 + 10 + 20 + 38 + 28 + 10 + 2
    cfg = UNetConfig(depth=1, base_channels=1)
    assert hand == 118
    assert param_count(cfg) == hand
    assert build_unet(cfg, 0).count() == hand


@pytest.mark.parametrize("depth", [1, 2, 3])
@pytest.mark.parametrize("base", [1, 4, 8])
@pytest.mark.parametrize("upconv", [False, True])
def test_param_count_matches_built_model(depth, base, upconv):
    cfg = UNetConfig(depth=depth, base_channels=base, upconv=upconv)
    assert build_unet(cfg, 0).count() == param_count(cfg)


def test_param_count_monotone_in_base():
    counts = [param_count(UNetConfig(depth=3, base_channels=b)) for b in range(1, 10)]
    assert all(b > a for a, b in zip(counts, counts[1:]))


def test_doubling_base_scales_weights_by_four():
    def conv_weights(cfg):
        m = build_unet(cfg, 0)
        return sum(t.data.size for n, t in m.named_parameters() if n.endswith(".weight") and not n.startswith("head"))

    for depth in (1, 2, 3):
        w1 = conv_weights(UNetConfig(depth=depth, base_channels=4))
        w2 = conv_weights(UNetConfig(depth=depth, base_channels=8))
        # only the first conv, with a single input channel, scales linearly
        first = 9 * 4
        assert w2 == 4 * (w1 - first) + 2 * first


def test_same_seed_same_params():
    cfg = UNetConfig(depth=2, base_channels=3)
    a, b = build_unet(cfg, 7), build_unet(cfg, 7)
    for (na, ta), (nb, tb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb
        np.testing.assert_array_equal(ta.data, tb.data)


def test_different_seeds_differ():
    cfg = UNetConfig(depth=2, base_channels=3)
    a, b = build_unet(cfg, 1), build_unet(cfg, 2)
    assert not np.array_equal(a.params["down0.conv1.weight"].data, b.params["down0.conv1.weight"].data)


def test_init_law_is_fan_in_uniform():
    m = build_unet(UNetConfig(depth=3, base_channels=8), 0)
    w = m.params["down1.conv2.weight"].data
    bound = 1 / np.sqrt(16 * 9)
    assert np.abs(w).max() <= bound
    assert abs(w.mean()) < 0.1 * bound
    assert (m.params["down1.conv2.bias"].data == 0).all()


def test_zero_weights_give_one_half():
    m = build_unet(UNetConfig(depth=2, base_channels=2), 0)
    for t in m.parameters():
        t.data[...] = 0
    out = unet_forward(m, Tensor(np.random.default_rng(0).random((16, 12)).astype(np.float32)))
    np.testing.assert_array_equal(out.data, 0.5)


@pytest.mark.parametrize("shape", [(37, 22), (8, 8), (9, 31)])
def test_shape_preserved_and_range(shape):
    m = build_unet(UNetConfig(depth=3, base_channels=2), 0)
    out = unet_forward(m, Tensor(np.random.default_rng(1).random(shape).astype(np.float32)))
    assert out.shape == shape
    assert ((out.data > 0) & (out.data < 1)).all()


def test_batched_matches_single():
    m = build_unet(UNetConfig(depth=2, base_channels=2), 3)
    x = np.random.default_rng(2).random((3, 1, 12, 20)).astype(np.float32)
    batched = unet_forward(m, Tensor(x)).data
    for n in range(3):
        np.testing.assert_allclose(batched[n], unet_forward(m, Tensor(x[n])).data, rtol=1e-5, atol=1e-6)


def test_forward_is_pure():
    m = build_unet(UNetConfig(depth=2, base_channels=2), 3)
    x = Tensor(np.random.default_rng(3).random((10, 14)).astype(np.float32))
    np.testing.assert_array_equal(unet_forward(m, x).data, unet_forward(m, x).data)


@pytest.mark.parametrize("upconv", [False, True])
@pytest.mark.parametrize("name", ["down0.conv2.weight", "bottom.conv1.weight", "up0.conv1.bias", "head.weight"])
def test_dice_through_unet_gradient(name, upconv):
    def case(rng):
        m = build_unet(UNetConfig(depth=1, base_channels=2, upconv=upconv), int(rng.integers(1 << 30)), dtype=np.float64)
        for t in m.parameters():
            t.data[...] += rng.normal(scale=0.1, size=t.shape)
        img = Tensor(rng.random((6, 5)), dtype=np.float64)
        y = (rng.random((6, 5)) < 0.3).astype(np.float64)

        def f(w):
            m.params[name] = w
            return dice_loss(y, unet_forward(m, img))

        return f, m.params[name].data.copy()

    errs = fd_over_seeds(case, range(40), need=3)
    assert max(errs) < 1e-4
