import numpy as np
import pytest
from scipy import stats
from scipy.ndimage import distance_transform_edt

from rand25d.geometry import ConfigurationError, FiltrationBank, mip_stack
from rand25d.metrics import dice_loss, joint_loss
from rand25d.optim import Adam, AdamState, adam_step
from rand25d.phantom import PhantomSpec, generate_phantom
from rand25d.pipeline import (
    build_model25d,
    forward_path1,
    forward_path2,
    make_angle_grid,
    path1_blocks,
    path2_segmentations,
    predict,
    sample_path1_angles,
)
from rand25d.unet import UNetConfig

from conftest import fd_over_seeds

TINY = UNetConfig(depth=1, base_channels=2)


# --- angle grid and block sampling ----------------------------------------------

def test_grid_m60():
    assert make_angle_grid(60).angles == tuple(float(3 * k) for k in range(60))


def test_grid_small_cases():
    assert make_angle_grid(1).angles == (0.0,)
    assert make_angle_grid(5).angles == (0.0, 36.0, 72.0, 108.0, 144.0)


def test_grid_rejects_zero():
    with pytest.raises(ConfigurationError):
        make_angle_grid(0)


def test_p2_one_angle_per_half():
    rng = np.random.default_rng(0)
    for _ in range(50):
        lo, hi = sample_path1_angles(2, 60, rng)
        assert 0 <= lo < 90 <= hi < 180


def test_p_equals_m_is_full_grid():
    rng = np.random.default_rng(1)
    assert sample_path1_angles(12, 12, rng) == list(make_angle_grid(12).angles)


def test_sampling_deterministic_per_seed():
    a = sample_path1_angles(12, 60, np.random.default_rng(5))
    b = sample_path1_angles(12, 60, np.random.default_rng(5))
    assert a == b


def test_empty_block_rejected():
    with pytest.raises(ConfigurationError):
        path1_blocks(12, 6)
    with pytest.raises(ConfigurationError):
        path1_blocks(7, 60)


def test_block_coverage_and_uniformity():
    rng = np.random.default_rng(2)
    grid = make_angle_grid(60).angles
    counts = dict.fromkeys(grid, 0)
    for _ in range(1000):
        angles = sample_path1_angles(12, 60, rng)
        assert angles == sorted(angles)
        blocks = [int(a // 15) for a in angles]
        assert blocks == list(range(12))
        for a in angles:
            counts[a] += 1
    obs = np.array([counts[a] for a in grid]).reshape(12, 5)
    assert (obs.sum(axis=1) == 1000).all()
    # one pooled test: 60 cells, expected 200 each, one constraint per block
    chi2 = float(((obs - 200.0) ** 2 / 200.0).sum())
    assert stats.chi2.sf(chi2, df=60 - 12) > 0.01


# --- forward paths -------------------------------------------------------------

def _model(p=2, m=4, dtype=np.float64, seed=0):
    return build_model25d(TINY, p, m, seed, dtype)


def _vol(seed=0, shape=(6, 8, 8)):
    return np.random.default_rng(seed).random(shape)


def test_path_outputs_shape_and_range():
    model = _model()
    x = _vol()
    for out in (forward_path1(model, x, [0.0, 90.0]), forward_path2(model, x)):
        assert out.shape == x.shape
        assert ((out.data > 0) & (out.data < 1)).all()


def test_path1_constant_half_probability():
    model = _model(p=2, m=4)
    for t in model.unet.parameters():
        t.data[...] = 0
    model.head1[0].data[...] = 1.3
    model.head1[1].data[...] = -0.4
    out = forward_path1(model, _vol(shape=(8, 8, 6)), [0.0, 90.0]).data
    # angles 0 and 90 are lattice maps, so every voxel sees two 0.5 samples
    expect = 1 / (1 + np.exp(-(1.3 * 1.0 - 0.4)))
    np.testing.assert_allclose(out, expect, rtol=1e-12)


def test_path1_gradient_full_composition():
    def case(rng):
        model = build_model25d(TINY, 2, 4, int(rng.integers(1 << 30)), np.float64)
        for t in model.unet.parameters():
            t.data[...] += rng.normal(scale=0.2, size=t.shape)
        model.bank_p.weights.data[...] = rng.normal(1.0, 0.2, size=(2, 2))
        y = (rng.random((6, 8, 8)) < 0.2).astype(np.float64)
        angles = [float(rng.choice([0.0, 45.0])), float(rng.choice([90.0, 135.0]))]
        return (lambda v: dice_loss(y, forward_path1(model, v, angles))), rng.random((6, 8, 8))

    errs = fd_over_seeds(case, range(60), need=2)
    assert max(errs) < 1e-4


def test_path1_gradient_wrt_filters_and_head():
    rng = np.random.default_rng(3)
    model = _model()
    x = _vol(3)
    y = (rng.random(x.shape) < 0.2).astype(np.float64)
    angles = [30.0, 120.0]

    def via_bank(w):
        model.bank_p = FiltrationBank(model.bank_p.angles, w)
        return dice_loss(y, forward_path1(model, x, angles))

    def via_shift(s):
        model.head1 = (model.head1[0], s)
        return dice_loss(y, forward_path1(model, x, angles))

    errs = fd_over_seeds(lambda r: (via_bank, r.normal(1, 0.3, (2, 2))), range(5), need=1)
    errs += fd_over_seeds(lambda r: (via_shift, np.array([r.normal(-1, 0.3)])), range(5), need=1)
    assert max(errs) < 1e-4


def test_stop_gradient_with_c_zero():
    model = _model(dtype=np.float32)
    x = _vol(4).astype(np.float32)
    y = (x > 0.8).astype(np.uint8)
    y_aux = forward_path1(model, x, [10.0, 100.0])
    y_hat = forward_path2(model, x)
    joint_loss(y, y_hat, y_aux, 0.0).backward()
    for name, t in model.unet.named_parameters():
        assert not np.any(t.grad), name
    assert np.any(model.bank_m.weights.grad) and np.any(model.head2[1].grad)
    assert not np.any(model.bank_p.weights.grad)


def test_path2_term_adds_nothing_to_unet():
    x = _vol(5).astype(np.float32)
    y = (x > 0.8).astype(np.uint8)
    grads = []
    for c in (0.3, 1.0):
        model = _model(dtype=np.float32)
        y_aux = forward_path1(model, x, [10.0, 100.0])
        y_hat = forward_path2(model, x)
        (joint_loss(y, y_hat, y_aux, c) * (0.3 / c)).backward()
        grads.append({n: t.grad.copy() for n, t in model.unet.named_parameters()})
    for n in grads[0]:
        np.testing.assert_allclose(grads[0][n], grads[1][n], rtol=1e-5, atol=1e-9)


def test_path2_segmentations_are_detached():
    segs = path2_segmentations(_model(), _vol())
    assert not segs.images.requires_grad


def test_path2_rejects_foreign_grid():
    with pytest.raises(ConfigurationError):
        forward_path2(_model(m=4), _vol(), theta=make_angle_grid(5))


@pytest.mark.parametrize("seed", range(5))
def test_true_masks_separate_foreground(seed):
    spec = PhantomSpec(dims=(16, 16, 16), n_target_vessels=1, n_distractors=1,
                       target_radius=(1.5, 2.0), distractor_radius=(2.0, 2.5), foreground_budget=0.05)
    scan, mask = generate_phantom(spec, np.random.default_rng(seed))
    model = build_model25d(TINY, 4, 20, 0, np.float64)
    segs = mip_stack(mask.astype(np.float64), model.bank_m.angles)
    logits = forward_path2(model, scan, segs=segs, logits=True).data
    # pure background: farther than the pooling and interpolation reach from any label
    pure_bg = distance_transform_edt(mask == 0) > 3
    assert logits[mask == 1].min() > logits[pure_bg].max()


def test_predict_matches_path2():
    model = _model(dtype=np.float32)
    x = _vol(6).astype(np.float32)
    np.testing.assert_array_equal(predict(model, x), forward_path2(model, x).data)


# --- Adam ----------------------------------------------------------------------

def test_adam_zero_gradient_no_move():
    p = [np.array([1.5, -2.0])]
    adam_step(p, [np.zeros(2)], AdamState(), 1e-3)
    np.testing.assert_array_equal(p[0], [1.5, -2.0])


def test_adam_first_step_moves_by_lr():
    p = [np.array([0.0])]
    adam_step(p, [np.array([1.0])], AdamState(), 1e-3)
    assert p[0][0] == pytest.approx(-1e-3, rel=1e-6)


def test_adam_two_steps_differ_from_one_double_step():
    a, b = [np.array([0.0])], [np.array([0.0])]
    sa = AdamState()
    adam_step(a, [np.array([1.0])], sa, 1e-3)
    adam_step(a, [np.array([3.0])], sa, 1e-3)
    adam_step(b, [np.array([4.0])], AdamState(), 2e-3)
    assert a[0][0] != pytest.approx(b[0][0], rel=1e-3)
    assert sa.t == 2


def test_adam_hand_evaluated_second_step():
    p = [np.array([0.0])]
    s = AdamState()
    adam_step(p, [np.array([1.0])], s, 0.1)
    adam_step(p, [np.array([-1.0])], s, 0.1)
    m1, v1 = 0.1, 0.001
    step1 = 0.1 * (m1 / 0.1) / (np.sqrt(v1 / 0.001) + 1e-8)
    m2, v2 = 0.9 * m1 - 0.1, 0.999 * v1 + 0.001
    step2 = 0.1 * (m2 / (1 - 0.9**2)) / (np.sqrt(v2 / (1 - 0.999**2)) + 1e-8)
    assert p[0][0] == pytest.approx(-step1 - step2, rel=1e-12)


def test_adam_single_instance_over_model():
    model = _model()
    opt = Adam(model.parameters(), 1e-3)
    assert len(opt.params) == len(model.named_parameters())
    assert len({id(t) for t in opt.params}) == len(opt.params)
