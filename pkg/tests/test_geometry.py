import numpy as np
import pytest

from rand25d import kernels
from rand25d.autodiff import ShapeError, Tensor, finite_diff_check
from rand25d.geometry import (
    ConfigurationError,
    FiltrationBank,
    ProjectionStack,
    backproject,
    filtrate,
    finetune_head,
    mip_argmax,
    mip_project,
    mip_stack,
    rotate_volume,
    rotation_stencil,
    sum_project,
    sum_stack,
)


@pytest.fixture(params=kernels.available())
def backend(request):
    prev = kernels.backend()
    kernels.use(request.param)
    yield request.param
    kernels.use(prev)


def T(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad, dtype=np.float64)


def stack(angles, images, grad=False):
    return ProjectionStack(tuple(angles), T(images, grad))


def brute_rotate(vol, alpha):
    """Direct bilinear sampling with zero fill, one voxel at a time."""
    a, b, _ = vol.shape
    ca, cb = (a - 1) / 2, (b - 1) / 2
    t = np.deg2rad(alpha)
    c, s = np.cos(t), np.sin(t)
    out = np.zeros_like(vol)
    for i in range(a):
        for j in range(b):
            u, v = i - ca, j - cb
            sa, sb = ca + c * u - s * v, cb + s * u + c * v
            for fa, fb in ((sa, sb),):
                i0, j0 = int(np.floor(fa)), int(np.floor(fb))
                wa, wb = fa - i0, fb - j0
                for di, dj, wt in ((0, 0, (1 - wa) * (1 - wb)), (1, 0, wa * (1 - wb)),
                                   (0, 1, (1 - wa) * wb), (1, 1, wa * wb)):
                    ii, jj = i0 + di, j0 + dj
                    if 0 <= ii < a and 0 <= jj < b:
                        out[i, j] += wt * vol[ii, jj]
    return out


# --- rotation -----------------------------------------------------------------

def test_rotate_zero_is_identity():
    x = np.random.default_rng(0).random((5, 6, 3))
    np.testing.assert_array_equal(rotate_volume(x, 0.0), x)


def test_rotate_180_reverses_a_and_b():
    x = np.random.default_rng(1).random((7, 9, 3))
    np.testing.assert_array_equal(rotate_volume(x, 180.0), x[::-1, ::-1])


def test_rotate_90_index_mapping():
    n = 7
    x = np.random.default_rng(2).random((n, n, 4))
    out = rotate_volume(x, 90.0)
    expect = np.empty_like(x)
    for i in range(n):
        for j in range(n):
            expect[i, j] = x[n - 1 - j, i]
    np.testing.assert_array_equal(out, expect)


@pytest.mark.parametrize("alpha", [17.0, 33.5, 121.0, 250.0])
def test_rotate_matches_direct_sampling(alpha):
    x = np.random.default_rng(3).random((6, 8, 2))
    np.testing.assert_allclose(rotate_volume(x, alpha), brute_rotate(x, alpha), atol=1e-12)


def test_stencil_weights_are_partition_of_unity_inside():
    idx, w = rotation_stencil(15, 15, 27.0)
    sums = w.sum(axis=1).reshape(15, 15)
    assert np.allclose(sums[6:9, 6:9], 1.0)
    assert (sums <= 1 + 1e-12).all()


# --- MIP ---------------------------------------------------------------------

def test_mip_hand_example(backend):
    vol = np.array([[[1, 2], [3, 4]], [[5, 0], [0, 6]]], dtype=np.float64)
    np.testing.assert_array_equal(mip_project(vol, 0.0).data, [[5, 2], [3, 6]])


def test_mip_constant(backend):
    np.testing.assert_array_equal(mip_project(np.full((4, 5, 3), 2.5), 0.0).data, 2.5)


@pytest.mark.parametrize("alpha", [0.0, 23.0, 71.5, 90.0, 143.0])
def test_mip_periodicity_180(backend, alpha):
    x = np.random.default_rng(4).random((9, 11, 5))
    m0 = mip_project(x, alpha).data
    m1 = mip_project(x, alpha + 180.0).data
    np.testing.assert_array_equal(m1, m0[::-1])


@pytest.mark.parametrize("alpha", [0.0, 37.0, 115.0])
def test_mip_dominates_rotated_samples(backend, alpha):
    x = np.random.default_rng(5).random((8, 10, 4))
    mip = mip_project(x, alpha).data
    rot = rotate_volume(x, alpha)
    assert (mip[None] >= rot - 1e-6).all()
    np.testing.assert_allclose(mip, rot.max(axis=0), atol=1e-12)


def test_mip_argmax_is_depth_of_maximum(backend):
    x = np.random.default_rng(6).random((8, 9, 3))
    arg = mip_argmax(x, 40.0)
    np.testing.assert_array_equal(arg, rotate_volume(x, 40.0).argmax(axis=0))


@pytest.mark.parametrize("alpha", [0.0, 30.0, 66.0])
def test_mip_gradient_mass(backend, alpha):
    rng = np.random.default_rng(7)
    a, b, c = 11, 11, 4
    x = rng.random((a, b, c))
    g = rng.normal(size=(b, c))
    vol = T(x, grad=True)
    (mip_project(vol, alpha) * T(g)).sum().backward()
    arg = mip_argmax(x, alpha)
    _, w = rotation_stencil(a, b, alpha)
    wsum = w.sum(axis=1).reshape(a, b)
    expect = sum(g[j, k] * wsum[arg[j, k], j] for j in range(b) for k in range(c))
    assert abs(vol.grad.sum() - expect) <= 1e-5 * (abs(expect) + 1)


def test_mip_gradient_fd_off_tie(backend):
    rng = np.random.default_rng(8)
    w = T(rng.normal(size=(6, 3)))
    err = finite_diff_check(lambda v: (mip_project(v, 25.0) * w).sum(), rng.random((5, 6, 3)), h=1e-3)
    assert err < 1e-4


# --- ray sums and backprojection ---------------------------------------------------

def test_sum_constant(backend):
    np.testing.assert_array_equal(sum_project(np.ones((4, 3, 2)), 0.0).data, 4.0)


def test_backproject_single_angle_smears(backend):
    u = np.random.default_rng(9).random((5, 3))
    v = backproject(stack([0.0], u[None]), (4, 5, 3)).data
    for i in range(4):
        np.testing.assert_array_equal(v[i], u)


def test_backproject_two_orthogonal_angles(backend):
    n = 9
    v = backproject(stack([0.0, 90.0], np.ones((2, n, 3))), (n, n, 3)).data
    np.testing.assert_allclose(v[1:-1, 1:-1], 2.0, atol=1e-12)


def test_backproject_dims_mismatch(backend):
    with pytest.raises(ShapeError):
        backproject(stack([0.0], np.ones((1, 4, 3))), (4, 5, 3))


ADJOINT_ANGLES = [0.0, 22.5, 45.0, 67.5, 90.0, 112.5, 135.0, 157.5]


@pytest.mark.parametrize("alpha", ADJOINT_ANGLES)
def test_adjoint_identity(backend, alpha):
    rng = np.random.default_rng(int(alpha * 10))
    dims = (16, 24, 20)
    for _ in range(50):
        x = rng.normal(size=dims)
        u = rng.normal(size=dims[1:])
        lhs = float((sum_project(x, alpha).data * u).sum())
        rhs = float((x * backproject(stack([alpha], u[None]), dims).data).sum())
        assert abs(lhs - rhs) / (abs(lhs) + 1) < 1e-5


def test_backproject_linear(backend):
    rng = np.random.default_rng(10)
    angles = [0.0, 40.0, 100.0]
    u, v = rng.normal(size=(3, 7, 5)), rng.normal(size=(3, 7, 5))
    dims = (6, 7, 5)
    lhs = backproject(stack(angles, 2.0 * u - 0.5 * v), dims).data
    rhs = 2.0 * backproject(stack(angles, u), dims).data - 0.5 * backproject(stack(angles, v), dims).data
    np.testing.assert_allclose(lhs, rhs, rtol=1e-6, atol=1e-9)


def test_backproject_gradient(backend):
    rng = np.random.default_rng(11)
    w = T(rng.normal(size=(5, 6, 3)))
    err = finite_diff_check(
        lambda u: (backproject(ProjectionStack((10.0, 80.0), u), (5, 6, 3)) * w).sum(), rng.normal(size=(2, 6, 3)), h=1e-3
    )
    assert err < 1e-4


def test_sum_stack_gradient(backend):
    rng = np.random.default_rng(12)
    w = T(rng.normal(size=(2, 6, 3)))
    err = finite_diff_check(lambda v: (sum_stack(v, [15.0, 95.0]).images * w).sum(), rng.normal(size=(5, 6, 3)), h=1e-3)
    assert err < 1e-4


def test_backends_agree():
    if len(kernels.available()) < 2:
        pytest.skip("compiled kernels not built")
    x = np.random.default_rng(13).random((9, 12, 5))
    angles = [0.0, 13.0, 90.0, 151.0]
    results = {}
    for name in kernels.available():
        kernels.use(name)
        mip = mip_stack(x, angles)
        sums = sum_stack(x, angles).images.data
        bp = backproject(ProjectionStack(tuple(angles), Tensor(sums)), x.shape).data
        results[name] = (mip.images.data, sums, bp)
    kernels.use("cython")
    for got, want in zip(results["python"], results["cython"]):
        np.testing.assert_allclose(got, want, rtol=1e-6, atol=1e-6)


@pytest.mark.parametrize("workers", [2, 3])
def test_parallel_fanout_matches_sequential(workers):
    x = np.random.default_rng(14).random((8, 10, 4)).astype(np.float32)
    angles = [0.0, 20.0, 45.0, 110.0, 170.0]
    seq = mip_stack(x, angles).images.data
    par = mip_stack(x, angles, workers=workers).images.data
    np.testing.assert_array_equal(seq, par)
    s1 = backproject(ProjectionStack(tuple(angles), Tensor(seq)), x.shape).data
    s2 = backproject(ProjectionStack(tuple(angles), Tensor(seq)), x.shape, workers=workers).data
    # the reduction order is fixed, so worker count cannot change a single bit
    np.testing.assert_array_equal(s2, s1)
    grads = []
    for w in (1, workers):
        v = Tensor(x, requires_grad=True)
        (mip_stack(v, angles, workers=w).images.sum() + sum_stack(v, angles, workers=w).images.sum()).backward()
        grads.append(v.grad)
    np.testing.assert_array_equal(grads[0], grads[1])


# --- filtration ----------------------------------------------------------------

def bank(angles, filters, grad=False):
    return FiltrationBank(tuple(angles), T(filters, grad))


def test_filtrate_identity():
    imgs = np.random.default_rng(15).random((2, 5, 3))
    out = filtrate(stack([0.0, 90.0], imgs), FiltrationBank.identity([0.0, 90.0], np.float64))
    np.testing.assert_array_equal(out.images.data, imgs)


def test_filtrate_hand_average():
    img = np.array([0.0, 2.0, 0.0])[None, :, None]
    out = filtrate(stack([0.0], img), bank([0.0], [[0.5, 0.5]]))
    np.testing.assert_array_equal(out.images.data[0, :, 0], [1, 1, 0])


def test_filtrate_difference_annihilates_constants():
    out = filtrate(stack([0.0], np.full((1, 6, 4), 3.0)), bank([0.0], [[1.0, -1.0]])).images.data
    np.testing.assert_array_equal(out[0, :-1], 0.0)
    np.testing.assert_array_equal(out[0, -1], 3.0)


def test_filtrate_angle_mismatch():
    with pytest.raises(ConfigurationError):
        filtrate(stack([0.0, 45.0], np.ones((2, 3, 3))), FiltrationBank.identity([0.0, 90.0]))
    with pytest.raises(ConfigurationError):
        filtrate(stack([0.0, 45.0], np.ones((2, 3, 3))), FiltrationBank.identity([0.0]))


def test_filtrate_gradients():
    rng = np.random.default_rng(16)
    imgs, filt, w = rng.normal(size=(3, 5, 4)), rng.normal(size=(3, 2)), T(rng.normal(size=(3, 5, 4)))
    angles = (0.0, 60.0, 120.0)
    err_x = finite_diff_check(lambda x: (filtrate(ProjectionStack(angles, x), bank(angles, filt)).images * w).sum(), imgs, h=1e-3)
    err_w = finite_diff_check(
        lambda f: (filtrate(stack(angles, imgs), FiltrationBank(angles, f)).images * w).sum(), filt, h=1e-3
    )
    assert err_x < 1e-4 and err_w < 1e-4


# --- fine-tuning head -------------------------------------------------------------

def test_finetune_head_zero_input():
    out = finetune_head(T(np.zeros((3, 4, 5))), T([1.0]), T([0.0])).data
    np.testing.assert_array_equal(out, 0.5)


def test_finetune_head_cancels_shift():
    out = finetune_head(T(np.full((3, 4, 5), 6.0)), T([1.0]), T([-6.0])).data
    np.testing.assert_allclose(out, 0.5, atol=1e-15)


def test_finetune_head_monotone():
    rng = np.random.default_rng(17)
    x = rng.normal(size=(4, 5, 6))
    base = finetune_head(T(x), T([0.8]), T([0.1])).data
    for _ in range(10):
        y = x.copy()
        y[tuple(rng.integers(0, s) for s in x.shape)] += rng.uniform(0.1, 2.0)
        assert (finetune_head(T(y), T([0.8]), T([0.1])).data >= base).all()
    assert ((base > 0) & (base < 1)).all()
