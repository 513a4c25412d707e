"""Rotation, projections, per-angle filtration and backprojection.

Volumes are (a, b, c) arrays. Rotation turns the (a, b) plane about the
c-axis around the grid centre, so every projection along ``a`` is a (b, c)
image. Rotated samples are bilinear in (a, b) and read 0 outside the grid.

Backprojection is the exact adjoint of :func:`sum_project`: each image is
smeared back along ``a`` and pushed through the transposed bilinear rotation.
"""
from __future__ import annotations

import functools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import sparse

from . import kernels
from .autodiff import (
    ShapeError,
    Tensor,
    affine_scalar,
    avgpool3d_same,
    make_result,
    record_branch,
    sigmoid,
)


class ConfigurationError(ValueError):
    """Raised for inconsistent run or model configuration."""


@dataclass(frozen=True)
class AngleSet:
    angles: tuple[float, ...]

    @property
    def m(self) -> int:
        return len(self.angles)

    def __iter__(self):
        return iter(self.angles)

    def __len__(self) -> int:
        return len(self.angles)


@dataclass
class ProjectionStack:
    """Images (P, b, c) index-aligned with their projection angles."""

    angles: tuple[float, ...]
    images: Tensor

    def __post_init__(self):
        self.angles = tuple(float(x) for x in self.angles)
        if self.images.data.ndim != 3 or self.images.shape[0] != len(self.angles):
            raise ShapeError(
                f"stack of {len(self.angles)} angles needs images (P,b,c), got {self.images.shape}"
            )


@dataclass
class FiltrationBank:
    """One trainable 1x2 filter per projection slot, weights shaped (P, 2)."""

    angles: tuple[float, ...]
    weights: Tensor

    @classmethod
    def identity(cls, angles: Sequence[float], dtype=np.float32) -> FiltrationBank:
        w = np.zeros((len(angles), 2), dtype=dtype)
        w[:, 0] = 1
        return cls(tuple(float(x) for x in angles), Tensor(w, requires_grad=True, dtype=dtype))

    def __len__(self) -> int:
        return self.weights.shape[0]


def as_volume(x, dtype=np.float32, kind: str = "scan") -> np.ndarray:
    """Validate a raw array as a volume; scans must be non-negative."""
    arr = np.ascontiguousarray(x, dtype=dtype)
    if arr.ndim != 3 or min(arr.shape) < 1:
        raise ShapeError(f"a volume needs three positive extents, got {arr.shape}")
    if kind == "scan" and (arr < 0).any():
        raise ValueError("scan intensities must be non-negative")
    if kind in ("mask", "prob") and ((arr < 0) | (arr > 1)).any():
        raise ValueError(f"{kind} volume values must lie in [0, 1]")
    return arr


# ----------------------------------------------------------------------------
# rotation stencil


def cos_sin_deg(alpha: float) -> tuple[float, float]:
    """cos/sin of a degree angle, exact at multiples of 90 and 180-antisymmetric."""
    t = math.fmod(float(alpha), 360.0)
    if t < 0:
        t += 360.0
    flip = t >= 180.0
    if flip:
        t -= 180.0
    exact = {0.0: (1.0, 0.0), 90.0: (0.0, 1.0)}
    c, s = exact.get(t) or (math.cos(math.radians(t)), math.sin(math.radians(t)))
    return (-c, -s) if flip else (c, s)


def _snap(x: np.ndarray) -> np.ndarray:
    r = np.round(x)
    return np.where(np.abs(x - r) < 1e-9, r, x)


@functools.lru_cache(maxsize=512)
def _stencil64(a: int, b: int, alpha: float) -> tuple[np.ndarray, np.ndarray]:
    c, s = cos_sin_deg(alpha)
    ca, cb = (a - 1) / 2.0, (b - 1) / 2.0
    u = np.arange(a, dtype=np.float64)[:, None] - ca
    v = np.arange(b, dtype=np.float64)[None, :] - cb
    sa = _snap(ca + c * u - s * v)
    sb = _snap(cb + s * u + c * v)
    i0 = np.floor(sa)
    j0 = np.floor(sb)
    fa = sa - i0
    fb = sb - j0
    idx = np.zeros((a, b, 4), dtype=np.intp)
    w = np.zeros((a, b, 4), dtype=np.float64)
    corners = ((0, 0, (1 - fa) * (1 - fb)), (1, 0, fa * (1 - fb)), (0, 1, (1 - fa) * fb), (1, 1, fa * fb))
    for n, (di, dj, wt) in enumerate(corners):
        ii = (i0 + di).astype(np.intp)
        jj = (j0 + dj).astype(np.intp)
        inside = (ii >= 0) & (ii < a) & (jj >= 0) & (jj < b) & (wt > 0)
        idx[..., n] = np.where(inside, ii * b + jj, 0)
        w[..., n] = np.where(inside, wt, 0.0)
    idx = idx.reshape(a * b, 4)
    w = w.reshape(a * b, 4)
    idx.flags.writeable = False
    w.flags.writeable = False
    return idx, w


@functools.lru_cache(maxsize=512)
def _stencil(a: int, b: int, alpha: float, dtype: str) -> tuple[np.ndarray, np.ndarray]:
    idx, w = _stencil64(a, b, alpha)
    w = np.ascontiguousarray(w, dtype=dtype)
    w.flags.writeable = False
    return idx, w


def rotation_stencil(a: int, b: int, alpha: float, dtype=np.float64) -> tuple[np.ndarray, np.ndarray]:
    """Source rows and bilinear weights, each (a*b, 4), for a rotation by ``alpha``."""
    return _stencil(int(a), int(b), float(alpha), np.dtype(dtype).str)


def _rotation_operator(a: int, b: int, alpha: float, dtype) -> sparse.csr_matrix:
    idx, w = rotation_stencil(a, b, alpha, dtype)
    rows = np.repeat(np.arange(a * b), 4)
    return sparse.csr_matrix((w.ravel(), (rows, idx.ravel())), shape=(a * b, a * b))


def rotate_volume(vol, alpha: float):
    """Rotate in the (a, b) plane by ``alpha`` degrees; accepts arrays or Tensors."""
    if not isinstance(vol, Tensor):
        arr = np.asarray(vol)
        out = rotate_volume(Tensor(arr, dtype=arr.dtype if arr.dtype in (np.float32, np.float64) else None), alpha)
        return out.data
    a, b, c = vol.shape
    op = _rotation_operator(a, b, alpha, vol.dtype)
    out = (op @ vol.data.reshape(a * b, c)).reshape(a, b, c).astype(vol.dtype, copy=False)

    def _back(g):
        return ((op.T @ g.reshape(a * b, c)).reshape(a, b, c).astype(g.dtype, copy=False),)

    return make_result(out, (vol,), _back, "rotate")


# ----------------------------------------------------------------------------
# projections and backprojection


def _map(fn, items, workers: int):
    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def _accumulate(fn, items, shape, dtype, workers: int) -> np.ndarray:
    """Sum per-item contributions.

    Every item fills a private buffer and the buffers are added in item order,
    with or without workers, so the result does not depend on the worker count.
    """
    def private(x):
        buf = np.zeros(shape, dtype=dtype)
        fn(x, buf)
        return buf

    total = np.zeros(shape, dtype=dtype)
    if workers > 1 and len(items) > 1:
        for buf in _map(private, items, workers):
            total += buf
    else:
        for x in items:
            total += private(x)
    return total


def _vol_tensor(vol) -> Tensor:
    if isinstance(vol, Tensor):
        if vol.data.ndim != 3:
            raise ShapeError(f"expected a volume (a,b,c), got {vol.shape}")
        return vol
    arr = np.asarray(vol)
    return Tensor(as_volume(arr, dtype=np.float64 if arr.dtype == np.float64 else np.float32, kind="any"))


def mip_stack(vol, angles: Sequence[float], workers: int = 1) -> ProjectionStack:
    """Maximum intensity projections along ``a`` after rotating by each angle."""
    vol = _vol_tensor(vol)
    a, b, c = vol.shape
    dt = vol.dtype
    vol2 = np.ascontiguousarray(vol.data.reshape(a * b, c))
    angles = tuple(float(x) for x in angles)
    k = kernels.impl()

    def fwd(alpha):
        idx, w = rotation_stencil(a, b, alpha, dt)
        return k.project_max(vol2, idx, w, a, b)

    results = _map(fwd, angles, workers)
    imgs = np.stack([r[0] for r in results]).astype(dt, copy=False)
    args = [r[1] for r in results]
    for arg in args:
        record_branch(arg)

    def _back(g):
        def adj(item, out):
            p, alpha = item
            idx, w = rotation_stencil(a, b, alpha, dt)
            k.max_adjoint(np.ascontiguousarray(g[p]), args[p], idx, w, b, out)

        gv = _accumulate(adj, list(enumerate(angles)), (a * b, c), g.dtype, workers)
        return (gv.reshape(a, b, c),)

    out = make_result(imgs, (vol,), _back, "mip")
    return ProjectionStack(angles, out)


def mip_argmax(vol: np.ndarray, alpha: float) -> np.ndarray:
    """Per-pixel depth index along ``a`` chosen by the MIP at ``alpha``."""
    a, b, c = vol.shape
    vol = np.ascontiguousarray(vol)
    idx, w = rotation_stencil(a, b, alpha, vol.dtype)
    return kernels.impl().project_max(vol.reshape(a * b, c), idx, w, a, b)[1]


def mip_project(vol, alpha: float) -> Tensor:
    """Single MIP image (b, c)."""
    stack = mip_stack(vol, [alpha])
    return _take_first(stack.images)


def sum_stack(vol, angles: Sequence[float], workers: int = 1) -> ProjectionStack:
    """Ray-sum projections along ``a`` after rotating by each angle."""
    vol = _vol_tensor(vol)
    a, b, c = vol.shape
    dt = vol.dtype
    vol2 = np.ascontiguousarray(vol.data.reshape(a * b, c))
    angles = tuple(float(x) for x in angles)
    k = kernels.impl()

    def fwd(alpha):
        idx, w = rotation_stencil(a, b, alpha, dt)
        return k.project_sum(vol2, idx, w, a, b)

    imgs = np.stack(_map(fwd, angles, workers)).astype(dt, copy=False)

    def _back(g):
        def adj(item, out):
            p, alpha = item
            idx, w = rotation_stencil(a, b, alpha, dt)
            k.smear_adjoint(np.ascontiguousarray(g[p]), idx, w, a, b, out)

        gv = _accumulate(adj, list(enumerate(angles)), (a * b, c), g.dtype, workers)
        return (gv.reshape(a, b, c),)

    return ProjectionStack(angles, make_result(imgs, (vol,), _back, "sum_project"))


def sum_project(vol, alpha: float) -> Tensor:
    return _take_first(sum_stack(vol, [alpha]).images)


def backproject(stack: ProjectionStack, dims: tuple[int, int, int], workers: int = 1) -> Tensor:
    """Smear every image back along its rays and sum over all angles."""
    a, b, c = (int(d) for d in dims)
    imgs = stack.images
    if imgs.shape[1:] != (b, c):
        raise ShapeError(f"backproject: images {imgs.shape[1:]} do not match volume dims {(a, b, c)}")
    dt = imgs.dtype
    k = kernels.impl()
    items = list(enumerate(stack.angles))

    def smear(item, out):
        p, alpha = item
        idx, w = rotation_stencil(a, b, alpha, dt)
        k.smear_adjoint(np.ascontiguousarray(imgs.data[p]), idx, w, a, b, out)

    vol = _accumulate(smear, items, (a * b, c), dt, workers).reshape(a, b, c)

    def _back(g):
        g2 = np.ascontiguousarray(g.reshape(a * b, c))

        def fwd(item):
            _, alpha = item
            idx, w = rotation_stencil(a, b, alpha, g.dtype)
            return k.project_sum(g2, idx, w, a, b)

        return (np.stack(_map(fwd, items, workers)).astype(g.dtype, copy=False),)

    return make_result(vol, (imgs,), _back, "backproject")


def _take_first(images: Tensor) -> Tensor:
    shape = images.shape
    return make_result(images.data[0], (images,), lambda g: (g.reshape(1, *shape[1:]),), "take")


# ----------------------------------------------------------------------------
# filtration and fine-tuning head


def filtrate(stack: ProjectionStack, bank: FiltrationBank, match_angles: bool = True) -> ProjectionStack:
    """Correlate each image with its own 1x2 filter along ``b`` (zero pad at the end).

    With ``match_angles=False`` filters are matched to images by slot only,
    which is how the per-block path-1 bank is used while its angles vary.
    """
    if len(bank) != len(stack.angles):
        raise ConfigurationError(
            f"filtration bank has {len(bank)} filters for {len(stack.angles)} projection angles"
        )
    if match_angles and not np.allclose(bank.angles, stack.angles):
        raise ConfigurationError(f"bank angles {bank.angles} differ from stack angles {stack.angles}")
    x = stack.images
    wt = bank.weights
    xd = x.data
    w0 = wt.data[:, 0][:, None, None]
    w1 = wt.data[:, 1][:, None, None]
    shifted = np.zeros_like(xd)
    shifted[:, :-1, :] = xd[:, 1:, :]
    out = w0 * xd + w1 * shifted

    def _back(g):
        gx = g * w0
        gx[:, 1:, :] += (g * w1)[:, :-1, :]
        gw = np.stack([(g * xd).sum(axis=(1, 2)), (g * shifted).sum(axis=(1, 2))], axis=1)
        return gx, gw.astype(wt.dtype, copy=False)

    return ProjectionStack(stack.angles, make_result(out.astype(xd.dtype, copy=False), (x, wt), _back, "filtrate"))


def finetune_logits(vol: Tensor, gain: Tensor, shift: Tensor) -> Tensor:
    """Pre-sigmoid part of the fine-tuning head: pooled volume times gain plus shift."""
    return affine_scalar(avgpool3d_same(vol), gain, shift)


def finetune_head(vol: Tensor, gain: Tensor, shift: Tensor) -> Tensor:
    return sigmoid(finetune_logits(vol, gain, shift))
