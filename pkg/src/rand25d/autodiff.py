"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Only the primitives needed by the projection U-net pipeline are provided.
Every primitive builds its output through :func:`make_result`, which records
the parents and a closure mapping the upstream gradient to one gradient per
parent. :meth:`Tensor.backward` sweeps the recorded graph in reverse
topological order.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_grad_enabled = True
# active branch log (list) while a finite-difference check is probing
_branch_log: list | None = None


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def grad_enabled() -> bool:
    return _grad_enabled


def record_branch(choice: np.ndarray) -> None:
    """Note which piece of a piecewise op was taken (ReLU mask, argmax, ...)."""
    if _branch_log is not None:
        _branch_log.append(np.ascontiguousarray(choice).tobytes())


@contextlib.contextmanager
def _logging_branches() -> Iterator[list]:
    global _branch_log
    previous = _branch_log
    _branch_log = []
    try:
        yield _branch_log
    finally:
        _branch_log = previous


class Tensor:
    """Shape-tagged array that participates in a differentiation graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.ndim > 4:
            raise ShapeError(f"tensors carry 1 to 4 axes, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # arithmetic: same-shape tensors or python scalars only
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, _neg(other))

    def __rsub__(self, other):
        return add(_neg(self), other)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def sum(self) -> Tensor:
        return tensor_sum(self)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def _neg(x):
    return -x if isinstance(x, Tensor) else -float(x)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def make_result(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
    op: str,
) -> Tensor:
    """Wrap ``data`` as the output of a primitive applied to ``parents``."""
    out = Tensor(data, dtype=data.dtype)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that need gradients, inputs before outputs."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = topological_order(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg


# ----------------------------------------------------------------------------
# elementwise and structural primitives


def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor):
        c = float(b)
        return make_result(a.data + a.data.dtype.type(c), (a,), lambda g: (g,), "add_scalar")
    _same_shape(a, b, "add")
    return make_result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def scale(a: Tensor, factor: float) -> Tensor:
    f = a.data.dtype.type(factor)
    return make_result(a.data * f, (a,), lambda g: (g * f,), "scale")


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor):
        return scale(a, float(b))
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return make_result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def tensor_sum(a: Tensor) -> Tensor:
    shape = a.shape
    return make_result(
        np.asarray([a.data.sum()], dtype=a.dtype),
        (a,),
        lambda g: (np.full(shape, g[0], dtype=g.dtype),),
        "sum",
    )


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return make_result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def stop_gradient(a: Tensor) -> Tensor:
    """Identity in the forward pass, a barrier for gradients."""
    return a.detach()


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    record_branch(mask)
    return make_result(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(a.dtype)
    # keep outputs strictly inside (0, 1) even where the float rounds to an end
    fi = np.finfo(a.dtype)
    s = np.clip(s, fi.tiny, 1 - fi.epsneg)
    return make_result(s, (a,), lambda g: (g * s * (1 - s),), "sigmoid")


def activation(a: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(a)
    if kind == "sigmoid":
        return sigmoid(a)
    raise ValueError(f"unknown activation {kind!r}")


def affine_scalar(a: Tensor, gain: Tensor, shift: Tensor) -> Tensor:
    """``gain * a + shift`` with one-element trainable ``gain`` and ``shift``."""
    if gain.data.size != 1 or shift.data.size != 1:
        raise ShapeError(f"gain/shift must hold one value, got {gain.shape} and {shift.shape}")
    x = a.data
    gv = gain.data.reshape(-1)[0]
    out = x * gv + shift.data.reshape(-1)[0]

    def _back(g):
        return (
            g * gv,
            np.asarray([(g * x).sum()], dtype=g.dtype).reshape(gain.shape),
            np.asarray([g.sum()], dtype=g.dtype).reshape(shift.shape),
        )

    return make_result(out.astype(a.dtype), (a, gain, shift), _back, "affine_scalar")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack ``a`` then ``b`` along the channel axis (third from last)."""
    if a.data.ndim != b.data.ndim or a.shape[-2:] != b.shape[-2:] or a.shape[:-3] != b.shape[:-3]:
        raise ShapeError(f"concat_channels: spatial shapes differ, {a.shape} vs {b.shape}")
    ca = a.shape[-3]
    out = np.concatenate([a.data, b.data], axis=-3)
    return make_result(out, (a, b), lambda g: (g[..., :ca, :, :], g[..., ca:, :, :]), "concat")


def slice_channels(a: Tensor, start: int, stop: int) -> Tensor:
    shape = a.shape

    def _back(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[..., start:stop, :, :] = g
        return (full,)

    return make_result(a.data[..., start:stop, :, :], (a,), _back, "slice_channels")


def pad2d(a: Tensor, pad_h: int, pad_w: int) -> Tensor:
    """Zero-pad the last two axes at their far ends."""
    if pad_h == 0 and pad_w == 0:
        return a
    widths = [(0, 0)] * (a.data.ndim - 2) + [(0, pad_h), (0, pad_w)]
    h, w = a.shape[-2:]
    return make_result(np.pad(a.data, widths), (a,), lambda g: (g[..., :h, :w],), "pad2d")


def crop2d(a: Tensor, h: int, w: int) -> Tensor:
    shape = a.shape
    if (h, w) == shape[-2:]:
        return a

    def _back(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[..., :h, :w] = g
        return (full,)

    return make_result(a.data[..., :h, :w], (a,), _back, "crop2d")


# ----------------------------------------------------------------------------
# convolution and pooling


def _correlate(xp: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Valid cross-correlation of padded (N,C,H,W) input with (O,C,kh,kw)."""
    kh, kw = kernel.shape[-2:]
    if kh == 1 and kw == 1:
        return np.einsum("nchw,oc->nohw", xp, kernel[:, :, 0, 0], optimize=True)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    # win: (N, C, H', W', kh, kw)
    out = np.tensordot(win, kernel, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, padding: str = "same") -> Tensor:
    """Stride-1 2D cross-correlation over (C,H,W) or batched (N,C,H,W) input."""
    batched = x.data.ndim == 4
    if x.data.ndim not in (3, 4):
        raise ShapeError(f"conv2d input must be (C,H,W) or (N,C,H,W), got {x.shape}")
    if kernel.data.ndim != 4:
        raise ShapeError(f"conv2d kernel must be (C_out,C_in,kh,kw), got {kernel.shape}")
    xd = x.data if batched else x.data[None]
    c_out, c_in, kh, kw = kernel.shape
    if xd.shape[1] != c_in:
        raise ShapeError(f"conv2d: input {x.shape} has {xd.shape[1]} channels, kernel {kernel.shape} expects {c_in}")
    if padding == "same":
        top, left = (kh - 1) // 2, (kw - 1) // 2
        pads = ((0, 0), (0, 0), (top, kh - 1 - top), (left, kw - 1 - left))
    elif padding == "valid":
        pads = ((0, 0),) * 4
    else:
        raise ValueError(f"unknown padding {padding!r}")
    xp = np.pad(xd, pads) if padding == "same" else xd
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise ShapeError(f"conv2d: kernel {kernel.shape} larger than padded input {xp.shape}")
    k = kernel.data
    out = _correlate(xp, k)
    if bias is not None:
        if bias.shape != (c_out,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {c_out} output channels")
        out = out + bias.data[None, :, None, None]
    out = out.astype(xd.dtype, copy=False)

    def _back(g):
        gb = g if batched else g[None]
        # input grad: full correlation with the flipped, channel-swapped kernel
        kf = np.ascontiguousarray(k[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        gp = np.pad(gb, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
        gxp = _correlate(gp, kf)
        if padding == "same":
            gx = gxp[:, :, pads[2][0]: pads[2][0] + xd.shape[2], pads[3][0]: pads[3][0] + xd.shape[3]]
        else:
            gx = gxp
        if kh == 1 and kw == 1:
            gk = np.einsum("nchw,nohw->oc", xp, gb, optimize=True)[:, :, None, None]
        else:
            win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
            gk = np.tensordot(gb, win, axes=([0, 2, 3], [0, 2, 3]))
        gx = np.ascontiguousarray(gx) if batched else np.ascontiguousarray(gx[0])
        grads = [gx, gk.astype(k.dtype, copy=False)]
        if bias is not None:
            grads.append(gb.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return make_result(out if batched else out[0], parents, _back, "conv2d")


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pooling; ties go to the lowest linear index in the window."""
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d needs even spatial extents, got {x.shape}")
    lead = x.shape[:-2]
    win = x.data.reshape(*lead, h // 2, 2, w // 2, 2)
    win = np.moveaxis(win, -3, -2).reshape(*lead, h // 2, w // 2, 4)
    arg = win.argmax(axis=-1)
    record_branch(arg)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def _back(g):
        gw = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gw = gw.reshape(*lead, h // 2, w // 2, 2, 2)
        return (np.moveaxis(gw, -2, -3).reshape(*lead, h, w),)

    out_t = make_result(np.ascontiguousarray(out), (x,), _back, "maxpool2d")
    return out_t


def maxpool2d_argmax(x: np.ndarray) -> np.ndarray:
    """Window-local argmax (0..3) that :func:`maxpool2d` routes gradients to."""
    h, w = x.shape[-2:]
    lead = x.shape[:-2]
    win = np.moveaxis(x.reshape(*lead, h // 2, 2, w // 2, 2), -3, -2).reshape(*lead, h // 2, w // 2, 4)
    return win.argmax(axis=-1)


def upsample2d(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of the last two axes."""
    out = np.repeat(np.repeat(x.data, 2, axis=-2), 2, axis=-1)
    lead, (h, w) = x.shape[:-2], x.shape[-2:]

    def _back(g):
        return (g.reshape(*lead, h, 2, w, 2).sum(axis=(-3, -1)),)

    return make_result(out, (x,), _back, "upsample2d")


def upconv2x2(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Learnable 2x2 stride-2 transposed convolution, kernel (C_in,C_out,2,2)."""
    batched = x.data.ndim == 4
    xd = x.data if batched else x.data[None]
    c_in, c_out = kernel.shape[:2]
    if xd.shape[1] != c_in:
        raise ShapeError(f"upconv2x2: input {x.shape} vs kernel {kernel.shape}")
    n, _, h, w = xd.shape
    k = kernel.data
    blocks = np.einsum("nchw,cokl->nohkwl", xd, k, optimize=True)
    out = blocks.reshape(n, c_out, 2 * h, 2 * w) + bias.data[None, :, None, None]

    def _back(g):
        gb = (g if batched else g[None]).reshape(n, c_out, h, 2, w, 2)
        gx = np.einsum("nohkwl,cokl->nchw", gb, k, optimize=True)
        gk = np.einsum("nohkwl,nchw->cokl", gb, xd, optimize=True)
        return (gx if batched else gx[0], gk, gb.sum(axis=(0, 2, 3, 4, 5)))

    return make_result(out if batched else out[0], (x, kernel, bias), _back, "upconv2x2")


def avgpool3d_same(x: Tensor) -> Tensor:
    """2x2x2 moving average, stride 1, replicate padding at the far faces."""
    if x.data.ndim != 3:
        raise ShapeError(f"avgpool3d_same needs a 3-axis volume, got {x.shape}")
    a, b, c = x.shape
    xp = np.pad(x.data, ((0, 1), (0, 1), (0, 1)), mode="edge")
    out = np.zeros_like(x.data)
    for da in (0, 1):
        for db in (0, 1):
            for dc in (0, 1):
                out += xp[da: da + a, db: db + b, dc: dc + c]
    out *= x.data.dtype.type(0.125)

    def _back(g):
        gp = np.zeros(xp.shape, dtype=g.dtype)
        g8 = g * g.dtype.type(0.125)
        for da in (0, 1):
            for db in (0, 1):
                for dc in (0, 1):
                    gp[da: da + a, db: db + b, dc: dc + c] += g8
        # fold the replicated far faces back onto the last plane, axis by axis
        gp[-2] += gp[-1]
        gp = gp[:-1]
        gp[:, -2] += gp[:, -1]
        gp = gp[:, :-1]
        gp[:, :, -2] += gp[:, :, -1]
        return (np.ascontiguousarray(gp[:, :, :-1]),)

    return make_result(out, (x,), _back, "avgpool3d_same")


def _same_shape(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} differ")


# ----------------------------------------------------------------------------
# verification harness


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: np.ndarray,
    h: float = 1e-5,
    nondiff: Callable[[np.ndarray, float], bool] | None = None,
) -> float:
    """Max relative deviation between analytic and central-difference gradients.

    ``f`` maps a Tensor to a one-element Tensor. The check returns ``nan``
    instead of a spurious failure when ``x`` sits within ``h`` of a kink:
    either ``nondiff(x, h)`` says so, or some probe flips a piecewise op
    (ReLU sign, pooling or projection argmax) relative to the base point.
    """
    x = np.array(x, dtype=np.float64)
    if nondiff is not None and nondiff(x, h):
        return float("nan")
    xt = Tensor(x.copy(), requires_grad=True, dtype=np.float64)
    with _logging_branches() as base:
        out = f(xt)
    out.backward()
    analytic = xt.grad.copy()
    numeric = np.zeros_like(x)
    flat = x.reshape(-1)
    num_flat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            old = flat[i]
            vals = []
            for step in (h, -h):
                flat[i] = old + step
                with _logging_branches() as probe:
                    vals.append(f(Tensor(x.copy(), dtype=np.float64)).item())
                if probe != base:
                    return float("nan")
            flat[i] = old
            num_flat[i] = (vals[0] - vals[1]) / (2 * h)
    scale_ = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale_)


def maxpool_has_tie(x: np.ndarray, h: float) -> bool:
    """True when some 2x2 window's top two values lie within ``2h``."""
    hh, ww = x.shape[-2:]
    lead = x.shape[:-2]
    win = np.moveaxis(x.reshape(*lead, hh // 2, 2, ww // 2, 2), -3, -2).reshape(-1, 4)
    top2 = np.sort(win, axis=-1)[:, -2:]
    return bool((top2[:, 1] - top2[:, 0] <= 2 * h).any())
