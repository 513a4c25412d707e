"""Configurable 2D U-net mapping (b, c) images to per-pixel probabilities."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import (
    Tensor,
    concat_channels,
    conv2d,
    crop2d,
    maxpool2d,
    pad2d,
    relu,
    sigmoid,
    upconv2x2,
    upsample2d,
)


@dataclass(frozen=True)
class UNetConfig:
    depth: int = 3
    base_channels: int = 8
    in_channels: int = 1
    upconv: bool = False

    def __post_init__(self):
        if self.depth < 1 or self.base_channels < 1 or self.in_channels < 1:
            raise ValueError(f"invalid U-net config {self}")

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** level

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class UNetModel:
    config: UNetConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def count(self) -> int:
        return sum(p.data.size for p in self.params.values())


def _layer_plan(cfg: UNetConfig) -> list[tuple[str, tuple[int, ...]]]:
    """(name, kernel shape) for every weighted layer in forward order."""
    plan = []
    cin = cfg.in_channels
    for lvl in range(cfg.depth):
        co = cfg.channels(lvl)
        plan += [(f"down{lvl}.conv1", (co, cin, 3, 3)), (f"down{lvl}.conv2", (co, co, 3, 3))]
        cin = co
    cb = cfg.channels(cfg.depth)
    plan += [("bottom.conv1", (cb, cin, 3, 3)), ("bottom.conv2", (cb, cb, 3, 3))]
    below = cb
    for lvl in reversed(range(cfg.depth)):
        co = cfg.channels(lvl)
        if cfg.upconv:
            plan.append((f"up{lvl}.upconv", (below, co, 2, 2)))
            merged = co + co
        else:
            merged = below + co
        plan += [(f"up{lvl}.conv1", (co, merged, 3, 3)), (f"up{lvl}.conv2", (co, co, 3, 3))]
        below = co
    plan.append(("head", (1, cfg.channels(0), 1, 1)))
    return plan


def param_count(cfg: UNetConfig) -> int:
    """Closed-form number of kernel and bias entries."""
    total = 0
    for name, shape in _layer_plan(cfg):
        n_out = shape[1] if name.endswith("upconv") else shape[0]
        total += int(np.prod(shape)) + n_out
    return total


def build_unet(cfg: UNetConfig, rng_seed: int = 0, dtype=np.float32) -> UNetModel:
    """Fan-in scaled uniform init, U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases zero."""
    rng = np.random.default_rng(rng_seed)
    params: dict[str, Tensor] = {}
    for name, shape in _layer_plan(cfg):
        if name.endswith("upconv"):
            fan_in = shape[0] * shape[2] * shape[3]
            n_out = shape[1]
        else:
            fan_in = shape[1] * shape[2] * shape[3]
            n_out = shape[0]
        bound = 1.0 / np.sqrt(fan_in)
        params[name + ".weight"] = Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)
        params[name + ".bias"] = Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True)
    return UNetModel(cfg, params)


def _conv(model: UNetModel, name: str, x: Tensor, act: bool = True) -> Tensor:
    p = model.params
    y = conv2d(x, p[name + ".weight"], p[name + ".bias"], padding="same")
    return relu(y) if act else y


def unet_forward(model: UNetModel, image: Tensor) -> Tensor:
    """Probabilities for (H,W), (C,H,W) or batched (N,C,H,W) input, same spatial dims.

    Extents not divisible by 2**depth are zero-padded at the far ends and the
    output is cropped back.
    """
    cfg = model.config
    x = image
    squeeze = 0
    if x.data.ndim == 2:
        x = x.reshape(1, *x.shape)
        squeeze = 1
    h, w = x.shape[-2:]
    mult = 2 ** cfg.depth
    x = pad2d(x, -h % mult, -w % mult)

    skips = []
    for lvl in range(cfg.depth):
        x = _conv(model, f"down{lvl}.conv1", x)
        x = _conv(model, f"down{lvl}.conv2", x)
        skips.append(x)
        x = maxpool2d(x)
    x = _conv(model, "bottom.conv1", x)
    x = _conv(model, "bottom.conv2", x)
    for lvl in reversed(range(cfg.depth)):
        if cfg.upconv:
            p = model.params
            x = upconv2x2(x, p[f"up{lvl}.upconv.weight"], p[f"up{lvl}.upconv.bias"])
        else:
            x = upsample2d(x)
        x = concat_channels(x, skips[lvl])
        x = _conv(model, f"up{lvl}.conv1", x)
        x = _conv(model, f"up{lvl}.conv2", x)
    out = sigmoid(_conv(model, "head", x, act=False))
    out = crop2d(out, h, w)
    if squeeze:
        out = out.reshape(h, w)
    return out
