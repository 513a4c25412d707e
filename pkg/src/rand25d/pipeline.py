"""The random 2.5D network: angle sampling, parameter bundle and both forward paths."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import Tensor, no_grad, stop_gradient
from .geometry import (
    AngleSet,
    ConfigurationError,
    FiltrationBank,
    ProjectionStack,
    backproject,
    filtrate,
    finetune_head,
    finetune_logits,
    mip_stack,
)
from .unet import UNetConfig, UNetModel, build_unet, unet_forward


def make_angle_grid(m: int) -> AngleSet:
    """Degrees ``k * 180 / m`` for ``k = 0..m-1``."""
    if m < 1:
        raise ConfigurationError(f"angle grid needs m >= 1, got {m}")
    return AngleSet(tuple(k * 180 / m for k in range(m)))


def path1_blocks(p: int, m: int) -> list[list[float]]:
    """Grid angles of ``make_angle_grid(m)`` falling in each block ``[k*180/p, (k+1)*180/p)``."""
    if p < 1 or 180 % p:
        raise ConfigurationError(f"p must divide 180, got p={p}")
    width = 180 // p
    blocks: list[list[float]] = [[] for _ in range(p)]
    for ang in make_angle_grid(m):
        blocks[min(int(ang // width), p - 1)].append(ang)
    empty = [k for k, blk in enumerate(blocks) if not blk]
    if empty:
        raise ConfigurationError(f"blocks {empty} hold no grid angle (p={p}, m={m})")
    return blocks


def sample_path1_angles(p: int, m: int, rng: np.random.Generator) -> list[float]:
    """One grid angle drawn uniformly from each of the ``p`` blocks, sorted."""
    return [blk[int(rng.integers(len(blk)))] for blk in path1_blocks(p, m)]


@dataclass
class Model25D:
    unet: UNetModel
    bank_p: FiltrationBank
    bank_m: FiltrationBank
    head1: tuple[Tensor, Tensor]
    head2: tuple[Tensor, Tensor]

    @property
    def p(self) -> int:
        return len(self.bank_p)

    @property
    def m(self) -> int:
        return len(self.bank_m)

    @property
    def theta(self) -> AngleSet:
        return AngleSet(self.bank_m.angles)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        named = [(f"unet.{k}", v) for k, v in self.unet.named_parameters()]
        named += [
            ("bank_p", self.bank_p.weights),
            ("head1.gain", self.head1[0]),
            ("head1.shift", self.head1[1]),
            ("bank_m", self.bank_m.weights),
            ("head2.gain", self.head2[0]),
            ("head2.shift", self.head2[1]),
        ]
        return named

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]


def _scalar(v: float, dtype) -> Tensor:
    return Tensor(np.array([v], dtype=dtype), requires_grad=True)


def build_model25d(unet_cfg: UNetConfig, p: int, m: int, seed: int = 0, dtype=np.float32) -> Model25D:
    """Fresh model: identity filters, heads centred on half the summed probability."""
    theta = make_angle_grid(m)
    path1_blocks(p, m)
    block_labels = [k * 180 / p for k in range(p)]
    return Model25D(
        unet=build_unet(unet_cfg, seed, dtype),
        bank_p=FiltrationBank.identity(block_labels, dtype),
        bank_m=FiltrationBank.identity(theta.angles, dtype),
        head1=(_scalar(1.0, dtype), _scalar(-p / 2, dtype)),
        head2=(_scalar(1.0, dtype), _scalar(-m / 2, dtype)),
    )


def _volume_input(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.ascontiguousarray(x, dtype=dtype))


def segment_projections(unet: UNetModel, x: Tensor, angles: Sequence[float], workers: int = 1) -> ProjectionStack:
    """``U(M_alpha(x))`` for every angle, as one (P, b, c) stack."""
    mips = mip_stack(x, angles, workers)
    P, b, c = mips.images.shape
    probs = unet_forward(unet, mips.images.reshape(P, 1, b, c))
    return ProjectionStack(mips.angles, probs.reshape(P, b, c))


def forward_path1(model: Model25D, x, angles: Sequence[float], workers: int = 1) -> Tensor:
    """Auxiliary output from the ``p`` sampled directions; trains U, bank_p and head1."""
    dtype = model.bank_p.weights.dtype
    x = _volume_input(x, dtype)
    if len(angles) != model.p:
        raise ConfigurationError(f"path 1 needs {model.p} angles, got {len(angles)}")
    segs = segment_projections(model.unet, x, angles, workers)
    filtered = filtrate(segs, model.bank_p, match_angles=False)
    recon = backproject(filtered, x.shape, workers)
    return finetune_head(recon, *model.head1)


def path2_segmentations(model: Model25D, x, workers: int = 1) -> ProjectionStack:
    """U outputs over the full grid, cut from the graph so U is never updated here."""
    x = _volume_input(x, model.bank_m.weights.dtype)
    with no_grad():
        segs = segment_projections(model.unet, x, model.bank_m.angles, workers)
    return ProjectionStack(segs.angles, stop_gradient(segs.images))


def forward_path2(
    model: Model25D,
    x,
    theta: AngleSet | None = None,
    workers: int = 1,
    segs: ProjectionStack | None = None,
    logits: bool = False,
    bank: FiltrationBank | None = None,
) -> Tensor:
    """Final output from all ``m`` grid directions; trains only bank_m and head2.

    ``segs`` reuses precomputed :func:`path2_segmentations`; ``bank`` swaps in
    another filtration bank (e.g. identity filters) without touching the model.
    """
    if theta is not None and (len(theta) != model.m or not np.allclose(theta.angles, model.bank_m.angles)):
        raise ConfigurationError("path 2 runs on the model's full angle grid")
    x_shape = np.shape(x.data if isinstance(x, Tensor) else x)
    if segs is None:
        segs = path2_segmentations(model, x, workers)
    filtered = filtrate(segs, bank if bank is not None else model.bank_m)
    recon = backproject(filtered, x_shape, workers)
    if logits:
        return finetune_logits(recon, *model.head2)
    return finetune_head(recon, *model.head2)


def predict(model: Model25D, x, workers: int = 1) -> np.ndarray:
    """Path-2 probability volume without recording a graph."""
    with no_grad():
        return forward_path2(model, x, workers=workers).data
