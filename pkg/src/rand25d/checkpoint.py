"""Checkpoints for the 2.5D model and the slice baseline, including run state."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ShapeError
from .fileio import FormatError, load_arrays, save_arrays
from .geometry import FiltrationBank
from .optim import Adam, AdamState
from .pipeline import Model25D, build_model25d
from .training import RunState, TrainConfig, Trainer, train
from .unet import UNetConfig, UNetModel, build_unet


@dataclass
class Checkpoint:
    model: Model25D | UNetModel
    state: RunState
    config: TrainConfig | None = None
    adam: AdamState | None = None
    best: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def kind(self) -> str:
        return "random25d" if isinstance(self.model, Model25D) else "unet"


def _named(model) -> list[tuple[str, object]]:
    return model.named_parameters()


def save_checkpoint(
    path,
    model: Model25D | UNetModel,
    state: RunState,
    config: TrainConfig | None = None,
    optimizer: Adam | None = None,
    best: dict[str, np.ndarray] | None = None,
) -> None:
    named = _named(model)
    if isinstance(model, Model25D):
        meta = {"model": "random25d", "unet_config": model.unet.config.to_dict(), "p": model.p, "m": model.m,
                "bank_p_angles": list(model.bank_p.angles), "bank_m_angles": list(model.bank_m.angles)}
    else:
        meta = {"model": "unet", "unet_config": model.config.to_dict()}
    meta.update(
        run_state=state.to_dict(),
        config=config.to_dict() if config is not None else None,
        adam_t=optimizer.state.t if optimizer is not None else None,
    )
    arrays = [(f"param/{n}", t.data) for n, t in named]
    if optimizer is not None and optimizer.state.m:
        arrays += [(f"adam_m/{n}", a) for (n, _), a in zip(named, optimizer.state.m)]
        arrays += [(f"adam_v/{n}", a) for (n, _), a in zip(named, optimizer.state.v)]
    for n, _ in named:
        if best and n in best:
            arrays.append((f"best/{n}", best[n]))
    save_arrays(path, meta, arrays)


def load_into(model, params: dict[str, np.ndarray]) -> None:
    """Copy arrays into ``model``; every shape disagreement is reported at once."""
    named = dict(_named(model))
    bad = [f"{n}: checkpoint {params[n].shape} vs model {t.shape}" for n, t in named.items()
           if n in params and params[n].shape != t.shape]
    missing = [n for n in named if n not in params]
    if bad or missing:
        raise ShapeError("checkpoint does not match model: " + "; ".join(bad + [f"{n}: missing" for n in missing]))
    for n, t in named.items():
        t.data[...] = params[n]


def load_checkpoint(path, model: Model25D | UNetModel | None = None) -> Checkpoint:
    """Rebuild the stored model (or fill ``model``) and its run state."""
    meta, arrays = load_arrays(path)
    params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    if model is None:
        ucfg = UNetConfig(**meta["unet_config"])
        dtype = next(iter(params.values())).dtype.newbyteorder("=").type if params else np.float32
        if meta.get("model") == "random25d":
            model = build_model25d(ucfg, int(meta["p"]), int(meta["m"]), 0, dtype)
            model.bank_p = FiltrationBank(tuple(meta["bank_p_angles"]), model.bank_p.weights)
        elif meta.get("model") == "unet":
            model = build_unet(ucfg, 0, dtype)
        else:
            raise FormatError(f"unknown model kind {meta.get('model')!r}")
    load_into(model, params)
    names = [n for n, _ in _named(model)]
    adam = None
    if meta.get("adam_t") is not None and f"adam_m/{names[0]}" in arrays:
        adam = AdamState(int(meta["adam_t"]), [arrays[f"adam_m/{n}"] for n in names],
                         [arrays[f"adam_v/{n}"] for n in names])
    elif meta.get("adam_t") is not None:
        adam = AdamState(int(meta["adam_t"]))
    best = {n: arrays[f"best/{n}"] for n in names if f"best/{n}" in arrays}
    cfg = TrainConfig(**meta["config"]) if meta.get("config") else None
    return Checkpoint(model, RunState.from_dict(meta["run_state"]), cfg, adam, best)


def resume(ck: Checkpoint, train_set, val_set, cfg: TrainConfig | None = None, on_epoch=None) -> Trainer:
    """Continue a 2.5D run exactly where ``ck`` left off (sequential mode is bit-exact)."""
    if not isinstance(ck.model, Model25D):
        raise ValueError("only random 2.5D checkpoints can be resumed")
    cfg = cfg or ck.config
    if cfg is None:
        raise ValueError("checkpoint carries no training config")
    opt = Adam(ck.model.parameters(), ck.state.lr)
    if ck.adam is not None:
        opt.state = ck.adam
    return train(ck.model, train_set, val_set, cfg, state=ck.state, optimizer=opt, best=ck.best, on_epoch=on_epoch)
