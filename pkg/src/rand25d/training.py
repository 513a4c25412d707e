"""Two-path training, the plateau/early-stopping protocol, cross-validation
and the slice-by-slice baseline."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor, no_grad
from .geometry import ConfigurationError
from .metrics import MetricsReport, advance_balance, BalanceSchedule, confusion, dice_loss, evaluate, joint_loss, threshold_mask
from .optim import Adam
from .pipeline import (
    Model25D,
    build_model25d,
    forward_path1,
    forward_path2,
    path1_blocks,
    predict,
    sample_path1_angles,
)
from .unet import UNetConfig, UNetModel, build_unet, unet_forward

log = logging.getLogger(__name__)

Dataset = Sequence[tuple[np.ndarray, np.ndarray]]


class TrainingError(RuntimeError):
    """Raised when training hits a non-finite loss."""


@dataclass
class TrainConfig:
    p: int = 12
    m: int = 60
    lr: float = 0.001
    plateau_patience: int = 3
    early_stop_patience: int = 5
    minibatch: int = 1
    folds: int = 7
    seed: int = 0
    max_epochs: int = 100
    depth: int = 3
    base_channels: int = 8
    upconv: bool = False
    val_fraction: float = 0.2
    workers: int = 1
    dtype: str = "float32"

    def __post_init__(self):
        if self.p < 1 or 180 % self.p:
            raise ConfigurationError(f"p={self.p} must divide 180 into whole-degree blocks")
        if self.p > self.m:
            raise ConfigurationError(f"p={self.p} must not exceed m={self.m}")
        if self.minibatch != 1:
            raise ConfigurationError("only minibatch size 1 is supported")

    @property
    def unet_config(self) -> UNetConfig:
        return UNetConfig(self.depth, self.base_channels, 1, self.upconv)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype).type

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_mapping(cls, values: dict) -> TrainConfig:
        defaults = {f.name: f.default for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in defaults:
                raise ConfigurationError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(raw, defaults[key])
        return cls(**kwargs)

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.to_dict().items())


def _coerce(raw, default):
    if not isinstance(raw, str):
        return raw
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes"):
            return True
        if raw.lower() in ("0", "false", "no"):
            return False
        raise ConfigurationError(f"not a boolean: {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def read_config_file(path) -> dict[str, str]:
    """``key=value`` lines; blank lines and ``#`` comments are skipped."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


@dataclass
class EpochLog:
    epoch: int
    c: float
    lr: float
    train_loss: float
    val_loss: float

    def line(self) -> str:
        return (f"epoch={self.epoch} c={self.c:.8f} lr={self.lr:.8g} "
                f"train_loss={self.train_loss:.6f} val_loss={self.val_loss:.6f}")


@dataclass
class RunState:
    epoch: int = 1
    lr: float = 0.001
    c: float = 0.99
    best_val: float = math.inf
    best_epoch: int = 0
    since_improvement: int = 0
    since_plateau: int = 0
    stopped: bool = False
    rng_state: dict = field(default_factory=dict)
    history: list[EpochLog] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["best_val"] = None if math.isinf(self.best_val) else self.best_val
        return d

    @classmethod
    def from_dict(cls, d: dict) -> RunState:
        d = dict(d)
        d["best_val"] = math.inf if d.get("best_val") is None else d["best_val"]
        d["history"] = [EpochLog(**h) for h in d.get("history", [])]
        return cls(**d)


@dataclass
class Trainer:
    """Epoch driver shared by the 2.5D model and the slice baseline.

    ``step`` runs one epoch of parameter updates and returns the mean training
    loss; ``validate`` returns the validation loss. Learning-rate halving,
    early stopping and best-weight restoration happen here.
    """

    params: list[tuple[str, Tensor]]
    optimizer: Adam
    cfg: TrainConfig
    state: RunState
    rng: np.random.Generator
    best: dict[str, np.ndarray] = field(default_factory=dict)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.params}

    def restore_best(self) -> None:
        for name, t in self.params:
            if name in self.best:
                t.data[...] = self.best[name]

    def run(
        self,
        step: Callable[[int, float, np.random.Generator], float],
        validate: Callable[[], float],
        val_hook: Callable[[int, float], float] | None = None,
        on_epoch: Callable[[Trainer], None] | None = None,
    ) -> RunState:
        s = self.state
        cfg = self.cfg
        while not s.stopped and s.epoch <= cfg.max_epochs:
            self.optimizer.lr = s.lr
            train_loss = step(s.epoch, s.c, self.rng)
            val = validate()
            if val_hook is not None:
                val = val_hook(s.epoch, val)
            if not math.isfinite(val):
                raise TrainingError(f"non-finite validation loss at epoch {s.epoch}")
            s.history.append(EpochLog(s.epoch, s.c, s.lr, train_loss, val))
            log.info(s.history[-1].line())
            if val < s.best_val:
                s.best_val, s.best_epoch = val, s.epoch
                s.since_improvement = s.since_plateau = 0
                self.best = self.snapshot()
            else:
                s.since_improvement += 1
                s.since_plateau += 1
                if s.since_plateau >= cfg.plateau_patience:
                    s.lr /= 2
                    s.since_plateau = 0
                if s.since_improvement >= cfg.early_stop_patience:
                    s.stopped = True
            nxt = advance_balance(BalanceSchedule(s.c, s.epoch))
            s.c, s.epoch = nxt.c, nxt.epoch
            s.rng_state = self.rng.bit_generator.state
            if on_epoch is not None:
                on_epoch(self)
        self.restore_best()
        return s


def _check_finite(loss: Tensor, params: list[Tensor], epoch: int, sample: int) -> None:
    # a saturated sigmoid can hide an inf input from the loss but not from the gradients
    if not np.isfinite(loss.data).all():
        raise TrainingError(f"non-finite loss at epoch {epoch}, sample {sample}")
    if not all(np.isfinite(t.grad).all() for t in params):
        raise TrainingError(f"non-finite gradient at epoch {epoch}, sample {sample}")


def new_run(cfg: TrainConfig) -> tuple[RunState, np.random.Generator]:
    rng = np.random.default_rng(cfg.seed)
    return RunState(lr=cfg.lr, rng_state=rng.bit_generator.state), rng


def train(
    model: Model25D,
    train_set: Dataset,
    val_set: Dataset,
    cfg: TrainConfig,
    state: RunState | None = None,
    optimizer: Adam | None = None,
    best: dict[str, np.ndarray] | None = None,
    val_hook: Callable[[int, float], float] | None = None,
    on_epoch: Callable[[Trainer], None] | None = None,
) -> Trainer:
    """Two-path training of ``model``; returns the trainer with best weights restored.

    Path-1 angles are drawn once per epoch. Each sample contributes one Adam
    step on the joint loss; validation uses the path-2 Dice loss.
    """
    if not train_set or not val_set:
        raise ConfigurationError("training needs non-empty training and validation sets")
    path1_blocks(model.p, model.m)
    named = model.named_parameters()
    if optimizer is None:
        optimizer = Adam([t for _, t in named], cfg.lr)
    if state is None:
        state, rng = new_run(cfg)
    else:
        rng = np.random.default_rng()
        rng.bit_generator.state = state.rng_state
    trainer = Trainer(named, optimizer, cfg, state, rng, dict(best or {}))
    dt = cfg.np_dtype

    def step(epoch: int, c: float, rng: np.random.Generator) -> float:
        angles = sample_path1_angles(model.p, model.m, rng)
        order = rng.permutation(len(train_set))
        total = 0.0
        for n in order:
            x, y = train_set[n]
            x = np.ascontiguousarray(x, dtype=dt)
            optimizer.zero_grad()
            y_aux = forward_path1(model, x, angles, cfg.workers)
            y_hat = forward_path2(model, x, workers=cfg.workers)
            loss = joint_loss(y, y_hat, y_aux, c)
            loss.backward()
            _check_finite(loss, optimizer.params, epoch, int(n))
            optimizer.step()
            total += loss.item()
        return total / len(train_set)

    def validate() -> float:
        with no_grad():
            losses = [dice_loss(y, forward_path2(model, np.asarray(x, dtype=dt), workers=cfg.workers)).item()
                      for x, y in val_set]
        return float(np.mean(losses))

    trainer.run(step, validate, val_hook, on_epoch)
    return trainer


# ----------------------------------------------------------------------------
# slice-by-slice baseline


def slice_by_slice_segment(unet: UNetModel, x, batch: int = 64) -> np.ndarray:
    """Segment each (b, c) slice along ``a`` independently and restack."""
    x = np.asarray(x)
    dt = unet.params[next(iter(unet.params))].dtype
    out = np.empty(x.shape, dtype=dt)
    with no_grad():
        for s in range(0, x.shape[0], batch):
            chunk = np.ascontiguousarray(x[s: s + batch, None], dtype=dt)
            out[s: s + batch] = unet_forward(unet, Tensor(chunk)).data[:, 0]
    return out


def train_slice_baseline(
    unet: UNetModel,
    train_set: Dataset,
    val_set: Dataset,
    cfg: TrainConfig,
    val_hook: Callable[[int, float], float] | None = None,
) -> Trainer:
    """Same optimiser and protocol; one step per volume over all of its slices."""
    if not train_set or not val_set:
        raise ConfigurationError("training needs non-empty training and validation sets")
    named = unet.named_parameters()
    optimizer = Adam([t for _, t in named], cfg.lr)
    state, rng = new_run(cfg)
    trainer = Trainer(named, optimizer, cfg, state, rng)
    dt = cfg.np_dtype

    def step(epoch: int, c: float, rng: np.random.Generator) -> float:
        total = 0.0
        for n in rng.permutation(len(train_set)):
            x, y = train_set[n]
            optimizer.zero_grad()
            probs = unet_forward(unet, Tensor(np.ascontiguousarray(x[:, None], dtype=dt)))
            loss = dice_loss(np.asarray(y)[:, None], probs)
            loss.backward()
            _check_finite(loss, optimizer.params, epoch, int(n))
            optimizer.step()
            total += loss.item()
        return total / len(train_set)

    def validate() -> float:
        return float(np.mean([dice_loss(y, slice_by_slice_segment(unet, x)).item() for x, y in val_set]))

    trainer.run(step, validate, val_hook)
    return trainer


# ----------------------------------------------------------------------------
# cross-validation


def fold_indices(n: int, folds: int, seed: int) -> list[np.ndarray]:
    """Seeded shuffle split into ``folds`` near-equal held-out index sets."""
    if folds < 2:
        raise ConfigurationError("cross-validation needs at least 2 folds")
    if n < folds:
        raise ConfigurationError(f"{n} samples cannot fill {folds} folds")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(part) for part in np.array_split(perm, folds)]


def split_train_val(indices: Sequence[int], val_fraction: float, seed: int) -> tuple[list[int], list[int]]:
    idx = list(np.random.default_rng(seed).permutation(list(indices)))
    n_val = max(1, int(round(val_fraction * len(idx))))
    if len(idx) - n_val < 1:
        raise ConfigurationError("too few samples to split off a validation set")
    return sorted(int(i) for i in idx[n_val:]), sorted(int(i) for i in idx[:n_val])


@dataclass
class FoldResult:
    fold: int
    held_out: list[int]
    report: MetricsReport
    per_sample: list[MetricsReport]
    epochs: int


def fit_model(kind: str, train_set: Dataset, val_set: Dataset, cfg: TrainConfig, seed: int):
    """Build and train one model of ``kind`` ("random25d" or "slice")."""
    if kind == "random25d":
        model = build_model25d(cfg.unet_config, cfg.p, cfg.m, seed, cfg.np_dtype)
        trainer = train(model, train_set, val_set, _reseed(cfg, seed))
        return model, trainer
    if kind == "slice":
        unet = build_unet(cfg.unet_config, seed, cfg.np_dtype)
        trainer = train_slice_baseline(unet, train_set, val_set, _reseed(cfg, seed))
        return unet, trainer
    raise ValueError(f"unknown model kind {kind!r}")


def predict_volume(kind: str, model, x, workers: int = 1) -> np.ndarray:
    if kind == "random25d":
        return predict(model, np.asarray(x, dtype=model.bank_m.weights.dtype), workers)
    return slice_by_slice_segment(model, x)


def _reseed(cfg: TrainConfig, seed: int) -> TrainConfig:
    d = cfg.to_dict()
    d["seed"] = seed
    return TrainConfig(**d)


def cross_validate(dataset: Dataset, cfg: TrainConfig, kind: str = "random25d") -> list[FoldResult]:
    """k-fold protocol: train on the rest, threshold and score the held-out fold.

    Each fold's report pools confusion counts over its held-out volumes; fold
    ``k`` uses the derived seed ``cfg.seed * 1000 + k``.
    """
    results = []
    for k, held in enumerate(fold_indices(len(dataset), cfg.folds, cfg.seed)):
        rest = [i for i in range(len(dataset)) if i not in set(held.tolist())]
        seed = cfg.seed * 1000 + k
        tr, va = split_train_val(rest, cfg.val_fraction, seed)
        model, trainer = fit_model(kind, [dataset[i] for i in tr], [dataset[i] for i in va], cfg, seed)
        per_sample, counts = [], None
        for i in held:
            x, y = dataset[int(i)]
            mask = threshold_mask(predict_volume(kind, model, x, cfg.workers))
            per_sample.append(evaluate(y, mask))
            kc = confusion(y, mask)
            counts = kc if counts is None else type(kc)(counts.tp + kc.tp, counts.tn + kc.tn, counts.fp + kc.fp, counts.fn + kc.fn)
        results.append(FoldResult(k, [int(i) for i in held], MetricsReport.from_counts(counts), per_sample,
                                  len(trainer.state.history)))
        log.info("fold %d (%s): DC=%.4f", k, kind, results[-1].report.dc)
    return results
