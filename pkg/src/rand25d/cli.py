"""Command-line entry point: phantom, project, train, predict, eval, compare."""
from __future__ import annotations

import argparse
import json
import logging
import re
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .fileio import FormatError, export_image, load_volume, save_volume
from .geometry import ConfigurationError, mip_stack, sum_stack
from .metrics import aggregate, evaluate, threshold_mask
from .phantom import PhantomSpec, generate_dataset
from .pipeline import Model25D, build_model25d, predict
from .training import (
    TrainConfig,
    TrainingError,
    cross_validate,
    read_config_file,
    slice_by_slice_segment,
    split_train_val,
    train,
)

log = logging.getLogger("rand25d")

INDEX_NAME = "index.txt"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def parse_dims(text: str) -> tuple[int, int, int]:
    m = re.fullmatch(r"(\d+)x(\d+)x(\d+)", text.strip())
    if not m:
        raise UsageError(f"dims must look like AxBxC, got {text!r}")
    dims = tuple(int(g) for g in m.groups())
    if min(dims) < 1:
        raise UsageError(f"dims must be positive, got {text!r}")
    return dims


def parse_angles(text: str) -> list[float]:
    try:
        angles = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"bad angle list {text!r}") from None
    if not angles:
        raise UsageError("empty angle list")
    for a in angles:
        if not 0 <= a < 180:
            raise UsageError(f"angle {a} outside [0, 180)")
    return angles


def _echo(title: str, resolved: dict) -> None:
    print(f"# {title}")
    for k, v in resolved.items():
        print(f"{k}={v}")
    sys.stdout.flush()


def _resolve_config(config_path, overrides: dict) -> TrainConfig:
    values = read_config_file(config_path) if config_path else {}
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig.from_mapping(values)


def load_dataset(data_dir) -> list[tuple[np.ndarray, np.ndarray]]:
    data_dir = Path(data_dir)
    index = data_dir / INDEX_NAME
    if not index.exists():
        raise FileNotFoundError(f"no dataset index at {index}")
    pairs = []
    for line in index.read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        scan_name, mask_name = line.split()
        scan, _ = load_volume(data_dir / scan_name, "scan")
        mask, _ = load_volume(data_dir / mask_name, "mask")
        if scan.shape != mask.shape:
            raise FormatError(f"{scan_name} {scan.shape} and {mask_name} {mask.shape} differ")
        pairs.append((scan, mask))
    return pairs


# ----------------------------------------------------------------------------
# commands


def cmd_phantom(args) -> int:
    spec_values = json.loads(Path(args.spec_file).read_text()) if args.spec_file else {}
    dims = parse_dims(args.dims) if args.dims else None
    try:
        if dims is None:
            spec = PhantomSpec.from_dict(spec_values)
        elif "target_radius" in spec_values or "distractor_radius" in spec_values:
            spec = PhantomSpec.from_dict({**spec_values, "dims": dims})
        else:
            # radii given in voxels for the default extents follow the new cross-section
            spec = PhantomSpec.from_dict(spec_values).scaled_to(dims)
    except ConfigurationError as e:
        raise UsageError(str(e)) from None
    if args.n < 1:
        raise UsageError("--n must be at least 1")
    _echo("phantom", {"n": args.n, "seed": args.seed, "out_dir": args.out_dir, **spec.to_dict()})
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, (scan, mask) in enumerate(generate_dataset(spec, args.n, args.seed)):
        save_volume(out / f"scan_{i:03d}.vol", scan, "scan")
        save_volume(out / f"mask_{i:03d}.vol", mask, "mask")
        lines.append(f"scan_{i:03d}.vol mask_{i:03d}.vol")
    (out / INDEX_NAME).write_text("\n".join(lines) + "\n")
    print(f"wrote {2 * args.n} volumes and {INDEX_NAME} to {out}")
    return 0


def cmd_project(args) -> int:
    angles = parse_angles(args.angles)
    _echo("project", {"in": args.input, "angles": ",".join(f"{a:g}" for a in angles), "mode": args.mode,
                      "normalize": args.normalize, "out_dir": args.out_dir})
    vol, _ = load_volume(args.input)
    stack = (mip_stack if args.mode == "mip" else sum_stack)(vol, angles)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for a, img in zip(angles, stack.images.data):
        name = out / f"{args.mode}_{a:07.3f}.pgm"
        export_image(name, img, normalize=args.normalize)
        print(f"{name} min={img.min():.6f} max={img.max():.6f}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_config(args.config, {"seed": args.seed, "max_epochs": args.max_epochs, "p": args.p, "m": args.m})
    _echo("train", {"data": args.data, "out": args.out, **cfg.to_dict()})
    data = load_dataset(args.data)
    tr, va = split_train_val(range(len(data)), cfg.val_fraction, cfg.seed)
    model = build_model25d(cfg.unet_config, cfg.p, cfg.m, cfg.seed, cfg.np_dtype)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.txt"
    log_path.write_text("")

    def on_epoch(trainer):
        with log_path.open("a") as fh:
            fh.write(trainer.state.history[-1].line() + "\n")
        print(trainer.state.history[-1].line())
        save_checkpoint(out / "last.ckpt", model, trainer.state, cfg, trainer.optimizer, trainer.best)

    trainer = train(model, [data[i] for i in tr], [data[i] for i in va], cfg, on_epoch=on_epoch)
    save_checkpoint(out / "best.ckpt", model, trainer.state, cfg, trainer.optimizer, trainer.best)
    print(f"best epoch {trainer.state.best_epoch} val_loss={trainer.state.best_val:.6f} -> {out / 'best.ckpt'}")
    return 0


def cmd_predict(args) -> int:
    _echo("predict", {"checkpoint": args.checkpoint, "in": args.input, "out": args.out})
    ck = load_checkpoint(args.checkpoint)
    scan, _ = load_volume(args.input, "scan")
    if isinstance(ck.model, Model25D):
        prob = predict(ck.model, scan)
    else:
        prob = slice_by_slice_segment(ck.model, scan)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_volume(out / "prob.vol", prob, "prob")
    save_volume(out / "mask.vol", threshold_mask(prob), "mask")
    print(f"wrote {out / 'prob.vol'} and {out / 'mask.vol'}")
    return 0


def cmd_eval(args) -> int:
    _echo("eval", {"pred": args.pred, "truth": args.truth})
    pred, kind = load_volume(args.pred)
    truth, _ = load_volume(args.truth, "mask")
    if pred.shape != truth.shape:
        raise FormatError(f"prediction {pred.shape} and truth {truth.shape} differ")
    mask = pred if kind == "mask" else threshold_mask(pred)
    sys.stdout.write(evaluate(truth, mask).as_record())
    return 0


def format_table(summary: dict[str, dict[str, tuple[float, float]]]) -> str:
    lines = ["model MA_mean MA_std IU_mean IU_std DC_mean DC_std"]
    for model, stats in summary.items():
        cells = []
        for name in ("ma", "iu", "dc"):
            mean, std = stats[name]
            cells += [f"{mean:.6f}", f"{std:.6f}"]
        lines.append(" ".join([model] + cells))
    return "\n".join(lines) + "\n"


def cmd_compare(args) -> int:
    cfg = _resolve_config(args.config, {"folds": args.folds, "seed": args.seed, "max_epochs": args.max_epochs})
    _echo("compare", {"data": args.data, **cfg.to_dict()})
    data = load_dataset(args.data)
    summary = {}
    for kind, label in (("random25d", "random-2.5D"), ("slice", "slice-by-slice")):
        results = cross_validate(data, cfg, kind)
        for r in results:
            print(f"{label} fold={r.fold} epochs={r.epochs} MA={r.report.ma:.6f} IU={r.report.iu:.6f} DC={r.report.dc:.6f}")
        summary[label] = aggregate([r.report for r in results])
    sys.stdout.write(format_table(summary))
    if args.out:
        Path(args.out).write_text(format_table(summary))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rand25d", description="Random 2.5D U-net for sparse volumetric segmentation.")
    p.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("phantom", help="generate a synthetic vessel dataset")
    s.add_argument("--n", type=int, default=4, help="number of scan/mask pairs")
    s.add_argument("--dims", default=None, help="AxBxC, e.g. 32x64x64")
    s.add_argument("--spec-file", default=None, help="JSON PhantomSpec fields")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-dir", default="data")
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("project", help="export MIP or ray-sum images")
    s.add_argument("--in", dest="input", required=True, help="volume file")
    s.add_argument("--angles", default="0,36,72,108,144", help="comma-separated degrees in [0, 180)")
    s.add_argument("--mode", choices=("mip", "sum"), default="mip")
    s.add_argument("--normalize", action="store_true", help="stretch each image to the full gray range")
    s.add_argument("--out-dir", default="projections")
    s.set_defaults(func=cmd_project)

    s = sub.add_parser("train", help="train the random 2.5D model")
    s.add_argument("--data", required=True, help="directory written by `phantom`")
    s.add_argument("--config", default=None, help="key=value file of TrainConfig fields")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--max-epochs", type=int, default=None)
    s.add_argument("--p", type=int, default=None)
    s.add_argument("--m", type=int, default=None)
    s.add_argument("--out", default="run", help="directory for best.ckpt and train_log.txt")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", help="segment a scan with a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", default="prediction", help="directory for prob.vol and mask.vol")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("eval", help="score a prediction against a mask")
    s.add_argument("--pred", required=True)
    s.add_argument("--truth", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("compare", help="cross-validate random 2.5D against slice-by-slice")
    s.add_argument("--data", required=True)
    s.add_argument("--config", default=None)
    s.add_argument("--folds", type=int, default=None, help="cross-validation folds (config default 7)")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--max-epochs", type=int, default=None)
    s.add_argument("--out", default=None, help="also write the table here")
    s.set_defaults(func=cmd_compare)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    except (FileNotFoundError, FormatError, ConfigurationError, TrainingError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
