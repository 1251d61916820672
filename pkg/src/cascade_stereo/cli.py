"""Command-line entry point: train, predict, eval, selftest and synth.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric abort or
failed self-check.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import data_io, metrics, net, selftest, training
from .tensor import ShapeError, no_grad

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

logger = logging.getLogger("cascade_stereo")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# Flag destination -> TrainConfig field. Values not given on the command line
# fall back to the config file, then to the TrainConfig defaults.
TRAIN_FIELDS = {
    "lr": "learning_rate",
    "batch": "batch_size",
    "crop_h": "crop_height",
    "crop_w": "crop_width",
    "max_disparity": "max_disparity",
    "iters": "iterations",
    "seed": "seed",
    "checkpoint_interval": "checkpoint_interval",
    "profile": "profile",
}


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError(f"size must be positive, got {text!r}")
    return h, w


def parse_scene(text: str) -> tuple[str, int | None]:
    """``"constant:5"`` -> ``("constant", 5)``; the value part is optional."""
    name, _, value = text.partition(":")
    if name not in data_io.SCENES:
        raise argparse.ArgumentTypeError(f"unknown scene {name!r}; expected one of {', '.join(data_io.SCENES)}")
    try:
        return name, (int(value) if value else None)
    except ValueError:
        raise argparse.ArgumentTypeError(f"scene value must be an integer, got {value!r}") from None


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--profile", choices=net.PROFILES, default=None)
    p.add_argument("--max-disparity", type=_positive_int, default=None)


def _add_common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=_positive_int, default=None, help="BLAS threads (default 1)")
    p.add_argument("--config", type=Path, default=None, help="key=value file; flags override it")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cascade-stereo", description="Stereo matching network trained from scratch on numpy.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train on a dataset directory or a synthetic scene")
    _add_model_flags(p)
    _add_common_flags(p)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch", type=_positive_int, default=None)
    p.add_argument("--crop-h", type=int, default=None)
    p.add_argument("--crop-w", type=int, default=None)
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--checkpoint-interval", type=_positive_int, default=None)
    p.add_argument("--checkpoint", type=Path, default=None, help="initial weights")
    p.add_argument("--out", type=Path, default=None, help="run directory for checkpoints and loss.log")
    p.add_argument("--data", type=Path, default=None, help="directory with left/, right/ and disp/")
    p.add_argument("--scene", type=parse_scene, default=None, help="synthetic scene, e.g. constant:5")
    p.add_argument("--size", type=_size, default=None, help="synthetic image size HxW")
    p.add_argument("--print-config", action="store_true", help="echo the resolved configuration and exit")

    p = sub.add_parser("predict", help="disparity map for one stereo pair")
    _add_model_flags(p)
    _add_common_flags(p)
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--left", type=Path, default=None)
    p.add_argument("--right", type=Path, default=None)
    p.add_argument("--out", type=Path, default=None, help="16-bit disparity PNG")
    p.add_argument("--heatmap", type=Path, default=None, help="optional PNG of the per-pixel minimum cost")

    p = sub.add_parser("eval", help="error table for predicted disparity maps")
    _add_common_flags(p)
    p.add_argument("--pred", type=Path, default=None, help="disparity PNG or directory of them")
    p.add_argument("--gt", type=Path, default=None, help="ground truth PNG or directory")
    p.add_argument("--noc", type=Path, default=None, help="non-occluded ground truth PNG or directory")
    p.add_argument("--out", type=Path, default=None, help="also write the report as CSV")

    p = sub.add_parser("selftest", help="gradient, shape and oracle checks")
    _add_common_flags(p)
    p.add_argument("--perturb", default=None, help=argparse.SUPPRESS)

    p = sub.add_parser("synth", help="write synthetic pairs as a dataset directory")
    _add_model_flags(p)
    _add_common_flags(p)
    p.add_argument("--scene", type=parse_scene, default=None)
    p.add_argument("--size", type=_size, default=None)
    p.add_argument("--count", type=_positive_int, default=None)
    p.add_argument("--out", type=Path, default=None)
    return parser


# ---------------------------------------------------------------------------
# configuration resolution


def read_config_file(path: Path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment.

    Keys are flag names (``crop-h`` or ``crop_h``) or TrainConfig field names.
    """
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        values[key.strip().lstrip("-").replace("-", "_")] = value.strip()
    return values


def resolve(args: argparse.Namespace, parser: argparse.ArgumentParser) -> argparse.Namespace:
    """Fill unset flags from the config file. Unknown keys are usage errors."""
    if args.config is None:
        return args
    sub = parser._subparsers._group_actions[0].choices[args.command]  # noqa: SLF001
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}  # noqa: SLF001
    aliases = {field: dest for dest, field in TRAIN_FIELDS.items()}
    for key, text in read_config_file(args.config).items():
        key = aliases.get(key, key)
        action = actions.get(key)
        if action is None:
            raise UsageError(f"{args.config}: unknown key {key!r} for {args.command}")
        if getattr(args, key) is not None and getattr(args, key) is not False:
            continue
        try:
            if isinstance(action, argparse._StoreTrueAction):  # noqa: SLF001
                if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(f"expected a boolean, got {text!r}")
                value = text.lower() in ("true", "1", "yes")
            else:
                value = action.type(text) if action.type is not None else text
        except (argparse.ArgumentTypeError, ValueError) as exc:
            raise UsageError(f"{args.config}: bad value for {key}: {exc}") from exc
        if action.choices is not None and value not in action.choices:
            raise UsageError(f"{args.config}: {key} must be one of {list(action.choices)}")
        setattr(args, key, value)
    return args


def train_config(args: argparse.Namespace) -> training.TrainConfig:
    given = {field: getattr(args, dest) for dest, field in TRAIN_FIELDS.items() if getattr(args, dest, None) is not None}
    try:
        return training.TrainConfig(**given)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def format_config(config: training.TrainConfig, threads: int) -> str:
    d = config.as_dict()
    lines = [
        f"lr={d['learning_rate']}",
        f"batch={d['batch_size']}",
        f"crop={d['crop_height']}x{d['crop_width']}",
        f"D={d['max_disparity']}",
        f"optimizer={d['optimizer']}",
        f"adagrad_epsilon={d['adagrad_epsilon']}",
        f"iterations={d['iterations']}",
        f"checkpoint_interval={d['checkpoint_interval']}",
        f"profile={d['profile']}",
        f"seed={d['seed']}",
        f"threads={threads}",
    ]
    return "\n".join(lines)


def default_scene_size(crop_height: int, crop_width: int, max_disparity: int) -> tuple[int, int]:
    """Smallest synthetic image on which crops can still be placed at several offsets."""
    return crop_height, crop_width + 2 * max_disparity


def _require(args, *names):
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n) is None]
    if missing:
        raise UsageError(f"{args.command}: missing required {', '.join(missing)}")


def _check_file(path: Path, what: str) -> None:
    if not path.is_file():
        raise FileNotFoundError(f"{what} not found: {path}")


def _check_writable_parent(path: Path) -> None:
    parent = path.parent if path.parent != Path("") else Path(".")
    probe = parent
    while not probe.exists():
        probe = probe.parent
    if not probe.is_dir() or not os.access(probe, os.W_OK):
        raise PermissionError(f"cannot write under {parent}")


# ---------------------------------------------------------------------------
# commands


def cmd_train(args: argparse.Namespace) -> int:
    config = train_config(args)
    threads = args.threads or 1
    if args.print_config:
        print(format_config(config, threads))
        return EXIT_OK
    if (args.data is None) == (args.scene is None):
        raise UsageError("train: give exactly one of --data or --scene")
    out = args.out or Path("run")
    pairs = data_io.pair_dataset(args.data) if args.data is not None else None
    if args.checkpoint is not None:
        _check_file(args.checkpoint, "checkpoint")
    _check_writable_parent(out / "loss.log")

    print(format_config(config, threads), flush=True)
    if pairs is not None:
        dataset = data_io.load_dataset(args.data)
        logger.info("loaded %d pairs from %s", len(pairs), args.data)
    else:
        name, value = args.scene
        h, w = args.size or default_scene_size(config.crop_height, config.crop_width, config.max_disparity)
        sample = data_io.generate_synthetic_pair(h, w, config.max_disparity, name, texture_seed=config.seed, value=value)
        dataset = [data_io.StereoSample(data_io.normalize(sample.left), data_io.normalize(sample.right),
                                        sample.gt_disparity, sample.valid_mask)]
    for sample in dataset:
        training.crop_range(sample.left.shape[:2], config)
    weights = data_io.load_checkpoint(args.checkpoint, config.model) if args.checkpoint is not None else None

    out.mkdir(parents=True, exist_ok=True)
    partial_log, final_log = out / ".loss.log.partial", out / "loss.log"
    partial_log.unlink(missing_ok=True)

    def progress(it, value, _weights):
        if it == 1 or it % 100 == 0:
            logger.info("iter %d loss %.6f", it, value)

    try:
        result = training.train_loop(dataset, config, weights, log_path=partial_log, checkpoint_dir=out, callback=progress)
    except BaseException:
        partial_log.unlink(missing_ok=True)
        raise
    os.replace(partial_log, final_log)
    if result.losses:
        print(f"initial loss {result.losses[0]:.6f}, final loss {result.losses[-1]:.6f}")
    if result.checkpoints:
        print(f"checkpoint {result.checkpoints[-1]}")
    return EXIT_OK


def _model_config_from_flags(args) -> net.ModelConfig | None:
    if args.profile is None and args.max_disparity is None:
        return None
    defaults = net.ModelConfig()
    return net.ModelConfig(args.max_disparity or defaults.max_disparity, args.profile or defaults.profile)


def predict_pair(weights: net.NetworkWeights, left: np.ndarray, right: np.ndarray) -> net.ForwardResult:
    """Normalized images to disparity, inference mode, no tape."""
    with no_grad():
        return net.full_forward(data_io.normalize(left), data_io.normalize(right), weights, training=False)


def cmd_predict(args: argparse.Namespace) -> int:
    _require(args, "checkpoint", "left", "right", "out")
    _check_file(args.checkpoint, "checkpoint")
    _check_file(args.left, "left image")
    _check_file(args.right, "right image")
    _check_writable_parent(args.out)
    if args.heatmap is not None:
        _check_writable_parent(args.heatmap)

    weights = data_io.load_checkpoint(args.checkpoint, _model_config_from_flags(args))
    left, right = data_io.load_image(args.left), data_io.load_image(args.right)
    if left.shape != right.shape:
        raise data_io.FormatError(f"left {left.shape} and right {right.shape} images differ in size")
    result = predict_pair(weights, left, right)
    data_io.save_disparity_png(result.disparity, args.out)
    if args.heatmap is not None:
        data_io.save_cost_heatmap(result.final_cost.data.min(axis=-1), args.heatmap)
    print(f"wrote {args.out}")
    return EXIT_OK


def _collect(path: Path, what: str) -> dict[str, Path]:
    if path.is_dir():
        files = {p.stem: p for p in sorted(path.iterdir()) if p.suffix.lower() in data_io.IMAGE_SUFFIXES}
        if not files:
            raise data_io.FormatError(f"no disparity files in {path}")
        return files
    _check_file(path, what)
    return {path.stem: path}


def _match(reference: dict[str, Path], other: dict[str, Path], what: str) -> None:
    missing = [f"{name}: no {what} file" for name in reference if name not in other]
    missing += [f"{name}: no prediction file" for name in other if name not in reference]
    if missing:
        raise data_io.FormatError("; ".join(missing))


def evaluate_files(pred: Path, gt: Path, noc: Path | None = None) -> dict[str, Any]:
    """Per-file reports plus an aggregate that pools pixels across files."""
    preds = _collect(pred, "prediction")
    gts = _collect(gt, "ground truth")
    if len(preds) == 1 and len(gts) == 1 and not pred.is_dir() and not gt.is_dir():
        gts = {next(iter(preds)): next(iter(gts.values()))}
    _match(preds, gts, "ground truth")
    nocs = None
    if noc is not None:
        nocs = _collect(noc, "non-occluded ground truth")
        if len(nocs) == 1 and not noc.is_dir():
            nocs = {next(iter(preds)): next(iter(nocs.values()))}
        _match(preds, nocs, "non-occluded ground truth")

    rows: dict[str, Any] = {}
    pooled: dict[str, list] = {"all": [], "non_occluded": []}
    for name, pred_path in preds.items():
        p, _ = data_io.load_disparity_png(pred_path)
        g, mask = data_io.load_disparity_png(gts[name])
        if p.shape != g.shape:
            raise data_io.FormatError(f"{name}: prediction {p.shape} and ground truth {g.shape} differ in size")
        p = np.maximum(p, 0.0)  # an invalid (0) prediction counts as disparity 0
        masks = {"all": mask}
        if nocs is not None:
            g_noc, noc_mask = data_io.load_disparity_png(nocs[name])
            if g_noc.shape != g.shape:
                raise data_io.FormatError(f"{name}: non-occluded ground truth has size {g_noc.shape}")
            masks["non_occluded"] = noc_mask
            pooled["non_occluded"].append((p[noc_mask], g_noc[noc_mask]))
        pooled["all"].append((p[mask], g[mask]))
        for key, m in masks.items():
            rows[f"{name}/{key}"] = metrics.report(p, g if key == "all" else g_noc, m)
    for key, parts in pooled.items():
        if parts:
            pp = np.concatenate([a for a, _ in parts])
            gg = np.concatenate([b for _, b in parts])
            rows[f"aggregate/{key}"] = metrics.report(pp, gg, np.ones(pp.shape, bool))
    return rows


def cmd_eval(args: argparse.Namespace) -> int:
    _require(args, "pred", "gt")
    for path, what in ((args.pred, "predictions"), (args.gt, "ground truth"), (args.noc, "non-occluded ground truth")):
        if path is not None and not path.exists():
            raise FileNotFoundError(f"{what} not found: {path}")
    if args.out is not None:
        _check_writable_parent(args.out)
    rows = evaluate_files(args.pred, args.gt, args.noc)
    print(metrics.format_table(rows))
    if args.out is not None:
        text = metrics.format_csv(rows)
        data_io.atomic_write(args.out, lambda tmp: Path(tmp).write_text(text, encoding="utf-8"))
    return EXIT_OK


def cmd_selftest(args: argparse.Namespace) -> int:
    if args.perturb is not None and not callable(getattr(selftest.ops, args.perturb, None)):
        raise UsageError(f"selftest: no op named {args.perturb!r}")
    results = selftest.run_selftest(seed=args.seed or 0, perturb=args.perturb)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:32s} {r.seconds:6.2f}s  {r.detail}")
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed" + (f"; failed: {', '.join(failed)}" if failed else ""))
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_synth(args: argparse.Namespace) -> int:
    _require(args, "out")
    max_disp = args.max_disparity or training.TrainConfig().max_disparity
    name, value = args.scene or ("constant", None)
    defaults = training.TrainConfig()
    h, w = args.size or default_scene_size(defaults.crop_height, defaults.crop_width, max_disp)
    if max_disp >= w:
        raise UsageError(f"synth: --max-disparity {max_disp} must be smaller than the image width {w}")
    _check_writable_parent(args.out / "left" / "x.png")
    seed = args.seed or 0
    for i in range(args.count or 1):
        sample = data_io.generate_synthetic_pair(h, w, max_disp, name, texture_seed=seed + i, value=value)
        stem = f"{i:06d}"
        data_io.save_image(sample.left, args.out / "left" / f"{stem}.png")
        data_io.save_image(sample.right, args.out / "right" / f"{stem}.png")
        data_io.save_disparity_png(sample.gt_disparity, args.out / "disp" / f"{stem}.png", sample.valid_mask)
    print(f"wrote {args.count or 1} {name} pair(s) of size {h}x{w} to {args.out}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "predict": cmd_predict, "eval": cmd_eval, "selftest": cmd_selftest, "synth": cmd_synth}


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    parser = build_parser()
    try:
        args = resolve(parser.parse_args(argv), parser)
        with threadpool_limits(limits=args.threads or 1):
            return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except training.NumericalAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, data_io.FormatError, ShapeError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
