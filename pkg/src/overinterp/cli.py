"""Command-line pipeline: train, extract SIS, build and retrain on pixel
subsets, and run the aggregate analyses.

Every invocation writes ``<out>/<run>.manifest.json`` before doing any work.
The manifest holds the resolved configuration, the input files with their
sha256, and (after success) the sha256 of every output file. ``overinterp
rerun <manifest>`` repeats the run into a fresh directory and checks that
all outputs match byte for byte.

Seeds: the global ``--seed`` is split per purpose as
``SeedSequence([seed, crc32(purpose)]).generate_state(1)[0]``, so each stage
draws from its own stream no matter which other stages run.

Exit codes: 0 success, 1 usage, 2 bad input data, 3 numeric failure
(diverged training, or a rerun whose outputs differ).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import zlib
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import analysis, subsets as subsets_mod
from .data import (
    DataFormatError,
    ImageBatch,
    compute_stats,
    load_cifar10,
    normalize,
    synth_dataset,
    synth_images,
    write_cifar10,
)
from .masking import MaskFormatError, MaskingStrategy, read_masks
from .sis import BATCHED, EXACT, SisConfig, sis_batch, write_sis_results
from .smallnet import (
    CheckpointError,
    EnsembleClassifier,
    TrainConfig,
    TrainingDivergedError,
    load_checkpoint,
    save_checkpoint,
    train,
)

log = logging.getLogger("overinterp")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
MANIFEST_VERSION = 1


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def sub_seed(seed: int, purpose: str) -> int:
    """Per-purpose seed derived from the global one."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(purpose.encode())])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.replace("x", ",").split(",") if t.strip())


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.split(",") if t.strip())


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

# argument names holding input files; recorded with their sha256
INPUT_ARGS = ("data", "test_data", "model", "models", "subsets", "test_subsets", "masks", "members")


def _add_common(p):
    p.add_argument("--out", default=".", help="output directory; output names are relative to it")
    p.add_argument("--seed", type=int, default=0, help="global seed")
    p.add_argument("--config", help="JSON file of option defaults; explicit flags win")
    p.add_argument("--name", help="run name (manifest and default output stem)")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_data(p, required=True):
    p.add_argument("--data", nargs="+", required=required, help="CIFAR-format binary batch file(s)")
    p.add_argument("--shape", type=_ints, default=(32, 32, 3), help="image shape H,W,C (default 32,32,3)")
    p.add_argument("--limit", type=int, help="use only the first N images")


def _add_train(p):
    d = TrainConfig()
    p.add_argument("--hidden", type=_ints, default=(512,), help="hidden layer widths, e.g. 512 or 256,128")
    p.add_argument("--nonlinearity", choices=("relu", "tanh"), default="relu")
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--lr", type=float, default=d.lr)
    p.add_argument("--momentum", type=float, default=d.momentum)
    p.add_argument("--weight-decay", type=float, default=d.weight_decay)
    p.add_argument("--decay-epochs", type=_ints, default=d.decay_epochs)
    p.add_argument("--decay-factor", type=float, default=d.decay_factor)
    p.add_argument("--augment", action="store_true", help="random crops and flips during training")
    p.add_argument("--centering", choices=("channel", "image"), default="channel")
    p.add_argument("--num-classes", type=int, default=10)


def _add_sis(p):
    p.add_argument("--tau", type=float, help="SIS threshold (default 0.99 up to 32x32, else 0.9)")
    p.add_argument("--k", type=int, help="pixels per block (default 1 up to 32x32, else 100)")
    p.add_argument("--mode", choices=(EXACT, BATCHED), help="backward selection mode")
    p.add_argument("--strategy", choices=MaskingStrategy.KINDS, default="zero", help="masked pixel value")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="overinterp", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    cmds = {}

    p = cmds["make-synth"] = sub.add_parser("make-synth", help="write a synthetic dataset in CIFAR binary format")
    p.add_argument("--kind", choices=("images", "separable", "xor"), default="images")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--shape", type=_ints, default=(16, 16, 3))
    p.add_argument("--num-classes", type=int, default=10)
    p.add_argument("--output", default="synth.bin")

    p = cmds["train"] = sub.add_parser("train", help="train a model on full images")
    _add_data(p)
    p.add_argument("--test-data", nargs="+", help="held-out batches for reported accuracy")
    _add_train(p)
    p.add_argument("--output", default="model.ckpt")

    p = cmds["sis"] = sub.add_parser("sis", help="extract one SIS per confident image")
    _add_data(p)
    p.add_argument("--model", required=True)
    _add_sis(p)
    p.add_argument("--floor", type=float, help="confidence floor for including an image (default tau)")
    p.add_argument("--output", default="sis")

    p = cmds["make-subsets"] = sub.add_parser("make-subsets", help="build a pixel-subset dataset")
    _add_data(p)
    p.add_argument("--rho", type=float, default=0.05)
    p.add_argument("--kind", choices=("backselect", "random"), default="backselect")
    p.add_argument("--model", help="checkpoint whose ranking selects pixels (backselect kind)")
    _add_sis(p)
    p.add_argument("--output", default="subsets")

    p = cmds["retrain"] = sub.add_parser("retrain", help="train a fresh model on a pixel-subset dataset")
    _add_data(p)
    p.add_argument("--subsets", required=True, help="subset sidecar JSON built over --data")
    p.add_argument("--test-data", nargs="+")
    p.add_argument("--test-subsets", help="subset sidecar JSON built over --test-data")
    _add_train(p)
    p.add_argument("--output", default="retrained.ckpt")

    p = cmds["transfer"] = sub.add_parser("transfer", help="accuracy of every model on every model's subsets")
    _add_data(p)
    p.add_argument("--models", nargs="+", required=True)
    p.add_argument("--subsets", nargs="+", required=True, help="one sidecar per model, same order")
    p.add_argument("--strategy", choices=MaskingStrategy.KINDS, default="zero")
    p.add_argument("--output", default="transfer.csv")

    p = cmds["heatmap"] = sub.add_parser("heatmap", help="pixel-frequency heatmap of a mask set")
    p.add_argument("--masks", help="SISM container (SIS masks)")
    p.add_argument("--subsets", help="subset sidecar JSON (retain masks)")
    p.add_argument("--output", default="heatmap")

    p = cmds["analyze"] = sub.add_parser("analyze", help="SIS size curves, confidence drop, ensemble comparison")
    _add_data(p)
    p.add_argument("--model", required=True)
    _add_sis(p)
    p.add_argument("--taus", type=_floats, default=(0.5, 0.7, 0.9, 0.99))
    p.add_argument("--subsets", help="subset sidecar for the confidence-drop statistic")
    p.add_argument("--members", nargs="+", help="checkpoints forming an ensemble to compare")
    p.add_argument("--output", default="analysis")

    p = cmds["rerun"] = sub.add_parser("rerun", help="repeat a recorded run and verify its outputs")
    p.add_argument("manifest")
    p.add_argument("--out", help="directory for the repeated outputs (default <manifest dir>/rerun)")
    p.add_argument("-v", "--verbose", action="store_true")

    for name, p in cmds.items():
        if name != "rerun":
            _add_common(p)
    parser._cmds = cmds
    return parser


def _config_path(argv: Sequence[str]) -> Optional[str]:
    for i, a in enumerate(argv):
        if a == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if a.startswith("--config="):
            return a.split("=", 1)[1]
    return None


def parse_args(argv: Sequence[str]) -> argparse.Namespace:
    parser = build_parser()
    cfg_path = _config_path(argv)
    if cfg_path and argv and argv[0] in parser._cmds:
        try:
            cfg = json.loads(Path(cfg_path).read_text())
        except (OSError, ValueError) as e:
            raise UsageError(f"cannot read config {cfg_path}: {e}")
        cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
        sub = parser._cmds[argv[0]]
        unknown = set(cfg) - {a.dest for a in sub._actions}
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
        # config values become defaults, so explicit flags still override
        sub.set_defaults(**cfg)
        for action in sub._actions:
            if action.dest in cfg:
                action.required = False
    args = parser.parse_args(argv)
    if args.command is None:
        parser.error("a subcommand is required")
    return args


# ---------------------------------------------------------------------------
# helpers shared by subcommands
# ---------------------------------------------------------------------------


def _resolve_inputs(args) -> dict:
    """Make input paths absolute and check that they exist."""
    found = {}
    for key in INPUT_ARGS:
        val = getattr(args, key, None)
        if val is None:
            continue
        vals = val if isinstance(val, (list, tuple)) else [val]
        absolute = []
        for v in vals:
            path = Path(v).resolve()
            if not path.is_file():
                raise UsageError(f"--{key.replace('_', '-')}: no such file {v}")
            absolute.append(str(path))
            found[str(path)] = sha256(path)
        setattr(args, key, absolute if isinstance(val, (list, tuple)) else absolute[0])
    return found


def _jsonable(v):
    if isinstance(v, tuple):
        return list(v)
    return v


def _config_of(args) -> dict:
    skip = {"config", "verbose"}
    return {k: _jsonable(v) for k, v in sorted(vars(args).items()) if k not in skip and not k.startswith("_")}


def _load_batch(paths, shape, limit=None) -> ImageBatch:
    batch, _ = load_cifar10(paths, shape=tuple(shape))
    if limit is not None:
        batch = batch.take(np.arange(min(limit, len(batch))))
    return batch


def _sis_config(args, shape) -> SisConfig:
    over = {}
    if args.tau is not None:
        over["threshold"] = args.tau
    if args.k is not None:
        over["k"] = args.k
    if args.mode is not None:
        over["mode"] = args.mode
    return SisConfig.defaults_for(shape, **over)


def _strategy(kind, stats) -> MaskingStrategy:
    return MaskingStrategy(kind, None if kind == "zero" else stats)


def _train_config(args, purpose) -> TrainConfig:
    return TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, momentum=args.momentum,
        weight_decay=args.weight_decay, decay_epochs=tuple(args.decay_epochs), decay_factor=args.decay_factor,
        seed=sub_seed(args.seed, purpose), augment=args.augment,
    )


def _model_and_data(args, model_path=None):
    model, stats = load_checkpoint(model_path or args.model)
    if stats is None:
        raise DataFormatError(f"{model_path or args.model}: checkpoint has no normalization statistics")
    raw = _load_batch(args.data, model.input_shape, args.limit)
    centering = model.meta.get("centering", "channel")
    return model, stats, normalize(raw, stats, centering)


# ---------------------------------------------------------------------------
# subcommands; each returns the list of output paths it wrote
# ---------------------------------------------------------------------------


def cmd_make_synth(args, out: Path) -> list[Path]:
    seed = sub_seed(args.seed, "make-synth")
    shape = tuple(args.shape)
    if args.kind == "images":
        batch = synth_images(args.n, shape, args.num_classes, seed=seed)
    else:
        b = synth_dataset(args.kind, args.n, shape, seed=seed)
        raw = np.clip(np.round(128 + 32 * b.images), 0, 255)
        batch = ImageBatch(raw, b.labels)
    path = out / args.output
    write_cifar10(batch, path)
    return [path]


def cmd_train(args, out: Path) -> list[Path]:
    raw = _load_batch(args.data, args.shape, args.limit)
    stats = compute_stats(raw)
    data = normalize(raw, stats, args.centering)
    cfg = _train_config(args, "train")
    model = train(data, cfg, args.hidden, args.nonlinearity, num_classes=args.num_classes)
    metrics = {"train_accuracy": analysis.accuracy(model, data), "final_loss": model.history[-1]}
    if args.test_data:
        test = normalize(_load_batch(args.test_data, args.shape), stats, args.centering)
        metrics["test_accuracy"] = analysis.accuracy(model, test)
    ckpt = out / args.output
    save_checkpoint(model, ckpt, stats, {"train_config": cfg.to_dict(), "centering": args.centering})
    mpath = ckpt.with_suffix(".metrics.json")
    mpath.write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    log.info("train accuracy %.2f%%", metrics["train_accuracy"])
    print(json.dumps(metrics, sort_keys=True))
    return [ckpt, mpath]


def cmd_sis(args, out: Path) -> list[Path]:
    model, stats, data = _model_and_data(args)
    cfg = _sis_config(args, data.shape)
    cfg = SisConfig(cfg.threshold, cfg.k, cfg.mode, _strategy(args.strategy, stats))
    results = sis_batch(model, data, cfg, args.floor)
    stem = out / args.output
    mask_path, csv_path = stem.with_suffix(".sism"), stem.with_suffix(".csv")
    write_sis_results(results, mask_path, csv_path, data.shape[:2])
    log.info("%d of %d images had a SIS", sum(r is not None for r in results), len(results))
    return [mask_path, csv_path]


def cmd_make_subsets(args, out: Path) -> list[Path]:
    if args.kind == "backselect":
        if not args.model:
            raise UsageError("--model is required for backselect subsets")
        model, stats, data = _model_and_data(args)
        # exact selection unless asked otherwise; the threshold plays no role in a ranking
        cfg = SisConfig(1.0, args.k or 1, args.mode or EXACT, _strategy(args.strategy, stats))
        s = subsets_mod.build_backselect_subsets(model, data, args.rho, cfg)
        shape = model.input_shape
    else:
        shape = tuple(args.shape)
        raw = _load_batch(args.data, shape, args.limit)
        s = subsets_mod.build_random_subsets(raw, args.rho, sub_seed(args.seed, "make-subsets"), strategy=args.strategy)
    manifest = None if args.limit is not None else load_cifar10(args.data, shape=shape)[1]
    s = subsets_mod.SubsetDataset(s.masks, s.spec, None, manifest)
    side = subsets_mod.save_subsets(s, out / args.output)
    return [side.with_suffix(".sism"), side]


def cmd_retrain(args, out: Path) -> list[Path]:
    raw = _load_batch(args.data, args.shape, args.limit)
    stats = compute_stats(raw)
    data = normalize(raw, stats, args.centering)
    s = subsets_mod.load_subsets(args.subsets)
    strat = _strategy(s.spec.strategy, stats)
    cfg = _train_config(args, "retrain")
    model = subsets_mod.retrain_on_subsets(s, data, cfg, args.hidden, args.nonlinearity, strat, num_classes=args.num_classes)
    metrics = {"train_accuracy": analysis.accuracy(model, subsets_mod.materialize(s, data, strat))}
    if args.test_data:
        test = normalize(_load_batch(args.test_data, args.shape), stats, args.centering)
        if args.test_subsets:
            test = subsets_mod.materialize(subsets_mod.load_subsets(args.test_subsets), test, strat)
        metrics["test_accuracy"] = analysis.accuracy(model, test)
    ckpt = out / args.output
    save_checkpoint(model, ckpt, stats, {"train_config": cfg.to_dict(), "centering": args.centering,
                                         "subset_spec": s.spec.to_dict()})
    mpath = ckpt.with_suffix(".metrics.json")
    mpath.write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    print(json.dumps(metrics, sort_keys=True))
    return [ckpt, mpath]


def cmd_transfer(args, out: Path) -> list[Path]:
    if len(args.models) != len(args.subsets):
        raise UsageError("--models and --subsets need the same number of entries")
    models = []
    for path in args.models:
        model, stats, batch = _model_and_data(args, path)
        models.append((model, stats, batch))
    # each model reads inputs in its own normalization; masks are shared
    acc = np.zeros((len(models), len(models)))
    subs = [subsets_mod.load_subsets(p) for p in args.subsets]
    for i, s in enumerate(subs):
        for j, (model, stats, batch) in enumerate(models):
            shown = subsets_mod.materialize(s, batch, _strategy(args.strategy, stats))
            acc[i, j] = analysis.accuracy(model, shown)
    labels = tuple(Path(p).stem for p in args.models)
    tm = analysis.TransferMatrix(acc, labels)
    path = out / args.output
    analysis.write_transfer_csv(tm, path)
    return [path]


def cmd_heatmap(args, out: Path) -> list[Path]:
    if bool(args.masks) == bool(args.subsets):
        raise UsageError("give exactly one of --masks or --subsets")
    masks = read_masks(args.masks) if args.masks else subsets_mod.load_subsets(args.subsets).masks
    h = analysis.heatmap(masks)
    return list(analysis.render_heatmap(h, out / args.output))


def cmd_analyze(args, out: Path) -> list[Path]:
    model, stats, data = _model_and_data(args)
    cfg = _sis_config(args, data.shape)
    cfg = SisConfig(cfg.threshold, cfg.k, cfg.mode, _strategy(args.strategy, stats))
    stem = out / args.output
    written = []
    curves = analysis.sis_size_curves(model, data, sorted(args.taus), cfg)
    path = stem.with_name(stem.name + "_size_curves.csv")
    analysis.write_size_curves_csv(curves, path)
    written.append(path)
    if args.subsets:
        drop = analysis.confidence_drop(model, data, subsets_mod.load_subsets(args.subsets), cfg.strategy)
        path = stem.with_name(stem.name + "_confidence_drop.csv")
        analysis.write_drop_csv(drop, path)
        written.append(path)
    if args.members:
        members = [load_checkpoint(p)[0] for p in args.members]
        cmp_ = analysis.ensemble_sis_comparison(EnsembleClassifier(members), members, data, cfg.threshold, cfg)
        path = stem.with_name(stem.name + "_ensemble.json")
        path.write_text(json.dumps({k: _jsonable(v) for k, v in vars(cmp_).items()}, indent=2, sort_keys=True) + "\n")
        written.append(path)
    return written


COMMANDS = {
    "make-synth": cmd_make_synth,
    "train": cmd_train,
    "sis": cmd_sis,
    "make-subsets": cmd_make_subsets,
    "retrain": cmd_retrain,
    "transfer": cmd_transfer,
    "heatmap": cmd_heatmap,
    "analyze": cmd_analyze,
}


# ---------------------------------------------------------------------------
# manifests and dispatch
# ---------------------------------------------------------------------------


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def execute(args) -> Path:
    """Run one subcommand under a manifest; returns the manifest path."""
    out = Path(args.out).resolve()
    out.mkdir(parents=True, exist_ok=True)
    args.out = str(out)
    inputs = _resolve_inputs(args)
    name = args.name or args.command
    manifest_path = out / f"{name}.manifest.json"
    manifest = {
        "version": MANIFEST_VERSION,
        "command": args.command,
        "config": _config_of(args),
        "seeds": {"global": args.seed, args.command: sub_seed(args.seed, args.command)},
        "inputs": inputs,
        "outputs": {},
        "status": "running",
    }
    _write_json(manifest_path, manifest)
    written = COMMANDS[args.command](args, out)
    manifest["outputs"] = {str(p.relative_to(out)): sha256(p) for p in written}
    manifest["status"] = "complete"
    _write_json(manifest_path, manifest)
    return manifest_path


def rerun(manifest_path, out: Optional[str] = None) -> tuple[Path, list[str]]:
    """Repeat a recorded run; returns the new manifest and mismatching outputs."""
    manifest_path = Path(manifest_path).resolve()
    old = json.loads(manifest_path.read_text())
    if old.get("status") != "complete":
        raise UsageError(f"{manifest_path}: run did not complete")
    for path, digest in old["inputs"].items():
        if not Path(path).is_file() or sha256(path) != digest:
            raise DataFormatError(f"input {path} is missing or changed since the recorded run")
    target = Path(out) if out else manifest_path.parent / "rerun"
    args = argparse.Namespace(**old["config"])
    args.out = str(target)
    args.config = None
    new_path = execute(args)
    new = json.loads(new_path.read_text())
    bad = sorted(k for k in set(old["outputs"]) | set(new["outputs"])
                 if old["outputs"].get(k) != new["outputs"].get(k))
    return new_path, bad


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command == "rerun":
            new_path, bad = rerun(args.manifest, args.out)
            if bad:
                print(f"outputs differ from the recorded run: {', '.join(bad)}", file=sys.stderr)
                return EXIT_NUMERIC
            print(f"all outputs reproduced bit-for-bit ({new_path})")
            return EXIT_OK
        path = execute(args)
        print(f"manifest: {path}")
        return EXIT_OK
    except UsageError as e:
        print(f"overinterp: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataFormatError, MaskFormatError, CheckpointError) as e:
        print(f"overinterp: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDivergedError, FloatingPointError) as e:
        print(f"overinterp: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"overinterp: error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
