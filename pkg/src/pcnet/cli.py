"""pcnet command line: train, eval, pairs, synth, ablate, gradcheck, export-attn.

Every command that writes artifacts does so inside one run directory, by
default ``$PCNET_OUTPUT_ROOT/<command>-<timestamp>`` (``./runs`` when the
variable is unset). The directory holds a ``manifest.json`` describing the
resolved configuration and a lock file while the command is running.

Exit codes: 0 success, 2 configuration or usage error, 3 numerical failure,
4 I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from pcnet import __version__
from pcnet.checkpoint import CheckpointError, load_checkpoint
from pcnet.config import TrainConfig, from_mapping, parse_text
from pcnet.data import (Dataset, DatasetError, channel_stats, generate_synthetic, prepare_splits, resolve_dataset,
                        split, standardize, write_split_manifest, write_tree)
from pcnet.ops import ConfigurationError
from pcnet.pairing import PairingError, sample_batch, select_pairs, write_pairs_csv
from pcnet.tensor import DimensionError, Tensor, UsageError, no_grad
from pcnet.training import NumericalError, batch_spec, fit, init_state, metrics_path_for

logger = logging.getLogger("pcnet")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
OUTPUT_ROOT_ENV = "PCNET_OUTPUT_ROOT"
CHECKPOINT_NAME = "checkpoint.pcn"
LOCK_NAME = ".lock"


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_USAGE):
        super().__init__(message)
        self.code = code


# ------------------------------------------------------------------ run dirs

def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV) or "runs")


def new_run_dir(command: str, root: Path | None = None) -> Path:
    root = root or output_root()
    stamp = time.strftime("%Y%m%d-%H%M%S")
    for n in range(1000):
        path = root / (f"{command}-{stamp}" if n == 0 else f"{command}-{stamp}-{n}")
        try:
            path.mkdir(parents=True, exist_ok=False)
            return path
        except FileExistsError:
            continue
    raise CliError(f"could not allocate a run directory under {root}", EXIT_IO)


def run_dir_for(args, command: str) -> Path:
    explicit = getattr(args, "run_dir", None)
    if not explicit:
        return new_run_dir(command)
    path = Path(explicit)
    path.mkdir(parents=True, exist_ok=True)
    return path


@contextmanager
def run_lock(run_dir: Path):
    lock = run_dir / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise CliError(f"run directory {run_dir} is locked by another command ({lock})") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def write_manifest(run_dir: Path, command: str, config: TrainConfig | None, dataset: Dataset | None,
                   artifacts: dict, extra: dict | None = None) -> Path:
    manifest = {
        "command": command,
        "version": __version__,
        "config": parse_text(config.to_text()) if config is not None else None,
        "seed": config.seed if config is not None else None,
        "dataset_fingerprint": dataset.fingerprint() if dataset is not None else None,
        "dataset_size": len(dataset) if dataset is not None else None,
        "artifacts": {k: str(v) for k, v in artifacts.items()},
    }
    manifest.update(extra or {})
    path = run_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _attach_log(run_dir: Path) -> logging.Handler:
    handler = logging.FileHandler(run_dir / "log.txt")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logging.getLogger().addHandler(handler)
    return handler


# ------------------------------------------------------------------ config

_CONFIG_KEYS = ["lambda" if f.name == "lam" else f.name for f in dataclasses.fields(TrainConfig) if f.name != "extra"]


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value configuration file; flags override it")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any configuration key (repeatable)")
    group = p.add_argument_group("configuration keys")
    for key in _CONFIG_KEYS:
        flags = [f"--{key}"] + ([f"--{key.replace('_', '-')}"] if "_" in key else [])
        group.add_argument(*flags, dest=f"cfg_{key}", default=None, metavar="V")


def resolve_config(args, base: TrainConfig | None = None) -> TrainConfig:
    values = {}
    if getattr(args, "config", None):
        try:
            with open(args.config, encoding="utf-8") as fh:
                values.update(parse_text(fh.read()))
        except OSError as exc:
            raise CliError(f"cannot read config file {args.config}: {exc.strerror}") from None
    for item in getattr(args, "set", []) or []:
        if "=" not in item:
            raise CliError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    values.update(explicit_flags(args))
    return from_mapping(values, base)


def explicit_flags(args) -> dict:
    return {key: getattr(args, f"cfg_{key}") for key in _CONFIG_KEYS
            if getattr(args, f"cfg_{key}", None) is not None}


def load_data(cfg: TrainConfig) -> tuple[Dataset, Dataset, Dataset]:
    ds = resolve_dataset(cfg.dataset, cfg.input_size, cfg.synth_classes, cfg.synth_per_class, cfg.seed)
    train, test = prepare_splits(ds, cfg.train_fraction, cfg.seed)
    return ds, train, test


# ------------------------------------------------------------------ commands

def cmd_train(args) -> int:
    resume_state = None
    if args.resume:
        resume_state = load_checkpoint(args.resume)
        cfg = from_mapping(explicit_flags(args), resume_state.config)
        resume_state.config = cfg
        run_dir = Path(args.run_dir) if args.run_dir else Path(args.resume).parent
        run_dir.mkdir(parents=True, exist_ok=True)
    else:
        cfg = resolve_config(args)
        run_dir = run_dir_for(args, "train")
    with run_lock(run_dir):
        handler = _attach_log(run_dir)
        try:
            ds, train, test = load_data(cfg)
            metrics = metrics_path_for(run_dir)
            ckpt = run_dir / CHECKPOINT_NAME
            if resume_state is not None:
                state = resume_state
                if state.model.num_classes != train.num_classes:
                    raise CliError(f"checkpoint has {state.model.num_classes} classes, "
                                   f"dataset has {train.num_classes}")
                _truncate_metrics(metrics, state.epoch)
            else:
                state = init_state(cfg, train.num_classes, train.class_names)
                write_split_manifest(train, test, run_dir / "split.csv")
                write_manifest(run_dir, "train", cfg, ds, {"metrics": metrics, "checkpoint": ckpt,
                                                           "split": run_dir / "split.csv"})
            state.data_mean, state.data_std = train.mean, train.std
            fit(state, train, test, metrics_path=metrics, checkpoint_path=ckpt, stop_after=args.stop_after)
            last = state.history[-1] if state.history else {}
            print(f"run_dir={run_dir} epochs={state.epoch} test_OA={last.get('test_OA', float('nan')):.4f}")
        finally:
            logging.getLogger().removeHandler(handler)
            handler.close()
    return EXIT_OK


def _truncate_metrics(path: Path, epoch: int) -> None:
    """Drop metric rows written after the checkpoint we resume from."""
    if not path.exists():
        return
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    keep = rows[:1] + [r for r in rows[1:] if r and int(r[0]) <= epoch]
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(keep)


def _checkpoint_data(args, state) -> tuple[TrainConfig, Dataset, Dataset, Dataset]:
    """Dataset for a checkpoint-driven command, standardised with the checkpoint's statistics."""
    cfg = state.config
    dataset = getattr(args, "dataset", None) or getattr(args, "cfg_dataset", None)
    if dataset is not None:
        cfg = cfg.replace(dataset=dataset)
    ds = resolve_dataset(cfg.dataset, cfg.input_size, cfg.synth_classes, cfg.synth_per_class, cfg.seed)
    if ds.num_classes != state.model.num_classes:
        raise CliError(f"class count mismatch: checkpoint was trained for N={state.model.num_classes} classes "
                       f"but dataset {cfg.dataset!r} has N={ds.num_classes}")
    if ds.input_size != (state.model.backbone.input_size,) * 2:
        raise CliError(f"input size mismatch: checkpoint expects {state.model.backbone.input_size}, "
                       f"dataset has {ds.input_size}")
    train, test = split(ds, cfg.train_fraction, cfg.seed)
    if state.data_mean is not None:
        mean, std = state.data_mean, state.data_std
    else:
        mean, std = channel_stats(train)
    train, test, full = (standardize(part, mean, std) for part in (train, test, ds))
    return cfg, full, train, test


def cmd_eval(args) -> int:
    from pcnet.evaluation import evaluate, inference_equivalence_check, write_eval_report

    state = load_checkpoint(args.checkpoint)
    cfg, full, train, test = _checkpoint_data(args, state)
    part = {"test": test, "train": train, "all": full}[args.split]
    run_dir = run_dir_for(args, "eval")
    with run_lock(run_dir):
        report = evaluate(state.model, part, eval_eca=args.eval_eca, batch_size=cfg.eval_batch)
        confusion = run_dir / "confusion.csv"
        write_eval_report(report, confusion, state.class_names or part.class_names)
        check = inference_equivalence_check(state.model)
        (run_dir / "summary.txt").write_text(report.summary() + "\n")
        write_manifest(run_dir, "eval", cfg, full, {"confusion": confusion, "summary": run_dir / "summary.txt"},
                       {"checkpoint": str(args.checkpoint), "split": args.split, "eval_eca": args.eval_eca,
                        "overall_accuracy": report.overall_accuracy, "inference_equivalence": check.ok})
    print(report.summary())
    print(f"inference_equivalence={'ok' if check.ok else 'FAILED'}: {check.message}")
    return EXIT_OK


def _features(model, images: np.ndarray) -> np.ndarray:
    from pcnet import ops
    with no_grad():
        f = model.backbone(Tensor._wrap(images.astype(model.classifier.W.dtype, copy=False)))
        return ops.global_average_pool(f).data.astype(np.float64)


def cmd_pairs(args) -> int:
    from pcnet import seeding

    if args.checkpoint:
        state = load_checkpoint(args.checkpoint)
        cfg, full, train, _ = _checkpoint_data(args, state)
    else:
        cfg = resolve_config(args)
        ds, train, _ = load_data(cfg)
        full = standardize(ds, train.mean, train.std)
        state = init_state(cfg, ds.num_classes, ds.class_names)
    if args.indices:
        idx = np.array([int(v) for v in args.indices.split(",")], dtype=np.intp)
        if np.any(idx < 0) or np.any(idx >= len(full)):
            raise CliError(f"--indices must lie in [0, {len(full)})")
    else:
        spec = batch_spec(cfg, full.num_classes)
        idx = sample_batch(full.labels, spec, seeding.stream(cfg.seed, "sampler"))
    feats = _features(state.model, full.images[idx])
    assignment = select_pairs(feats, full.labels[idx], cfg.metric, cfg.strategy, seeding.stream(cfg.seed, "select"))
    run_dir = run_dir_for(args, "pairs")
    with run_lock(run_dir):
        out = run_dir / "pairs.csv"
        write_pairs_csv(assignment, out, ids=idx)
        np.savetxt(run_dir / "features.csv", feats, delimiter=",", fmt="%.17g")
        with open(run_dir / "batch.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["dataset_index", "label", "source"])
            for i in idx:
                w.writerow([int(i), int(full.labels[i]), full.sources[i]])
        write_manifest(run_dir, "pairs", cfg, full, {"pairs": out, "features": run_dir / "features.csv",
                                                     "batch": run_dir / "batch.csv"})
    print(f"pairs={out} anchors={len(idx)} metric={cfg.metric} strategy={cfg.strategy}")
    return EXIT_OK


def cmd_synth(args) -> int:
    run_dir = Path(args.out) if args.out else new_run_dir("synth")
    run_dir.mkdir(parents=True, exist_ok=True)
    if any(run_dir.iterdir()) and not args.out_existing_ok:
        raise CliError(f"output directory {run_dir} is not empty")
    ds = generate_synthetic(args.classes, args.per_class, (args.size, args.size), args.seed)
    with run_lock(run_dir):
        paths = write_tree(ds, run_dir / "images")
        write_manifest(run_dir, "synth", None, ds, {"images": run_dir / "images"},
                       {"classes": args.classes, "per_class": args.per_class, "size": args.size, "seed": args.seed})
    print(f"wrote {len(paths)} images in {ds.num_classes} classes to {run_dir / 'images'}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from pcnet.evaluation import AblationGrid, DEFAULT_LAMBDAS, ablation_delta, run_ablation

    cfg = resolve_config(args)
    lambdas = tuple(float(v) for v in args.lambdas.split(",")) if args.lambdas else DEFAULT_LAMBDAS
    if args.rows:
        grid = AblationGrid.select([r.strip() for r in args.rows.split(",") if r.strip()])
    else:
        grid = AblationGrid.default(lambdas, include_plain=args.include_plain)
    ds, train, test = load_data(cfg)
    run_dir = run_dir_for(args, "ablate")
    with run_lock(run_dir):
        handler = _attach_log(run_dir)
        try:
            write_manifest(run_dir, "ablate", cfg, ds, {"ablation": run_dir / "ablation.csv"},
                           {"rows": [r.row_id for r in grid.rows]})
            results = run_ablation(grid, train, test, cfg, run_dir)
        finally:
            logging.getLogger().removeHandler(handler)
            handler.close()
    for r in results:
        print(f"{r['row_id']:<22} OA={float(r['OA']):.4f} {r['status']}")
    delta = ablation_delta(results)
    if delta is not None:
        print(f"delta pcnet - baseline = {delta:+.4f}")
    failed = [r for r in results if r["status"] != "ok"]
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_gradcheck(args) -> int:
    from pcnet import gradcheck

    results = gradcheck.run(instances=args.instances, seed=args.seed, composite=not args.no_composite)
    print(gradcheck.format_table(results))
    return EXIT_OK if all(r.ok for r in results) else EXIT_NUMERIC


def cmd_export_attn(args) -> int:
    from pcnet.evaluation import export_attention_maps

    state = load_checkpoint(args.checkpoint)
    cfg, full, _, _ = _checkpoint_data(args, state)
    for i in (args.first, args.second):
        if not 0 <= i < len(full):
            raise CliError(f"image index {i} outside [0, {len(full)})")
    run_dir = run_dir_for(args, "export-attn")
    with run_lock(run_dir):
        export_attention_maps(state.model, full.images[args.first], full.images[args.second], run_dir)
        write_manifest(run_dir, "export-attn", cfg, full,
                       {name: run_dir / f"{name}.png" for name in ("self1", "self2", "mut")},
                       {"checkpoint": str(args.checkpoint), "first": args.first, "second": args.second,
                        "first_source": full.sources[args.first], "second_source": full.sources[args.second]})
    print(f"attention maps for images {args.first} and {args.second} written to {run_dir}")
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pcnet", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"pcnet {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model and write metrics, checkpoints and a manifest")
    _add_config_flags(t)
    t.add_argument("--run-dir", help="explicit run directory instead of a timestamped one")
    t.add_argument("--resume", metavar="CHECKPOINT", help="continue training from a checkpoint")
    t.add_argument("--stop-after", type=int, metavar="EPOCH", help="stop once this many epochs are complete")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="overall accuracy of a checkpoint on its test split")
    e.add_argument("checkpoint")
    e.add_argument("--dataset", help="'synth' or a folder tree; defaults to the checkpoint's dataset")
    e.add_argument("--split", choices=("test", "train", "all"), default="test")
    e.add_argument("--eval-eca", action="store_true", help="apply ECA at inference (ablation only)")
    e.add_argument("--run-dir")
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("pairs", help="dump the intra/inter pair assignment of one batch")
    _add_config_flags(pr)
    pr.add_argument("--checkpoint", help="use this checkpoint's weights and configuration")
    pr.add_argument("--indices", help="comma-separated dataset indices forming the batch")
    pr.add_argument("--run-dir")
    pr.set_defaults(func=cmd_pairs)

    s = sub.add_parser("synth", help="write the procedural texture dataset as a folder tree")
    s.add_argument("--classes", type=int, default=8)
    s.add_argument("--per-class", type=int, default=150)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", help="output directory (default: a new run directory)")
    s.add_argument("--out-existing-ok", action="store_true", help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_synth)

    a = sub.add_parser("ablate", help="run the ablation grid and write ablation.csv")
    _add_config_flags(a)
    a.add_argument("--rows", help="comma-separated row ids (default: the full grid)")
    a.add_argument("--lambdas", help="comma-separated lambda sweep values")
    a.add_argument("--include-plain", action="store_true", help="add the attention-free reference row")
    a.add_argument("--run-dir", help="reuse a directory; finished rows are taken from its cache")
    a.set_defaults(func=cmd_ablate)

    g = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    g.add_argument("--instances", type=int, default=20)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--no-composite", action="store_true", help="skip the full pair-forward check")
    g.set_defaults(func=cmd_gradcheck)

    x = sub.add_parser("export-attn", help="write self and mutual attention response maps for two images")
    x.add_argument("checkpoint")
    x.add_argument("first", type=int, help="dataset index of the first image")
    x.add_argument("second", type=int, help="dataset index of the second image")
    x.add_argument("--dataset")
    x.add_argument("--run-dir")
    x.set_defaults(func=cmd_export_attn)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigurationError, DatasetError, PairingError, DimensionError, UsageError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
