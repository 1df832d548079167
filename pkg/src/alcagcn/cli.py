"""Command-line entry point: ``alcagcn {prep,synth,train,eval,gradcheck,ablate}``.

Exit codes: 0 success, 2 configuration error, 3 data error (missing or
malformed input), 4 runtime failure (divergence, contract violation),
5 gradient check failed.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import re
import sys
import warnings
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import __version__
from .ablation import rows_to_csv, run_ablation
from .config import ConfigValidationError, RunConfig, default_eval_classes, load_config
from .dataset import Dataset, DatasetFormatError, ProtocolError, assign_protocol_split, load_dataset, save_dataset
from .fewshot import SamplingError, TrainingDiverged, dataset_arrays, evaluate_oneshot, train
from .gradcheck import run_suite
from .model import CheckpointError, Model, load_checkpoint, save_checkpoint
from .skeleton import SkeletonParseError, preprocess, read_skeleton_file
from .synthetic import generate_synthetic_dataset
from .tensor import ContractError, NonFiniteError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4
EXIT_CHECK_FAILED = 5

log = logging.getLogger("alcagcn")


class DataError(RuntimeError):
    pass


def _provenance(cfg: RunConfig) -> dict:
    return {"run_config": cfg.to_dict(), "seed": cfg.seed, "config_hash": cfg.hash(), "version": __version__}


def _split(cfg: RunConfig, ds: Dataset) -> Dataset:
    eval_classes = cfg.data.eval_classes
    if eval_classes is None:
        eval_classes = default_eval_classes(ds.labels)
    return assign_protocol_split(ds, eval_classes, cfg.data.val_fraction, cfg.seed)


def _load_dataset(path: str) -> Dataset:
    try:
        return load_dataset(path)
    except FileNotFoundError as exc:
        raise DataError(f"dataset not found: {path}") from exc


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_prep(cfg: RunConfig, args) -> int:
    src = Path(args.input_dir)
    if not src.is_dir():
        raise DataError(f"not a readable directory: {src}")
    files = sorted(src.glob("*.skeleton"))
    if not files:
        raise DataError(f"no .skeleton files in {src}")
    pattern = re.compile(cfg.data.label_pattern)
    seqs, names, failures = [], [], []
    for path in files:
        try:
            seq = read_skeleton_file(path, pattern)
            seqs.append(preprocess(seq, cfg.data.frames))
            names.append(path.name)
        except (SkeletonParseError, ValueError, OSError) as exc:
            failures.append(f"{path.name}: {exc}")
    for msg in failures:
        print(f"error: {msg}", file=sys.stderr)
    if failures and not args.skip_bad:
        raise DataError(f"{len(failures)} of {len(files)} files failed to parse (use --skip-bad to drop them)")
    if not seqs:
        raise DataError("no parsable skeleton files")
    if failures:
        warnings.warn(f"skipped {len(failures)} unparsable file(s)", stacklevel=1)
    ds = Dataset(seqs, meta={"source": str(src), "files": names, "skipped": len(failures),
                             "preprocessed": cfg.data.frames, **_provenance(cfg)})
    ds = _split(cfg, ds)
    save_dataset(ds, args.output)
    print(f"wrote {len(ds)} sequences ({len(ds.class_ids)} classes) to {args.output}")
    return EXIT_OK


def cmd_synth(cfg: RunConfig, args) -> int:
    s = cfg.synth
    raw = generate_synthetic_dataset(s.n_classes, s.n_per_class, cfg.seed, s.difficulty)
    seqs = [preprocess(q, cfg.data.frames) for q in raw.sequences]
    ds = _split(cfg, Dataset(seqs, meta={**raw.meta, "preprocessed": cfg.data.frames, **_provenance(cfg)}))
    save_dataset(ds, args.output)
    print(f"wrote {len(ds)} synthetic sequences to {args.output}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    ds = _load_dataset(args.dataset)
    model = Model(cfg.model_config(), seed=cfg.seed)
    header = {"type": "config", **_provenance(cfg)}
    metrics_path = Path(args.metrics) if args.metrics else Path(args.checkpoint).with_suffix(".metrics.jsonl")
    with open(metrics_path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")

        def on_epoch(rec):
            fh.write(json.dumps({"type": "epoch", **rec}, sort_keys=True) + "\n")
            fh.flush()

        try:
            result = train(model, ds, cfg.train_config(), on_epoch=on_epoch,
                           arrays=dataset_arrays(ds, cfg.data.frames))
        except TrainingDiverged as exc:
            save_checkpoint(model, args.checkpoint, {**_provenance(cfg), "diverged": True})
            raise RuntimeError(f"{exc}; last finite state saved to {args.checkpoint}") from exc
        summary = {"type": "summary", "best_epoch": result.best_epoch,
                   "best_val_accuracy": result.best_val_accuracy, "stopped_early": result.stopped_early}
        fh.write(json.dumps(summary, sort_keys=True) + "\n")
    save_checkpoint(model, args.checkpoint, {**_provenance(cfg), "best_epoch": result.best_epoch})
    print(f"trained {len(result.metrics)} epochs, best val accuracy {result.best_val_accuracy:.4f} "
          f"(epoch {result.best_epoch}); checkpoint {args.checkpoint}, metrics {metrics_path}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    try:
        model, meta = load_checkpoint(args.checkpoint)
    except FileNotFoundError as exc:
        raise DataError(f"checkpoint not found: {args.checkpoint}") from exc
    ds = _load_dataset(args.dataset)
    report = evaluate_oneshot(model, ds, include_references=cfg.eval.include_references,
                              dump_distances=cfg.eval.dump_distances, arrays=dataset_arrays(ds, cfg.data.frames))
    report.config = {**_provenance(cfg), "checkpoint": {k: meta.get(k) for k in ("run_config", "seed", "config_hash")}}
    text = report.to_json() + "\n"
    if args.output:
        Path(args.output).write_text(text)
        print(f"accuracy {report.accuracy:.4f} over {len(report.predictions)} queries; report {args.output}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    results = run_suite(cfg.seed)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    total = sum(r.seconds for r in results)
    print(f"{len(results) - len(failed)}/{len(results)} checks passed in {total:.1f}s")
    return EXIT_CHECK_FAILED if failed else EXIT_OK


def cmd_ablate(cfg: RunConfig, args) -> int:
    ds = _load_dataset(args.dataset)

    def on_row(row):
        print(f"{row['variant']:<24} accuracy {row['accuracy']:.4f}", flush=True)

    rows = run_ablation(cfg, ds, on_row=on_row)
    Path(args.output).write_text(rows_to_csv(rows))
    print(f"wrote {len(rows)} rows to {args.output}")
    return EXIT_OK


COMMANDS = {
    "prep": cmd_prep,
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. --set train.lr=3e-3 (repeatable)")
    common.add_argument("--seed", type=int, help="shorthand for --set seed=N")
    common.add_argument("--threads", type=int, help="BLAS/OpenMP thread cap; 1 gives bitwise-reproducible runs")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="alcagcn", description="One-shot skeleton action recognition engine.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prep", parents=[common], help="parse .skeleton files into a dataset container")
    p.add_argument("input_dir")
    p.add_argument("output")
    p.add_argument("--skip-bad", action="store_true", help="drop unparsable files instead of failing")

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset container")
    p.add_argument("output")

    p = sub.add_parser("train", parents=[common], help="train a model on a dataset container")
    p.add_argument("dataset")
    p.add_argument("checkpoint")
    p.add_argument("--metrics", help="JSON-lines metrics path (default: <checkpoint>.metrics.jsonl)")

    p = sub.add_parser("eval", parents=[common], help="one-shot evaluation of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("-o", "--output", help="report path (default: stdout)")

    sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite (float64)")

    p = sub.add_parser("ablate", parents=[common], help="train and score the ablation grid")
    p.add_argument("dataset")
    p.add_argument("output", help="CSV path")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.threads is not None:
        overrides.append(f"threads={args.threads}")
    try:
        cfg = load_config(args.config, overrides)
    except ConfigValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    limits = threadpool_limits(cfg.threads) if cfg.threads else contextlib.nullcontext()
    try:
        with limits:
            return COMMANDS[args.command](cfg, args)
    except ConfigValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, DatasetFormatError, CheckpointError, SkeletonParseError, ProtocolError, SamplingError,
            FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (RuntimeError, NonFiniteError, ContractError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
