"""
Command-line entry point for the distillation engine.

Every command is a thin shell over the library: it parses flags, calls the
matching function in ``app`` and maps errors to exit codes
(2 config, 3 data, 4 numeric, 5 storage).
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Type, TypeVar

from pydantic import BaseModel, ValidationError

from app import data
from app.config import load_settings, validate_environment
from app.errors import ConfigError, KDError, StorageError
from app.evaluation import RunReport, emit_complexity_table, emit_summary, emit_table
from app.experiment import load_experiment
from app.models import PRESETS, build_preset, export_embeddings, from_checkpoint
from app.pipeline import run_experiment
from app.tools.checkpoint_io import load_checkpoint, save_checkpoint
from app.tools.report_store import ReportStore
from app.training import PretrainConfig, ProbeConfig, TrainConfig, evaluate_checkpoint, pretrain_encoder, train_student, train_teacher_probe

logger = logging.getLogger(__name__)

M = TypeVar("M", bound=BaseModel)


def read_config(path: Optional[str], model: Type[M], **overrides) -> M:
    """
    Load a JSON config file into ``model``, applying non-None overrides.

    Raises:
        ConfigError: Unreadable file, invalid JSON or failed validation.
    """
    raw = {}
    if path:
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from e
    raw.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return model.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"invalid {model.__name__} in {path or 'flags'}: {e}") from e


def _dataset(args) -> data.Dataset:
    return data.load(args.data, args.format)


def _store(args) -> ReportStore:
    return ReportStore(args.out)


# Commands

def cmd_gen_data(args) -> int:
    if args.benchmark:
        spec = data.benchmark_spec(args.benchmark, args.seed)
    else:
        spec = read_config(args.spec, data.GenSpec, seed=args.seed)
    dataset = data.generate(spec)
    path = data.save(dataset, args.out, args.format)
    for c, count in enumerate(data.class_histogram(dataset)):
        print(f"class {c}: {count}")
    logger.info(f"Wrote {len(dataset)} samples to {path}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = read_config(args.config, PretrainConfig, seed=args.seed, preset=args.preset)
    checkpoint, report = pretrain_encoder(_dataset(args), cfg)
    store = _store(args)
    save_checkpoint(checkpoint, store.checkpoint_path(report.name))
    store.save(report)
    return 0


def cmd_train_teacher(args) -> int:
    cfg = read_config(args.config, ProbeConfig, seed=args.seed, name=args.name)
    checkpoint = train_teacher_probe(args.encoder, _dataset(args), cfg)
    report = RunReport.model_validate(checkpoint.report)
    store = _store(args)
    save_checkpoint(checkpoint, store.checkpoint_path(report.name))
    store.save(report)
    return 0


def cmd_train_student(args) -> int:
    cfg = read_config(
        args.config,
        TrainConfig,
        seed=args.seed,
        preset=args.preset,
        teacher_path=args.teacher,
        pretrained_path=args.encoder,
    )
    checkpoint, report = train_student(_dataset(args), cfg)
    store = _store(args)
    save_checkpoint(checkpoint, store.checkpoint_path(report.name))
    store.save(report)
    return 0


def cmd_eval(args) -> int:
    dataset = _dataset(args)
    expected = None
    if args.preset:
        expected = build_preset(args.preset, dataset.input_shape, dataset.num_classes, args.widths, args.activation)
    accuracy = evaluate_checkpoint(args.ckpt, dataset, args.split, expected)
    print(f"{args.split} top-1: {accuracy!r}")
    return 0


def cmd_report(args) -> int:
    reports = ReportStore(args.runs).all_reports()
    if not reports:
        raise StorageError(f"no reports found under {args.runs}")
    text = emit_summary(reports) if args.summary else emit_table(reports)
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return 0


def cmd_grid(args) -> int:
    experiment = load_experiment(args.config)
    result = run_experiment(experiment, out_dir=args.out, jobs=args.jobs, resume=args.resume, seed_override=args.seed)
    print(result.table, end="")
    if result.failures:
        logger.warning(f"{len(result.failures)} cells failed: {', '.join(f['name'] for f in result.failures)}")
    return 0


def cmd_complexity(args) -> int:
    input_shape = tuple(args.input_shape)
    specs = []
    for name, (family, _) in PRESETS.items():
        shape = input_shape if family == "dense" or len(input_shape) == 3 else (1, args.image_side, args.image_side)
        specs.append(build_preset(name, shape, args.classes))
    print(emit_complexity_table(specs), end="")
    return 0


def cmd_export_embeddings(args) -> int:
    model = from_checkpoint(load_checkpoint(args.ckpt))
    features, labels = _dataset(args).split(args.split)
    emb = export_embeddings(model, features, Path(args.out), labels)
    logger.info(f"Exported {emb.shape[0]} x {emb.shape[1]} embeddings to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kd", description="Knowledge distillation for compact fine-grained classifiers")
    parser.add_argument("--log-level", default=None, help="Override KD_LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_data(p):
        p.add_argument("--data", required=True, help="Dataset file")
        p.add_argument("--format", default="packed-binary", choices=["packed-binary", "tabular-csv"])
        return p

    def with_out(p):
        p.add_argument("--out", default=None, help="Output directory (default KD_OUTPUT_DIR)")
        p.set_defaults(needs_out=True)
        return p

    p = sub.add_parser("gen-data", help="Generate a synthetic dataset")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--spec", help="JSON generator spec")
    source.add_argument("--benchmark", choices=sorted(data.BENCHMARKS))
    p.add_argument("--out", required=True, help="Dataset file to write")
    p.add_argument("--format", default="packed-binary", choices=["packed-binary", "tabular-csv"])
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_gen_data)

    p = with_out(with_data(sub.add_parser("pretrain", help="Supervised encoder pretraining on coarse labels")))
    p.add_argument("--config", help="JSON PretrainConfig")
    p.add_argument("--preset", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_pretrain)

    p = with_out(with_data(sub.add_parser("train-teacher", help="Linear-probe a pretrained encoder")))
    p.add_argument("--encoder", required=True, help="Encoder checkpoint")
    p.add_argument("--config", help="JSON ProbeConfig")
    p.add_argument("--name", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train_teacher)

    p = with_out(with_data(sub.add_parser("train-student", help="Train one student regime")))
    p.add_argument("--config", help="JSON TrainConfig")
    p.add_argument("--preset", default=None)
    p.add_argument("--teacher", default=None, help="Teacher checkpoint (strategy=distill)")
    p.add_argument("--encoder", default=None, help="Encoder checkpoint (init=pretrained)")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train_student)

    p = with_data(sub.add_parser("eval", help="Top-1 accuracy of a checkpoint"))
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--preset", choices=sorted(PRESETS), default=None, help="Fail unless the checkpoint was built for this preset")
    p.add_argument("--widths", type=int, nargs="+", default=None)
    p.add_argument("--activation", default="relu", choices=["relu", "gelu"])
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="Markdown table of stored reports")
    p.add_argument("--runs", required=True, help="Directory of run reports")
    p.add_argument("--out", default=None, help="Also write the table to this file")
    p.add_argument("--summary", action="store_true", help="Mean/std over seeds instead of one row per run")
    p.set_defaults(func=cmd_report)

    p = with_out(sub.add_parser("grid", help="Run an experiment file end to end"))
    p.add_argument("--config", required=True, help="JSON experiment file")
    p.add_argument("--jobs", type=int, default=None, help="Parallel student cells (default KD_JOBS)")
    p.add_argument("--resume", action="store_true", help="Skip cells with digest-matched reports")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("complexity", help="Parameter and FLOP table for every preset")
    p.add_argument("--input-shape", type=int, nargs="+", default=[32])
    p.add_argument("--image-side", type=int, default=12)
    p.add_argument("--classes", type=int, default=20)
    p.set_defaults(func=cmd_complexity)

    p = with_data(sub.add_parser("export-embeddings", help="Write encoder features as CSV"))
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_embeddings)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """
    Parse arguments, configure logging and run one command.

    Returns:
        int: Process exit code.
    """
    args = build_parser().parse_args(argv)
    try:
        settings = load_settings()
    except KDError as e:
        print(f"Error: {e}", file=sys.stderr)
        return e.exit_code

    logging.basicConfig(
        level=(args.log_level or settings.log_level).upper(),
        format='%(asctime)s - %(levelname)s - %(message)s'
    )
    if getattr(args, "needs_out", False) and args.out is None:
        args.out = str(settings.output_dir)
        if not validate_environment(settings):
            return StorageError.exit_code

    try:
        return args.func(args)
    except KDError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except OSError as e:
        logger.error(f"I/O error: {e}")
        return StorageError.exit_code


if __name__ == "__main__":
    sys.exit(main())
