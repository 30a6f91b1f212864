import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from pydantic import ValidationError

import harness
from errors import G2DMError, ReportError
from harness import ExperimentConfig, Method
from models import load_checkpoint, save_checkpoint
from settings import VERSION, Settings
from training import PRESETS, TrainConfig

logger = logging.getLogger(__name__)

CONFIG_EXIT_CODE = 8


def configure_logging(level: str) -> None:
    handlers = [logging.StreamHandler()]
    if Settings.LOG_FILE:
        handlers.append(logging.FileHandler(Settings.LOG_FILE))
    logging.basicConfig(level=level.upper(), format=Settings.LOG_FORMAT, handlers=handlers, force=True)


def _int_list(value: str) -> List[int]:
    try:
        return [int(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{value}'")


def _formats(value: str) -> List[str]:
    return [v.strip() for v in value.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="g2dm", description="Domain generalization via distribution matching")
    parser.add_argument("--config", help="flat key = value file with TrainConfig and ExperimentConfig fields")
    parser.add_argument("--preset", choices=sorted(PRESETS), help="training hyperparameter preset")
    parser.add_argument("--seed", type=int, help="run a single seed instead of the configured list")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--workers", type=int, help="concurrent training runs")
    parser.add_argument("--format", type=_formats, default=["json", "csv"], help="comma-separated subset of json,csv,png")
    parser.add_argument("--log-level", default=Settings.LOG_LEVEL)
    parser.add_argument("--version", action="version", version=f"%(prog)s {VERSION}")

    commands = parser.add_subparsers(dest="command", required=True)

    train = commands.add_parser("train", help="single run on every domain but the unseen one")
    train.add_argument("--method", choices=[m.value for m in Method], default=Method.g2dm.value)
    train.add_argument("--unseen", type=int)

    loo = commands.add_parser("loo", help="leave-one-domain-out over seeds and methods")
    loo.add_argument("--unseen", type=_int_list, help="comma-separated held-out domains (default: all)")

    divergence = commands.add_parser("divergence", help="pairwise proxy A-distance matrix")
    divergence.add_argument("--checkpoint", help="estimate on the encoding of this model")
    divergence.add_argument("--compare", action="store_true", help="ERM vs G2DM encodings and their heatmap delta")
    divergence.add_argument("--unseen", type=int)

    audit = commands.add_parser("audit", help="convex hull check and unseen-risk bound audit (privileged)")
    audit.add_argument("--checkpoint", help="audit this model instead of training one")
    audit.add_argument("--unseen", type=int)

    ablate = commands.add_parser("ablate-sources", help="unseen accuracy with each source removed")
    ablate.add_argument("--unseen", type=int)

    sweep = commands.add_parser("sweep-rp", help="unseen accuracy per random projection size")
    sweep.add_argument("--sizes", type=_int_list)
    sweep.add_argument("--unseen", type=int)

    report = commands.add_parser("report", help="re-emit a saved JSON report in other formats")
    report.add_argument("input", help="report JSON written by another command")

    return parser


def load_experiment(args: argparse.Namespace) -> ExperimentConfig:
    environment = {"output_dir": Settings.OUTPUT_DIR, "workers": Settings.WORKERS}
    if args.config:
        config = harness.load_config(args.config)
        # the environment fills what the file leaves unset
        config = config.model_copy(update={k: v for k, v in environment.items() if k not in config.model_fields_set})
    else:
        config = ExperimentConfig(**environment)
        if args.command == "train":
            config = config.model_copy(update={"seeds": [Settings.DEFAULT_SEED]})

    updates = {}
    if args.preset:
        train = config.train.model_dump(exclude_unset=True)
        updates["train"] = TrainConfig.preset(args.preset, **train)
    if args.seed is not None:
        updates["seeds"] = [args.seed]
    if args.out:
        updates["output_dir"] = args.out
    if args.workers is not None:
        updates["workers"] = args.workers
    unseen = getattr(args, "unseen", None)
    if unseen is not None:
        updates["unseen"] = unseen if isinstance(unseen, list) else [unseen]
    # CLI overrides are validated like config file values
    return ExperimentConfig.model_validate({**config.model_dump(), **updates})


def run(args: argparse.Namespace) -> List[Path]:
    if args.command == "report":
        result = harness.load_report(args.input)
        out = Path(args.out) if args.out else Path(args.input).parent
        return harness.emit_report(result, out, args.format, stem=Path(args.input).stem)

    config = load_experiment(args)
    out = Path(config.output_dir)
    logger.info(f"Running {args.command} with config {harness.provenance(config, args.command).config_hash[:12]}")

    if args.command == "train":
        bundle, report = harness.train_single(config, Method(args.method), checkpoint_dir=out / "checkpoints")
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise ReportError(f"cannot create output directory: {e.strerror or e}", path=out)
        save_checkpoint(bundle, out / "model.json")
        report.history.to_jsonl(out / "history.jsonl")
        return harness.emit_report(report, out, args.format)
    if args.command == "loo":
        return harness.emit_report(harness.leave_one_domain_out(config), out, args.format)
    if args.command == "divergence":
        if args.compare:
            return harness.emit_report(harness.compare_encodings(config), out, args.format)
        bundle = load_checkpoint(args.checkpoint) if args.checkpoint else None
        return harness.emit_report(harness.domain_divergence(config, bundle), out, args.format)
    if args.command == "audit":
        bundle = load_checkpoint(args.checkpoint) if args.checkpoint else None
        return harness.emit_report(harness.audit(config, bundle), out, args.format)
    if args.command == "ablate-sources":
        return harness.emit_report(harness.source_ablation(config), out, args.format)
    if args.command == "sweep-rp":
        return harness.emit_report(harness.rp_size_sweep(config, args.sizes), out, args.format)
    raise AssertionError(f"unhandled command {args.command}")


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        written = run(args)
    except G2DMError as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"error:{e.category}: {e}", file=sys.stderr)
        return e.exit_code
    except ValidationError as e:
        first = e.errors()[0]
        location = ".".join(str(part) for part in first["loc"])
        print(f"error:config: {location}: {first['msg']}", file=sys.stderr)
        return CONFIG_EXIT_CODE
    except OSError as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"error:{ReportError.category}: {e}", file=sys.stderr)
        return ReportError.exit_code
    for path in written:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
