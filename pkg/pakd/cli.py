"""
Command-line interface for pakd.

Subcommands generate the synthetic treebank pools, label them with a teacher,
run a distillation pipeline, run analyses and benchmark every pipeline over
several seeds. Every command reads one declarative config; flags override it.
"""

import argparse
import asyncio
import logging
import os
import sys
from contextvars import ContextVar
from dataclasses import dataclass
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path
from typing import Any, Optional

from .__version__ import __version__
from .analysis import (
    bucket_analysis,
    buckets_table,
    delta_table,
    denoising_table,
    denoising_trace,
    disparity_experiment,
    sft_comparison,
    size_sweep,
)
from .distill import predict_corpus, run_pipeline, run_supervised
from .exceptions import PAKDError, ValidationError
from .models import AnalysisKind, PipelineKind, RunConfig, TeacherKind
from .processing import ExperimentReport, ReportWriter, Table
from .student import StudentModel, TrainingExample, TrainTrace, train
from .teachersim import (
    AnnotatedExample,
    CorpusPools,
    annotate_with_model,
    corpus_tier_f1,
    make_teacher_labels,
    sample_grammar,
    sample_pools,
)
from .treebank import corpus_f1
from .utils.file import load_corpus, load_model_file, save_corpus, save_model_file
from .utils.stats import median_spread

log = logging.getLogger(__name__)

UNLABELED_FILE = "unlabeled.jsonl"
LABELED_FILE = "labeled.jsonl"
TEST_FILE = "test.jsonl"
TEACHER_TRAIN_FILE = "teacher_train.jsonl"
TEACHER_TEST_FILE = "teacher_test.jsonl"

_stage: ContextVar[str] = ContextVar("stage", default="config")


def setup_logging(verbose: bool) -> None:
    """
    Set up logging with appropriate verbosity.

    Args:
        verbose: Whether to enable verbose logging
    """
    log_level = logging.DEBUG if verbose else logging.INFO

    logging.basicConfig(
        level=log_level,
        format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
        stream=sys.stdout,
    )

    # Set specific loggers to WARNING to avoid noise
    logging.getLogger("asyncio").setLevel(logging.WARNING)
    logging.getLogger("matplotlib").setLevel(logging.WARNING)

    if verbose:
        log.debug("Verbose logging enabled")


def thread_limit() -> int:
    """Worker cap from ``PAKD_THREADS`` (default 1)."""
    raw = os.environ.get("PAKD_THREADS", "1")
    try:
        value = int(raw)
    except ValueError:
        raise ValidationError(f"PAKD_THREADS must be a positive integer, got {raw!r}")
    if value < 1:
        raise ValidationError(f"PAKD_THREADS must be a positive integer, got {raw!r}")
    return value


def load_config(args: argparse.Namespace) -> RunConfig:
    """Read ``--config`` (or the standard preset) and apply flag overrides."""
    config = RunConfig.from_yaml(args.config) if args.config else RunConfig.default()
    config = config.with_overrides(
        seed=args.seed,
        output_directory=args.out,
        pipeline=args.pipeline,
        r_percent=args.r_percent,
        epochs=args.epochs,
        formats=args.format,
        teacher=getattr(args, "teacher", None),
    )
    return config


@dataclass
class Dataset:
    """Teacher-labeled training pool, withheld gold pool and test split."""

    train: list[AnnotatedExample]
    labeled: list[AnnotatedExample]
    test: list[AnnotatedExample]

    @property
    def teacher_test_f1(self) -> Optional[float]:
        if not self.test or any(e.teacher is None for e in self.test):
            return None
        return corpus_f1([e.teacher for e in self.test], [e.gold for e in self.test])


def _header(config: RunConfig, pool: str, **hashes: str) -> dict[str, Any]:
    return {"pool": pool, "config_hash": config.config_hash(), **hashes}


def generate_pools(config: RunConfig) -> CorpusPools:
    grammar = sample_grammar(config.grammar)
    return sample_pools(grammar, config.corpus)


def label_pools(config: RunConfig, pools: CorpusPools) -> Dataset:
    """Attach teacher labels to the unlabeled pool and the test split."""
    if config.teacher.kind is TeacherKind.supervised:
        if not pools.labeled:
            raise ValidationError("A supervised teacher needs a non-empty labeled pool")
        pipeline = config.pipeline.replace(final_epochs=config.teacher.supervised_epochs)
        teacher, _ = run_supervised(pools.labeled, pipeline)
        return Dataset(
            train=annotate_with_model(pools.unlabeled, teacher),
            labeled=pools.labeled,
            test=annotate_with_model(pools.test, teacher),
        )
    return Dataset(
        train=make_teacher_labels(pools.unlabeled, config.noise),
        labeled=pools.labeled,
        test=make_teacher_labels(pools.test, config.noise),
    )


async def load_pools(config: RunConfig) -> CorpusPools:
    """Pools from a previous ``gen`` in the output directory, or freshly sampled."""
    out = config.output_directory
    if not (out / UNLABELED_FILE).exists():
        log.info("No generated corpus in %s; sampling in memory", out)
        return await asyncio.to_thread(generate_pools, config)
    expected = {"corpus_hash": config.corpus_hash()}
    unlabeled, _ = await load_corpus(out / UNLABELED_FILE, expected)
    test, _ = await load_corpus(out / TEST_FILE, expected)
    labeled = []
    if (out / LABELED_FILE).exists():
        labeled, _ = await load_corpus(out / LABELED_FILE, expected)
    return CorpusPools(unlabeled, labeled, test)


async def load_dataset(config: RunConfig) -> Dataset:
    """Teacher-labeled data from a previous ``annotate``, or built from the pools."""
    out = config.output_directory
    if (out / TEACHER_TRAIN_FILE).exists():
        _stage.set("load")
        expected = {"data_hash": config.data_hash()}
        train_pool, _ = await load_corpus(out / TEACHER_TRAIN_FILE, expected)
        test, _ = await load_corpus(out / TEACHER_TEST_FILE, expected)
        labeled = []
        if (out / LABELED_FILE).exists():
            labeled, _ = await load_corpus(
                out / LABELED_FILE, {"corpus_hash": config.corpus_hash()}
            )
        return Dataset(train_pool, labeled, test)
    _stage.set("gen")
    pools = await load_pools(config)
    _stage.set("annotate")
    return await asyncio.to_thread(label_pools, config, pools)


# ---------------------------------------------------------------------------
# Commands


async def cmd_gen(config: RunConfig) -> ExperimentReport:
    """Sample the grammar and write the unlabeled, labeled and test pools."""
    _stage.set("gen")
    pools = await asyncio.to_thread(generate_pools, config)
    out = config.output_directory
    corpus_hash = config.corpus_hash()
    for name, pool in (
        (UNLABELED_FILE, pools.unlabeled),
        (LABELED_FILE, pools.labeled),
        (TEST_FILE, pools.test),
    ):
        await save_corpus(pool, out / name, _header(config, name, corpus_hash=corpus_hash))
    return ExperimentReport(
        command="gen",
        config_hash=config.config_hash(),
        config=config.to_dict(),
        summary={
            "corpus_hash": corpus_hash,
            "unlabeled": len(pools.unlabeled),
            "labeled": len(pools.labeled),
            "test": len(pools.test),
        },
    )


async def cmd_annotate(config: RunConfig) -> ExperimentReport:
    """Label the generated pools with the configured teacher."""
    _stage.set("gen")
    pools = await load_pools(config)
    _stage.set("annotate")
    dataset = await asyncio.to_thread(label_pools, config, pools)
    out = config.output_directory
    data_hash = config.data_hash()
    await save_corpus(
        dataset.train, out / TEACHER_TRAIN_FILE, _header(config, "train", data_hash=data_hash)
    )
    await save_corpus(
        dataset.test, out / TEACHER_TEST_FILE, _header(config, "test", data_hash=data_hash)
    )
    summary: dict[str, Any] = {
        "data_hash": data_hash,
        "teacher": config.teacher.kind.value,
        "train_teacher_gold_f1": corpus_f1(
            [e.teacher for e in dataset.train], [e.gold for e in dataset.train]
        ),
        "test_teacher_gold_f1": dataset.teacher_test_f1,
        "train_teacher_tier_f1": {
            str(tier): f1 for tier, f1 in corpus_tier_f1(dataset.train).items()
        },
    }
    return ExperimentReport(
        command="annotate",
        config_hash=config.config_hash(),
        config=config.to_dict(),
        summary=summary,
    )


def _stages_table(report_dict: dict[str, Any], name: str) -> Table:
    return Table(
        name=name,
        columns=("name", "n_train", "epochs", "train_f1", "test_f1"),
        rows=report_dict["stages"],
    )


def _trace_table(name: str, trace: TrainTrace) -> Table:
    return Table(
        name=name,
        columns=("example_id", "epoch", "f1_vs_target"),
        rows=trace.to_rows(),
        in_report=False,
    )


def _model_provenance(config: RunConfig) -> dict[str, str]:
    return {"config_hash": config.config_hash(), "data_hash": config.data_hash()}


async def cmd_distill(config: RunConfig) -> ExperimentReport:
    """Run the configured pipeline, save the final student and its training traces."""
    dataset = await load_dataset(config)
    kind = config.pipeline.kind
    _stage.set(kind.value)
    model, report = await asyncio.to_thread(
        run_pipeline,
        dataset.train,
        config.pipeline.replace(trace=True),
        dataset.labeled,
        dataset.test,
        dataset.labeled,
    )
    model_path = config.output_directory / f"model_{kind.value}.json"
    await save_model_file(model, model_path, _model_provenance(config))
    document = report.to_dict()
    tables = [_stages_table(document, f"distill_{kind.value}_stages")]
    tables.extend(
        _trace_table(f"distill_{kind.value}_{stage}_trace", trace)
        for stage, trace in report.traces().items()
    )
    return ExperimentReport(
        command="distill",
        config_hash=config.config_hash(),
        config=config.to_dict(),
        summary={**document, "model": model_path.name},
        tables=tables,
    )


def _with_student_predictions(config: RunConfig, corpus, model: Optional[StudentModel]):
    if model is None:
        items = [TrainingExample(e.id, e.tokens, e.teacher) for e in corpus]
        model, _ = train(items, config.pipeline.train_config(config.pipeline.s0_epochs))
    return predict_corpus(model, corpus)


def run_analysis(
    kind: AnalysisKind,
    config: RunConfig,
    dataset: Dataset,
    model: Optional[StudentModel] = None,
) -> Table:
    """Run one analysis and return its table."""
    analysis = config.analysis
    seed = config.pipeline.seed
    if kind is AnalysisKind.buckets:
        corpus = _with_student_predictions(config, dataset.train, model)
        return buckets_table(bucket_analysis(corpus, analysis.n_buckets))
    if kind is AnalysisKind.delta:
        corpus = _with_student_predictions(config, dataset.train, model)
        return delta_table(corpus)
    if kind is AnalysisKind.disparity:
        curve = disparity_experiment(dataset.train, analysis.disparity_epochs, seed)
        return curve.to_table(analysis.smoothing_window)
    if kind is AnalysisKind.denoising:
        return denoising_table(denoising_trace(dataset.train, analysis.denoising_epochs, seed))
    grammar = sample_grammar(config.grammar)
    if kind is AnalysisKind.size_sweep:
        return size_sweep(grammar, analysis.sweep_sizes, config.noise, config).to_table()
    return sft_comparison(grammar, analysis.sft_sizes, analysis.pakd_labeled, None, config).to_table()


async def cmd_analyze(
    config: RunConfig,
    selections: Optional[list[str]] = None,
    model_path: Optional[Path] = None,
) -> ExperimentReport:
    """Run the selected analyses."""
    kinds = (
        [AnalysisKind(s) for s in selections] if selections else list(config.analysis.selections)
    )
    needs_data = any(
        k not in (AnalysisKind.size_sweep, AnalysisKind.sft_sweep) for k in kinds
    )
    model = None
    if model_path is not None:
        _stage.set("model")
        model = await load_model_file(model_path, {"data_hash": config.data_hash()})
    dataset = await load_dataset(config) if needs_data else Dataset([], [], [])
    tables = []
    for kind in kinds:
        _stage.set(kind.value)
        log.info("Running analysis %s", kind.value)
        tables.append(await asyncio.to_thread(run_analysis, kind, config, dataset, model))
    return ExperimentReport(
        command="analyze",
        config_hash=config.config_hash(),
        config=config.to_dict(),
        summary={"analyses": [k.value for k in kinds]},
        tables=tables,
    )


def _bench_seed(config: RunConfig, dataset: Dataset, seed: int) -> dict[str, Any]:
    results: dict[str, Any] = {}
    for kind in config.bench.pipelines:
        if kind is PipelineKind.supervised and not dataset.labeled:
            log.warning("No labeled pool; skipping the supervised row")
            continue
        pipeline = config.pipeline.replace(kind=kind, seed=seed)
        try:
            _, report = run_pipeline(
                dataset.train, pipeline, dataset.labeled, dataset.test, dataset.labeled
            )
        except PAKDError as ex:
            ex.stage = f"bench {kind.value} seed {seed}"
            raise
        results[kind.value] = report
        log.info("Seed %d %s: test F1 %.4f", seed, kind.value, report.test_f1)
    return results


async def cmd_bench(config: RunConfig) -> ExperimentReport:
    """
    Run every benchmark pipeline for every seed and tabulate test F1.

    Seeds run concurrently up to ``PAKD_THREADS`` workers; results are
    gathered in seed order so the report does not depend on scheduling.
    """
    limit = thread_limit()
    dataset = await load_dataset(config)
    _stage.set("bench")
    semaphore = asyncio.Semaphore(limit)

    async def run_seed(seed: int) -> dict[str, Any]:
        async with semaphore:
            log.info("Bench seed %d", seed)
            return await asyncio.to_thread(_bench_seed, config, dataset, seed)

    seeds = config.bench.seeds
    per_seed = await asyncio.gather(*(run_seed(seed) for seed in seeds))

    columns = ("method", "median_f1", "spread_f1", "n_seeds") + tuple(f"f1_seed_{s}" for s in seeds)
    rows = []
    teacher_f1 = dataset.teacher_test_f1
    if teacher_f1 is not None:
        rows.append(
            {"method": "teacher", "median_f1": teacher_f1, "spread_f1": 0.0, "n_seeds": len(seeds)}
            | {f"f1_seed_{s}": teacher_f1 for s in seeds}
        )
    peer_stats = []
    for kind in config.bench.pipelines:
        reports = [results.get(kind.value) for results in per_seed]
        if any(r is None for r in reports):
            continue
        values = [r.test_f1 for r in reports]
        median, spread = median_spread(values)
        rows.append(
            {"method": kind.value, "median_f1": median, "spread_f1": spread, "n_seeds": len(values)}
            | {f"f1_seed_{s}": v for s, v in zip(seeds, values)}
        )
        if kind is PipelineKind.pa_kd:
            peer_stats = [r.peer_labels for r in reports]

    table = Table(name="bench", columns=columns, rows=rows)
    return ExperimentReport(
        command="bench",
        config_hash=config.config_hash(),
        config=config.to_dict(),
        summary={"seeds": list(seeds), "pa_kd_peer_labels": peer_stats},
        tables=[table],
    )


COMMANDS = {
    "gen": cmd_gen,
    "annotate": cmd_annotate,
    "distill": cmd_distill,
    "bench": cmd_bench,
}


async def run_cli(args: argparse.Namespace) -> int:
    """
    Execute the CLI command.

    Args:
        args: Command-line arguments

    Returns:
        Exit code: 0 on success, 2 for configuration errors, 3 for runtime errors
    """
    _stage.set("config")
    try:
        config = load_config(args)
        writer = ReportWriter(config.output_directory, config.config_hash(), config.formats)
        log.info("Running %s (config %s)", args.command, config.config_hash())
        if args.command == "analyze":
            report = await cmd_analyze(config, args.analysis, args.model)
        else:
            report = await COMMANDS[args.command](config)
        _stage.set("write")
        paths = await writer.write_report(report)
        log.info("Wrote %d file(s) to %s", len(paths), config.output_directory)
        return 0

    except ValidationError as e:
        log.error("[%s] %s", e.stage or _stage.get(), str(e))
        return 2
    except PAKDError as e:
        log.error("[%s] %s", e.stage or _stage.get(), str(e))
        return 3
    except Exception as e:
        log.error("[%s] Unexpected error: %s", _stage.get(), str(e))
        return 3


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML run configuration")
    common.add_argument("--seed", type=int, help="Training seed")
    common.add_argument("--out", type=Path, help="Output directory")
    common.add_argument(
        "--pipeline",
        choices=[kind.value for kind in PipelineKind],
        help="Distillation pipeline",
    )
    common.add_argument("--r-percent", type=float, help="Share of teacher labels kept by convergence")
    common.add_argument("--epochs", type=int, help="Peer and final student epochs")
    common.add_argument(
        "--format",
        action="append",
        choices=["csv", "json", "svg"],
        help="Output format (repeatable)",
    )
    common.add_argument(
        "--verbose",
        "-v",
        action="store_true",
        default=argparse.SUPPRESS,
        help="Enable verbose logging",
    )

    parser = argparse.ArgumentParser(
        description="Knowledge distillation from noisy teachers for constituency parsing."
    )
    parser.add_argument("--version", action="store_true", help="Show the version and exit")
    parser.add_argument("--verbose", "-v", action="store_true", help="Enable verbose logging")

    subparsers = parser.add_subparsers(dest="command")
    subparsers.add_parser("gen", parents=[common], help="Generate the synthetic treebank pools")
    annotate = subparsers.add_parser("annotate", parents=[common], help="Attach teacher labels")
    annotate.add_argument(
        "--teacher",
        choices=[kind.value for kind in TeacherKind],
        help="Teacher label source",
    )
    subparsers.add_parser("distill", parents=[common], help="Run a distillation pipeline")
    analyze = subparsers.add_parser("analyze", parents=[common], help="Run analyses")
    analyze.add_argument(
        "--analysis",
        action="append",
        choices=[kind.value for kind in AnalysisKind],
        help="Analysis to run (repeatable); defaults to the config's selections",
    )
    analyze.add_argument("--model", type=Path, help="Student model to analyze")
    subparsers.add_parser("bench", parents=[common], help="Compare all pipelines over seeds")
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    """
    Main entry point for the CLI.

    Returns:
        Exit code
    """
    parser = build_parser()
    args = parser.parse_args(argv)

    setup_logging(args.verbose)

    if args.version:
        try:
            ver = version("peer-advised-kd-py")
        except PackageNotFoundError:
            ver = __version__
        print(f"pakd version {ver}")
        return 0

    if not args.command:
        parser.error("a command is required: gen, annotate, distill, analyze or bench")

    return asyncio.run(run_cli(args))


if __name__ == "__main__":
    sys.exit(main())
