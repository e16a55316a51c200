"""
Measurements of how a student relates to its noisy teacher.

``delta`` compares a student prediction and a teacher label against gold.
The remaining analyses aggregate it, or the student's convergence to the
teacher labels, over a corpus: convergence-ranked buckets, the disparity
between students trained on good and bad labels, per-epoch denoising, the
distillation-set-size sweep and the comparison with supervised training.
"""

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

import numpy as np

from .distill import run_pa_kd, run_supervised
from .exceptions import EmptyCorpus, MissingField, MissingGold, ValidationError
from .models import NoiseConfig, RunConfig, TrainConfig
from .processing import ChartSpec, Table
from .student import TrainingExample, train
from .teachersim import (
    AnnotatedExample,
    SyntheticGrammar,
    annotate_with_model,
    make_teacher_labels,
    sample_corpus,
)
from .treebank import unlabeled_f1
from .utils.stats import mean_or_none, moving_average, spearman_rho

log = logging.getLogger(__name__)


def delta(example: AnnotatedExample) -> float:
    """
    How much better the student is than the teacher on one sentence.

    ``F1(student, gold) - F1(teacher, gold)``, in ``[-1, 1]``.

    Raises:
        MissingField: If gold, teacher or student tree is absent
    """
    for name in ("gold", "teacher", "student"):
        if getattr(example, name) is None:
            log.error("Example %s has no %s tree", example.id, name)
            raise MissingField(f"Example {example.id} has no {name} tree")
    return unlabeled_f1(example.student, example.gold) - unlabeled_f1(example.teacher, example.gold)


def pct_student_better(corpus: Sequence[AnnotatedExample]) -> float:
    """Fraction of examples with ``delta > 0``; ties do not count."""
    if not corpus:
        raise EmptyCorpus("Cannot measure an empty corpus")
    return sum(1 for example in corpus if delta(example) > 0) / len(corpus)


def convergence(example: AnnotatedExample) -> float:
    """F1 between the student prediction and the teacher label."""
    if example.teacher is None or example.student is None:
        missing = "teacher" if example.teacher is None else "student"
        log.error("Example %s has no %s tree", example.id, missing)
        raise MissingField(f"Example {example.id} has no {missing} tree")
    return unlabeled_f1(example.teacher, example.student)


def _require_gold(corpus: Sequence[AnnotatedExample]) -> None:
    for example in corpus:
        if example.gold is None:
            log.error("Example %s has no gold tree", example.id)
            raise MissingGold(f"Example {example.id} has no gold tree")


def _teacher_items(corpus: Sequence[AnnotatedExample]) -> list[TrainingExample]:
    items = []
    for example in corpus:
        if example.teacher is None:
            raise MissingField(f"Example {example.id} has no teacher tree")
        items.append(TrainingExample(example.id, example.tokens, example.teacher))
    return items


# ---------------------------------------------------------------------------
# Buckets


@dataclass(frozen=True)
class BucketRow:
    """
    One convergence bucket. Bucket 0 holds the examples the student converged to most.

    Gold columns are ``None`` when the corpus has no gold trees.
    """

    index: int
    size: int
    min_convergence: float
    max_convergence: float
    mean_convergence: float
    mean_teacher_gold_f1: Optional[float] = None
    mean_student_gold_f1: Optional[float] = None
    pct_student_better: Optional[float] = None


def bucket_analysis(
    corpus: Sequence[AnnotatedExample], n_buckets: int = 20
) -> list[BucketRow]:
    """
    Rank examples by convergence and split them into equal-count buckets.

    Examples are sorted by convergence descending, ties by id, and split
    into ``min(n_buckets, N)`` consecutive buckets whose sizes differ by at
    most one (larger buckets first).

    Raises:
        EmptyCorpus: If the corpus is empty
        MissingField: If a teacher or student tree is absent
    """
    if not corpus:
        raise EmptyCorpus("Cannot bucket an empty corpus")
    if n_buckets < 1:
        raise ValidationError("n_buckets must be >= 1")
    scores = {example.id: convergence(example) for example in corpus}
    ranked = sorted(corpus, key=lambda e: (-scores[e.id], e.id))
    with_gold = all(example.gold is not None for example in corpus)

    rows = []
    for index, positions in enumerate(np.array_split(np.arange(len(ranked)), min(n_buckets, len(ranked)))):
        members = [ranked[i] for i in positions]
        values = [scores[e.id] for e in members]
        row = BucketRow(
            index=index,
            size=len(members),
            min_convergence=min(values),
            max_convergence=max(values),
            mean_convergence=sum(values) / len(values),
        )
        if with_gold:
            row = dataclasses.replace(
                row,
                mean_teacher_gold_f1=mean_or_none([unlabeled_f1(e.teacher, e.gold) for e in members]),
                mean_student_gold_f1=mean_or_none([unlabeled_f1(e.student, e.gold) for e in members]),
                pct_student_better=pct_student_better(members),
            )
        rows.append(row)
    log.info("Split %d examples into %d convergence buckets", len(ranked), len(rows))
    return rows


def buckets_table(rows: Sequence[BucketRow], name: str = "buckets") -> Table:
    columns = tuple(f.name for f in dataclasses.fields(BucketRow))
    return Table(
        name=name,
        columns=columns,
        rows=[dataclasses.asdict(row) for row in rows],
        chart=ChartSpec(
            kind="bar",
            x="index",
            series=("mean_teacher_gold_f1", "mean_student_gold_f1", "pct_student_better"),
            title="Convergence buckets",
            ylabel="F1 / fraction",
        ),
    )


def delta_table(corpus: Sequence[AnnotatedExample], name: str = "delta") -> Table:
    rows = [
        {"id": example.id, "noise_tier": example.noise_tier, "delta": delta(example)}
        for example in corpus
    ]
    values = [row["delta"] for row in rows]
    return Table(
        name=name,
        columns=("id", "noise_tier", "delta"),
        rows=rows,
        meta={
            "mean_delta": mean_or_none(values),
            "pct_student_better": pct_student_better(corpus),
        },
    )


# ---------------------------------------------------------------------------
# Convergence disparity


@dataclass
class DisparityCurve:
    """Per-epoch convergence of a student trained on the better half of labels and one on the worse half."""

    epochs: tuple[int, ...]
    high: tuple[float, ...]
    low: tuple[float, ...]
    high_gold_f1: float = 0.0
    low_gold_f1: float = 0.0

    def smoothed(self, window: int = 3) -> tuple[list[float], list[float]]:
        return moving_average(self.high, window), moving_average(self.low, window)

    def dominates_from(self, epoch: int = 2) -> bool:
        """Whether the high curve is at least the low curve from ``epoch`` on."""
        return all(h >= l for e, h, l in zip(self.epochs, self.high, self.low) if e >= epoch)

    def to_table(self, window: int = 3, name: str = "disparity") -> Table:
        high_smooth, low_smooth = self.smoothed(window)
        rows = [
            {
                "epoch": epoch,
                "s_high": h,
                "s_low": l,
                "s_high_smoothed": hs,
                "s_low_smoothed": ls,
            }
            for epoch, h, l, hs, ls in zip(self.epochs, self.high, self.low, high_smooth, low_smooth)
        ]
        return Table(
            name=name,
            columns=("epoch", "s_high", "s_low", "s_high_smoothed", "s_low_smoothed"),
            rows=rows,
            chart=ChartSpec(
                kind="line",
                x="epoch",
                series=("s_high", "s_low"),
                title="Convergence to good vs bad teacher labels",
                ylabel="F1(prediction, teacher label)",
            ),
            meta={
                "high_gold_f1": self.high_gold_f1,
                "low_gold_f1": self.low_gold_f1,
                "high_dominates_from_epoch_2": self.dominates_from(2),
            },
        )


def disparity_experiment(
    corpus: Sequence[AnnotatedExample], epochs: int = 10, seed: int = 0
) -> DisparityCurve:
    """
    Train one student on the better half of the teacher labels and one on the worse half.

    Labels are split at the median of their gold F1 (ties by id; the odd
    example goes to the high half). Each student's convergence is the mean
    F1 between its epoch-end predictions and its own training labels.

    Raises:
        MissingGold: If an example has no gold tree
        EmptyCorpus: If the corpus has fewer than two examples
    """
    _require_gold(corpus)
    if len(corpus) < 2:
        raise EmptyCorpus("Disparity needs at least two examples")
    quality = {e.id: unlabeled_f1(e.teacher, e.gold) for e in corpus if e.teacher is not None}
    items = _teacher_items(corpus)
    ranked = sorted(items, key=lambda item: (-quality[item.id], item.id))
    cut = (len(ranked) + 1) // 2
    halves = {"high": ranked[:cut], "low": ranked[cut:]}

    curves = {}
    for name, half in halves.items():
        # train on the half in corpus order so the shuffle is independent of the ranking
        half_ids = {item.id for item in half}
        ordered = [item for item in items if item.id in half_ids]
        _, trace = train(ordered, TrainConfig(epochs=epochs, seed=seed, trace=True))
        curves[name] = trace.epoch_means()
        log.debug("Disparity %s half: %s", name, curves[name])

    epoch_ids = tuple(sorted(curves["high"]))
    return DisparityCurve(
        epochs=epoch_ids,
        high=tuple(curves["high"][e] for e in epoch_ids),
        low=tuple(curves["low"][e] for e in epoch_ids),
        high_gold_f1=mean_or_none([quality[i.id] for i in halves["high"]]),
        low_gold_f1=mean_or_none([quality[i.id] for i in halves["low"]]),
    )


# ---------------------------------------------------------------------------
# Denoising during training


@dataclass(frozen=True)
class DenoisingRow:
    epoch: int
    tier: str
    size: int
    pct_student_better: float
    mean_delta: float


def denoising_trace(
    corpus: Sequence[AnnotatedExample], epochs: int = 10, seed: int = 0
) -> list[DenoisingRow]:
    """
    Train on all teacher labels and measure ``delta`` at every epoch end.

    Rows are reported for the whole corpus (tier ``"all"``) and per noise
    tier when tiers are recorded.

    Raises:
        MissingGold: If an example has no gold tree
    """
    _require_gold(corpus)
    items = _teacher_items(corpus)
    tiers = sorted({e.noise_tier for e in corpus if e.noise_tier is not None})
    rows: list[DenoisingRow] = []

    def measure(epoch: int, _model, predictions) -> None:
        current = [e.replace(student=predictions[e.id]) for e in corpus]
        groups = [("all", current)] + [
            (str(tier), [e for e in current if e.noise_tier == tier]) for tier in tiers
        ]
        for tier, members in groups:
            deltas = [delta(e) for e in members]
            rows.append(
                DenoisingRow(
                    epoch=epoch,
                    tier=tier,
                    size=len(members),
                    pct_student_better=sum(1 for d in deltas if d > 0) / len(deltas),
                    mean_delta=sum(deltas) / len(deltas),
                )
            )

    train(items, TrainConfig(epochs=epochs, seed=seed, trace=False), on_epoch_end=measure)
    return rows


def denoising_table(rows: Sequence[DenoisingRow], name: str = "denoising") -> Table:
    tiers = sorted({row.tier for row in rows}, key=lambda t: (t != "all", t))
    by_epoch: dict[int, dict[str, Any]] = {}
    for row in rows:
        entry = by_epoch.setdefault(row.epoch, {"epoch": row.epoch})
        entry[f"pct_better_{row.tier}"] = row.pct_student_better
        entry[f"mean_delta_{row.tier}"] = row.mean_delta
    series = tuple(f"pct_better_{tier}" for tier in tiers)
    columns = ("epoch",) + tuple(
        column for tier in tiers for column in (f"pct_better_{tier}", f"mean_delta_{tier}")
    )
    return Table(
        name=name,
        columns=columns,
        rows=[by_epoch[epoch] for epoch in sorted(by_epoch)],
        chart=ChartSpec(
            kind="line",
            x="epoch",
            series=series,
            title="Student better than teacher during training",
            ylabel="fraction of labels",
        ),
    )


# ---------------------------------------------------------------------------
# Sweeps


def _check_sizes(sizes: Sequence[int], minimum: int, what: str) -> tuple[int, ...]:
    sizes = tuple(int(s) for s in sizes)
    if len(sizes) < minimum:
        log.error("%s needs at least %d sizes, got %d", what, minimum, len(sizes))
        raise ValidationError(f"{what} needs at least {minimum} sizes, got {len(sizes)}")
    if any(b <= a for a, b in zip(sizes, sizes[1:])):
        log.error("%s sizes must be strictly ascending: %s", what, sizes)
        raise ValidationError(f"{what} sizes must be strictly ascending, got {list(sizes)}")
    if sizes[0] < 1:
        raise ValidationError(f"{what} sizes must be positive")
    return sizes


@dataclass(frozen=True)
class SizeSweepRow:
    size: int
    mean_pct_student_better: float
    final_pct_student_better: float


@dataclass
class SizeSweepResult:
    rows: list[SizeSweepRow] = field(default_factory=list)
    spearman_rho: float = float("nan")

    def to_table(self, name: str = "size_sweep") -> Table:
        return Table(
            name=name,
            columns=("size", "mean_pct_student_better", "final_pct_student_better"),
            rows=[dataclasses.asdict(row) for row in self.rows],
            chart=ChartSpec(
                kind="line",
                x="size",
                series=("mean_pct_student_better",),
                title="Denoising vs distillation-set size",
                ylabel="mean fraction student better",
            ),
            meta={"spearman_rho": self.spearman_rho},
        )


def size_sweep(
    grammar: SyntheticGrammar,
    sizes: Sequence[int],
    noise: NoiseConfig,
    config: RunConfig = RunConfig(),
) -> SizeSweepResult:
    """
    Average denoising percentage as a function of distillation-set size.

    For each size a corpus is sampled and teacher-labeled; a student trains
    ``analysis.sweep_epochs`` epochs on it and the fraction of examples with
    ``delta > 0`` is averaged over the epoch-end checkpoints 1..E.

    Raises:
        ValidationError: If fewer than two sizes are given or they are not ascending
    """
    sizes = _check_sizes(sizes, 2, "size_sweep")
    epochs = config.analysis.sweep_epochs
    result = SizeSweepResult()
    for size in sizes:
        corpus = make_teacher_labels(
            sample_corpus(grammar, size, config.corpus.length_bounds, config.corpus.seed, "u"),
            noise,
        )
        trace = [row for row in denoising_trace(corpus, epochs, config.pipeline.seed) if row.tier == "all"]
        values = [row.pct_student_better for row in trace]
        row = SizeSweepRow(
            size=size,
            mean_pct_student_better=sum(values) / len(values) if values else 0.0,
            final_pct_student_better=values[-1] if values else 0.0,
        )
        log.info("Size %d: mean student-better fraction %.4f", size, row.mean_pct_student_better)
        result.rows.append(row)
    result.spearman_rho = spearman_rho(
        [row.size for row in result.rows], [row.mean_pct_student_better for row in result.rows]
    )
    return result


@dataclass(frozen=True)
class SftRow:
    labeled_size: int
    sft_f1: float
    pakd_f1: float


@dataclass
class SftComparison:
    """
    Supervised training at several label budgets against one PA-KD run.

    ``crossover`` is the smallest label budget at which supervised training
    matches or beats PA-KD, or ``None`` if it never does.
    """

    pakd_labeled: int
    pakd_f1: float
    teacher_f1: Optional[float]
    rows: list[SftRow] = field(default_factory=list)
    crossover: Optional[int] = None

    def to_table(self, name: str = "sft_sweep") -> Table:
        return Table(
            name=name,
            columns=("labeled_size", "sft_f1", "pakd_f1"),
            rows=[dataclasses.asdict(row) for row in self.rows],
            chart=ChartSpec(
                kind="line",
                x="labeled_size",
                series=("sft_f1", "pakd_f1"),
                title=f"Supervised training vs PA-KD with {self.pakd_labeled} labels",
                ylabel="test F1",
            ),
            meta={
                "pakd_labeled": self.pakd_labeled,
                "pakd_f1": self.pakd_f1,
                "teacher_f1": self.teacher_f1,
                "crossover": self.crossover,
            },
        )


def sft_comparison(
    grammar: SyntheticGrammar,
    labeled_sizes: Sequence[int],
    pakd_labeled: int,
    noise: Optional[NoiseConfig] = None,
    config: RunConfig = RunConfig(),
) -> SftComparison:
    """
    Compare supervised training on k gold trees with PA-KD built from ``pakd_labeled``.

    Without ``noise`` the PA-KD teacher is a student trained on
    ``pakd_labeled`` gold examples that decodes the unlabeled pool; with a
    NoiseConfig the teacher is simulated instead. PA-KD also mixes its gold
    examples in when ``pipeline.beta > 0``.

    Raises:
        ValidationError: If sizes are not ascending
    """
    sizes = _check_sizes(labeled_sizes, 1, "sft_comparison")
    if pakd_labeled < 1:
        raise ValidationError("pakd_labeled must be >= 1")
    bounds = config.corpus.length_bounds
    seed = config.corpus.seed
    pool = sample_corpus(grammar, max(sizes[-1], pakd_labeled), bounds, seed + 1, "l")
    unlabeled = sample_corpus(grammar, config.corpus.unlabeled, bounds, seed, "u")
    test = sample_corpus(grammar, config.corpus.test, bounds, seed + 2, "t")
    pipeline = config.pipeline

    gold = pool[:pakd_labeled]
    if noise is None:
        teacher, _ = run_supervised(
            gold, pipeline.replace(final_epochs=config.teacher.supervised_epochs)
        )
        corpus = annotate_with_model(unlabeled, teacher)
    else:
        corpus = make_teacher_labels(unlabeled, noise)
    teacher_f1 = mean_or_none([unlabeled_f1(e.teacher, e.gold) for e in corpus])
    _, report = run_pa_kd(corpus, pipeline, labeled=gold, test=test)
    result = SftComparison(pakd_labeled=pakd_labeled, pakd_f1=report.test_f1, teacher_f1=teacher_f1)
    log.info("PA-KD with %d labels: test F1 %.4f", pakd_labeled, result.pakd_f1)

    for size in sizes:
        _, sft_report = run_supervised(pool[:size], pipeline, test=test)
        result.rows.append(SftRow(size, sft_report.test_f1, result.pakd_f1))
        log.info("Supervised with %d labels: test F1 %.4f", size, sft_report.test_f1)
        if result.crossover is None and sft_report.test_f1 >= result.pakd_f1:
            result.crossover = size
    return result
