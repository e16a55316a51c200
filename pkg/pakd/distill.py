"""
Distillation pipelines and the convergence partition.

Every pipeline trains fresh students on (sentence, label) pairs drawn from a
teacher-labeled corpus:

- SLKD learns every teacher label.
- Selective KD learns only the teacher labels a briefly trained student S0
  converges to best (the top r% by F1 between S0's prediction and the label).
- PA-KD trains a peer S1 on that top set, lets S1 re-annotate the rest, and
  trains the final student on both.
- SD, SD w/HC and SD w/HA retrain on a student's own labels: all of them,
  the above-mean-confidence ones, or the ones agreeing best with the teacher.
"""

import dataclasses
import logging
import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Mapping, Optional, Sequence

from .exceptions import (
    AllFiltered,
    EmptyCorpus,
    MissingGold,
    MissingPrediction,
    MissingTeacher,
    PartitionEmptyLow,
    ValidationError,
)
from .models import PipelineConfig, PipelineKind
from .student import (
    StudentModel,
    TrainingExample,
    TrainTrace,
    confidence,
    decode,
    train,
)
from .teachersim import AnnotatedExample
from .treebank import ConstituencyTree, corpus_f1, unlabeled_f1

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PartitionResult:
    """
    Split of teacher labels by student convergence.

    ``high`` holds every id scoring at least ``threshold``, the score at rank
    ``ceil(r% * N)`` of the descending ranking (ties broken by id), so ties at
    the threshold all land in ``high``.
    """

    high: tuple[str, ...]
    low: tuple[str, ...]
    threshold: float
    scores: dict[str, float]
    r_percent: float
    ranking: tuple[str, ...] = ()

    @property
    def nominal_size(self) -> int:
        return _nominal_size(self.r_percent, len(self.scores))

    def stats(self) -> dict[str, Any]:
        return {
            "r_percent": self.r_percent,
            "threshold": self.threshold,
            "n_high": len(self.high),
            "n_low": len(self.low),
            "nominal_high": self.nominal_size,
        }


def _nominal_size(r_percent: float, n: int) -> int:
    return math.ceil(Fraction(str(r_percent)) * n / 100)


def partition_scores(scores: Mapping[str, float], r_percent: float) -> PartitionResult:
    """
    Partition ids by score at the top ``r_percent``.

    Raises:
        EmptyCorpus: If there are no scores
        ValidationError: If ``r_percent`` is outside (0, 100]
    """
    if not scores:
        raise EmptyCorpus("Cannot partition an empty corpus")
    if not 0 < r_percent <= 100:
        log.error("r_percent out of range: %s", r_percent)
        raise ValidationError(f"r_percent must be in (0, 100], got {r_percent}")
    ranking = tuple(sorted(scores, key=lambda i: (-scores[i], i)))
    k = _nominal_size(r_percent, len(ranking))
    threshold = scores[ranking[k - 1]]
    high = tuple(i for i in ranking if scores[i] >= threshold)
    low = tuple(i for i in ranking if scores[i] < threshold)
    return PartitionResult(
        high=high,
        low=low,
        threshold=threshold,
        scores=dict(scores),
        r_percent=r_percent,
        ranking=ranking,
    )


def partition_by_convergence(
    corpus: Sequence[AnnotatedExample],
    student_preds: Optional[Mapping[str, ConstituencyTree]] = None,
    r_percent: float = 50.0,
) -> PartitionResult:
    """
    Rank teacher labels by the student's convergence to them.

    Args:
        corpus: Teacher-labeled examples
        student_preds: Student predictions by example id; defaults to each
            example's ``student`` field
        r_percent: Share of the ranking to keep in ``high``

    Returns:
        The partition, with ``scores[i] = F1(teacher_i, prediction_i)``

    Raises:
        MissingTeacher: If an example has no teacher label
        MissingPrediction: If an example has no prediction
        EmptyCorpus: If the corpus is empty
    """
    if not corpus:
        raise EmptyCorpus("Cannot partition an empty corpus")
    scores = {}
    for example in corpus:
        if example.teacher is None:
            raise MissingTeacher(f"Example {example.id} has no teacher label")
        pred = student_preds.get(example.id) if student_preds is not None else example.student
        if pred is None:
            raise MissingPrediction(f"Example {example.id} has no student prediction")
        scores[example.id] = unlabeled_f1(example.teacher, pred)
    result = partition_scores(scores, r_percent)
    log.info(
        "Partitioned %d labels at r=%s%%: %d high, %d low (threshold %.4f)",
        len(scores),
        r_percent,
        len(result.high),
        len(result.low),
        result.threshold,
    )
    return result


@dataclass
class StageReport:
    name: str
    n_train: int
    epochs: int
    train_f1: float
    test_f1: Optional[float] = None
    trace: Optional[TrainTrace] = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "n_train": self.n_train,
            "epochs": self.epochs,
            "train_f1": self.train_f1,
            "test_f1": self.test_f1,
        }


@dataclass
class PipelineReport:
    """Summary of one pipeline run."""

    pipeline: str
    config: dict[str, Any]
    stages: list[StageReport] = field(default_factory=list)
    partition: Optional[dict[str, Any]] = None
    peer_labels: Optional[dict[str, Any]] = None
    filtering: Optional[dict[str, Any]] = None
    warnings: list[str] = field(default_factory=list)

    @property
    def test_f1(self) -> Optional[float]:
        return self.stages[-1].test_f1 if self.stages else None

    def traces(self) -> dict[str, TrainTrace]:
        """Per-stage training traces, for stages that recorded one."""
        return {stage.name: stage.trace for stage in self.stages if stage.trace is not None}

    def to_dict(self) -> dict[str, Any]:
        document = dataclasses.asdict(dataclasses.replace(self, stages=[]))
        document["stages"] = [stage.to_dict() for stage in self.stages]
        document["test_f1"] = self.test_f1
        return document


# ---------------------------------------------------------------------------
# Helpers


def _teacher_items(corpus: Sequence[AnnotatedExample]) -> list[TrainingExample]:
    items = []
    for example in corpus:
        if example.teacher is None:
            log.error("Example %s has no teacher label", example.id)
            raise MissingTeacher(f"Example {example.id} has no teacher label")
        items.append(TrainingExample(example.id, example.tokens, example.teacher))
    return items


def _gold_items(corpus: Sequence[AnnotatedExample]) -> list[TrainingExample]:
    items = []
    for example in corpus:
        if example.gold is None:
            log.error("Example %s has no gold tree", example.id)
            raise MissingGold(f"Example {example.id} has no gold tree")
        items.append(TrainingExample(example.id, example.tokens, example.gold))
    return items


def evaluate(model: StudentModel, test: Sequence[AnnotatedExample]) -> Optional[float]:
    """Corpus F1 of the model's decodes against gold; ``None`` without a test set."""
    if not test:
        return None
    preds = [decode(model, example.tokens) for example in test]
    return corpus_f1(preds, [example.gold for example in test])


def predict_corpus(
    model: StudentModel, corpus: Sequence[AnnotatedExample]
) -> list[AnnotatedExample]:
    """Fill each example's ``student`` field with the model's decode."""
    return [example.replace(student=decode(model, example.tokens)) for example in corpus]


def _train_stage(
    name: str,
    items: Sequence[TrainingExample],
    config: PipelineConfig,
    epochs: int,
    labeled: Sequence[AnnotatedExample],
    test: Sequence[AnnotatedExample],
    on_epoch_end=None,
) -> tuple[StudentModel, StageReport, dict[str, ConstituencyTree]]:
    log.info("[%s] training on %d labels for %d epochs", name, len(items), epochs)
    labeled_items = _gold_items(labeled) if config.beta > 0 else []
    model, trace = train(
        items,
        config.train_config(epochs),
        labeled_examples=labeled_items,
        on_epoch_end=on_epoch_end,
    )
    preds = {item.id: decode(model, item.tokens) for item in items}
    train_f1 = corpus_f1([preds[item.id] for item in items], [item.target for item in items])
    report = StageReport(
        name=name,
        n_train=len(items),
        epochs=epochs,
        train_f1=train_f1,
        test_f1=evaluate(model, test),
        trace=trace if config.trace else None,
    )
    log.info("[%s] train F1 %.4f, test F1 %s", name, train_f1, report.test_f1)
    return model, report, preds


def _report(kind: PipelineKind, config: PipelineConfig) -> PipelineReport:
    return PipelineReport(pipeline=kind.value, config=_config_dict(config))


def _config_dict(config: PipelineConfig) -> dict[str, Any]:
    document = dataclasses.asdict(config)
    document["kind"] = config.kind.value
    return document


def _mean(values: Sequence[float]) -> Optional[float]:
    return sum(values) / len(values) if values else None


# ---------------------------------------------------------------------------
# Pipelines


def run_slkd(
    corpus: Sequence[AnnotatedExample],
    config: PipelineConfig,
    labeled: Sequence[AnnotatedExample] = (),
    test: Sequence[AnnotatedExample] = (),
) -> tuple[StudentModel, PipelineReport]:
    """Sequence-level KD: learn every teacher label for ``final_epochs``."""
    report = _report(PipelineKind.slkd, config)
    items = _teacher_items(corpus)
    model, stage, _ = _train_stage("slkd", items, config, config.final_epochs, labeled, test)
    report.stages.append(stage)
    return model, report


def _converge_and_partition(
    corpus: Sequence[AnnotatedExample],
    config: PipelineConfig,
    labeled: Sequence[AnnotatedExample],
    test: Sequence[AnnotatedExample],
    report: PipelineReport,
) -> tuple[PartitionResult, dict[str, ConstituencyTree]]:
    items = _teacher_items(corpus)
    _, stage, preds = _train_stage("s0", items, config, config.s0_epochs, labeled, test)
    report.stages.append(stage)
    partition = partition_by_convergence(corpus, preds, config.r_percent)
    report.partition = partition.stats()
    if all(example.gold is not None for example in corpus):
        by_id = {example.id: example for example in corpus}
        report.partition["high_teacher_gold_f1"] = _mean(
            [unlabeled_f1(by_id[i].teacher, by_id[i].gold) for i in partition.high]
        )
        report.partition["low_teacher_gold_f1"] = _mean(
            [unlabeled_f1(by_id[i].teacher, by_id[i].gold) for i in partition.low]
        )
    return partition, preds


def run_selective_kd(
    corpus: Sequence[AnnotatedExample],
    config: PipelineConfig,
    labeled: Sequence[AnnotatedExample] = (),
    test: Sequence[AnnotatedExample] = (),
) -> tuple[StudentModel, PipelineReport]:
    """
    Selective KD: train S0 for ``s0_epochs``, keep the teacher labels it
    converges to best, and train the final student on those alone.
    """
    report = _report(PipelineKind.selective, config)
    partition, _ = _converge_and_partition(corpus, config, labeled, test, report)
    high = set(partition.high)
    items = [item for item in _teacher_items(corpus) if item.id in high]
    model, stage, _ = _train_stage("selective", items, config, config.final_epochs, labeled, test)
    report.stages.append(stage)
    return model, report


def run_pa_kd(
    corpus: Sequence[AnnotatedExample],
    config: PipelineConfig,
    labeled: Sequence[AnnotatedExample] = (),
    test: Sequence[AnnotatedExample] = (),
) -> tuple[StudentModel, PipelineReport]:
    """
    Peer-Advised KD.

    1. S0 learns all teacher labels for ``s0_epochs``.
    2. Labels are partitioned by S0's convergence at ``r_percent``.
    3. A peer S1 learns the high set for ``peer_epochs``.
    4. S1 re-annotates every low-set sentence.
    5. S2 learns the high-set teacher labels plus the peer labels for
       ``final_epochs``, one jointly shuffled stream.

    With an empty low set there is nothing to re-annotate; a
    ``PartitionEmptyLow`` warning is emitted and the run is Selective KD.
    """
    report = _report(PipelineKind.pa_kd, config)
    partition, _ = _converge_and_partition(corpus, config, labeled, test, report)
    high = set(partition.high)
    teacher_items = _teacher_items(corpus)

    if not partition.low:
        message = "Low-convergence set is empty; PA-KD degenerates to Selective KD"
        log.warning(message)
        warnings.warn(message, PartitionEmptyLow, stacklevel=2)
        report.warnings.append("partition-empty-low")
        items = [item for item in teacher_items if item.id in high]
        model, stage, _ = _train_stage("s2", items, config, config.final_epochs, labeled, test)
        report.stages.append(stage)
        return model, report

    high_items = [item for item in teacher_items if item.id in high]
    peer, stage, _ = _train_stage("s1", high_items, config, config.peer_epochs, labeled, test)
    report.stages.append(stage)

    peer_labels = {}
    final_items = []
    for example, item in zip(corpus, teacher_items):
        if item.id in high:
            final_items.append(item)
        else:
            label = decode(peer, example.tokens)
            peer_labels[example.id] = label
            final_items.append(TrainingExample(item.id, item.tokens, label))
    log.info("[s1] re-annotated %d low-convergence sentences", len(peer_labels))

    report.peer_labels = {"n_relabeled": len(peer_labels)}
    low_examples = [example for example in corpus if example.id in peer_labels]
    if all(example.gold is not None for example in low_examples):
        peer_gold = _mean([unlabeled_f1(peer_labels[e.id], e.gold) for e in low_examples])
        teacher_gold = _mean([unlabeled_f1(e.teacher, e.gold) for e in low_examples])
        report.peer_labels.update(
            {"peer_gold_f1": peer_gold, "replaced_teacher_gold_f1": teacher_gold}
        )
        log.info(
            "Peer labels gold F1 %.4f vs replaced teacher labels %.4f",
            peer_gold,
            teacher_gold,
        )

    model, stage, _ = _train_stage("s2", final_items, config, config.final_epochs, labeled, test)
    report.stages.append(stage)
    return model, report


def _self_labels(model: StudentModel, corpus: Sequence[AnnotatedExample]) -> list[TrainingExample]:
    return [
        TrainingExample(example.id, example.tokens, decode(model, example.tokens))
        for example in corpus
    ]


def run_sd(
    corpus: Sequence[AnnotatedExample],
    config: PipelineConfig,
    base: Optional[StudentModel] = None,
    labeled: Sequence[AnnotatedExample] = (),
    test: Sequence[AnnotatedExample] = (),
) -> tuple[StudentModel, PipelineReport]:
    """
    Self-distillation.

    The base student (by default SLKD trained for ``sd_label_epochs``, short
    enough not to just reproduce the teacher labels) relabels the training
    sentences and a fresh student learns those labels.
    """
    report = _report(PipelineKind.sd, config)
    if base is None:
        base, stage, _ = _train_stage(
            "base", _teacher_items(corpus), config, config.sd_label_epochs, labeled, test
        )
        report.stages.append(stage)
    items = _self_labels(base, corpus)
    model, stage, _ = _train_stage("sd", items, config, config.final_epochs, labeled, test)
    report.stages.append(stage)
    return model, report


def _best_validation_slkd(
    corpus: Sequence[AnnotatedExample],
    config: PipelineConfig,
    labeled: Sequence[AnnotatedExample],
    validation: Sequence[AnnotatedExample],
    test: Sequence[AnnotatedExample],
    report: PipelineReport,
) -> StudentModel:
    best: dict[str, Any] = {"f1": -1.0, "model": None, "epoch": 0}

    def keep_best(epoch: int, model: StudentModel, _preds) -> None:
        f1 = evaluate(model, validation)
        if f1 is not None and f1 > best["f1"]:
            best.update(f1=f1, model=dataclasses.replace(model), epoch=epoch)

    hook = keep_best if validation else None
    model, stage, _ = _train_stage(
        "base", _teacher_items(corpus), config, config.final_epochs, labeled, test, hook
    )
    report.stages.append(stage)
    if best["model"] is not None:
        log.info("Using base checkpoint from epoch %d (validation F1 %.4f)", best["epoch"], best["f1"])
        return best["model"]
    return model


def run_sd_hc(
    corpus: Sequence[AnnotatedExample],
    config: PipelineConfig,
    base: Optional[StudentModel] = None,
    labeled: Sequence[AnnotatedExample] = (),
    test: Sequence[AnnotatedExample] = (),
    validation: Sequence[AnnotatedExample] = (),
) -> tuple[StudentModel, PipelineReport]:
    """
    Self-distillation on high-confidence self-labels.

    The base student (by default SLKD, taking the checkpoint with the best
    validation F1 when a validation set is given) relabels the training
    sentences; labels whose margin confidence is above the mean are kept.
    Forced trees (infinite confidence) are always kept and the mean is taken
    over finite confidences.

    Raises:
        AllFiltered: If no self-label is above the mean
    """
    report = _report(PipelineKind.sd_hc, config)
    if base is None:
        base = _best_validation_slkd(corpus, config, labeled, validation, test, report)

    scores = {example.id: confidence(base, example.tokens) for example in corpus}
    finite = [c for c in scores.values() if math.isfinite(c)]
    mean = _mean(finite)
    if mean is None:
        log.warning("All confidences are infinite; keeping every self-label")
        kept = set(scores)
    else:
        kept = {i for i, c in scores.items() if c > mean}
    if not kept:
        log.error("No self-label has confidence above the mean %.6f", mean)
        raise AllFiltered(f"No self-label has confidence above the mean {mean}")

    items = [item for item in _self_labels(base, corpus) if item.id in kept]
    report.filtering = {"rule": config.confidence_rule, "mean_confidence": mean, "n_kept": len(items)}
    log.info("Kept %d of %d self-labels above mean confidence", len(items), len(corpus))
    model, stage, _ = _train_stage("sd-hc", items, config, config.final_epochs, labeled, test)
    report.stages.append(stage)
    return model, report


def run_sd_ha(
    corpus: Sequence[AnnotatedExample],
    config: PipelineConfig,
    labeled: Sequence[AnnotatedExample] = (),
    test: Sequence[AnnotatedExample] = (),
) -> tuple[StudentModel, PipelineReport]:
    """
    Self-distillation on high-agreement self-labels.

    S0's own predictions are the labels; only the top ``r_percent`` by
    agreement with the teacher labels are kept for the fresh student.
    """
    report = _report(PipelineKind.sd_ha, config)
    partition, preds = _converge_and_partition(corpus, config, labeled, test, report)
    high = set(partition.high)
    items = [
        TrainingExample(example.id, example.tokens, preds[example.id])
        for example in corpus
        if example.id in high
    ]
    report.filtering = {"rule": "convergence", "n_kept": len(items)}
    model, stage, _ = _train_stage("sd-ha", items, config, config.final_epochs, labeled, test)
    report.stages.append(stage)
    return model, report


def run_supervised(
    labeled: Sequence[AnnotatedExample],
    config: PipelineConfig,
    test: Sequence[AnnotatedExample] = (),
) -> tuple[StudentModel, PipelineReport]:
    """
    Plain training on gold trees for ``final_epochs``.

    Serves as the SFT baseline and, through
    ``teachersim.annotate_with_model``, as a supervised teacher.
    """
    report = _report(PipelineKind.supervised, config)
    items = _gold_items(labeled)
    model, stage, _ = _train_stage(
        "supervised", items, config.replace(beta=0), config.final_epochs, (), test
    )
    report.stages.append(stage)
    return model, report


def run_pipeline(
    corpus: Sequence[AnnotatedExample],
    config: PipelineConfig,
    labeled: Sequence[AnnotatedExample] = (),
    test: Sequence[AnnotatedExample] = (),
    validation: Sequence[AnnotatedExample] = (),
) -> tuple[StudentModel, PipelineReport]:
    """Dispatch on ``config.kind``. ``supervised`` trains on ``labeled``."""
    kind = config.kind
    log.info("Running pipeline %s (seed %d)", kind.value, config.seed)
    if kind is PipelineKind.slkd:
        return run_slkd(corpus, config, labeled, test)
    if kind is PipelineKind.selective:
        return run_selective_kd(corpus, config, labeled, test)
    if kind is PipelineKind.pa_kd:
        return run_pa_kd(corpus, config, labeled, test)
    if kind is PipelineKind.sd:
        return run_sd(corpus, config, labeled=labeled, test=test)
    if kind is PipelineKind.sd_hc:
        return run_sd_hc(corpus, config, labeled=labeled, test=test, validation=validation)
    if kind is PipelineKind.sd_ha:
        return run_sd_ha(corpus, config, labeled, test)
    return run_supervised(labeled, config, test)
