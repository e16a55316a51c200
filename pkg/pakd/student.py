"""
The trainable student: a linear span-scoring parser.

A span ``[i, j)`` of width at least two is scored by the sum of the weights of
its features. A binary tree scores the sum of its internal spans; decoding
finds the best tree exactly with a CKY chart. Training is the averaged
structured perceptron, one pass over a seeded shuffle of the training stream
per epoch.
"""

import json
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, NamedTuple, Optional, Sequence, Union

import numpy as np

from .exceptions import (
    ConfigMismatch,
    CorruptModel,
    EmptySentence,
    EmptyTrainingSet,
    SpanOutOfRange,
    VersionMismatch,
)
from .models import TrainConfig
from .treebank import (
    DEFAULT_SPAN_POLICY,
    ConstituencyTree,
    Nested,
    Token,
    binarize,
    eval_spans,
    from_nested,
    unlabeled_f1,
)

log = logging.getLogger(__name__)

FEATURE_VERSION = "v1"
MODEL_FORMAT = "pakd-model/1"
LEFT_SENTINEL = "<s>"
RIGHT_SENTINEL = "</s>"

FeatureVector = Counter


def length_bucket(width: int) -> str:
    """Bucket a span width: 1..5 individually, then 6-10 and 11+."""
    if width <= 5:
        return str(width)
    if width <= 10:
        return "6-10"
    return "11+"


def _feature_keys(words: Sequence[str], start: int, end: int) -> tuple[str, ...]:
    n = len(words)
    first = words[start]
    last = words[end - 1]
    left = words[start - 1] if start > 0 else LEFT_SENTINEL
    right = words[end] if end < n else RIGHT_SENTINEL
    v = FEATURE_VERSION
    return (
        f"{v}|first={first}",
        f"{v}|last={last}",
        f"{v}|left={left}",
        f"{v}|right={right}",
        f"{v}|len={length_bucket(end - start)}",
        f"{v}|first_last={first}^{last}",
        f"{v}|outside={left}^{right}",
    )


def extract_features(tokens: Sequence[Token], span: tuple[int, int]) -> FeatureVector:
    """
    Features of one span.

    Args:
        tokens: Sentence tokens
        span: ``(start, end)`` with ``0 <= start < end <= n``

    Returns:
        Feature counts keyed by versioned template strings

    Raises:
        SpanOutOfRange: If the span lies outside the sentence
    """
    start, end = span
    n = len(tokens)
    if not 0 <= start < end <= n:
        raise SpanOutOfRange(f"Span {span} outside sentence of length {n}")
    words = [token.surface for token in tokens]
    return Counter(_feature_keys(words, start, end))


class SentenceFeatures:
    """Feature keys of every scorable span of a sentence, computed once."""

    __slots__ = ("n", "keys")

    def __init__(self, tokens: Sequence[Token]):
        words = [token.surface for token in tokens]
        self.n = len(words)
        self.keys = {
            (i, j): _feature_keys(words, i, j)
            for i in range(self.n)
            for j in range(i + 2, self.n + 1)
        }

    def scores(self, weights: dict[str, float]) -> dict[tuple[int, int], float]:
        get = weights.get
        return {span: sum(get(k, 0.0) for k in keys) for span, keys in self.keys.items()}


@dataclass(frozen=True)
class StudentHyperparams:
    epochs: int = 0
    shuffle: bool = True
    feature_version: str = FEATURE_VERSION
    beta: int = 0


@dataclass
class StudentModel:
    """Perceptron weights plus training metadata. Prediction uses the averaged weights."""

    raw_weights: dict[str, float] = field(default_factory=dict)
    averaged_weights: dict[str, float] = field(default_factory=dict)
    updates_seen: int = 0
    epochs_trained: int = 0
    seed: int = 0
    hyperparams: StudentHyperparams = field(default_factory=StudentHyperparams)

    @classmethod
    def zero(cls, seed: int = 0) -> "StudentModel":
        return cls(seed=seed)


@dataclass(frozen=True)
class TraceRecord:
    example_id: str
    epoch: int
    f1_vs_target: float


@dataclass
class TrainTrace:
    """Epoch-end F1 of each training example's prediction against its training label."""

    records: list[TraceRecord] = field(default_factory=list)

    def epoch_means(self) -> dict[int, float]:
        totals: dict[int, list[float]] = defaultdict(list)
        for record in self.records:
            totals[record.epoch].append(record.f1_vs_target)
        return {epoch: sum(v) / len(v) for epoch, v in sorted(totals.items())}

    def to_rows(self) -> list[dict[str, object]]:
        return [
            {"example_id": r.example_id, "epoch": r.epoch, "f1_vs_target": r.f1_vs_target}
            for r in self.records
        ]


class TrainingExample(NamedTuple):
    id: str
    tokens: tuple[Token, ...]
    target: ConstituencyTree


class TwoBest(NamedTuple):
    best: ConstituencyTree
    second: Optional[ConstituencyTree]
    margin: float


EpochHook = Callable[[int, StudentModel, dict[str, ConstituencyTree]], None]


# ---------------------------------------------------------------------------
# Decoding


def _cky(scores: dict[tuple[int, int], float], n: int) -> dict[tuple[int, int], int]:
    """Best split of every span; ties go to the smallest split point."""
    best = {(i, i + 1): 0.0 for i in range(n)}
    split: dict[tuple[int, int], int] = {}
    for width in range(2, n + 1):
        for i in range(n - width + 1):
            j = i + width
            top = None
            arg = i + 1
            for k in range(i + 1, j):
                value = best[(i, k)] + best[(k, j)]
                if top is None or value > top:
                    top = value
                    arg = k
            best[(i, j)] = scores[(i, j)] + top
            split[(i, j)] = arg
    return split


def _nested_from_splits(split: dict[tuple[int, int], int], i: int, j: int) -> Nested:
    if j - i == 1:
        return i
    k = split[(i, j)]
    return (_nested_from_splits(split, i, k), _nested_from_splits(split, k, j))


def _decode_scores(
    tokens: tuple[Token, ...], scores: dict[tuple[int, int], float]
) -> ConstituencyTree:
    n = len(tokens)
    if n == 1:
        return from_nested(tokens, 0)
    split = _cky(scores, n)
    return from_nested(tokens, _nested_from_splits(split, 0, n))


def decode(model: StudentModel, tokens: Sequence[Token]) -> ConstituencyTree:
    """
    Highest-scoring binary tree under the averaged weights.

    Raises:
        EmptySentence: If there are no tokens
    """
    tokens = tuple(tokens)
    if not tokens:
        raise EmptySentence("Cannot decode an empty sentence")
    scores = SentenceFeatures(tokens).scores(model.averaged_weights)
    return _decode_scores(tokens, scores)


def predict(
    model: StudentModel, sentences: Sequence[Sequence[Token]]
) -> list[ConstituencyTree]:
    """Decode a batch of sentences."""
    return [decode(model, tokens) for tokens in sentences]


def decode_2best(model: StudentModel, tokens: Sequence[Token]) -> TwoBest:
    """
    The two best distinct trees and their score margin.

    Each chart cell keeps its two best derivations; candidates are ordered by
    score, then split point, then sub-derivation ranks, so the best tree is
    the one ``decode`` returns. Sentences with a single possible tree have no
    second tree and an infinite margin.
    """
    tokens = tuple(tokens)
    n = len(tokens)
    if n == 0:
        raise EmptySentence("Cannot decode an empty sentence")
    if n <= 2:
        return TwoBest(_decode_scores(tokens, {(0, n): 0.0} if n == 2 else {}), None, math.inf)

    scores = SentenceFeatures(tokens).scores(model.averaged_weights)
    # cell -> [(inside score, split, left rank, right rank)]
    chart: dict[tuple[int, int], list[tuple[float, int, int, int]]] = {
        (i, i + 1): [(0.0, -1, 0, 0)] for i in range(n)
    }
    for width in range(2, n + 1):
        for i in range(n - width + 1):
            j = i + width
            candidates = []
            for k in range(i + 1, j):
                left = chart[(i, k)]
                right = chart[(k, j)]
                for a, left_entry in enumerate(left):
                    for b, right_entry in enumerate(right):
                        candidates.append((left_entry[0] + right_entry[0], k, a, b))
            candidates.sort(key=lambda c: (-c[0], c[1], c[2], c[3]))
            chart[(i, j)] = [(scores[(i, j)] + v, k, a, b) for v, k, a, b in candidates[:2]]

    def build(i: int, j: int, rank: int) -> Nested:
        if j - i == 1:
            return i
        _, k, a, b = chart[(i, j)][rank]
        return (build(i, k, a), build(k, j, b))

    cell = chart[(0, n)]
    best = from_nested(tokens, build(0, n, 0))
    second = from_nested(tokens, build(0, n, 1))
    return TwoBest(best, second, cell[0][0] - cell[1][0])


def confidence(model: StudentModel, tokens: Sequence[Token]) -> float:
    """
    Length-normalized 2-best margin.

    The margin is divided by the number of evaluated spans of the best tree
    (at least one). Sentences with a forced tree get ``math.inf``.
    """
    result = decode_2best(model, tokens)
    if result.second is None:
        return math.inf
    return result.margin / max(1, len(eval_spans(result.best)))


# ---------------------------------------------------------------------------
# Training


class _Prepared(NamedTuple):
    example: TrainingExample
    features: SentenceFeatures
    target_spans: frozenset
    target_eval: frozenset


def _internal_spans(tree: ConstituencyTree) -> frozenset:
    return frozenset(span for span in tree.spans() if span[1] - span[0] >= 2)


def _prepare(example: TrainingExample) -> _Prepared:
    target = binarize(example.target)
    return _Prepared(
        example=TrainingExample(example.id, tuple(example.tokens), target),
        features=SentenceFeatures(example.tokens),
        target_spans=_internal_spans(target),
        target_eval=eval_spans(target, DEFAULT_SPAN_POLICY).spans,
    )


def _averaged(raw: dict[str, float], totals: dict[str, float], steps: int) -> dict[str, float]:
    return {key: raw[key] - totals[key] / steps for key in sorted(raw)}


def train(
    examples: Sequence[TrainingExample],
    config: TrainConfig = TrainConfig(),
    labeled_examples: Sequence[TrainingExample] = (),
    on_epoch_end: Optional[EpochHook] = None,
) -> tuple[StudentModel, TrainTrace]:
    """
    Train a fresh student with the averaged structured perceptron.

    Each epoch visits a seeded permutation of the stream: the examples, plus
    the labeled examples repeated ``config.beta`` times. An example whose
    predicted evaluation spans differ from its target's updates the raw
    weights by the target's features minus the prediction's.

    Args:
        examples: ``(id, tokens, target)`` training items; targets are
            binarized internally
        config: Epochs, seed, labeled-data replication and trace switch
        labeled_examples: Gold-labeled items mixed in when ``beta > 0``
        on_epoch_end: Called with ``(epoch, model, predictions)`` after every
            epoch, ``predictions`` mapping example id to the averaged-weight
            decode of that example

    Returns:
        The trained model and its per-epoch trace

    Raises:
        EmptyTrainingSet: If ``examples`` is empty
    """
    if not examples:
        raise EmptyTrainingSet("Cannot train on an empty example set")

    prepared = [_prepare(example) for example in examples]
    if config.beta > 0:
        prepared.extend(_prepare(example) for example in labeled_examples)
    stream = list(prepared)
    if config.beta > 0 and labeled_examples:
        stream.extend(prepared[len(examples):] * (config.beta - 1))

    rng = np.random.default_rng(config.seed)
    raw: dict[str, float] = defaultdict(float)
    totals: dict[str, float] = defaultdict(float)
    step = 1
    model = StudentModel(
        seed=config.seed,
        hyperparams=StudentHyperparams(
            epochs=config.epochs, shuffle=config.shuffle, beta=config.beta
        ),
    )
    trace = TrainTrace()

    log.debug(
        "Training on %d examples (+%d labeled x%d) for %d epochs",
        len(examples),
        len(labeled_examples) if config.beta else 0,
        config.beta,
        config.epochs,
    )

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(stream)) if config.shuffle else range(len(stream))
        updates = 0
        for index in order:
            item = stream[index]
            n = item.features.n
            if n >= 3:
                scores = item.features.scores(raw)
                split = _cky(scores, n)
                predicted = frozenset(
                    span for span in _spans_from_splits(split, 0, n)
                )
                predicted_eval = predicted - {(0, n)}
                if predicted_eval != item.target_eval:
                    for span in item.target_spans - predicted:
                        for key in item.features.keys[span]:
                            raw[key] += 1.0
                            totals[key] += step
                    for span in predicted - item.target_spans:
                        for key in item.features.keys[span]:
                            raw[key] -= 1.0
                            totals[key] -= step
                    updates += 1
            step += 1

        model.raw_weights = dict(sorted(raw.items()))
        model.averaged_weights = _averaged(raw, totals, step)
        model.updates_seen = step - 1
        model.epochs_trained = epoch
        log.debug("Epoch %d: %d updates over %d items", epoch, updates, len(stream))
        if updates == 0:
            log.debug("Epoch %d made no updates", epoch)

        if config.trace or on_epoch_end is not None:
            predictions = {}
            for item in prepared:
                example = item.example
                predictions[example.id] = _decode_scores(
                    example.tokens, item.features.scores(model.averaged_weights)
                )
            if config.trace:
                for item in prepared:
                    example = item.example
                    trace.records.append(
                        TraceRecord(
                            example.id,
                            epoch,
                            unlabeled_f1(predictions[example.id], example.target),
                        )
                    )
            if on_epoch_end is not None:
                on_epoch_end(epoch, model, predictions)

    log.info(
        "Trained student for %d epochs on %d items (%d weights)",
        config.epochs,
        len(stream),
        len(model.raw_weights),
    )
    return model, trace


def _spans_from_splits(split: dict[tuple[int, int], int], i: int, j: int):
    if j - i < 2:
        return
    yield (i, j)
    k = split[(i, j)]
    yield from _spans_from_splits(split, i, k)
    yield from _spans_from_splits(split, k, j)


# ---------------------------------------------------------------------------
# Persistence


def model_to_json(model: StudentModel, provenance: Optional[Mapping[str, str]] = None) -> str:
    """
    Render a model as sorted-key JSON tagged ``pakd-model/1``.

    ``provenance`` holds the hashes of the run that trained the model.
    """
    document = {
        "format": MODEL_FORMAT,
        "provenance": dict(provenance or {}),
        "seed": model.seed,
        "updates_seen": model.updates_seen,
        "epochs_trained": model.epochs_trained,
        "hyperparams": {
            "epochs": model.hyperparams.epochs,
            "shuffle": model.hyperparams.shuffle,
            "feature_version": model.hyperparams.feature_version,
            "beta": model.hyperparams.beta,
        },
        "raw_weights": model.raw_weights,
        "averaged_weights": model.averaged_weights,
    }
    return json.dumps(document, sort_keys=True, indent=1) + "\n"


def save_model(
    model: StudentModel,
    path: Union[str, Path],
    provenance: Optional[Mapping[str, str]] = None,
) -> Path:
    """Write a model file; see ``model_to_json``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(model_to_json(model, provenance), encoding="utf-8")
    log.info("Saved model to %s", path)
    return path


def load_model(
    path: Union[str, Path], expected: Optional[Mapping[str, str]] = None
) -> StudentModel:
    """
    Read a model written by ``save_model``.

    Args:
        path: Model file
        expected: Provenance fields that must match, e.g. ``{"data_hash": ...}``

    Raises:
        VersionMismatch: If the format id is not ``pakd-model/1``
        CorruptModel: If the file is not a well-formed model document
        ConfigMismatch: If the model was trained under other settings
    """
    path = Path(path)
    try:
        with path.open("r", encoding="utf-8") as f:
            document = json.load(f)
    except json.JSONDecodeError as ex:
        log.error("Model file %s is not valid JSON", path)
        raise CorruptModel(f"Model file {path} is not valid JSON: {ex}") from ex

    if not isinstance(document, dict):
        raise CorruptModel(f"Model file {path} does not hold an object")
    if document.get("format") != MODEL_FORMAT:
        log.error("Unsupported model format: %s", document.get("format"))
        raise VersionMismatch(
            f"Expected format {MODEL_FORMAT}, found {document.get('format')!r}"
        )
    provenance = document.get("provenance") or {}
    if not isinstance(provenance, dict):
        raise CorruptModel(f"Model file {path} has a malformed provenance record")
    for key, value in (expected or {}).items():
        found = provenance.get(key)
        if found != value:
            log.error("Model %s has %s %s, config expects %s", path, key, found, value)
            raise ConfigMismatch(
                f"Model {path} has {key} {found!r}, current config has {value!r}"
            )
    try:
        hyper = document["hyperparams"]
        return StudentModel(
            raw_weights={str(k): float(v) for k, v in document["raw_weights"].items()},
            averaged_weights={
                str(k): float(v) for k, v in document["averaged_weights"].items()
            },
            updates_seen=int(document["updates_seen"]),
            epochs_trained=int(document["epochs_trained"]),
            seed=int(document["seed"]),
            hyperparams=StudentHyperparams(
                epochs=int(hyper["epochs"]),
                shuffle=bool(hyper["shuffle"]),
                feature_version=str(hyper["feature_version"]),
                beta=int(hyper["beta"]),
            ),
        )
    except (KeyError, TypeError, ValueError, AttributeError) as ex:
        log.error("Model file %s is missing fields", path)
        raise CorruptModel(f"Model file {path} is incomplete: {ex}") from ex
