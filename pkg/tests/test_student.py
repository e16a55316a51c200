import json
import math
import os
import shutil
from pathlib import Path

import numpy as np
import pytest

from pakd.exceptions import (
    CorruptModel,
    EmptySentence,
    EmptyTrainingSet,
    NonIntegerBeta,
    SpanOutOfRange,
    VersionMismatch,
)
from pakd.models import TrainConfig
from pakd.student import (
    LEFT_SENTINEL,
    SentenceFeatures,
    StudentModel,
    TrainingExample,
    confidence,
    decode,
    decode_2best,
    extract_features,
    load_model,
    predict,
    save_model,
    train,
)
from pakd.treebank import (
    from_nested,
    left_branching,
    make_tokens,
    right_branching,
    to_nested,
    unlabeled_f1,
)

BASE_DIR = Path(__file__).parent
TEST_DIR = BASE_DIR / "test_data"
OUTPUT_DIR = TEST_DIR / "output"
KEEP_TEST_OUTPUTS = os.environ.get("KEEP_TEST_OUTPUTS", "0") == "1"


def all_trees(i, j):
    """Every binary bracketing of [i, j) as nested pairs."""
    if j - i == 1:
        return [i]
    trees = []
    for k in range(i + 1, j):
        for left in all_trees(i, k):
            for right in all_trees(k, j):
                trees.append((left, right))
    return trees


def internal_spans(nested):
    if isinstance(nested, int):
        return []
    left, right = nested
    start = _start(left)
    end = _end(right)
    return [(start, end)] + internal_spans(left) + internal_spans(right)


def _start(nested):
    return nested if isinstance(nested, int) else _start(nested[0])


def _end(nested):
    return nested + 1 if isinstance(nested, int) else _end(nested[1])


def split_sequence(nested):
    """Pre-order split points, the decoder's tie-break order."""
    if isinstance(nested, int):
        return ()
    left, right = nested
    return (_start(right),) + split_sequence(left) + split_sequence(right)


def tree_score(nested, span_scores):
    return sum(span_scores[span] for span in internal_spans(nested))


def random_model(rng, tokens):
    """Integer weights over the sentence's feature keys, so sums are exact."""
    keys = sorted({key for keys in SentenceFeatures(tokens).keys.values() for key in keys})
    weights = {key: float(rng.integers(-2, 3)) for key in keys}
    return StudentModel(raw_weights=dict(weights), averaged_weights=weights)


def scaled(model, factor):
    return StudentModel(averaged_weights={k: v * factor for k, v in model.averaged_weights.items()})


class TestFeatures:
    """Span feature templates."""

    def test_template_expansion(self):
        tokens = make_tokens(["a", "b", "c"])
        features = extract_features(tokens, (0, 2))

        assert sorted(features) == sorted(
            [
                "v1|first=a",
                "v1|last=b",
                "v1|left=<s>",
                "v1|right=c",
                "v1|len=2",
                "v1|first_last=a^b",
                "v1|outside=<s>^c",
            ]
        )

    def test_deterministic(self):
        tokens = make_tokens(["x", "y", "z", "w"])

        assert extract_features(tokens, (1, 3)) == extract_features(tokens, (1, 3))

    def test_left_sentinel(self):
        tokens = make_tokens(["x", "y", "z"])

        assert f"v1|left={LEFT_SENTINEL}" in extract_features(tokens, (0, 3))

    def test_out_of_range(self):
        tokens = make_tokens(["x", "y"])

        with pytest.raises(SpanOutOfRange):
            extract_features(tokens, (1, 3))
        with pytest.raises(SpanOutOfRange):
            extract_features(tokens, (1, 1))


class TestDecode:
    """Exact CKY decoding."""

    def test_single_token(self):
        tokens = make_tokens(["a"])
        tree = decode(StudentModel.zero(), tokens)

        assert tree.n == 1
        assert tree.root.is_leaf

    def test_two_tokens(self):
        tokens = make_tokens(["a", "b"])

        assert to_nested(decode(StudentModel.zero(), tokens)) == (0, 1)

    def test_empty_sentence(self):
        with pytest.raises(EmptySentence):
            decode(StudentModel.zero(), ())

    def test_zero_model_right_branching(self):
        tokens = make_tokens(["a", "b", "c", "d", "e"])

        assert decode(StudentModel.zero(), tokens) == right_branching(tokens)

    def test_matches_exhaustive_argmax(self):
        rng = np.random.default_rng(0)
        for _ in range(500):
            n = int(rng.integers(3, 7))
            tokens = make_tokens([f"w{int(rng.integers(0, 4))}" for _ in range(n)])
            model = random_model(rng, tokens)
            span_scores = SentenceFeatures(tokens).scores(model.averaged_weights)

            candidates = all_trees(0, n)
            best_score = max(tree_score(t, span_scores) for t in candidates)
            expected = min(
                (t for t in candidates if tree_score(t, span_scores) == best_score),
                key=split_sequence,
            )

            assert to_nested(decode(model, tokens)) == expected

    def test_scaling_keeps_decode(self):
        rng = np.random.default_rng(1)
        tokens = make_tokens(["a", "b", "c", "d", "e", "f"])
        model = random_model(rng, tokens)

        assert decode(scaled(model, 3.0), tokens) == decode(model, tokens)

    def test_predict_batch(self):
        sentences = [make_tokens(["a", "b", "c"]), make_tokens(["d"])]
        trees = predict(StudentModel.zero(), sentences)

        assert [t.n for t in trees] == [3, 1]


class TestTwoBest:
    """Second-best trees and margin confidence."""

    def test_forced_tree(self):
        result = decode_2best(StudentModel.zero(), make_tokens(["a", "b"]))

        assert result.second is None
        assert result.margin == math.inf

    def test_zero_model_margin(self):
        result = decode_2best(StudentModel.zero(), make_tokens(["a", "b", "c"]))

        assert result.margin == 0.0
        assert not result.second.structurally_equal(result.best)

    def test_matches_exhaustive_second_best(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            n = int(rng.integers(3, 7))
            tokens = make_tokens([f"w{int(rng.integers(0, 4))}" for _ in range(n)])
            model = random_model(rng, tokens)
            span_scores = SentenceFeatures(tokens).scores(model.averaged_weights)
            scores = sorted((tree_score(t, span_scores) for t in all_trees(0, n)), reverse=True)
            result = decode_2best(model, tokens)

            assert result.best == decode(model, tokens)
            assert result.margin == scores[0] - scores[1]
            assert result.margin >= 0
            assert not result.second.structurally_equal(result.best)

    def test_confidence_forced_and_zero(self):
        assert confidence(StudentModel.zero(), make_tokens(["a"])) == math.inf
        assert confidence(StudentModel.zero(), make_tokens(["a", "b", "c", "d"])) == 0.0

    def test_confidence_scales_linearly(self):
        rng = np.random.default_rng(3)
        tokens = make_tokens(["a", "b", "c", "d", "e"])
        model = random_model(rng, tokens)

        assert confidence(scaled(model, 2.0), tokens) == 2.0 * confidence(model, tokens)


class TestTraining:
    """Averaged perceptron training."""

    @classmethod
    def setup_class(cls):
        OUTPUT_DIR.mkdir(parents=True, exist_ok=True)

    @classmethod
    def teardown_class(cls):
        if OUTPUT_DIR.exists() and not KEEP_TEST_OUTPUTS:
            shutil.rmtree(OUTPUT_DIR)

    @pytest.fixture
    def examples(self):
        first = make_tokens(["the", "old", "dog", "barked"])
        second = make_tokens(["a", "red", "cat", "slept", "here"])
        return [
            TrainingExample("e0", first, left_branching(first)),
            TrainingExample("e1", second, from_nested(second, (((0, 1), 2), (3, 4)))),
        ]

    def test_single_example_fits(self, examples):
        model, _ = train(examples[:1], TrainConfig(epochs=100, seed=0))

        assert unlabeled_f1(decode(model, examples[0].tokens), examples[0].target) == 1.0

    def test_two_examples_fit(self, examples):
        model, trace = train(examples, TrainConfig(epochs=10, seed=0))

        for example in examples:
            assert unlabeled_f1(decode(model, example.tokens), example.target) == 1.0
        assert len(trace.epoch_means()) == 10
        assert trace.epoch_means()[10] == 1.0

    def test_zero_epochs(self, examples):
        model, trace = train(examples, TrainConfig(epochs=0))

        assert model.averaged_weights == {}
        assert trace.records == []
        assert decode(model, examples[0].tokens) == right_branching(examples[0].tokens)

    def test_deterministic(self, examples):
        first = train(examples, TrainConfig(epochs=5, seed=4))
        second = train(examples, TrainConfig(epochs=5, seed=4))

        assert first == second

    def test_empty_training_set(self):
        with pytest.raises(EmptyTrainingSet):
            train([], TrainConfig())

    def test_non_integer_beta(self):
        with pytest.raises(NonIntegerBeta):
            TrainConfig(beta=1.5)

    def test_labeled_examples_replicated(self, examples):
        seen = []

        def hook(epoch, model, predictions):
            seen.append(sorted(predictions))

        model, _ = train(
            examples[:1],
            TrainConfig(epochs=1, beta=2),
            labeled_examples=examples[1:],
            on_epoch_end=hook,
        )

        assert seen == [["e0", "e1"]]
        assert model.updates_seen == 3

    def test_trace_rows(self, examples):
        _, trace = train(examples, TrainConfig(epochs=2, seed=0))
        rows = trace.to_rows()

        assert len(rows) == 4
        assert set(rows[0]) == {"example_id", "epoch", "f1_vs_target"}

    def test_save_and_load(self, examples):
        model, _ = train(examples, TrainConfig(epochs=3, seed=1))
        path = save_model(model, OUTPUT_DIR / "model.json")

        assert load_model(path) == model

    def test_load_wrong_format(self):
        path = OUTPUT_DIR / "old_model.json"
        path.write_text(json.dumps({"format": "pakd-model/0"}), encoding="utf-8")

        with pytest.raises(VersionMismatch):
            load_model(path)

    def test_load_corrupt(self):
        path = OUTPUT_DIR / "corrupt_model.json"
        path.write_text("{not json", encoding="utf-8")

        with pytest.raises(CorruptModel):
            load_model(path)
