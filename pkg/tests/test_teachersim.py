import json
import math
import os
import shutil
from pathlib import Path

import numpy as np
import pytest

from pakd.exceptions import (
    DegenerateConfig,
    LengthBoundsInfeasible,
    MalformedRecord,
    MissingGold,
    TokenMismatch,
)
from pakd.models import CorpusConfig, CorruptionMode, GrammarConfig, NoiseConfig, NoiseTier
from pakd.student import StudentModel
from pakd.teachersim import (
    AnnotatedExample,
    annotate_with_model,
    corpus_tier_f1,
    corpus_to_jsonl,
    corrupt,
    ingest_jsonl,
    make_teacher_labels,
    rotation_count,
    sample_corpus,
    sample_grammar,
    sample_pools,
)
from pakd.treebank import corpus_f1, make_tokens, parse_bracketed, right_branching, unlabeled_f1

BASE_DIR = Path(__file__).parent
TEST_DIR = BASE_DIR / "test_data"
OUTPUT_DIR = TEST_DIR / "output"
KEEP_TEST_OUTPUTS = os.environ.get("KEEP_TEST_OUTPUTS", "0") == "1"

SMALL_GRAMMAR = GrammarConfig(n_nonterminals=4, n_preterminals=5, vocab_size=60, seed=7)


@pytest.fixture(scope="module")
def grammar():
    return sample_grammar(SMALL_GRAMMAR)


@pytest.fixture(scope="module")
def corpus(grammar):
    return sample_corpus(grammar, 300, (3, 12), seed=5)


class TestGrammar:
    """Synthetic grammar sampling."""

    def test_same_seed_same_grammar(self):
        assert sample_grammar(SMALL_GRAMMAR) == sample_grammar(SMALL_GRAMMAR)

    def test_one_nonterminal_rejected(self):
        with pytest.raises(DegenerateConfig):
            sample_grammar(GrammarConfig(n_nonterminals=1))

    def test_tiny_vocabulary_rejected(self):
        with pytest.raises(DegenerateConfig):
            sample_grammar(GrammarConfig(vocab_size=5, n_preterminals=2))

    def test_probabilities_normalize(self, grammar):
        for rules in grammar.rules.values():
            assert abs(sum(p for _, p in rules) - 1.0) <= 1e-9
        for emissions in grammar.emissions.values():
            assert abs(sum(p for _, p in emissions) - 1.0) <= 1e-9


class TestCorpusSampling:
    """Rejection sampling of sentences."""

    def test_lengths_within_bounds(self, corpus):
        assert all(3 <= len(example.tokens) <= 12 for example in corpus)

    def test_gold_covers_tokens(self, corpus):
        for example in corpus:
            assert example.gold.words == example.words
            assert example.gold.root.span == (0, len(example.tokens))
            assert example.gold.is_binary()

    def test_deterministic(self, grammar, corpus):
        assert sample_corpus(grammar, 300, (3, 12), seed=5) == corpus

    def test_smaller_pool_is_prefix(self, grammar, corpus):
        assert sample_corpus(grammar, 50, (3, 12), seed=5) == corpus[:50]

    def test_infeasible_bounds(self):
        shallow = sample_grammar(GrammarConfig(max_depth=2))

        with pytest.raises(LengthBoundsInfeasible):
            sample_corpus(shallow, 2, (10, 20), seed=0)

    def test_pools(self, grammar):
        pools = sample_pools(grammar, CorpusConfig(labeled=5, unlabeled=20, test=10, max_length=10))

        assert [len(pools.unlabeled), len(pools.labeled), len(pools.test)] == [20, 5, 10]
        assert pools.unlabeled[0].id.startswith("u")
        assert pools.labeled[0].id.startswith("l")
        assert pools.test[0].id.startswith("t")


class TestCorruption:
    """Simulated teacher noise."""

    def test_zero_eta_unchanged(self, corpus):
        rng = np.random.default_rng(0)
        for example in corpus[:50]:
            assert corrupt(example.gold, 0.0, CorruptionMode.rotation, rng) == example.gold

    def test_replacement_two_tokens(self):
        tree = right_branching(make_tokens(["a", "b"]))
        rng = np.random.default_rng(0)

        assert corrupt(tree, 1.0, CorruptionMode.replacement, rng).structurally_equal(tree)

    def test_rotation_count(self):
        assert rotation_count(0.5, 10) == 4
        assert rotation_count(0.5, 5) == 2
        assert rotation_count(1.0, 2) == 0

    def test_validity_preserved(self, corpus):
        rng = np.random.default_rng(1)
        for mode in CorruptionMode:
            for eta in (0.2, 0.6, 1.0):
                for example in corpus[:40]:
                    noisy = corrupt(example.gold, eta, mode, rng)
                    assert noisy.words == example.words
                    assert noisy.is_binary()
                    assert noisy.root.span == (0, len(example.tokens))

    def test_degradation_monotone_in_eta(self, grammar):
        trees = [e.gold for e in sample_corpus(grammar, 500, (6, 12), seed=9)]
        means = []
        for eta in (0.0, 0.3, 0.9):
            rng = np.random.default_rng(2)
            noisy = [corrupt(tree, eta, CorruptionMode.rotation, rng) for tree in trees]
            means.append(corpus_f1(noisy, trees))

        assert means[0] == 1.0
        assert all(b <= a for a, b in zip(means, means[1:]))


class TestTeacherLabels:
    """Tiered teacher labeling."""

    def test_clean_teacher(self, corpus):
        labeled = make_teacher_labels(corpus, NoiseConfig.single(0.0))

        assert corpus_f1([e.teacher for e in labeled], [e.gold for e in labeled]) == 1.0

    def test_two_tiers(self, corpus):
        noise = NoiseConfig(tiers=(NoiseTier(0.5, 0.0), NoiseTier(0.5, 0.8)))
        tiers = corpus_tier_f1(make_teacher_labels(corpus, noise))

        assert tiers[0] == 1.0
        assert tiers[1] < 1.0

    def test_tier_frequencies(self, grammar):
        large = sample_corpus(grammar, 2000, (3, 8), seed=1)
        labeled = make_teacher_labels(large, NoiseConfig(tiers=(NoiseTier(0.3, 0.0), NoiseTier(0.7, 0.5))))
        count = sum(1 for e in labeled if e.noise_tier == 0)
        sigma = math.sqrt(2000 * 0.3 * 0.7)

        assert abs(count - 600) <= 3 * sigma

    def test_deterministic(self, corpus):
        noise = NoiseConfig()

        assert make_teacher_labels(corpus, noise) == make_teacher_labels(corpus, noise)

    def test_missing_gold(self):
        example = AnnotatedExample(id="x", tokens=make_tokens(["a", "b", "c"]))

        with pytest.raises(MissingGold):
            make_teacher_labels([example], NoiseConfig())

    def test_model_teacher(self, corpus):
        labeled = annotate_with_model(corpus[:10], StudentModel.zero())

        assert all(e.teacher == right_branching(e.tokens) for e in labeled)
        assert all(e.noise_tier is None for e in labeled)

    def test_token_mismatch(self):
        with pytest.raises(TokenMismatch):
            AnnotatedExample(
                id="x",
                tokens=make_tokens(["a", "b"]),
                gold=parse_bracketed("(S a b c)"),
            )


class TestJsonl:
    """JSONL ingestion of external teacher labels."""

    @classmethod
    def setup_class(cls):
        OUTPUT_DIR.mkdir(parents=True, exist_ok=True)

    @classmethod
    def teardown_class(cls):
        if OUTPUT_DIR.exists() and not KEEP_TEST_OUTPUTS:
            shutil.rmtree(OUTPUT_DIR)

    def test_header_and_records(self, corpus):
        labeled = make_teacher_labels(corpus[:20], NoiseConfig())
        path = OUTPUT_DIR / "corpus.jsonl"
        path.write_text(corpus_to_jsonl(labeled, {"data_hash": "abc"}), encoding="utf-8")

        loaded, header = ingest_jsonl(path)

        assert header == {"data_hash": "abc"}
        assert loaded == labeled

    def test_external_labels(self):
        path = OUTPUT_DIR / "external.jsonl"
        record = {"id": "q1", "tokens": ["a", "b", "c"], "gold": None, "teacher": "(S a (X b c))"}
        path.write_text(json.dumps(record) + "\n", encoding="utf-8")

        loaded, header = ingest_jsonl(path)

        assert header == {}
        assert loaded[0].id == "q1"
        assert loaded[0].gold is None
        assert unlabeled_f1(loaded[0].teacher, parse_bracketed("(S a (X b c))")) == 1.0

    def test_malformed_line_number(self):
        path = OUTPUT_DIR / "malformed.jsonl"
        good = {"id": "a", "tokens": ["x", "y"], "gold": None, "teacher": None}
        path.write_text(json.dumps(good) + "\n{broken\n", encoding="utf-8")

        with pytest.raises(MalformedRecord) as info:
            ingest_jsonl(path)
        assert info.value.line_number == 2

    def test_duplicate_id(self):
        path = OUTPUT_DIR / "duplicate.jsonl"
        first = {"id": "a", "tokens": ["x", "y"], "gold": None, "teacher": "(S x y)"}
        second = {"id": "a", "tokens": ["z", "w"], "gold": None, "teacher": "(S z w)"}
        path.write_text(json.dumps(first) + "\n" + json.dumps(second) + "\n", encoding="utf-8")

        with pytest.raises(MalformedRecord) as info:
            ingest_jsonl(path)
        assert info.value.line_number == 2
        assert "duplicate id" in str(info.value)

    def test_tree_token_disagreement(self):
        path = OUTPUT_DIR / "mismatch.jsonl"
        record = {"id": "a", "tokens": ["x", "y"], "gold": "(S x z)", "teacher": None}
        path.write_text(json.dumps(record) + "\n", encoding="utf-8")

        with pytest.raises(TokenMismatch):
            ingest_jsonl(path)
