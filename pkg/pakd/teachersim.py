"""
Teacher-labeled corpora.

Sentences and their gold trees come from a seeded synthetic binary PCFG. A
simulated noisy teacher corrupts the gold trees with a tiered noise mixture;
alternatively any external teacher's labels can be ingested from JSONL, or a
trained model can annotate a corpus itself.
"""

import dataclasses
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, NamedTuple, Optional, Sequence, Union

import numpy as np

from .exceptions import (
    DegenerateConfig,
    LengthBoundsInfeasible,
    MalformedRecord,
    MissingGold,
    TokenMismatch,
    TreebankError,
    ValidationError,
)
from .models import CorpusConfig, CorruptionMode, GrammarConfig, NoiseConfig
from .student import StudentModel, decode
from .treebank import (
    ConstituencyTree,
    Nested,
    Node,
    Token,
    binarize,
    corpus_f1,
    from_nested,
    make_tokens,
    parse_bracketed,
    serialize_bracketed,
    to_nested,
)

log = logging.getLogger(__name__)

MAX_ATTEMPTS_PER_SENTENCE = 200


@dataclass(frozen=True)
class SyntheticGrammar:
    """
    A binary PCFG.

    Nonterminals ``N0..`` rewrite to pairs of nonterminals or preterminals;
    preterminals ``P0..`` emit words from their own slice of the vocabulary.
    ``N0`` is the start symbol.
    """

    nonterminals: tuple[str, ...]
    preterminals: tuple[str, ...]
    vocabulary: tuple[str, ...]
    rules: dict[str, tuple[tuple[tuple[str, str], float], ...]]
    emissions: dict[str, tuple[tuple[str, float], ...]]
    seed: int
    max_depth: int

    @property
    def start(self) -> str:
        return self.nonterminals[0]

    def is_preterminal(self, symbol: str) -> bool:
        return symbol in self.emissions


@dataclass(frozen=True)
class AnnotatedExample:
    """One sentence with its optional gold, teacher and student trees."""

    id: str
    tokens: tuple[Token, ...]
    gold: Optional[ConstituencyTree] = None
    teacher: Optional[ConstituencyTree] = None
    noise_tier: Optional[int] = None
    student: Optional[ConstituencyTree] = None

    def __post_init__(self):
        n = len(self.tokens)
        for name in ("gold", "teacher", "student"):
            tree = getattr(self, name)
            if tree is not None and tree.n != n:
                raise TokenMismatch(
                    f"Example {self.id}: {name} tree has {tree.n} tokens, sentence has {n}"
                )

    @property
    def words(self) -> tuple[str, ...]:
        return tuple(token.surface for token in self.tokens)

    def replace(self, **changes) -> "AnnotatedExample":
        return dataclasses.replace(self, **changes)


def _normalized(weights: np.ndarray) -> np.ndarray:
    return weights / weights.sum()


def sample_grammar(config: GrammarConfig = GrammarConfig()) -> SyntheticGrammar:
    """
    Sample a grammar deterministically from ``config.seed``.

    The first rule of every nonterminal rewrites to two preterminals, so every
    nonterminal can terminate. Rule and emission probabilities are Dirichlet
    draws.

    Raises:
        DegenerateConfig: For fewer than 2 nonterminals, fewer than 10
            terminals, or fewer terminals than preterminals
    """
    if config.n_nonterminals < 2:
        log.error("Grammar needs at least 2 nonterminals, got %d", config.n_nonterminals)
        raise DegenerateConfig("Grammar needs at least 2 nonterminals")
    if config.vocab_size < 10:
        log.error("Grammar needs at least 10 terminals, got %d", config.vocab_size)
        raise DegenerateConfig("Grammar needs at least 10 terminals")
    if config.n_preterminals < 1 or config.vocab_size < config.n_preterminals:
        raise DegenerateConfig("Need at least one preterminal and one word per preterminal")

    rng = np.random.default_rng(config.seed)
    nonterminals = tuple(f"N{i}" for i in range(config.n_nonterminals))
    preterminals = tuple(f"P{i}" for i in range(config.n_preterminals))
    vocabulary = tuple(f"w{i}" for i in range(config.vocab_size))

    def child() -> str:
        if rng.random() < config.preterminal_child_prob:
            return preterminals[int(rng.integers(len(preterminals)))]
        # the start symbol is never re-entered
        return nonterminals[1 + int(rng.integers(len(nonterminals) - 1))]

    rules = {}
    for lhs in nonterminals:
        rhs_set: list[tuple[str, str]] = []
        first = (
            preterminals[int(rng.integers(len(preterminals)))],
            preterminals[int(rng.integers(len(preterminals)))],
        )
        rhs_set.append(first)
        tries = 0
        while len(rhs_set) < config.rules_per_nonterminal and tries < 100 * config.rules_per_nonterminal:
            candidate = (child(), child())
            if candidate not in rhs_set:
                rhs_set.append(candidate)
            tries += 1
        probs = _normalized(rng.dirichlet([config.concentration] * len(rhs_set)))
        rules[lhs] = tuple((rhs, float(p)) for rhs, p in zip(rhs_set, probs))

    emissions = {}
    slices = np.array_split(np.arange(config.vocab_size), len(preterminals))
    for tag, word_ids in zip(preterminals, slices):
        probs = _normalized(rng.dirichlet([config.concentration] * len(word_ids)))
        emissions[tag] = tuple((vocabulary[w], float(p)) for w, p in zip(word_ids, probs))

    grammar = SyntheticGrammar(
        nonterminals=nonterminals,
        preterminals=preterminals,
        vocabulary=vocabulary,
        rules=rules,
        emissions=emissions,
        seed=config.seed,
        max_depth=config.max_depth,
    )
    log.info(
        "Sampled grammar: %d nonterminals, %d preterminals, %d words (seed %d)",
        len(nonterminals),
        len(preterminals),
        len(vocabulary),
        config.seed,
    )
    return grammar


class _TooLong(Exception):
    pass


def _generate(
    grammar: SyntheticGrammar, rng: np.random.Generator, max_length: int
) -> tuple[list[str], list[str], Node]:
    words: list[str] = []
    tags: list[str] = []

    def expand(symbol: str, depth: int) -> Node:
        if grammar.is_preterminal(symbol):
            if len(words) >= max_length:
                raise _TooLong()
            choices = grammar.emissions[symbol]
            pick = int(rng.choice(len(choices), p=[p for _, p in choices]))
            index = len(words)
            words.append(choices[pick][0])
            tags.append(symbol)
            return Node(index, index + 1, symbol)
        if depth >= grammar.max_depth:
            raise _TooLong()
        choices = grammar.rules[symbol]
        pick = int(rng.choice(len(choices), p=[p for _, p in choices]))
        left_symbol, right_symbol = choices[pick][0]
        left = expand(left_symbol, depth + 1)
        right = expand(right_symbol, depth + 1)
        return Node(left.start, right.end, symbol, (left, right))

    root = expand(grammar.start, 0)
    return words, tags, root


def sample_corpus(
    grammar: SyntheticGrammar,
    n_sentences: int,
    length_bounds: tuple[int, int],
    seed: int,
    id_prefix: str = "s",
) -> list[AnnotatedExample]:
    """
    Sample sentences with their generation trees as gold.

    Sentences outside ``length_bounds`` (inclusive) are rejected.

    Raises:
        LengthBoundsInfeasible: If the rejection cap is exhausted
    """
    if n_sentences < 1:
        raise ValidationError("n_sentences must be >= 1")
    min_length, max_length = length_bounds
    rng = np.random.default_rng(seed)
    cap = MAX_ATTEMPTS_PER_SENTENCE * n_sentences
    corpus: list[AnnotatedExample] = []
    attempts = 0
    width = max(6, len(str(n_sentences - 1)))
    while len(corpus) < n_sentences:
        attempts += 1
        if attempts > cap:
            log.error(
                "Sampled %d of %d sentences within %s after %d attempts",
                len(corpus),
                n_sentences,
                length_bounds,
                cap,
            )
            raise LengthBoundsInfeasible(
                f"Could not sample {n_sentences} sentences with length in "
                f"{length_bounds} within {cap} attempts"
            )
        try:
            words, tags, root = _generate(grammar, rng, max_length)
        except _TooLong:
            continue
        if len(words) < min_length:
            continue
        tokens = make_tokens(words, tags)
        gold = ConstituencyTree(tokens=tokens, root=root)
        corpus.append(
            AnnotatedExample(id=f"{id_prefix}{len(corpus):0{width}d}", tokens=tokens, gold=gold)
        )
    log.info(
        "Sampled %d sentences (%d attempts, lengths %d-%d)",
        n_sentences,
        attempts,
        min_length,
        max_length,
    )
    return corpus


class CorpusPools(NamedTuple):
    unlabeled: list[AnnotatedExample]
    labeled: list[AnnotatedExample]
    test: list[AnnotatedExample]


def sample_pools(grammar: SyntheticGrammar, config: CorpusConfig) -> CorpusPools:
    """
    Sample the unlabeled, withheld-labeled and test pools.

    The pools use seeds ``config.seed``, ``+1`` and ``+2``. Sampling is
    sequential, so a smaller pool is a prefix of a larger one.
    """
    bounds = config.length_bounds
    unlabeled = sample_corpus(grammar, config.unlabeled, bounds, config.seed, "u")
    labeled = (
        sample_corpus(grammar, config.labeled, bounds, config.seed + 1, "l")
        if config.labeled
        else []
    )
    test = sample_corpus(grammar, config.test, bounds, config.seed + 2, "t")
    return CorpusPools(unlabeled, labeled, test)


# ---------------------------------------------------------------------------
# Corruption


def _rotation_sites(nested: Nested, path: tuple = ()) -> list[tuple[tuple, str]]:
    """Every (node path, direction) at which a rotation applies."""
    if isinstance(nested, int):
        return []
    left, right = nested
    sites = []
    if not isinstance(left, int):
        sites.append((path, "right"))
    if not isinstance(right, int):
        sites.append((path, "left"))
    return sites + _rotation_sites(left, path + (0,)) + _rotation_sites(right, path + (1,))


def _rotate(nested: Nested, path: tuple, direction: str) -> Nested:
    if path:
        left, right = nested
        if path[0] == 0:
            return (_rotate(left, path[1:], direction), right)
        return (left, _rotate(right, path[1:], direction))
    left, right = nested
    if direction == "right":
        # ((a b) c) -> (a (b c))
        a, b = left
        return (a, (b, right))
    # (a (b c)) -> ((a b) c)
    b, c = right
    return ((left, b), c)


def _catalan(k: int) -> int:
    return math.comb(2 * k, k) // (k + 1)


def _random_binary(rng: np.random.Generator, i: int, j: int) -> Nested:
    """A uniformly random binary bracketing of tokens ``[i, j)``."""
    if j - i == 1:
        return i
    total = _catalan(j - i - 1)
    weights = [
        _catalan(k - i - 1) * _catalan(j - k - 1) / total for k in range(i + 1, j)
    ]
    k = i + 1 + int(rng.choice(len(weights), p=_normalized(np.array(weights))))
    return (_random_binary(rng, i, k), _random_binary(rng, k, j))


def rotation_count(eta: float, n: int) -> int:
    """``round(eta * max(0, n - 2))`` with halves rounded up."""
    return int(math.floor(eta * max(0, n - 2) + 0.5))


def corrupt(
    tree: ConstituencyTree,
    eta: float,
    mode: CorruptionMode,
    rng: np.random.Generator,
) -> ConstituencyTree:
    """
    Corrupt a binary tree.

    Rotation mode applies ``rotation_count(eta, n)`` single rotations, each at
    a uniformly chosen (node, direction) site. Replacement mode replaces the
    whole tree by a uniformly random binary tree with probability ``eta``.
    The result is a binary tree over the same tokens.
    """
    if not 0.0 <= eta <= 1.0:
        raise ValidationError(f"eta must be in [0, 1], got {eta}")
    tree = binarize(tree)
    mode = CorruptionMode(mode)
    nested = to_nested(tree)

    if mode is CorruptionMode.rotation:
        count = rotation_count(eta, tree.n)
        if count == 0:
            return tree
        for _ in range(count):
            sites = _rotation_sites(nested)
            if not sites:
                break
            path, direction = sites[int(rng.integers(len(sites)))]
            nested = _rotate(nested, path, direction)
    else:
        if eta == 0.0 or rng.random() >= eta:
            return tree
        nested = _random_binary(rng, 0, tree.n)

    return from_nested(tree.tokens, nested)


def make_teacher_labels(
    corpus: Sequence[AnnotatedExample], noise: NoiseConfig
) -> list[AnnotatedExample]:
    """
    Fill teacher labels by corrupting gold trees with a tiered noise mixture.

    Each example draws a tier by weight and is corrupted with that tier's eta;
    the tier index is recorded.

    Raises:
        MissingGold: If an example has no gold tree
    """
    rng = np.random.default_rng(noise.seed)
    weights = _normalized(np.array([tier.weight for tier in noise.tiers], dtype=float))
    labeled = []
    for example in corpus:
        if example.gold is None:
            log.error("Example %s has no gold tree", example.id)
            raise MissingGold(f"Example {example.id} has no gold tree to corrupt")
        tier = int(rng.choice(len(weights), p=weights))
        teacher = corrupt(example.gold, noise.tiers[tier].eta, noise.mode, rng)
        labeled.append(example.replace(teacher=teacher, noise_tier=tier))
    log.info("Teacher-labeled %d examples with %d noise tier(s)", len(labeled), len(weights))
    return labeled


def annotate_with_model(
    corpus: Sequence[AnnotatedExample], model: StudentModel
) -> list[AnnotatedExample]:
    """Use a trained model as the teacher: its decodes become the teacher labels."""
    annotated = [
        example.replace(teacher=decode(model, example.tokens), noise_tier=None)
        for example in corpus
    ]
    log.info("Annotated %d examples with a model teacher", len(annotated))
    return annotated


def corpus_tier_f1(corpus: Sequence[AnnotatedExample]) -> dict[int, float]:
    """Gold F1 of the teacher labels per noise tier."""
    tiers: dict[int, list[AnnotatedExample]] = {}
    for example in corpus:
        if example.noise_tier is not None and example.gold and example.teacher:
            tiers.setdefault(example.noise_tier, []).append(example)
    return {
        tier: corpus_f1([e.teacher for e in members], [e.gold for e in members])
        for tier, members in sorted(tiers.items())
    }


# ---------------------------------------------------------------------------
# JSONL


def example_to_record(example: AnnotatedExample) -> dict[str, Any]:
    record: dict[str, Any] = {
        "id": example.id,
        "tokens": list(example.words),
        "gold": serialize_bracketed(example.gold) if example.gold else None,
        "teacher": serialize_bracketed(example.teacher) if example.teacher else None,
    }
    if example.noise_tier is not None:
        record["noise_tier"] = example.noise_tier
    if example.student is not None:
        record["student"] = serialize_bracketed(example.student)
    return record


def _read_tree(
    record: dict[str, Any], name: str, words: list[str], line_number: int
) -> Optional[ConstituencyTree]:
    text = record.get(name)
    if text is None:
        return None
    if not isinstance(text, str):
        raise MalformedRecord(line_number, f"'{name}' must be a bracketed string or null")
    try:
        tree = parse_bracketed(text)
    except TreebankError as ex:
        raise MalformedRecord(line_number, f"'{name}' does not parse: {ex}") from ex
    if list(tree.words) != words:
        log.error("Line %d: %s leaves disagree with tokens", line_number, name)
        raise TokenMismatch(f"Line {line_number}: '{name}' leaves {list(tree.words)} != tokens {words}")
    return tree


def record_to_example(record: Any, line_number: int) -> AnnotatedExample:
    """Build an example from one decoded JSONL record."""
    if not isinstance(record, dict):
        raise MalformedRecord(line_number, "record is not an object")
    if not isinstance(record.get("id"), str):
        raise MalformedRecord(line_number, "'id' must be a string")
    words = record.get("tokens")
    if not isinstance(words, list) or not words or not all(
        isinstance(w, str) and w for w in words
    ):
        raise MalformedRecord(line_number, "'tokens' must be a non-empty list of strings")

    gold = _read_tree(record, "gold", words, line_number)
    teacher = _read_tree(record, "teacher", words, line_number)
    student = _read_tree(record, "student", words, line_number)
    # gold tags, when present, annotate the tokens
    tokens = gold.tokens if gold is not None else make_tokens(words)
    tier = record.get("noise_tier")
    if tier is not None and not isinstance(tier, int):
        raise MalformedRecord(line_number, "'noise_tier' must be an integer")
    return AnnotatedExample(
        id=record["id"],
        tokens=tokens,
        gold=gold,
        teacher=teacher,
        noise_tier=tier,
        student=student,
    )


def ingest_jsonl(
    path: Union[str, Path],
) -> tuple[list[AnnotatedExample], dict[str, Any]]:
    """
    Read a JSONL corpus.

    Records follow ``{"id", "tokens", "gold", "teacher"}`` with optional
    ``noise_tier`` and ``student``. A leading ``{"header": {...}}`` record is
    returned as provenance.

    Returns:
        The examples in file order and the header (empty if absent)

    Raises:
        MalformedRecord: If a line is not a valid record or repeats an id
        TokenMismatch: If a tree disagrees with its record's tokens
    """
    path = Path(path)
    corpus: list[AnnotatedExample] = []
    header: dict[str, Any] = {}
    seen: set[str] = set()
    with path.open("r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as ex:
                log.error("Line %d of %s is not JSON", line_number, path)
                raise MalformedRecord(line_number, f"invalid JSON: {ex}") from ex
            if isinstance(record, dict) and "header" in record:
                if corpus:
                    raise MalformedRecord(line_number, "header must precede records")
                header = dict(record["header"])
                continue
            example = record_to_example(record, line_number)
            if example.id in seen:
                log.error("Line %d of %s repeats id %s", line_number, path, example.id)
                raise MalformedRecord(line_number, f"duplicate id '{example.id}'")
            seen.add(example.id)
            corpus.append(example)
    log.info("Ingested %d examples from %s", len(corpus), path)
    return corpus, header


def corpus_to_jsonl(
    corpus: Sequence[AnnotatedExample], header: Optional[dict[str, Any]] = None
) -> str:
    """Render a corpus in the JSONL ingestion format."""
    lines = []
    if header is not None:
        lines.append(json.dumps({"header": header}, sort_keys=True))
    lines.extend(json.dumps(example_to_record(e), sort_keys=True) for e in corpus)
    return "\n".join(lines) + "\n"
