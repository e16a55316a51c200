"""
Constituency trees, bracketed-format I/O and unlabeled span evaluation.

Trees are immutable. A tree is a sequence of tokens plus a root node; every
node covers a half-open token range ``[start, end)``. Leaves cover exactly one
token. A preterminal ``(TAG word)`` is a leaf whose label is the tag.

The unlabeled F1 defined here is the score function used everywhere else in
the package: to compare student predictions with teacher labels (convergence),
and to compare any tree with the gold tree.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence, Union

from .exceptions import (
    AlignmentMismatch,
    EmptyConstituent,
    EmptyCorpus,
    LengthMismatch,
    NoTokens,
    TreebankError,
    UnbalancedBrackets,
)

log = logging.getLogger(__name__)

PLACEHOLDER_LABEL = "X"

# Nested binary form: a leaf is its token index, an internal node a pair.
Nested = Union[int, tuple["Nested", "Nested"]]


@dataclass(frozen=True)
class Token:
    """A token of a pre-tokenized sentence."""

    index: int
    surface: str
    tag: Optional[str] = None


@dataclass(frozen=True)
class Node:
    """A constituent over tokens ``[start, end)``."""

    start: int
    end: int
    label: Optional[str] = None
    children: tuple["Node", ...] = ()

    @property
    def is_leaf(self) -> bool:
        return not self.children

    @property
    def span(self) -> tuple[int, int]:
        return (self.start, self.end)

    def iter_nodes(self) -> Iterator["Node"]:
        """Yield this node and all descendants in pre-order."""
        yield self
        for child in self.children:
            yield from child.iter_nodes()


@dataclass(frozen=True)
class ConstituencyTree:
    """A parse of a token sequence."""

    tokens: tuple[Token, ...]
    root: Node

    @property
    def n(self) -> int:
        return len(self.tokens)

    @property
    def words(self) -> tuple[str, ...]:
        return tuple(token.surface for token in self.tokens)

    def nodes(self) -> Iterator[Node]:
        return self.root.iter_nodes()

    def spans(self) -> set[tuple[int, int]]:
        """All node spans, leaves included, labels discarded."""
        return {node.span for node in self.nodes()}

    def is_binary(self) -> bool:
        return all(node.is_leaf or len(node.children) == 2 for node in self.nodes())

    def structurally_equal(self, other: "ConstituencyTree") -> bool:
        """Same words and same bracketing; labels are ignored."""
        return self.words == other.words and _shape(self.root) == _shape(other.root)

    def __str__(self) -> str:
        return serialize_bracketed(self)


@dataclass(frozen=True)
class SpanPolicy:
    """Which spans count for evaluation. Width-1 spans never count."""

    include_root: bool = False


DEFAULT_SPAN_POLICY = SpanPolicy()


@dataclass(frozen=True)
class SpanSet:
    """Unlabeled spans of a tree over ``n`` tokens."""

    spans: frozenset[tuple[int, int]]
    n: int

    def __len__(self) -> int:
        return len(self.spans)

    def __iter__(self):
        return iter(sorted(self.spans))

    def __contains__(self, span) -> bool:
        return span in self.spans


def _shape(node: Node):
    return (node.start, node.end, tuple(_shape(child) for child in node.children))


def make_tokens(
    words: Sequence[str], tags: Optional[Sequence[Optional[str]]] = None
) -> tuple[Token, ...]:
    """Build a token tuple from surface strings and optional tags."""
    if tags is None:
        tags = [None] * len(words)
    return tuple(
        Token(index=i, surface=word, tag=tag)
        for i, (word, tag) in enumerate(zip(words, tags))
    )


# ---------------------------------------------------------------------------
# Bracketed format


def _lex(text: str) -> list[tuple[str, int]]:
    """Split into ``(``, ``)`` and atoms, keeping character offsets."""
    lexemes = []
    i = 0
    length = len(text)
    while i < length:
        ch = text[i]
        if ch.isspace():
            i += 1
        elif ch in "()":
            lexemes.append((ch, i))
            i += 1
        else:
            j = i
            while j < length and not text[j].isspace() and text[j] not in "()":
                j += 1
            lexemes.append((text[i:j], i))
            i = j
    return lexemes


def _byte_offset(text: str, char_offset: int) -> int:
    return len(text[:char_offset].encode("utf-8"))


class _BracketReader:
    def __init__(self, text: str):
        self.text = text
        self.lexemes = _lex(text)
        self.pos = 0
        self.words: list[str] = []
        self.tags: list[Optional[str]] = []

    def offset(self, char_offset: int) -> int:
        return _byte_offset(self.text, char_offset)

    def check_balance(self) -> None:
        depth = 0
        opened: list[int] = []
        for value, at in self.lexemes:
            if value == "(":
                depth += 1
                opened.append(at)
            elif value == ")":
                depth -= 1
                if depth < 0:
                    raise UnbalancedBrackets("Unmatched ')'", self.offset(at))
                opened.pop()
        if depth != 0:
            raise UnbalancedBrackets("Unclosed '('", self.offset(opened[-1]))

    def read(self) -> ConstituencyTree:
        if not any(value not in "()" for value, _ in self.lexemes):
            raise NoTokens("No tokens in tree", self.offset(len(self.text)))
        self.check_balance()
        value, at = self.lexemes[0]
        if value != "(":
            raise UnbalancedBrackets("Expected '(' at start of tree", self.offset(at))
        root = self.read_node()
        if self.pos != len(self.lexemes):
            _, at = self.lexemes[self.pos]
            raise UnbalancedBrackets("Unexpected content after root", self.offset(at))
        if not self.words:
            raise NoTokens("No tokens in tree", self.offset(0))
        return ConstituencyTree(tokens=make_tokens(self.words, self.tags), root=root)

    def read_node(self) -> Node:
        _, open_at = self.lexemes[self.pos]
        self.pos += 1
        label = None
        value, _ = self.lexemes[self.pos]
        if value not in "()":
            label = value
            self.pos += 1

        items: list[Node] = []
        bare: list[bool] = []
        while True:
            value, at = self.lexemes[self.pos]
            if value == ")":
                self.pos += 1
                break
            if value == "(":
                items.append(self.read_node())
                bare.append(False)
            else:
                items.append(self.leaf(value))
                bare.append(True)
                self.pos += 1

        if not items:
            raise EmptyConstituent("Constituent has no children", self.offset(open_at))

        # (TAG word) is a preterminal
        if bare == [True]:
            leaf = items[0]
            self.tags[leaf.start] = label
            return Node(leaf.start, leaf.end, label)

        return Node(items[0].start, items[-1].end, label, tuple(items))

    def leaf(self, word: str) -> Node:
        index = len(self.words)
        self.words.append(word)
        self.tags.append(None)
        return Node(index, index + 1, None)


def parse_bracketed(text: str) -> ConstituencyTree:
    """
    Parse a PTB-style bracketed tree.

    Args:
        text: Whitespace-separated, parenthesis-delimited tree. A label may
            follow ``(``; ``(TAG word)`` marks a preterminal.

    Returns:
        The parsed tree

    Raises:
        UnbalancedBrackets: If parentheses do not balance
        EmptyConstituent: If a constituent has no children
        NoTokens: If the string holds no tokens
    """
    return _BracketReader(text).read()


def serialize_bracketed(tree: ConstituencyTree) -> str:
    """
    Serialize a tree to one bracketed line.

    Unlabeled internal nodes are written with the placeholder label ``X``.
    Token surfaces are written verbatim, so they must not contain whitespace
    or parentheses.
    """
    words = tree.words

    def write(node: Node) -> str:
        if node.is_leaf:
            word = words[node.start]
            return f"({node.label} {word})" if node.label else word
        inner = " ".join(write(child) for child in node.children)
        return f"({node.label or PLACEHOLDER_LABEL} {inner})"

    if tree.root.is_leaf and not tree.root.label:
        return f"({PLACEHOLDER_LABEL} {words[0]})"
    return write(tree.root)


def read_treebank(path: Union[str, Path]) -> list[ConstituencyTree]:
    """Read a one-tree-per-line UTF-8 treebank file. Blank lines are skipped."""
    path = Path(path)
    trees = []
    with path.open("r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                trees.append(parse_bracketed(line))
            except TreebankError:
                log.error("Could not parse tree at %s:%d", path, line_number)
                raise
    log.debug("Read %d trees from %s", len(trees), path)
    return trees


def write_treebank(trees: Sequence[ConstituencyTree], path: Union[str, Path]) -> Path:
    """Write trees one per line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        for tree in trees:
            f.write(serialize_bracketed(tree) + "\n")
    return path


# ---------------------------------------------------------------------------
# Structure


def _collapse_unary(node: Node) -> Node:
    while len(node.children) == 1:
        child = node.children[0]
        if child.is_leaf:
            return child
        node = Node(node.start, node.end, node.label or child.label, child.children)
    return node


def _right_fold(children: list[Node], label: Optional[str]) -> Node:
    if len(children) == 2:
        return Node(children[0].start, children[1].end, label, tuple(children))
    rest = _right_fold(children[1:], PLACEHOLDER_LABEL)
    return Node(children[0].start, rest.end, label, (children[0], rest))


def _binarize_node(node: Node) -> Node:
    node = _collapse_unary(node)
    if node.is_leaf:
        return node
    children = [_binarize_node(child) for child in node.children]
    return _right_fold(children, node.label)


def binarize(tree: ConstituencyTree) -> ConstituencyTree:
    """
    Right-binarize a tree.

    Unary chains collapse onto their outermost label (a chain ending in a
    preterminal collapses onto the preterminal). A k-ary node over children
    c1..ck becomes ``(c1 (c2 (... ck)))``, the introduced nodes labeled
    ``X``. The span set of the result is a superset of the input's.
    """
    if tree.is_binary():
        return tree
    return ConstituencyTree(tokens=tree.tokens, root=_binarize_node(tree.root))


def to_nested(tree: ConstituencyTree) -> Nested:
    """Convert a binary tree to nested pairs of token indices."""

    def walk(node: Node) -> Nested:
        if node.is_leaf:
            return node.start
        if len(node.children) != 2:
            raise TreebankError("Tree is not binary; binarize it first")
        return (walk(node.children[0]), walk(node.children[1]))

    return walk(tree.root)


def from_nested(
    tokens: Sequence[Token], nested: Nested, label: str = PLACEHOLDER_LABEL
) -> ConstituencyTree:
    """Build a binary tree from nested pairs; leaves keep their token tags."""
    tokens = tuple(tokens)

    def build(item: Nested) -> Node:
        if isinstance(item, int):
            return Node(item, item + 1, tokens[item].tag)
        left = build(item[0])
        right = build(item[1])
        if left.end != right.start:
            raise TreebankError(f"Children {left.span} and {right.span} not adjacent")
        return Node(left.start, right.end, label, (left, right))

    root = build(nested)
    if root.span != (0, len(tokens)):
        raise TreebankError(f"Root span {root.span} does not cover {len(tokens)} tokens")
    return ConstituencyTree(tokens=tokens, root=root)


def right_branching(tokens: Sequence[Token]) -> ConstituencyTree:
    """The right-branching tree ``(w1 (w2 (... wn)))``."""
    n = len(tokens)
    if n == 0:
        raise TreebankError("Cannot build a tree over zero tokens")
    nested: Nested = n - 1
    for i in range(n - 2, -1, -1):
        nested = (i, nested)
    return from_nested(tokens, nested)


def left_branching(tokens: Sequence[Token]) -> ConstituencyTree:
    """The left-branching tree ``(((w1 w2) ...) wn)``."""
    n = len(tokens)
    if n == 0:
        raise TreebankError("Cannot build a tree over zero tokens")
    nested: Nested = 0
    for i in range(1, n):
        nested = (nested, i)
    return from_nested(tokens, nested)


# ---------------------------------------------------------------------------
# Evaluation


def eval_spans(
    tree: ConstituencyTree, policy: SpanPolicy = DEFAULT_SPAN_POLICY
) -> SpanSet:
    """
    Spans scored by unlabeled evaluation.

    Width-1 spans are never included; the whole-sentence span is included
    only when ``policy.include_root`` is set.
    """
    n = tree.n
    spans = frozenset(
        (start, end)
        for start, end in tree.spans()
        if end - start >= 2 and (policy.include_root or (start, end) != (0, n))
    )
    return SpanSet(spans=spans, n=n)


def span_prf(
    pred: ConstituencyTree,
    ref: ConstituencyTree,
    policy: SpanPolicy = DEFAULT_SPAN_POLICY,
) -> tuple[float, float, float]:
    """
    Unlabeled precision, recall and F1 of one sentence.

    Both span sets empty scores 1.0 everywhere; exactly one empty scores 0.0.

    Raises:
        LengthMismatch: If the trees cover different numbers of tokens
    """
    if pred.n != ref.n:
        raise LengthMismatch(f"Prediction has {pred.n} tokens, reference {ref.n}")
    predicted = eval_spans(pred, policy).spans
    reference = eval_spans(ref, policy).spans
    if not predicted and not reference:
        return 1.0, 1.0, 1.0
    if not predicted or not reference:
        return 0.0, 0.0, 0.0
    matched = len(predicted & reference)
    if matched == 0:
        return 0.0, 0.0, 0.0
    precision = matched / len(predicted)
    recall = matched / len(reference)
    return precision, recall, 2 * precision * recall / (precision + recall)


def unlabeled_f1(
    pred: ConstituencyTree,
    ref: ConstituencyTree,
    policy: SpanPolicy = DEFAULT_SPAN_POLICY,
) -> float:
    """Sentence-level unlabeled F1 in [0, 1]."""
    return span_prf(pred, ref, policy)[2]


def corpus_f1(
    preds: Sequence[ConstituencyTree],
    refs: Sequence[ConstituencyTree],
    policy: SpanPolicy = DEFAULT_SPAN_POLICY,
) -> float:
    """
    Mean of per-sentence unlabeled F1.

    Raises:
        AlignmentMismatch: If the sequences differ in length
        EmptyCorpus: If there are no sentences
    """
    if len(preds) != len(refs):
        raise AlignmentMismatch(f"{len(preds)} predictions for {len(refs)} references")
    if not preds:
        raise EmptyCorpus("Cannot score an empty corpus")
    scores = [unlabeled_f1(pred, ref, policy) for pred, ref in zip(preds, refs)]
    return sum(scores) / len(scores)
