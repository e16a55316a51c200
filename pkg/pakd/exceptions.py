"""
Exception classes for pakd.

This module defines the exception hierarchy for error conditions that may occur
while reading treebanks, training students, simulating teachers and running
distillation pipelines.
"""

from typing import Optional


class PAKDError(Exception):
    """
    Base exception class for all pakd errors.

    ``stage`` is set when the error is raised inside a worker whose stage
    the CLI cannot see, such as one benchmark pipeline run.
    """

    stage: Optional[str] = None


class ValidationError(PAKDError):
    """
    Raised when input validation fails.

    This can occur when an invalid configuration document or invalid
    parameters are provided.
    """

    pass


class UnknownConfigKey(ValidationError):
    """Raised when a configuration document contains keys pakd does not know."""

    def __init__(self, section: str, keys):
        self.section = section
        self.keys = sorted(keys)
        super().__init__(f"Unknown key(s) in '{section}': {', '.join(self.keys)}")


class ConfigMismatch(ValidationError):
    """Raised when an input file was produced under a different configuration."""

    pass


class DegenerateConfig(ValidationError):
    """Raised when a grammar configuration cannot produce a usable grammar."""

    pass


class NonIntegerBeta(ValidationError):
    """Raised when the labeled-data replication factor is not a non-negative integer."""

    pass


class TreebankError(PAKDError):
    """Base class for tree and corpus errors."""

    pass


class BracketedFormatError(TreebankError):
    """
    Raised when a bracketed tree string cannot be parsed.

    The byte offset of the offending position is available as ``offset``.
    """

    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (byte offset {offset})")


class UnbalancedBrackets(BracketedFormatError):
    """Raised when parentheses do not balance."""

    pass


class EmptyConstituent(BracketedFormatError):
    """Raised for a constituent without children, e.g. ``()`` or ``(NP)``."""

    pass


class NoTokens(BracketedFormatError):
    """Raised when a tree string contains no tokens at all."""

    pass


class LengthMismatch(TreebankError):
    """Raised when two trees that must cover the same sentence differ in length."""

    pass


class AlignmentMismatch(TreebankError):
    """Raised when prediction and reference sequences differ in size."""

    pass


class EmptyCorpus(TreebankError):
    """Raised when an operation needs at least one example and gets none."""

    pass


class StudentError(PAKDError):
    """Base class for student model errors."""

    pass


class SpanOutOfRange(StudentError):
    """Raised when a span does not satisfy 0 <= start < end <= n."""

    pass


class EmptySentence(StudentError):
    """Raised when decoding a sentence without tokens."""

    pass


class EmptyTrainingSet(StudentError):
    """Raised when training is requested on no examples."""

    pass


class ModelFormatError(StudentError):
    """Raised when a model file cannot be loaded."""

    pass


class VersionMismatch(ModelFormatError):
    """Raised when a model file carries an unsupported format id."""

    pass


class CorruptModel(ModelFormatError):
    """Raised when a model file is truncated or structurally invalid."""

    pass


class TeacherSimError(PAKDError):
    """Base class for corpus generation and teacher label errors."""

    pass


class LengthBoundsInfeasible(TeacherSimError):
    """
    Raised when rejection sampling cannot meet the requested length bounds.

    This happens when the grammar rarely (or never) generates sentences within
    the configured bounds before the attempt cap is exhausted.
    """

    pass


class MissingGold(TeacherSimError):
    """Raised when an operation needs gold trees and an example has none."""

    pass


class MalformedRecord(TeacherSimError):
    """Raised when a JSONL record cannot be read. ``line_number`` is 1-based."""

    def __init__(self, line_number: int, message: str):
        self.line_number = line_number
        super().__init__(f"Line {line_number}: {message}")


class TokenMismatch(TeacherSimError):
    """Raised when a tree's leaves disagree with the record's token list."""

    pass


class DistillError(PAKDError):
    """Base class for distillation pipeline errors."""

    pass


class MissingTeacher(DistillError):
    """Raised when an example needed for distillation has no teacher label."""

    pass


class MissingPrediction(DistillError):
    """Raised when partitioning needs a student prediction that is absent."""

    pass


class AllFiltered(DistillError):
    """
    Raised when confidence filtering keeps no self-labels.

    This can occur when every confidence equals the corpus mean.
    """

    pass


class AnalysisError(PAKDError):
    """Base class for analysis errors."""

    pass


class MissingField(AnalysisError):
    """Raised when an example lacks a tree an analysis requires."""

    pass


class PartitionEmptyLow(UserWarning):
    """Emitted when PA-KD has no low-convergence labels left to re-annotate."""

    pass
