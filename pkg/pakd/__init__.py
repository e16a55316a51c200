"""
pakd - knowledge distillation from noisy teachers for constituency parsing.

A small lab: a synthetic treebank with a simulated noisy teacher, a
perceptron span parser as the student, the distillation pipelines (SLKD,
Selective KD, PA-KD and the self-distillation baselines) and the analyses
that relate student convergence to teacher label quality.
"""

from pakd.__version__ import __version__

from pakd.exceptions import (
    PAKDError,
    ValidationError,
    TreebankError,
    StudentError,
    TeacherSimError,
    DistillError,
    AnalysisError,
    PartitionEmptyLow,
)

from pakd.models import (
    CorruptionMode,
    PipelineKind,
    AnalysisKind,
    TeacherKind,
    GrammarConfig,
    CorpusConfig,
    NoiseConfig,
    TrainConfig,
    PipelineConfig,
    RunConfig,
)
from pakd.treebank import (
    Token,
    ConstituencyTree,
    parse_bracketed,
    serialize_bracketed,
    unlabeled_f1,
    corpus_f1,
)
from pakd.student import StudentModel, train, decode, decode_2best, confidence
from pakd.teachersim import (
    AnnotatedExample,
    sample_grammar,
    sample_corpus,
    make_teacher_labels,
    ingest_jsonl,
)
from pakd.distill import (
    partition_by_convergence,
    run_slkd,
    run_selective_kd,
    run_pa_kd,
    run_sd,
    run_sd_hc,
    run_sd_ha,
    run_supervised,
    run_pipeline,
)
from pakd.analysis import (
    delta,
    bucket_analysis,
    disparity_experiment,
    denoising_trace,
    size_sweep,
    sft_comparison,
)

__all__ = [
    "__version__",
    # Pipelines
    "partition_by_convergence",
    "run_slkd",
    "run_selective_kd",
    "run_pa_kd",
    "run_sd",
    "run_sd_hc",
    "run_sd_ha",
    "run_supervised",
    "run_pipeline",
    # Analyses
    "delta",
    "bucket_analysis",
    "disparity_experiment",
    "denoising_trace",
    "size_sweep",
    "sft_comparison",
    # Trees and corpora
    "Token",
    "ConstituencyTree",
    "parse_bracketed",
    "serialize_bracketed",
    "unlabeled_f1",
    "corpus_f1",
    "AnnotatedExample",
    "sample_grammar",
    "sample_corpus",
    "make_teacher_labels",
    "ingest_jsonl",
    # Student
    "StudentModel",
    "train",
    "decode",
    "decode_2best",
    "confidence",
    # Configuration
    "CorruptionMode",
    "PipelineKind",
    "AnalysisKind",
    "TeacherKind",
    "GrammarConfig",
    "CorpusConfig",
    "NoiseConfig",
    "TrainConfig",
    "PipelineConfig",
    "RunConfig",
    # Exceptions
    "PAKDError",
    "ValidationError",
    "TreebankError",
    "StudentError",
    "TeacherSimError",
    "DistillError",
    "AnalysisError",
    "PartitionEmptyLow",
]
