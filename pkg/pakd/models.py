import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Optional, Union

import yaml

from .exceptions import NonIntegerBeta, UnknownConfigKey, ValidationError

log = logging.getLogger(__name__)


class CorruptionMode(Enum):
    """How the simulated teacher corrupts gold trees."""

    rotation = "rotation"  # local re-bracketings, structured noise
    replacement = "random-replacement"  # whole tree replaced, adversarial control


class PipelineKind(Enum):
    """Training pipelines."""

    slkd = "slkd"
    selective = "selective"
    pa_kd = "pa-kd"
    sd = "sd"
    sd_hc = "sd-hc"
    sd_ha = "sd-ha"
    supervised = "supervised"


class AnalysisKind(Enum):
    """Analyses exposed by ``pakd analyze``."""

    buckets = "buckets"
    delta = "delta"
    disparity = "disparity"
    denoising = "denoising"
    size_sweep = "size-sweep"
    sft_sweep = "sft-sweep"


class TeacherKind(Enum):
    """Where teacher labels come from."""

    simulated = "simulated"
    supervised = "supervised"


class OutputFormat(Enum):
    csv = "csv"
    json = "json"
    svg = "svg"


def _enum(enum_cls, value, name: str):
    if isinstance(value, enum_cls):
        return value
    try:
        return enum_cls(value)
    except ValueError:
        valid = [member.value for member in enum_cls]
        log.error("Invalid %s: %s", name, value)
        raise ValidationError(f"{name} must be one of {valid}, got {value!r}")


def _require(condition: bool, message: str) -> None:
    if not condition:
        log.error(message)
        raise ValidationError(message)


def _check_keys(cls, data: dict[str, Any], section: str) -> None:
    if not isinstance(data, dict):
        log.error("Section '%s' must be a mapping", section)
        raise ValidationError(f"Section '{section}' must be a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        log.error("Unknown keys in '%s': %s", section, sorted(unknown))
        raise UnknownConfigKey(section, unknown)


def _jsonable(value: Any) -> Any:
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, Path):
        return str(value)
    if dataclasses.is_dataclass(value):
        return {f.name: _jsonable(getattr(value, f.name)) for f in dataclasses.fields(value)}
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def stable_hash(value: Any, length: int = 12) -> str:
    """SHA-256 over canonical JSON, truncated."""
    blob = json.dumps(_jsonable(value), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:length]


@dataclass(frozen=True)
class GrammarConfig:
    """Parameters of the synthetic binary PCFG standing in for a treebank."""

    n_nonterminals: int = 6
    n_preterminals: int = 8
    vocab_size: int = 240
    rules_per_nonterminal: int = 4
    preterminal_child_prob: float = 0.6
    concentration: float = 0.6
    max_depth: int = 14
    seed: int = 7

    def __post_init__(self):
        _require(self.rules_per_nonterminal >= 1, "rules_per_nonterminal must be >= 1")
        _require(
            0.0 < self.preterminal_child_prob <= 1.0,
            "preterminal_child_prob must be in (0, 1]",
        )
        _require(self.concentration > 0, "concentration must be positive")
        _require(self.max_depth >= 2, "max_depth must be >= 2")

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "GrammarConfig":
        _check_keys(cls, data, "grammar")
        return cls(**data)


@dataclass(frozen=True)
class CorpusConfig:
    """Sizes and sentence lengths of the generated pools."""

    labeled: int = 250
    unlabeled: int = 5000
    test: int = 1000
    min_length: int = 3
    max_length: int = 14
    seed: int = 11

    def __post_init__(self):
        _require(self.labeled >= 0, "labeled pool size must be >= 0")
        _require(self.unlabeled >= 1, "unlabeled pool size must be >= 1")
        _require(self.test >= 1, "test size must be >= 1")
        _require(
            1 <= self.min_length <= self.max_length,
            "length bounds must satisfy 1 <= min_length <= max_length",
        )

    @property
    def length_bounds(self) -> tuple[int, int]:
        return (self.min_length, self.max_length)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "CorpusConfig":
        _check_keys(cls, data, "corpus")
        return cls(**data)


@dataclass(frozen=True)
class NoiseTier:
    """One component of the teacher noise mixture."""

    weight: float
    eta: float


@dataclass(frozen=True)
class NoiseConfig:
    """
    Tiered corruption applied by the simulated teacher.

    Each example draws a tier by weight and its teacher tree is the gold tree
    corrupted with that tier's intensity ``eta``.
    """

    tiers: tuple[NoiseTier, ...] = (NoiseTier(0.5, 0.0), NoiseTier(0.5, 0.6))
    mode: CorruptionMode = CorruptionMode.rotation
    seed: int = 13

    def __post_init__(self):
        object.__setattr__(self, "mode", _enum(CorruptionMode, self.mode, "noise mode"))
        tiers = tuple(
            tier if isinstance(tier, NoiseTier) else NoiseTier(**tier) for tier in self.tiers
        )
        object.__setattr__(self, "tiers", tiers)
        _require(len(tiers) >= 1, "noise needs at least one tier")
        for tier in tiers:
            _require(0.0 <= tier.eta <= 1.0, f"tier eta must be in [0, 1], got {tier.eta}")
            _require(tier.weight >= 0.0, f"tier weight must be >= 0, got {tier.weight}")
        total = sum(tier.weight for tier in tiers)
        _require(abs(total - 1.0) <= 1e-9, f"tier weights must sum to 1, got {total}")

    @classmethod
    def single(cls, eta: float, mode=CorruptionMode.rotation, seed: int = 13) -> "NoiseConfig":
        """A one-tier mixture."""
        return cls(tiers=(NoiseTier(1.0, eta),), mode=mode, seed=seed)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "NoiseConfig":
        _check_keys(cls, data, "noise")
        data = dict(data)
        if "tiers" in data:
            tiers = []
            for i, tier in enumerate(data["tiers"]):
                _check_keys(NoiseTier, tier, f"noise.tiers[{i}]")
                tiers.append(NoiseTier(**tier))
            data["tiers"] = tuple(tiers)
        return cls(**data)


@dataclass(frozen=True)
class TeacherConfig:
    """Teacher label source for ``pakd annotate``."""

    kind: TeacherKind = TeacherKind.simulated
    supervised_epochs: int = 15

    def __post_init__(self):
        object.__setattr__(self, "kind", _enum(TeacherKind, self.kind, "teacher kind"))
        _require(self.supervised_epochs >= 0, "supervised_epochs must be >= 0")

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "TeacherConfig":
        _check_keys(cls, data, "teacher")
        return cls(**data)


def _check_beta(beta: Any) -> int:
    if isinstance(beta, bool) or not isinstance(beta, (int, float)):
        raise NonIntegerBeta(f"beta must be a non-negative integer, got {beta!r}")
    if beta < 0 or int(beta) != beta:
        raise NonIntegerBeta(f"beta must be a non-negative integer, got {beta!r}")
    return int(beta)


@dataclass(frozen=True)
class TrainConfig:
    """Settings of one student training run."""

    epochs: int = 20
    seed: int = 0
    beta: int = 0
    shuffle: bool = True
    trace: bool = True

    def __post_init__(self):
        _require(self.epochs >= 0, "epochs must be >= 0")
        _require(self.seed >= 0, "seed must be >= 0")
        object.__setattr__(self, "beta", _check_beta(self.beta))


@dataclass(frozen=True)
class PipelineConfig:
    """
    Settings of a distillation pipeline.

    Epoch defaults: the convergence student S0 trains 2 epochs, peer and final
    students 20, and the SD label generator 4.

    With ``trace`` every stage records the per-example F1 of its epoch-end
    predictions against the training labels.
    """

    kind: PipelineKind = PipelineKind.pa_kd
    s0_epochs: int = 2
    peer_epochs: int = 20
    final_epochs: int = 20
    sd_label_epochs: int = 4
    r_percent: float = 50.0
    seed: int = 0
    beta: int = 0
    confidence_rule: str = "above-mean"
    trace: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", _enum(PipelineKind, self.kind, "pipeline"))
        for name in ("s0_epochs", "peer_epochs", "final_epochs", "sd_label_epochs"):
            _require(getattr(self, name) >= 0, f"{name} must be >= 0")
        _require(0 < self.r_percent <= 100, f"r_percent must be in (0, 100], got {self.r_percent}")
        _require(self.seed >= 0, "seed must be >= 0")
        _require(
            self.confidence_rule == "above-mean",
            "confidence_rule must be 'above-mean'",
        )
        object.__setattr__(self, "beta", _check_beta(self.beta))

    def train_config(self, epochs: int) -> TrainConfig:
        return TrainConfig(epochs=epochs, seed=self.seed, beta=self.beta, trace=self.trace)

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "PipelineConfig":
        _check_keys(cls, data, "pipeline")
        return cls(**data)


@dataclass(frozen=True)
class AnalysisConfig:
    """Analysis selections and their parameters."""

    selections: tuple[AnalysisKind, ...] = (AnalysisKind.buckets,)
    n_buckets: int = 20
    disparity_epochs: int = 10
    denoising_epochs: int = 10
    sweep_sizes: tuple[int, ...] = (250, 500, 1000, 2000, 4000)
    sweep_epochs: int = 10
    sft_sizes: tuple[int, ...] = (50, 100, 250, 500, 750)
    pakd_labeled: int = 50
    smoothing_window: int = 3

    def __post_init__(self):
        object.__setattr__(
            self,
            "selections",
            tuple(_enum(AnalysisKind, s, "analysis") for s in self.selections),
        )
        object.__setattr__(self, "sweep_sizes", tuple(self.sweep_sizes))
        object.__setattr__(self, "sft_sizes", tuple(self.sft_sizes))
        _require(self.n_buckets >= 1, "n_buckets must be >= 1")
        _require(self.smoothing_window >= 1, "smoothing_window must be >= 1")

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "AnalysisConfig":
        _check_keys(cls, data, "analysis")
        return cls(**data)


@dataclass(frozen=True)
class BenchConfig:
    """Pipelines and seeds compared by ``pakd bench``."""

    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    pipelines: tuple[PipelineKind, ...] = (
        PipelineKind.supervised,
        PipelineKind.slkd,
        PipelineKind.sd,
        PipelineKind.sd_hc,
        PipelineKind.sd_ha,
        PipelineKind.selective,
        PipelineKind.pa_kd,
    )

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(self.seeds))
        object.__setattr__(
            self,
            "pipelines",
            tuple(_enum(PipelineKind, p, "pipeline") for p in self.pipelines),
        )
        _require(len(self.seeds) >= 1, "bench needs at least one seed")

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "BenchConfig":
        _check_keys(cls, data, "bench")
        return cls(**data)


_SECTIONS = {
    "grammar": GrammarConfig,
    "corpus": CorpusConfig,
    "noise": NoiseConfig,
    "teacher": TeacherConfig,
    "pipeline": PipelineConfig,
    "analysis": AnalysisConfig,
    "bench": BenchConfig,
}


@dataclass(frozen=True)
class RunConfig:
    """
    Declarative experiment document.

    The defaults are the standard benchmark: grammar seed 7, a 5000-sentence
    unlabeled pool, 250 withheld gold examples, two noise tiers (weights
    0.5/0.5, eta 0.0/0.6, rotation) and a 1000-sentence test split.
    """

    grammar: GrammarConfig = field(default_factory=GrammarConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    output_directory: Path = Path("pakd_output")
    seed: int = 0
    formats: tuple[OutputFormat, ...] = (OutputFormat.csv, OutputFormat.json)

    def __post_init__(self):
        object.__setattr__(self, "output_directory", Path(self.output_directory))
        object.__setattr__(
            self,
            "formats",
            tuple(_enum(OutputFormat, f, "format") for f in self.formats),
        )
        _require(self.seed >= 0, "seed must be >= 0")

    @classmethod
    def default(cls) -> "RunConfig":
        """The standard benchmark preset."""
        return cls()

    @classmethod
    def from_dict(cls, data: Optional[dict[str, Any]]) -> "RunConfig":
        """
        Build a RunConfig from a parsed document.

        Raises:
            UnknownConfigKey: If any section holds keys pakd does not know
            ValidationError: If a value is invalid
        """
        data = dict(data or {})
        _check_keys(cls, data, "config")
        pipeline = dict(data.get("pipeline") or {})
        # a top-level seed drives training unless the pipeline sets its own
        if "seed" in data and "seed" not in pipeline:
            pipeline["seed"] = data["seed"]
            data["pipeline"] = pipeline
        params: dict[str, Any] = {}
        for name, section_cls in _SECTIONS.items():
            if name in data:
                params[name] = section_cls.from_dict(data.pop(name) or {})
        params.update(data)
        config = cls(**params)
        log.debug("Loaded config %s", config.config_hash())
        return config

    @classmethod
    def from_yaml(cls, path: Union[str, Path]) -> "RunConfig":
        """Load a YAML configuration document."""
        path = Path(path)
        try:
            with path.open("r", encoding="utf-8") as f:
                document = yaml.safe_load(f)
        except (OSError, yaml.YAMLError) as ex:
            log.error("Could not read config %s: %s", path, ex)
            raise ValidationError(f"Could not read config {path}: {ex}") from ex
        return cls.from_dict(document)

    def with_overrides(
        self,
        seed: Optional[int] = None,
        output_directory: Optional[Path] = None,
        pipeline: Optional[str] = None,
        r_percent: Optional[float] = None,
        epochs: Optional[int] = None,
        formats: Optional[list[str]] = None,
        teacher: Optional[str] = None,
    ) -> "RunConfig":
        """Apply command-line overrides; flags win over the document."""
        config = self
        pipeline_changes: dict[str, Any] = {}
        if seed is not None:
            config = dataclasses.replace(config, seed=seed)
            pipeline_changes["seed"] = seed
        if pipeline is not None:
            pipeline_changes["kind"] = pipeline
        if r_percent is not None:
            pipeline_changes["r_percent"] = r_percent
        if epochs is not None:
            pipeline_changes["final_epochs"] = epochs
            pipeline_changes["peer_epochs"] = epochs
        if pipeline_changes:
            config = dataclasses.replace(
                config, pipeline=dataclasses.replace(config.pipeline, **pipeline_changes)
            )
        if output_directory is not None:
            config = dataclasses.replace(config, output_directory=Path(output_directory))
        if formats:
            config = dataclasses.replace(config, formats=tuple(formats))
        if teacher is not None:
            config = dataclasses.replace(
                config, teacher=dataclasses.replace(config.teacher, kind=teacher)
            )
        return config

    def to_dict(self) -> dict[str, Any]:
        return _jsonable(self)

    def config_hash(self) -> str:
        """Hash of every setting except the output directory."""
        document = self.to_dict()
        document.pop("output_directory")
        return stable_hash(document)

    def corpus_hash(self) -> str:
        """Hash of the settings that determine the sampled sentences and gold trees."""
        return stable_hash({"grammar": self.grammar, "corpus": self.corpus})

    def data_hash(self) -> str:
        """Hash of the settings that determine teacher-labeled corpus contents."""
        return stable_hash(
            {
                "grammar": self.grammar,
                "corpus": self.corpus,
                "noise": self.noise,
                "teacher": self.teacher,
            }
        )
