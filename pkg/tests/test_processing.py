import json
import os
import shutil
from pathlib import Path

import pytest

from pakd.exceptions import ConfigMismatch
from pakd.models import GrammarConfig, NoiseConfig, OutputFormat, TrainConfig
from pakd.processing import ChartSpec, ExperimentReport, ReportWriter, Table, table_to_svg
from pakd.student import TrainingExample, train
from pakd.teachersim import make_teacher_labels, sample_corpus, sample_grammar
from pakd.utils.file import (
    load_corpus,
    load_model_file,
    save_corpus,
    save_model_file,
    write_atomic,
)

BASE_DIR = Path(__file__).parent
TEST_DIR = BASE_DIR / "test_data"
OUTPUT_DIR = TEST_DIR / "output" / "processing"
KEEP_TEST_OUTPUTS = os.environ.get("KEEP_TEST_OUTPUTS", "0") == "1"

ALL_FORMATS = (OutputFormat.csv, OutputFormat.json, OutputFormat.svg)


def sample_table(chart=True):
    return Table(
        name="curve",
        columns=("epoch", "high", "low"),
        rows=[
            {"epoch": 1, "high": 0.5, "low": 0.25},
            {"epoch": 2, "high": 0.75, "low": None},
        ],
        chart=ChartSpec(kind="line", x="epoch", series=("high", "low")) if chart else None,
        meta={"spearman_rho": 0.5},
    )


class TestReportWriter:
    """Report and table output."""

    @classmethod
    def setup_class(cls):
        OUTPUT_DIR.mkdir(parents=True, exist_ok=True)

    @classmethod
    def teardown_class(cls):
        if OUTPUT_DIR.exists() and not KEEP_TEST_OUTPUTS:
            shutil.rmtree(OUTPUT_DIR)

    async def test_csv_carries_hash(self):
        writer = ReportWriter(OUTPUT_DIR / "csv", "abc123", (OutputFormat.csv,))
        [path] = await writer.write_table(sample_table())

        lines = path.read_text(encoding="utf-8").splitlines()
        assert lines[0] == "# config_hash=abc123"
        assert lines[1] == "epoch,high,low"
        assert lines[2] == "1,0.5,0.25"
        assert lines[3] == "2,0.75,"

    async def test_json_carries_hash_and_meta(self):
        writer = ReportWriter(OUTPUT_DIR / "json", "abc123", (OutputFormat.json,))
        [path] = await writer.write_table(sample_table())

        document = json.loads(path.read_text(encoding="utf-8"))
        assert document["config_hash"] == "abc123"
        assert document["spearman_rho"] == 0.5
        assert document["rows"][1]["low"] is None

    async def test_svg(self):
        writer = ReportWriter(OUTPUT_DIR / "svg", "abc123", ALL_FORMATS)
        paths = await writer.write_table(sample_table())

        assert sorted(p.suffix for p in paths) == [".csv", ".json", ".svg"]
        svg = next(p for p in paths if p.suffix == ".svg").read_text(encoding="utf-8")
        assert "<svg" in svg

    async def test_svg_skipped_without_chart(self):
        writer = ReportWriter(OUTPUT_DIR / "nochart", "abc123", ALL_FORMATS)
        paths = await writer.write_table(sample_table(chart=False))

        assert sorted(p.suffix for p in paths) == [".csv", ".json"]

    def test_svg_deterministic(self):
        assert table_to_svg(sample_table(), "abc123") == table_to_svg(sample_table(), "abc123")

    async def test_report(self):
        writer = ReportWriter(OUTPUT_DIR / "report", "abc123")
        report = ExperimentReport(
            command="bench",
            config_hash="abc123",
            config={"seed": 0},
            summary={"n_runs": 1},
            tables=[sample_table()],
        )
        paths = await writer.write_report(report)

        assert paths[0].name == "bench_report.json"
        first = paths[0].read_bytes()
        await writer.write_report(report)
        assert paths[0].read_bytes() == first
        assert not list((OUTPUT_DIR / "report").glob("*.tmp"))


class TestCorpusFiles:
    """Corpus files with provenance headers."""

    @classmethod
    def setup_class(cls):
        OUTPUT_DIR.mkdir(parents=True, exist_ok=True)

    @classmethod
    def teardown_class(cls):
        if OUTPUT_DIR.exists() and not KEEP_TEST_OUTPUTS:
            shutil.rmtree(OUTPUT_DIR)

    @pytest.fixture
    def corpus(self):
        grammar = sample_grammar(GrammarConfig(n_nonterminals=4, n_preterminals=5, vocab_size=60))
        return make_teacher_labels(sample_corpus(grammar, 15, (3, 8), seed=1), NoiseConfig())

    async def test_save_and_load(self, corpus):
        path = await save_corpus(corpus, OUTPUT_DIR / "corpus.jsonl", {"data_hash": "h1"})
        loaded, header = await load_corpus(path, {"data_hash": "h1"})

        assert loaded == corpus
        assert header["data_hash"] == "h1"

    async def test_mismatch(self, corpus):
        path = await save_corpus(corpus, OUTPUT_DIR / "stale.jsonl", {"data_hash": "old"})

        with pytest.raises(ConfigMismatch):
            await load_corpus(path, {"data_hash": "new"})

    async def test_write_atomic_bytes(self):
        path = await write_atomic(OUTPUT_DIR / "blob.bin", b"\x00\x01")

        assert path.read_bytes() == b"\x00\x01"

    async def test_model_file_provenance(self, corpus):
        items = [TrainingExample(e.id, e.tokens, e.teacher) for e in corpus]
        model, _ = train(items, TrainConfig(epochs=2))
        provenance = {"config_hash": "c1", "data_hash": "d1"}

        path = await save_model_file(model, OUTPUT_DIR / "model.json", provenance)

        assert json.loads(path.read_text(encoding="utf-8"))["provenance"] == provenance
        assert await load_model_file(path, {"data_hash": "d1"}) == model
        assert not list(OUTPUT_DIR.glob("model.json.tmp"))
        with pytest.raises(ConfigMismatch):
            await load_model_file(path, {"data_hash": "d2"})
