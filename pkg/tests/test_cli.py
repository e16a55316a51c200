import os
import json
import subprocess
import shutil
import sys
import pytest
from pathlib import Path

BASE_DIR = Path(__file__).parent
TEST_DIR = BASE_DIR / "test_data"
OUTPUT_DIR = TEST_DIR / "output" / "cli"
CONFIG_DIR = OUTPUT_DIR / "configs"
KEEP_TEST_OUTPUTS = os.environ.get("KEEP_TEST_OUTPUTS", "0") == "1"

TINY_CONFIG = """\
grammar:
  n_nonterminals: 4
  n_preterminals: 5
  vocab_size: 60
corpus:
  labeled: 8
  unlabeled: 30
  test: 10
  max_length: 8
pipeline:
  s0_epochs: 1
  peer_epochs: 2
  final_epochs: 2
  sd_label_epochs: 1
teacher:
  supervised_epochs: 2
analysis:
  n_buckets: 4
  disparity_epochs: 2
  denoising_epochs: 2
bench:
  seeds: [0, 1]
  pipelines: [slkd, selective, pa-kd]
"""


class TestCliIntegration:
    """Integration tests for the CLI interface."""

    @classmethod
    def setup_class(cls):
        """Set up test environment before all tests."""
        CONFIG_DIR.mkdir(parents=True, exist_ok=True)
        (CONFIG_DIR / "tiny.yaml").write_text(TINY_CONFIG, encoding="utf-8")
        (CONFIG_DIR / "tiny_other_corpus.yaml").write_text(
            TINY_CONFIG.replace("  max_length: 8\n", "  max_length: 8\n  seed: 99\n"),
            encoding="utf-8",
        )
        (CONFIG_DIR / "typo.yaml").write_text("pipeline:\n  r: 50\n", encoding="utf-8")

    @classmethod
    def teardown_class(cls):
        """Clean up test environment after all tests."""
        if OUTPUT_DIR.exists() and not KEEP_TEST_OUTPUTS:
            print(f"Cleaning up test output directory: {OUTPUT_DIR}")
            shutil.rmtree(OUTPUT_DIR)

    def run_cli_command(self, args, check=True, env=None):
        """Helper method to run CLI commands with improved error handling."""
        python_exe = sys.executable

        cmd = [python_exe, "-m", "pakd.cli"] + args
        print(f"Running command: {' '.join(cmd)}")

        result = subprocess.run(
            cmd, capture_output=True, text=True, env={**os.environ, **(env or {})}
        )

        print(f"STDOUT: {result.stdout}")
        if result.stderr:
            print(f"STDERR: {result.stderr}")

        if check and result.returncode != 0:
            pytest.fail(
                f"Command failed with exit code {result.returncode}: {result.stdout}{result.stderr}"
            )

        return result

    def tiny(self, command, out, *extra):
        return [command, "--config", str(CONFIG_DIR / "tiny.yaml"), "--out", str(out), *extra]

    def test_cli_version(self):
        """Test the CLI version command."""
        result = self.run_cli_command(["--version"])

        assert "pakd version" in result.stdout

    def test_missing_command(self):
        result = self.run_cli_command([], check=False)

        assert result.returncode == 2
        assert "a command is required" in result.stderr

    def test_unknown_config_key(self):
        out = OUTPUT_DIR / "typo"
        result = self.run_cli_command(
            ["gen", "--config", str(CONFIG_DIR / "typo.yaml"), "--out", str(out)], check=False
        )

        assert result.returncode == 2
        assert "[config]" in result.stdout
        assert "Unknown key" in result.stdout
        assert not out.exists()

    def test_workflow(self):
        """gen, annotate, distill and analyze share one output directory."""
        out = OUTPUT_DIR / "workflow"

        self.run_cli_command(self.tiny("gen", out))
        header = json.loads((out / "unlabeled.jsonl").read_text(encoding="utf-8").splitlines()[0])
        assert "corpus_hash" in header["header"]
        assert (out / "labeled.jsonl").exists()
        assert (out / "test.jsonl").exists()

        self.run_cli_command(self.tiny("annotate", out))
        annotate = json.loads((out / "annotate_report.json").read_text(encoding="utf-8"))
        assert annotate["summary"]["teacher"] == "simulated"
        tiers = annotate["summary"]["train_teacher_tier_f1"]
        assert set(tiers) <= {"0", "1"}
        if "0" in tiers:
            assert tiers["0"] == 1.0
        assert (out / "teacher_train.jsonl").exists()

        self.run_cli_command(self.tiny("distill", out, "--pipeline", "pa-kd"))
        distill = json.loads((out / "distill_report.json").read_text(encoding="utf-8"))
        assert distill["summary"]["pipeline"] == "pa-kd"
        assert [s["name"] for s in distill["summary"]["stages"]][0] == "s0"
        assert (out / "model_pa-kd.json").exists()
        stages_csv = (out / "distill_pa-kd_stages.csv").read_text(encoding="utf-8")
        assert stages_csv.startswith(f"# config_hash={distill['config_hash']}\n")
        trace_csv = (out / "distill_pa-kd_s2_trace.csv").read_text(encoding="utf-8").splitlines()
        assert trace_csv[0] == f"# config_hash={distill['config_hash']}"
        assert trace_csv[1] == "example_id,epoch,f1_vs_target"
        assert len(trace_csv) > 2
        assert (out / "distill_pa-kd_s0_trace.csv").exists()
        assert all(not t["name"].endswith("_trace") for t in distill["tables"])
        model_doc = json.loads((out / "model_pa-kd.json").read_text(encoding="utf-8"))
        assert model_doc["provenance"]["config_hash"] == distill["config_hash"]

        self.run_cli_command(
            self.tiny(
                "analyze",
                out,
                "--analysis",
                "buckets",
                "--analysis",
                "delta",
                "--model",
                str(out / "model_pa-kd.json"),
            )
        )
        assert (out / "buckets.csv").exists()
        assert (out / "delta.csv").exists()

    def test_model_from_other_data_rejected(self):
        out = OUTPUT_DIR / "model_mismatch"
        self.run_cli_command(self.tiny("distill", out, "--pipeline", "slkd"))

        result = self.run_cli_command(
            [
                "analyze",
                "--config",
                str(CONFIG_DIR / "tiny_other_corpus.yaml"),
                "--out",
                str(OUTPUT_DIR / "model_mismatch_other"),
                "--analysis",
                "delta",
                "--model",
                str(out / "model_slkd.json"),
            ],
            check=False,
        )

        assert result.returncode == 2
        assert "[model]" in result.stdout
        assert "data_hash" in result.stdout

    def test_supervised_teacher(self):
        out = OUTPUT_DIR / "supervised"

        self.run_cli_command(self.tiny("annotate", out, "--teacher", "supervised"))
        report = json.loads((out / "annotate_report.json").read_text(encoding="utf-8"))

        assert report["summary"]["teacher"] == "supervised"

    def test_stale_corpus_rejected(self):
        out = OUTPUT_DIR / "stale"
        self.run_cli_command(self.tiny("gen", out))

        result = self.run_cli_command(
            [
                "annotate",
                "--config",
                str(CONFIG_DIR / "tiny_other_corpus.yaml"),
                "--out",
                str(out),
            ],
            check=False,
        )

        assert result.returncode == 2
        assert "[gen]" in result.stdout

    def test_bench_deterministic(self):
        out = OUTPUT_DIR / "bench"

        self.run_cli_command(self.tiny("bench", out, "--format", "csv", "--format", "json"))
        first = (out / "bench_report.json").read_bytes()
        rows = (out / "bench.csv").read_text(encoding="utf-8").splitlines()
        self.run_cli_command(self.tiny("bench", out, "--format", "csv", "--format", "json"))

        assert (out / "bench_report.json").read_bytes() == first
        assert rows[0].startswith("# config_hash=")
        assert rows[1].startswith("method,median_f1,spread_f1,n_seeds,f1_seed_0,f1_seed_1")
        assert [row.split(",")[0] for row in rows[2:]] == ["teacher", "slkd", "selective", "pa-kd"]

    def test_bench_threads(self):
        out = OUTPUT_DIR / "bench_threads"

        self.run_cli_command(self.tiny("bench", out), env={"PAKD_THREADS": "2"})
        threaded = json.loads((out / "bench_report.json").read_text(encoding="utf-8"))
        serial_out = OUTPUT_DIR / "bench_serial"
        self.run_cli_command(self.tiny("bench", serial_out), env={"PAKD_THREADS": "1"})
        serial = json.loads((serial_out / "bench_report.json").read_text(encoding="utf-8"))

        assert threaded["tables"] == serial["tables"]

    def test_bad_thread_count(self):
        result = self.run_cli_command(
            self.tiny("bench", OUTPUT_DIR / "bad_threads"), check=False, env={"PAKD_THREADS": "0"}
        )

        assert result.returncode == 2


class TestBenchErrors:
    """Errors raised inside a bench worker name the failing pipeline."""

    def test_pipeline_error_names_pipeline(self):
        from pakd.cli import Dataset, _bench_seed
        from pakd.exceptions import MissingTeacher
        from pakd.models import GrammarConfig, RunConfig
        from pakd.teachersim import sample_corpus, sample_grammar

        grammar = sample_grammar(GrammarConfig(n_nonterminals=4, n_preterminals=5, vocab_size=60))
        unlabeled = sample_corpus(grammar, 6, (3, 8), seed=1, id_prefix="u")
        config = RunConfig.from_dict(
            {"pipeline": {"final_epochs": 1}, "bench": {"seeds": [3], "pipelines": ["slkd"]}}
        )

        with pytest.raises(MissingTeacher) as info:
            _bench_seed(config, Dataset(unlabeled, [], []), 3)

        assert info.value.stage == "bench slkd seed 3"
