"""
End-to-end tests for the zodarts command line
"""

import csv
import json
import sys
from pathlib import Path

import pytest

project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

from scripts.zodarts import build_parser, main
from workbench.storage.manifest import read_manifest


RUN_CONFIG = """
[supernet]
base_channels = 2
num_stages = 2
cells_per_stage = 2
node_count = 3
kernel_sizes = [3, 5]
depths = [1, 2]

[search]
epochs = 2
theta = 1
inner_steps = 1
batch_size = 8
steps_per_epoch = 1

[retrain]
epochs = 1
batch_size = 8

[retrain.rules]
checkpoint_epoch = 5

[data]
train = "data/train.zdx"
test = "data/test.zdx"
"""


def rows(path: Path):
    with path.open(newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


@pytest.fixture
def workspace(tmp_path, monkeypatch):
    """Synthetic train/test containers and a tiny run config in a fresh directory."""
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("ZODARTS_THREADS", raising=False)
    assert main(["synth-data", "--samples", "40", "--size", "8", "--seed", "0", "--out", "data/train.zdx"]) == 0
    assert main(["synth-data", "--samples", "16", "--size", "8", "--seed", "1", "--out", "data/test.zdx"]) == 0
    (tmp_path / "run.toml").write_text(RUN_CONFIG, encoding="utf-8")
    return tmp_path


@pytest.fixture
def searched(workspace):
    assert main(["search", "--config", "run.toml", "--seed", "1", "--out", "run1"]) == 0
    return workspace


class TestParser:
    def test_unknown_subcommand(self):
        with pytest.raises(SystemExit) as excinfo:
            build_parser().parse_args(["explode"])
        assert excinfo.value.code == 2

    def test_missing_required_option(self):
        with pytest.raises(SystemExit):
            main(["search", "--seed", "1"])


class TestWorkflow:
    def test_search_outputs(self, searched):
        run = searched / "run1"
        assert (run / "checkpoint.zckp").exists()
        manifest = read_manifest(run / "manifest.json")
        assert manifest.outcome == "completed"
        assert manifest.seed == 1
        assert len(manifest.epoch_seconds) == 2
        epochs = rows(run / "trace" / "epochs.csv")
        assert [r["epoch"] for r in epochs] == ["0", "1"]

    def test_sample_then_derive_tiers(self, searched):
        assert main(["sample", "--checkpoints", "run1", "--samples", "4", "--out", "samples"]) == 0
        lines = (searched / "samples" / "architectures.jsonl").read_text(encoding="utf-8").splitlines()
        assert len(lines) == 4
        first = json.loads(lines[0])
        assert first["checkpoint"] == "run1" and first["sample_id"] == 0
        assert len(rows(searched / "samples" / "sizes.csv")) == 4

        assert main(["derive-tiers", "--sizes", "samples/sizes.csv", "--out", "tiers.toml"]) == 0
        assert "[tiers.M]" in (searched / "tiers.toml").read_text(encoding="utf-8")

    def test_sampling_is_seeded(self, searched):
        main(["sample", "--checkpoints", "run1", "--samples", "3", "--seed", "7", "--out", "a"])
        main(["sample", "--checkpoints", "run1", "--samples", "3", "--seed", "7", "--out", "b"])
        assert (searched / "a" / "architectures.jsonl").read_bytes() == (
            searched / "b" / "architectures.jsonl"
        ).read_bytes()

    def test_retrain(self, searched):
        main(["sample", "--checkpoints", "run1", "--samples", "2", "--out", "samples"])
        assert main(["retrain", "--config", "run.toml", "--arch", "samples/architectures.jsonl", "--out", "r.csv"]) == 0
        report = rows(searched / "r.csv")
        assert [r["sample_id"] for r in report] == ["0", "1"]
        assert all(r["discarded"] == "0" and r["test_acc"] != "" for r in report)

    def test_evaluate(self, searched):
        args = ["evaluate", "--config", "run.toml", "--checkpoints", "run1", "--samples", "2", "--out", "report.csv"]
        assert main(args) == 0
        assert len(rows(searched / "report.csv")) == 2
        summary = rows(searched / "report_summary.csv")
        assert summary[0]["checkpoint"] == "run1" and summary[0]["retrained"] == "2"

    def test_evaluate_tier_needs_tiers_file(self, searched):
        with pytest.raises(SystemExit) as excinfo:
            main(["evaluate", "--config", "run.toml", "--checkpoints", "run1", "--tier", "M", "--out", "x.csv"])
        assert excinfo.value.code == 2

    def test_report(self, searched):
        assert main(["report", "--checkpoints", "run1", "--out", "figures"]) == 0
        assert (searched / "figures" / "ranks.csv").exists()
        assert (searched / "figures" / "probabilities.csv").exists()

    @pytest.mark.slow
    def test_resume_matches_uninterrupted(self, searched):
        assert main(["search", "--config", "run.toml", "--seed", "1", "--out", "run2", "--early-stop", "1"]) == 0
        assert read_manifest(searched / "run2" / "manifest.json").outcome == "stopped early"
        assert main(["search", "--config", "run.toml", "--seed", "1", "--out", "run2", "--resume", "run2"]) == 0
        full = (searched / "run1" / "checkpoint.zckp").read_bytes()
        assert (searched / "run2" / "checkpoint.zckp").read_bytes() == full


class TestFailures:
    def test_missing_data_returns_one(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        assert main(["search", "--out", "run"]) == 1

    def test_corrupted_checkpoint_returns_one(self, searched):
        path = searched / "run1" / "checkpoint.zckp"
        data = bytearray(path.read_bytes())
        data[40] ^= 0xFF
        path.write_bytes(bytes(data))
        assert main(["sample", "--checkpoints", "run1", "--out", "samples"]) == 1

    def test_unreadable_dataset_returns_one(self, workspace):
        (workspace / "data" / "train.zdx").write_bytes(b"nope")
        assert main(["search", "--config", "run.toml", "--out", "run"]) == 1
