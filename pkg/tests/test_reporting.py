"""
Tests for trace, campaign, size and tier exports
"""

import csv
import sys
from pathlib import Path

import numpy as np
import pytest

project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

from lib.arch_eval import CampaignReport, ReportRow, SizeDistribution, derive_size_tiers
from lib.zo_search import EpochRecord, SearchTrace
from workbench.reporting.campaign_report import (
    REPORT_HEADER,
    export_campaign,
    read_sizes,
    read_tiers,
    write_sizes,
    write_tiers,
)
from workbench.reporting.trace_export import TraceExportError, export_probability_ranks, export_trace


def read_rows(path: Path):
    with path.open(newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def record(epoch: int, size_variable: bool) -> EpochRecord:
    alpha = np.array([[[0.1, 0.4, 0.4, 0.1, 0.0], [0.2, 0.2, 0.2, 0.2, 0.2]]])
    return EpochRecord(
        epoch=epoch,
        tau_eff=1.5 * 0.75 ** (epoch // 5),
        lambda_=10.0,
        mu=0.15,
        lr_w=0.025,
        expected_params=1234.0,
        train_loss=0.7,
        val_loss=0.69,
        penalty=2.5 if size_variable else 0.0,
        size_variable=size_variable,
        alpha_probs=alpha,
        beta_probs=np.array([[[0.25, 0.75], [1.0, 0.0]]]) if size_variable else None,
        gamma_probs=np.array([[0.5, 0.5]]) if size_variable else None,
    )


@pytest.fixture
def trace():
    return SearchTrace([record(0, False), record(5, True)])


class TestTraceExport:
    def test_probability_rows_sum_to_one(self, trace, tmp_path):
        paths = export_trace(trace, tmp_path, kernel_sizes=(3, 5), depths=(1, 2))
        rows = read_rows(paths["probabilities"])
        assert len(rows) == 2 * 2 * 5
        for epoch in ("0", "5"):
            for edge in ("0", "1"):
                total = sum(float(r["probability"]) for r in rows if r["epoch"] == epoch and r["edge"] == edge)
                assert total == pytest.approx(1.0)
        assert rows[0]["op"] == "none"

    def test_epoch_rows(self, trace, tmp_path):
        rows = read_rows(export_trace(trace, tmp_path)["epochs"])
        assert [r["tau_eff"] for r in rows] == ["1.5", "1.125"]
        assert [r["penalty"] for r in rows] == ["0.0", "2.5"]

    def test_kernel_and_depth_rows_only_when_size_variable(self, trace, tmp_path):
        paths = export_trace(trace, tmp_path, kernel_sizes=(3, 5), depths=(1, 2))
        kernels = read_rows(paths["kernels"])
        depths = read_rows(paths["depths"])
        assert {r["epoch"] for r in kernels} == {"5"}
        assert [r["kernel"] for r in kernels[:2]] == ["3", "5"]
        assert [(r["depth"], r["probability"]) for r in depths] == [("1", "0.5"), ("2", "0.5")]

    def test_ranks(self, trace, tmp_path):
        rows = read_rows(export_probability_ranks(trace, tmp_path / "ranks.csv"))
        first_edge = [r["rank"] for r in rows if r["epoch"] == "0" and r["edge"] == "0"]
        assert first_edge == ["3", "1", "2", "4", "5"]
        tied_edge = [r["rank"] for r in rows if r["epoch"] == "0" and r["edge"] == "1"]
        assert tied_edge == ["1", "2", "3", "4", "5"]

    def test_empty_trace_rejected(self, tmp_path):
        with pytest.raises(TraceExportError):
            export_trace(SearchTrace(), tmp_path)
        with pytest.raises(TraceExportError):
            export_probability_ranks(SearchTrace(), tmp_path / "ranks.csv")


class TestCampaignExport:
    def test_report_and_summary(self, tmp_path):
        report = CampaignReport(
            rows=[
                ReportRow("run0", 0, 0, False, 1000, 0.9, 0.8),
                ReportRow("run0", 1, 1, True, 1200, 0.25, None),
                ReportRow("run1", 0, 0, True, 900, 0.2, None),
            ],
            omitted={"run0": 1, "run1": 0},
            checkpoints=["run0", "run1"],
        )
        paths = export_campaign(report, tmp_path / "report.csv")
        assert paths["summary"] == tmp_path / "report_summary.csv"
        rows = read_rows(paths["report"])
        assert list(rows[0]) == REPORT_HEADER
        assert rows[1]["discarded"] == "1" and rows[1]["test_acc"] == ""
        summary = read_rows(paths["summary"])
        assert summary[0]["mean_test_acc"] == "0.8"
        assert summary[0]["std_test_acc"] == "0.0"
        assert summary[1]["retrained"] == "1" and summary[1]["mean_test_acc"] == ""


class TestSizesAndTiers:
    def test_sizes_round_trip(self, tmp_path):
        path = write_sizes(tmp_path / "sizes.csv", {"run0": [10, 20], "run1": [30]})
        assert read_sizes(path) == [10, 20, 30]

    def test_bare_size_column(self, tmp_path):
        path = tmp_path / "sizes.txt"
        path.write_text("5\n7\n", encoding="utf-8")
        assert read_sizes(path) == [5, 7]

    def test_malformed_sizes(self, tmp_path):
        path = tmp_path / "sizes.csv"
        path.write_text("params\nlots\n", encoding="utf-8")
        with pytest.raises(TraceExportError):
            read_sizes(path)

    def test_tiers_round_trip(self, tmp_path):
        tiers = derive_size_tiers(SizeDistribution.from_sizes(range(1, 101)))
        assert read_tiers(write_tiers(tiers, tmp_path / "tiers.toml")) == tiers

    def test_malformed_tiers(self, tmp_path):
        path = tmp_path / "tiers.toml"
        path.write_text("[tiers.M]\nc_lower = 1.0\n", encoding="utf-8")
        with pytest.raises(TraceExportError):
            read_tiers(path)
