"""CSV reports for evaluation campaigns, sampled sizes and size tiers."""

import csv
import logging
import math
import tomllib
from pathlib import Path
from typing import Dict, List, Sequence, Union

from lib.arch_eval import TIER_PERCENTILES, CampaignReport, ConstraintTier, ReportRow
from workbench.reporting.trace_export import TraceExportError, fmt, write_csv


logger = logging.getLogger(__name__)

REPORT_HEADER = ["checkpoint", "seed", "sample_id", "discarded", "params", "best_val_acc", "test_acc"]
SUMMARY_HEADER = ["checkpoint", "retrained", "discarded", "mean_test_acc", "std_test_acc", "mean_params"]
SIZES_HEADER = ["checkpoint", "sample_id", "params"]


def report_rows(rows: Sequence[ReportRow]) -> List[List[str]]:
    return [
        [
            r.checkpoint,
            str(r.seed),
            str(r.sample_id),
            "1" if r.discarded else "0",
            str(r.params),
            fmt(r.best_val_acc),
            "" if r.test_acc is None else fmt(r.test_acc),
        ]
        for r in rows
    ]


def export_campaign(report: CampaignReport, path: Union[str, Path]) -> Dict[str, Path]:
    """
    Write the per-job report and the per-checkpoint summary.

    The summary goes next to the report as `<stem>_summary.csv`; checkpoints
    with no survivors get empty statistics.
    """
    path = Path(path)
    summary_path = path.with_name(f"{path.stem}_summary{path.suffix or '.csv'}")
    summary = [
        [
            s["checkpoint"],
            str(s["retrained"]),
            str(s["discarded"]),
            "" if math.isnan(s["mean_test_acc"]) else fmt(s["mean_test_acc"]),
            "" if math.isnan(s["std_test_acc"]) else fmt(s["std_test_acc"]),
            "" if math.isnan(s["mean_params"]) else fmt(s["mean_params"]),
        ]
        for s in report.summary()
    ]
    paths = {
        "report": write_csv(path, REPORT_HEADER, report_rows(report.rows)),
        "summary": write_csv(summary_path, SUMMARY_HEADER, summary),
    }
    logger.info(f"Wrote {len(report.rows)} report rows to {path}")
    return paths


def write_sizes(path: Union[str, Path], sizes: Dict[str, Sequence[int]]) -> Path:
    rows = [[name, str(i), str(v)] for name, values in sizes.items() for i, v in enumerate(values)]
    return write_csv(path, SIZES_HEADER, rows)


def read_sizes(path: Union[str, Path]) -> List[int]:
    """Parameter counts from a CSV with a `params` column (or a single bare column)."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise TraceExportError(f"{path} is empty")
    header = [h.strip() for h in rows[0]]
    if "params" in header:
        col = header.index("params")
        body = rows[1:]
    else:
        col, body = 0, rows
    try:
        return [int(float(r[col])) for r in body if r and r[col].strip()]
    except (ValueError, IndexError) as e:
        raise TraceExportError(f"{path}: malformed size value: {e}") from e


def write_tiers(tiers: Dict[str, ConstraintTier], path: Union[str, Path]) -> Path:
    """TOML fragment with one `[tiers.<name>]` table holding c_lower / c_upper."""
    lines = []
    for name in TIER_PERCENTILES:
        tier = tiers[name]
        lines += [
            f"[tiers.{name}]",
            f"lower_percentile = {tier.lower_pct}",
            f"upper_percentile = {tier.upper_pct}",
            f"c_lower = {fmt(tier.c_lower)}",
            f"c_upper = {fmt(tier.c_upper)}",
            "",
        ]
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(lines), encoding="utf-8")
    except OSError as e:
        raise TraceExportError(f"Cannot write {path}: {e}") from e
    logger.info(f"Wrote tiers to {path}")
    return path


def read_tiers(path: Union[str, Path]) -> Dict[str, ConstraintTier]:
    with Path(path).open("rb") as f:
        data = tomllib.load(f)
    try:
        return {
            name: ConstraintTier(
                name,
                int(t.get("lower_percentile", TIER_PERCENTILES.get(name, (0, 0))[0])),
                int(t.get("upper_percentile", TIER_PERCENTILES.get(name, (0, 0))[1])),
                float(t["c_lower"]),
                float(t["c_upper"]),
            )
            for name, t in data["tiers"].items()
        }
    except (KeyError, TypeError, ValueError) as e:
        raise TraceExportError(f"{path}: malformed tiers file: {e}") from e
