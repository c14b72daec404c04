"""
CSV export of search traces.

Files written by `export_trace` into one directory:

    probabilities.csv  epoch,stage,edge,op,probability
    epochs.csv         epoch,tau_eff,lambda,expected_params,train_loss,val_loss,penalty
    kernels.csv        epoch,stage,edge,kernel,probability   (size-variable epochs)
    depths.csv         epoch,stage,depth,probability         (size-variable epochs)

Floats are written with repr(), which round-trips exactly.
"""

import csv
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Union

import numpy as np

from lib.supernet import OPERATIONS
from lib.zo_search import SearchTrace


logger = logging.getLogger(__name__)

PROBABILITY_HEADER = ["epoch", "stage", "edge", "op", "probability"]
EPOCH_HEADER = ["epoch", "tau_eff", "lambda", "expected_params", "train_loss", "val_loss", "penalty"]
KERNEL_HEADER = ["epoch", "stage", "edge", "kernel", "probability"]
DEPTH_HEADER = ["epoch", "stage", "depth", "probability"]
RANK_HEADER = ["epoch", "stage", "edge", "op", "probability", "rank"]


class TraceExportError(Exception):
    """Raised when a trace cannot be exported"""

    pass


def fmt(value: float) -> str:
    return repr(float(value))


def write_csv(path: Union[str, Path], header: Sequence[str], rows: Iterable[Sequence[object]]) -> Path:
    """
    Raises:
        TraceExportError: If the file cannot be written
    """
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(header)
            writer.writerows(rows)
    except OSError as e:
        raise TraceExportError(f"Cannot write {path}: {e}") from e
    logger.debug(f"Wrote {path}")
    return path


def probability_rows(trace: SearchTrace) -> List[List[str]]:
    rows = []
    for record in trace.records:
        for s, stage in enumerate(record.alpha_probs):
            for e, probs in enumerate(stage):
                for o, p in enumerate(probs):
                    rows.append([str(record.epoch), str(s), str(e), OPERATIONS[o].value, fmt(p)])
    return rows


def epoch_rows(trace: SearchTrace) -> List[List[str]]:
    return [
        [
            str(r.epoch),
            fmt(r.tau_eff),
            fmt(r.lambda_),
            fmt(r.expected_params),
            fmt(r.train_loss),
            fmt(r.val_loss),
            fmt(r.penalty),
        ]
        for r in trace.records
    ]


def kernel_rows(trace: SearchTrace, kernel_sizes: Sequence[int]) -> List[List[str]]:
    rows = []
    for record in trace.records:
        if record.beta_probs is None:
            continue
        for s, stage in enumerate(record.beta_probs):
            for e, probs in enumerate(stage):
                for i, p in enumerate(probs):
                    rows.append([str(record.epoch), str(s), str(e), str(kernel_sizes[i]), fmt(p)])
    return rows


def depth_rows(trace: SearchTrace, depths: Sequence[int]) -> List[List[str]]:
    rows = []
    for record in trace.records:
        if record.gamma_probs is None:
            continue
        for s, probs in enumerate(record.gamma_probs):
            for i, p in enumerate(probs):
                rows.append([str(record.epoch), str(s), str(depths[i]), fmt(p)])
    return rows


def rank_rows(trace: SearchTrace) -> List[List[str]]:
    """Operation ranks per edge: 1 = highest probability, ties to the lower index."""
    rows = []
    for record in trace.records:
        for s, stage in enumerate(record.alpha_probs):
            for e, probs in enumerate(stage):
                order = np.argsort(-np.asarray(probs), kind="stable")
                ranks = np.empty(len(probs), dtype=int)
                ranks[order] = np.arange(1, len(probs) + 1)
                for o, p in enumerate(probs):
                    rows.append([str(record.epoch), str(s), str(e), OPERATIONS[o].value, fmt(p), str(ranks[o])])
    return rows


def export_trace(
    trace: SearchTrace,
    out_dir: Union[str, Path],
    kernel_sizes: Sequence[int] = (3, 5, 7),
    depths: Sequence[int] = (1, 2, 3),
) -> Dict[str, Path]:
    """
    Write the trace CSVs into `out_dir`.

    Returns:
        Paths keyed by "probabilities", "epochs", "kernels", "depths"

    Raises:
        TraceExportError: If the trace is empty or a file cannot be written
    """
    if not trace.records:
        raise TraceExportError("Cannot export an empty trace")
    out = Path(out_dir)
    paths = {
        "probabilities": write_csv(out / "probabilities.csv", PROBABILITY_HEADER, probability_rows(trace)),
        "epochs": write_csv(out / "epochs.csv", EPOCH_HEADER, epoch_rows(trace)),
        "kernels": write_csv(out / "kernels.csv", KERNEL_HEADER, kernel_rows(trace, kernel_sizes)),
        "depths": write_csv(out / "depths.csv", DEPTH_HEADER, depth_rows(trace, depths)),
    }
    logger.info(f"Exported {len(trace)} epochs of trace data to {out}")
    return paths


def export_probability_ranks(trace: SearchTrace, path: Union[str, Path]) -> Path:
    if not trace.records:
        raise TraceExportError("Cannot export an empty trace")
    return write_csv(path, RANK_HEADER, rank_rows(trace))
