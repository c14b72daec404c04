#!/usr/bin/env python3
"""
zodarts workbench command line

Runs size-constrained architecture search on desk-scale image data and the
sampling / retraining / tier-derivation workflow around it.

Usage:
    zodarts synth-data --kind blobs --samples 2000 --out data/train.zdx
    zodarts search --config configs/ci.toml --seed 1 --out run1/
    zodarts evaluate --checkpoints run1 run2 run3 --samples 3 --tier M --tiers tiers.toml --out report.csv
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import ValidationError

sys.path.insert(0, str(Path(__file__).parent.parent))

from lib.arch_eval import (
    CampaignConfig,
    DiscreteArchitecture,
    EvaluationError,
    RetrainData,
    RetrainJob,
    SizeDistribution,
    SupernetSnapshot,
    derive_argmax_architecture,
    derive_size_tiers,
    evaluation_campaign,
    run_retrain_job,
    sample_architecture,
    snapshot_probabilities,
)
from lib.simplex_norm import SimplexNormError
from lib.supernet import SupernetConfig, SupernetError, build_supernet
from lib.tensor_engine import TensorEngineError
from lib.zo_search import NonFiniteLossError, SearchConfig, SearchData, SearchError, search
from workbench.config.settings import WorkbenchSettings, create_settings
from workbench.data.container import DatasetContainer, DatasetFormatError, Split, load_dataset, save_dataset
from workbench.data.synthetic import SyntheticKind, generate_synthetic
from workbench.reporting.campaign_report import (
    REPORT_HEADER,
    export_campaign,
    report_rows,
    read_sizes,
    read_tiers,
    write_sizes,
    write_tiers,
)
from workbench.reporting.trace_export import TraceExportError, export_probability_ranks, export_trace, write_csv
from workbench.storage.checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from workbench.storage.manifest import RunManifest, hash_inputs, write_manifest

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.zckp"
LAST_GOOD_NAME = "last_good.zckp"

LIBRARY_ERRORS = (
    TensorEngineError,
    SimplexNormError,
    SupernetError,
    SearchError,
    EvaluationError,
    DatasetFormatError,
    CheckpointError,
    TraceExportError,
    ValidationError,
    ValueError,
    OSError,
)


class WorkbenchError(Exception):
    """Raised for invalid command combinations that argparse cannot catch."""

    pass


def seed_or(seed: Optional[int], default: int) -> int:
    return default if seed is None else seed


def resolve_checkpoint(path: str) -> Path:
    """A run directory resolves to its checkpoint file."""
    p = Path(path)
    return p / CHECKPOINT_NAME if p.is_dir() else p


def final_snapshot(name: str, checkpoint: Checkpoint) -> SupernetSnapshot:
    """Probabilities at the last completed epoch's temperature."""
    state = checkpoint.restore()
    epoch = max(state.epoch - 1, 0)
    probs = snapshot_probabilities(state.net, state.config.rule, epoch, epoch >= state.config.theta)
    return SupernetSnapshot(name, state.net.config, probs)


class Workbench:
    """
    Subcommand implementations sharing one loaded configuration.

    Usage:
        bench = Workbench(create_settings("configs/ci.toml"))
        bench.search(seed=1, out=Path("run1"))
    """

    def __init__(self, settings: WorkbenchSettings):
        self.settings = settings

    # -- data ---------------------------------------------------------------

    def _require(self, value: Optional[Path], what: str) -> Path:
        if value is None:
            raise WorkbenchError(f"No {what} dataset configured (set [data] {what} or pass --data)")
        return Path(value)

    def load_splits(
        self, need_test: bool = False
    ) -> Tuple[DatasetContainer, DatasetContainer, Optional[DatasetContainer]]:
        data = self.settings.data
        train = load_dataset(self._require(data.train, "train"), Split.TRAIN)
        if data.val is not None:
            val = load_dataset(data.val, Split.VAL)
        else:
            train, val = train.split_off(data.split)
        test = load_dataset(self._require(data.test, "test"), Split.TEST) if need_test else None
        return train, val, test

    def input_paths(self) -> List[Path]:
        data = self.settings.data
        return [Path(p) for p in (data.train, data.val, data.test) if p is not None and Path(p).exists()]

    def supernet_config_for(self, container: DatasetContainer) -> SupernetConfig:
        channels, _, _ = container.image_shape
        return SupernetConfig.model_validate(
            {
                **self.settings.supernet.model_dump(),
                "in_channels": channels,
                "num_classes": container.num_classes,
            }
        )

    def retrain_data(self) -> RetrainData:
        train, val, test = self.load_splits(need_test=True)
        assert test is not None
        tx, ty = train.as_float()
        vx, vy = val.as_float()
        sx, sy = test.as_float()
        return RetrainData(tx, ty, vx, vy, sx, sy)

    # -- subcommands --------------------------------------------------------

    def search(self, seed: Optional[int], out: Path, resume: Optional[Path] = None) -> Path:
        """Run the search; writes checkpoint, trace CSVs and manifest into `out`."""
        config = self.settings.search
        if seed is not None:
            config = SearchConfig.model_validate({**config.model_dump(), "seed": seed})
        seed = config.seed
        train, val, _ = self.load_splits()
        tx, ty = train.as_float()
        vx, vy = val.as_float()
        data = SearchData(tx, ty, vx, vy)
        net_config = self.supernet_config_for(train)

        out.mkdir(parents=True, exist_ok=True)
        echo = self.settings.echo()
        manifest = RunManifest(
            command="search",
            config=echo,
            seed=seed,
            input_hash=hash_inputs(self.input_paths(), echo),
            inputs=[str(p) for p in self.input_paths()],
        )
        write_manifest(out / "manifest.json", manifest)

        resume_state = None
        if resume is not None:
            resume_state = load_checkpoint(resolve_checkpoint(str(resume))).restore()
            logger.info(f"Resuming from epoch {resume_state.epoch}")
        net = build_supernet(net_config, seed=seed) if resume_state is None else resume_state.net
        checkpoint_path = out / CHECKPOINT_NAME

        try:
            result = search(
                net,
                data,
                config,
                resume=resume_state,
                on_epoch=lambda state, record: save_checkpoint(state, checkpoint_path),
            )
        except NonFiniteLossError as e:
            if e.last_good is not None:
                save_checkpoint(e.last_good, out / LAST_GOOD_NAME)
            write_manifest(out / "manifest.json", manifest.finish(f"failed: {e}"))
            raise

        save_checkpoint(result.state, checkpoint_path)
        if result.trace.records:
            export_trace(result.trace, out / "trace", net.config.kernel_sizes, net.config.depths)
        outcome = "stopped early" if result.stopped_early else "completed"
        write_manifest(out / "manifest.json", manifest.finish(outcome, result.epoch_seconds))
        return checkpoint_path

    def sample(self, checkpoints: Sequence[str], samples: int, seed: int, out: Path, argmax: bool = False) -> Path:
        """Draw architectures from each checkpoint; writes architectures.jsonl and sizes.csv."""
        out.mkdir(parents=True, exist_ok=True)
        lines: List[str] = []
        sizes: Dict[str, List[int]] = {}
        for index, name in enumerate(checkpoints):
            snap = final_snapshot(name, load_checkpoint(resolve_checkpoint(name)))
            rng = np.random.default_rng([seed, index])
            count = 1 if argmax else samples
            sizes[name] = []
            for sample_id in range(count):
                if argmax:
                    arch = derive_argmax_architecture(snap.config, snap.probs)
                else:
                    arch = sample_architecture(snap.config, snap.probs, rng)
                record = {
                    "checkpoint": name,
                    "sample_id": sample_id,
                    "supernet": snap.config.model_dump(mode="json"),
                    **arch.to_dict(),
                }
                lines.append(json.dumps(record, sort_keys=True))
                sizes[name].append(arch.param_count())
        (out / "architectures.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
        write_sizes(out / "sizes.csv", sizes)
        logger.info(f"Wrote {len(lines)} architectures to {out}")
        return out / "architectures.jsonl"

    def retrain(self, arch_file: Path, seed: int, out: Path) -> Path:
        """Retrain every architecture in a sample file; writes the report CSV."""
        data = self.retrain_data()
        rows = []
        for line in arch_file.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            record = json.loads(line)
            arch = DiscreteArchitecture.from_dict(SupernetConfig.model_validate(record["supernet"]), record)
            sample_id = int(record["sample_id"])
            job = RetrainJob(record["checkpoint"], sample_id, seed + sample_id, arch, self.settings.retrain)
            rows.append(run_retrain_job(job, data))
        return write_csv(out, REPORT_HEADER, report_rows(rows))

    def evaluate(
        self,
        checkpoints: Sequence[str],
        samples: Optional[int],
        tier: Optional[str],
        tiers_file: Optional[Path],
        seed: int,
        out: Path,
    ) -> Path:
        """Sampling campaign over several checkpoints; writes report and summary CSVs."""
        base = self.settings.evaluation
        campaign = CampaignConfig.model_validate(
            {
                **base.model_dump(),
                "samples_per_supernet": samples or base.samples_per_supernet,
                "tier": tier if tier is not None else base.tier,
                "retrain": self.settings.retrain.model_dump(),
                "seed": seed,
            }
        )
        tiers = read_tiers(tiers_file) if tiers_file is not None else None
        snapshots = [final_snapshot(name, load_checkpoint(resolve_checkpoint(name))) for name in checkpoints]
        report = evaluation_campaign(snapshots, self.retrain_data(), campaign, tiers, threads=self.settings.threads)
        for name in checkpoints:
            if not report.survivors(name):
                logger.warning(f"{name}: no surviving architectures")
        return export_campaign(report, out)["report"]

    def derive_tiers(self, sizes_file: Path, out: Path) -> Path:
        dist = SizeDistribution.from_sizes(read_sizes(sizes_file), {"source": str(sizes_file)})
        tiers = derive_size_tiers(dist)
        for t in tiers.values():
            logger.info(f"Tier {t.name}: [{t.c_lower:g}, {t.c_upper:g}]")
        return write_tiers(tiers, out)

    def report(self, checkpoint: str, out: Path) -> Path:
        """Trace CSVs and probability ranks from a saved checkpoint."""
        ckpt = load_checkpoint(resolve_checkpoint(checkpoint))
        config = ckpt.supernet_config
        export_trace(ckpt.trace, out, config.kernel_sizes, config.depths)
        return export_probability_ranks(ckpt.trace, out / "ranks.csv")


def synth_data(
    kind: str, samples: int, classes: int, noise: float, seed: int, size: int, channels: int, out: Path
) -> Path:
    container = generate_synthetic(SyntheticKind(kind), samples, classes, noise, seed, size, channels)
    return save_dataset(container, out)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="zodarts",
        description="Zeroth-order size-variable architecture search workbench",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Generate a separable desk-scale dataset
  zodarts synth-data --kind blobs --samples 4000 --seed 0 --out data/train.zdx
  zodarts synth-data --kind blobs --samples 1000 --seed 1 --out data/test.zdx

  # Search (train split in half for the bilevel streams)
  zodarts search --config configs/ci.toml --seed 1 --out run1/

  # Continue an interrupted search
  zodarts search --config configs/ci.toml --seed 1 --out run1/ --resume run1/

  # Sample 300 architectures per supernet and derive S/M/L tiers
  zodarts sample --checkpoints run1 --samples 300 --out samples/
  zodarts derive-tiers --sizes samples/sizes.csv --out tiers.toml

  # Three checkpoints x three samples, restricted to tier M
  zodarts evaluate --checkpoints run1 run2 run3 --samples 3 --tier M --tiers tiers.toml --out report.csv

  # Probability traces and ranks
  zodarts report --checkpoints run1 --out figures/

Environment:
  ZODARTS_THREADS caps retraining worker processes.
  ZODARTS_<SECTION>__<KEY> overrides any run-config value.
        """,
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def common(p: argparse.ArgumentParser, seed: bool = True) -> None:
        p.add_argument("--config", help="TOML run-config file")
        if seed:
            p.add_argument("--seed", type=int, help="Random seed (default: from the run config)")
        p.add_argument("--verbose", "-v", action="store_true", help="Enable verbose logging")

    p = sub.add_parser("search", help="Run the bilevel architecture search")
    common(p)
    p.add_argument("--out", required=True, help="Run directory")
    p.add_argument("--data", help="Training container (overrides [data] train)")
    p.add_argument("--split", type=float, help="Train fraction when splitting (default: 0.5)")
    p.add_argument("--epochs", type=int, help="Override total epochs n")
    p.add_argument("--early-stop", type=int, help="Stop after this many epochs")
    p.add_argument("--resume", help="Checkpoint or run directory to continue from")

    p = sub.add_parser("sample", help="Sample discrete architectures from checkpoints")
    common(p)
    p.add_argument("--checkpoints", nargs="+", required=True, help="Checkpoint files or run directories")
    p.add_argument("--samples", type=int, default=3, help="Architectures per checkpoint (default: 3)")
    p.add_argument("--argmax", action="store_true", help="Take the most probable choice everywhere")
    p.add_argument("--out", required=True, help="Output directory")

    p = sub.add_parser("retrain", help="Retrain sampled architectures with discard rules")
    common(p)
    p.add_argument("--arch", required=True, help="architectures.jsonl written by `sample`")
    p.add_argument("--epochs", type=int, help="Override the retraining epoch budget")
    p.add_argument("--out", required=True, help="Report CSV")

    p = sub.add_parser("evaluate", help="Sampling and retraining campaign over checkpoints")
    common(p)
    p.add_argument("--checkpoints", nargs="+", required=True, help="Checkpoint files or run directories")
    p.add_argument("--samples", type=int, help="Architectures per checkpoint")
    p.add_argument("--tier", choices=["S", "M", "L"], help="Omit samples outside this size tier")
    p.add_argument("--tiers", help="Tiers file written by derive-tiers")
    p.add_argument("--epochs", type=int, help="Override the retraining epoch budget")
    p.add_argument("--out", required=True, help="Report CSV (summary written alongside)")

    p = sub.add_parser("derive-tiers", help="Derive S/M/L size bounds from sampled sizes")
    common(p, seed=False)
    p.add_argument("--sizes", required=True, help="CSV with a params column")
    p.add_argument("--out", required=True, help="Tiers TOML file")

    p = sub.add_parser("synth-data", help="Generate a synthetic dataset container")
    common(p)
    p.add_argument("--kind", choices=[k.value for k in SyntheticKind], default="blobs")
    p.add_argument("--samples", type=int, required=True, help="Number of images")
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--size", type=int, default=16, help="Image height and width")
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--out", required=True, help="Container file")

    p = sub.add_parser("report", help="Export trace and rank CSVs from a checkpoint")
    common(p, seed=False)
    p.add_argument("--checkpoints", required=True, help="Checkpoint file or run directory")
    p.add_argument("--out", required=True, help="Output directory")

    return parser


def load_settings(args: argparse.Namespace) -> WorkbenchSettings:
    settings = create_settings(config_file=args.config)
    updates: Dict[str, Any] = {}
    data_update: Dict[str, Any] = {}
    if getattr(args, "data", None):
        data_update["train"] = Path(args.data)
    if getattr(args, "split", None) is not None:
        data_update["split"] = args.split
    if data_update:
        updates["data"] = {**settings.data.model_dump(), **data_update}
    search_update: Dict[str, Any] = {}
    if args.command == "search" and args.epochs is not None:
        search_update["epochs"] = args.epochs
    if getattr(args, "early_stop", None) is not None:
        search_update["early_stop"] = args.early_stop
    if search_update:
        updates["search"] = {**settings.search.model_dump(), **search_update}
    if args.command in ("retrain", "evaluate") and args.epochs is not None:
        updates["retrain"] = {**settings.retrain.model_dump(), "epochs": args.epochs}
    if not updates:
        return settings
    return WorkbenchSettings.model_validate({**settings.model_dump(), **updates})


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main CLI entry point; returns the process exit status."""
    parser = build_parser()
    args = parser.parse_args(argv)

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s: %(message)s",
        stream=sys.stderr,
    )

    try:
        if args.command == "synth-data":
            path = synth_data(
                args.kind,
                args.samples,
                args.classes,
                args.noise,
                seed_or(args.seed, 0),
                args.size,
                args.channels,
                Path(args.out),
            )
            logger.info(f"Dataset written to {path}")
            return 0

        bench = Workbench(load_settings(args))
        if args.command == "search":
            path = bench.search(args.seed, Path(args.out), Path(args.resume) if args.resume else None)
        elif args.command == "sample":
            seed = seed_or(args.seed, bench.settings.evaluation.seed)
            path = bench.sample(args.checkpoints, args.samples, seed, Path(args.out), args.argmax)
        elif args.command == "retrain":
            path = bench.retrain(Path(args.arch), seed_or(args.seed, bench.settings.retrain.seed), Path(args.out))
        elif args.command == "evaluate":
            if args.tier and not args.tiers:
                parser.error("--tier needs --tiers")
            path = bench.evaluate(
                args.checkpoints,
                args.samples,
                args.tier,
                Path(args.tiers) if args.tiers else None,
                seed_or(args.seed, bench.settings.evaluation.seed),
                Path(args.out),
            )
        elif args.command == "derive-tiers":
            path = bench.derive_tiers(Path(args.sizes), Path(args.out))
        else:
            path = bench.report(args.checkpoints, Path(args.out))
    except (WorkbenchError,) + LIBRARY_ERRORS as e:
        logger.error(f"{args.command} failed: {e}")
        return 1

    logger.info(f"{args.command}: wrote {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
