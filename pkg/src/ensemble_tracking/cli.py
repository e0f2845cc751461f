"""
Command line interface.

    ensemble-tracking synth --output data/train --count 64
    ensemble-tracking train --checkpoint model.pt --config desk.cfg
    ensemble-tracking track --checkpoint model.pt --dataset data/test --results out/
    ensemble-tracking eval --dataset data/test --results out/ --mode ope
    ensemble-tracking gradcheck
    ensemble-tracking overlay --dataset data/test --results out/ --output figures/
    ensemble-tracking experiment --log run.log --count 64

Every command prints a machine-readable `key=value` summary.
"""
from __future__ import annotations

import dataclasses
import logging
import sys
from contextlib import suppress
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import fire
from fire.core import FireExit

from ._session import TrackingSession
from .config import Settings, load_settings
from .evaluation import (
    EvalRecord,
    compute_ope_metrics,
    compute_presence_metrics,
    mean_iou_rate,
    reacquisition_rate,
    read_results,
    render_overlay,
    to_rows,
    write_results,
)
from .exceptions import EvaluationError, TrackingError, UsageError
from .experiments import (
    ablation_experiment,
    append_run_log,
    behavior_experiment,
    ensemble_size_experiment,
    training_experiment,
)
from .gradcheck import run_gradcheck_suite
from .model import EnsembleTracker
from .synthetic import (
    GROUNDTRUTH_FILE,
    generate_dataset,
    read_annotations,
    read_dataset,
    read_sequence,
    write_dataset,
)
from .training import Trainer, load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(levelname)s %(filename)s %(message)s"
EVAL_MODES = ("ope", "oxuva", "votlt")
EVAL_USAGE = "ensemble-tracking eval --dataset DATASET --results RESULTS [--mode ope|oxuva|votlt]"


def _emit(summary: Dict[str, Any]):
    for key, value in summary.items():
        if isinstance(value, float):
            value = f"{value:.6f}"
        print(f"{key}={value}")


class Commands:
    """Train, run and evaluate the ensemble tracker."""

    def __init__(
        self,
        config: Optional[str] = None,
        seed: Optional[int] = None,
        theta: Optional[float] = None,
        temporal_transfer: Optional[bool] = None,
        verbose: bool = False,
    ):
        logging.basicConfig(format=LOG_FORMAT, level=logging.DEBUG if verbose else logging.INFO)

        overrides: Dict[str, Any] = {}
        if seed is not None:
            overrides.update(seed=int(seed), world_seed=int(seed))
        if theta is not None:
            overrides["theta"] = float(theta)
        if temporal_transfer is not None:
            overrides["temporal_transfer"] = bool(temporal_transfer)
        self._settings = load_settings(config, overrides)

    @property
    def settings(self) -> Settings:
        return self._settings

    def synth(self, output: str, count: int = 8, length: Optional[int] = None):
        """Generate a synthetic dataset."""
        world = self.settings.world
        if length is not None:
            world = dataclasses.replace(world, sequence_length=int(length))

        sequences = generate_dataset(world, int(count))
        write_dataset(sequences, output)
        _emit(
            {
                "sequences": len(sequences),
                "frames": sum(len(frames) for frames in sequences.values()),
                "output": output,
            }
        )

    def train(
        self,
        checkpoint: str,
        dataset: Optional[str] = None,
        epochs: Optional[int] = None,
        log: Optional[str] = None,
    ):
        """Train from scratch on a stored dataset, or on freshly generated sequences."""
        training = self.settings.training
        if epochs is not None:
            training = dataclasses.replace(training, epochs=int(epochs))

        sequences = list(read_dataset(dataset).values()) if dataset else None
        model = EnsembleTracker(self.settings.model)
        trainer = Trainer(model, training, self.settings.world, log_path=log, progress=True)
        losses = trainer.fit(sequences)
        save_checkpoint(model, checkpoint)

        _emit(
            {
                "epochs": len(losses),
                "steps": trainer.step,
                "first_epoch_loss": losses[0] if losses else float("nan"),
                "last_epoch_loss": losses[-1] if losses else float("nan"),
                "checkpoint": checkpoint,
            }
        )

    def track(self, checkpoint: str, dataset: str, results: str):
        """Run a checkpoint over every sequence of a dataset and write one results file each."""
        model = load_checkpoint(checkpoint)
        session = TrackingSession(model, self.settings.runtime)
        output = Path(results)
        output.mkdir(parents=True, exist_ok=True)

        frame_count = 0
        sequences = read_dataset(dataset)
        for name, frames in sequences.items():
            logger.info("tracking %s (%d frames)", name, len(frames))
            track_results = session.run(frames)
            write_results(output / f"{name}.txt", to_rows(track_results, frames[0].size))
            frame_count += len(track_results)

        _emit({"sequences": len(sequences), "frames": frame_count, "results": results})

    def eval(self, dataset: str, results: str, mode: str = "ope"):
        """Compute metrics from results files and the dataset annotations."""
        if mode not in EVAL_MODES:
            raise UsageError(f"unknown mode {mode!r}, expected ope, oxuva or votlt", EVAL_USAGE)

        records = _load_records(Path(dataset), Path(results))
        if mode == "ope":
            metrics = compute_ope_metrics(records)._asdict()
            metrics["iou_rate"] = mean_iou_rate(records)
        else:
            metrics = compute_presence_metrics(records, mode)._asdict()
        with suppress(EvaluationError):
            metrics["reacquisition_rate"] = reacquisition_rate(records)

        _emit({"mode": mode, "sequences": len(records), **metrics})

    def gradcheck(self, tol: float = 1e-4):
        """Finite-difference check of every differentiable primitive; fails on any mismatch."""
        seed = self.settings.training.seed
        reports = run_gradcheck_suite(seed=seed, tol=float(tol))
        summary: Dict[str, Any] = {}
        for report in reports:
            summary[f"{report.name}.max_rel_err"] = f"{report.max_rel_err:.3e}"
            summary[f"{report.name}.passed"] = int(report.passed)
        failed = [report.name for report in reports if not report.passed]
        summary["passed"] = int(not failed)
        _emit(summary)

        if failed:
            raise TrackingError("gradient check failed", failed)

    def overlay(
        self, dataset: str, results: str, output: str, sequence: Optional[str] = None
    ):
        """Draw predicted and ground truth boxes onto the frames of one or all sequences."""
        dataset_path, results_path = Path(dataset), Path(results)
        names = [sequence] if sequence else _sequence_names(dataset_path)

        written = 0
        for name in names:
            frames = read_sequence(dataset_path / name)
            rows = read_results(results_path / f"{name}.txt")
            written += len(render_overlay(frames, rows, Path(output) / name))
        _emit({"sequences": len(names), "images": written, "output": output})

    def experiment(
        self,
        log: str,
        count: int = 64,
        held_out: int = 16,
        seeds: int = 3,
        ablation: bool = True,
        sweep: bool = False,
    ):
        """
        Run the desk-scale training, behavior and ablation experiments on synthetic data.

        `--sweep` adds the ensemble size and memory length sweep. The achieved values are
        appended to `log`, one line per experiment.
        """
        model, trained = training_experiment(self.settings, int(count))
        results = [trained, behavior_experiment(model, self.settings, int(held_out))]
        if ablation:
            seed = self.settings.training.seed
            ablation_seeds = range(seed, seed + int(seeds))
            results.append(
                ablation_experiment(self.settings, int(count), ablation_seeds, int(held_out))
            )
        if sweep:
            results.append(
                ensemble_size_experiment(self.settings, int(count), held_out=int(held_out))
            )
        append_run_log(log, results)

        summary: Dict[str, Any] = {}
        for result in results:
            summary.update((f"{result.name}.{key}", value) for key, value in result.values.items())
            summary[f"{result.name}.met"] = int(result.met)
        _emit({**summary, "log": log})


def _sequence_names(dataset: Path) -> List[str]:
    if not dataset.is_dir():
        raise EvaluationError("dataset directory does not exist", str(dataset))
    return sorted(d.name for d in dataset.iterdir() if (d / GROUNDTRUTH_FILE).is_file())


def _load_records(dataset: Path, results: Path) -> List[EvalRecord]:
    records = []
    for name in _sequence_names(dataset):
        annotations = read_annotations(dataset / name / GROUNDTRUTH_FILE)
        rows = read_results(results / f"{name}.txt")
        records.append(EvalRecord.from_rows(rows, annotations))
    if not records:
        raise EvaluationError("dataset holds no sequences", str(dataset))
    return records


def run_cli(argv: Optional[Sequence[str]] = None) -> int:
    """Run one command; returns the process exit code."""
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        fire.Fire(Commands, command=argv, name="ensemble-tracking")
    except FireExit as error:
        return int(error.code or 0)
    except UsageError as error:
        logger.error("%s", error.args[0])
        print(f"Usage: {error.args[-1]}", file=sys.stderr)
        return 2
    except TrackingError as error:
        logger.error("%s: %s", type(error).__name__, error)
        return 1
    return 0


def main():
    sys.exit(run_cli())
