"""End-to-end stages behind the CLI: synthesize, train, predict, evaluate.

Seed derivation, all rooted at ``RunConfig.seed``:

* phantom ``i``:         ``(seed, "phantom", i)``
* network init:          ``(seed, "init")``
* training batch ``b``:  ``(seed, "train", epoch, b)``
* MC sample ``t``:       ``(seed, "mc", t)``
* anomaly ``a`` of case ``k``: ``(seed, "anomaly", k, a)``
* bootstrap:             ``(seed, "bootstrap")``
"""

from __future__ import annotations

import csv
import json
import logging
import os
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import unet
from .config import RunConfig
from .evaluation import EvalReport, insert_anomaly, threshold_sweep, write_report
from .inference import PredictiveOutput, predict, write_outputs
from .phantom import Dataset, Sample, generate_phantom
from .rng import RngStream
from .trainer import DivergenceError, TrainResult, train
from .volume import Volume, read_volume, write_volume

__all__ = [
    "DataError",
    "output_lock",
    "synthesize",
    "load_dataset",
    "train_model",
    "run_predict",
    "AnomalyCase",
    "run_evaluation",
    "evaluate",
    "MANIFEST",
]

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"


class DataError(RuntimeError):
    pass


@contextmanager
def output_lock(directory):
    """Exclusive ``.lock`` file in ``directory`` for the duration of a command."""
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {directory}: {exc}") from exc
    lock = directory / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError as exc:
        raise DataError(f"{directory} is locked by another run (remove {lock} if stale)") from exc
    except OSError as exc:
        raise DataError(f"cannot write to {directory}: {exc}") from exc
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield directory
    finally:
        lock.unlink(missing_ok=True)


def _data_dir(cfg: RunConfig) -> Path:
    return Path(cfg.output_dir) / "data"


def synthesize(cfg: RunConfig) -> Path:
    """Writes input/target/foreground SCIV files per phantom plus ``data/manifest.json``."""
    data_dir = _data_dir(cfg)
    try:
        data_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {data_dir}: {exc}") from exc
    root = RngStream(cfg.seed).child("phantom")
    n_train, n_val = cfg.data.n_train, cfg.data.n_val
    if n_train < 1 or n_val < 1:
        raise DataError(f"need n_train >= 1 and n_val >= 1, got {n_train}, {n_val}")
    entries = []
    for i in range(n_train + n_val):
        split = "train" if i < n_train else "validation"
        ph = generate_phantom(cfg.data.phantom, root.child(i), {"seed": cfg.seed, "index": i})
        files = {}
        for role, arr in (("input", ph.input), ("target", ph.target),
                          ("foreground", ph.foreground.astype(np.float32))):
            name = f"{i:03d}_{role}.sciv"
            write_volume(arr, data_dir / name)
            files[role] = name
        entries.append({"index": i, "split": split, "seed": cfg.seed, "files": files})
    manifest = {"format": "scibilic-dataset", "version": 1, "seed": cfg.seed,
                "phantom": cfg.to_dict()["data"]["phantom"], "volumes": entries}
    path = data_dir / MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_dataset(data_dir) -> Dataset:
    data_dir = Path(data_dir)
    path = data_dir / MANIFEST
    if not path.exists():
        raise DataError(f"dataset manifest not found: {path} (run `synthesize` first)")
    manifest = json.loads(path.read_text())
    ds = Dataset()
    for entry in manifest["volumes"]:
        f = entry["files"]
        try:
            vols = {role: np.asarray(read_volume(data_dir / f[role])) for role in ("input", "target", "foreground")}
        except (OSError, ValueError) as exc:
            raise DataError(f"volume {entry['index']}: {exc}") from exc
        sample = Sample(vols["input"], vols["target"], vols["foreground"] > 0.5, entry["index"])
        (ds.train if entry["split"] == "train" else ds.validation).append(sample)
    if not ds.train:
        raise DataError(f"{path} lists no training volumes")
    return ds


def train_model(cfg: RunConfig, dataset: Dataset | None = None) -> TrainResult:
    """Trains from ``(seed, "init")`` weights; writes ``checkpoint/`` and ``loss_history.csv``.

    On divergence the last best checkpoint is still written before re-raising.
    """
    out = Path(cfg.output_dir)
    dataset = dataset if dataset is not None else load_dataset(_data_dir(cfg))
    weights = unet.build_model(cfg.model, RngStream(cfg.seed).child("init"))
    try:
        result = train(weights, dataset, cfg.model, cfg.train)
    except (DivergenceError, unet.NonFiniteError) as exc:
        partial = getattr(exc, "result", None)
        if partial is not None:
            _write_training_outputs(out, cfg, partial)
        raise DivergenceError(str(exc), partial) from exc
    _write_training_outputs(out, cfg, result)
    return result


def _write_training_outputs(out: Path, cfg: RunConfig, result: TrainResult):
    unet.save_checkpoint(result.weights, cfg.model, out / "checkpoint",
                         extra={"best_epoch": result.best_epoch, "seed": cfg.seed})
    with open(out / "loss_history.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss"])
        for epoch, tr, va in result.history:
            w.writerow([epoch, repr(float(tr)), repr(float(va))])


def run_predict(cfg: RunConfig, checkpoint, input_path, out_dir=None) -> PredictiveOutput:
    weights, model_cfg, _ = unet.load_checkpoint(checkpoint)
    vol = read_volume(input_path)
    if vol.data.ndim != 2:
        raise DataError(f"{input_path}: expected a 2-D volume, got shape {vol.dims}")
    output = predict(weights, vol.data, cfg.mc, model_cfg)
    out_dir = Path(out_dir) if out_dir is not None else Path(cfg.output_dir) / "predict"
    write_outputs(output, out_dir)
    return output


@dataclass
class AnomalyCase:
    case_id: str
    placement: tuple
    side: int
    truth: np.ndarray
    foreground: np.ndarray
    output: PredictiveOutput

    def region_means(self, name: str):
        """Mean of a map inside the anomaly and over the rest of the foreground."""
        m = getattr(self.output, name)
        outside = self.foreground & ~self.truth
        return float(m[self.truth].mean()), float(m[outside].mean())


def run_evaluation(cfg: RunConfig, weights, model_cfg, validation) -> tuple[EvalReport, list]:
    """Inserts anomalies into each validation sample, runs MC prediction and the sweep."""
    if not validation:
        raise DataError("no validation volumes to evaluate")
    sw = cfg.sweep
    root = RngStream(cfg.seed).child("anomaly")
    cases = []
    for k, sample in enumerate(validation):
        side = max(1, int(round(sw.anomaly_side_fraction * sample.input.shape[1])))
        for a in range(sw.anomalies_per_case):
            case_id = f"val{sample.seed_index:03d}_a{a}"
            inst = insert_anomaly(sample.input, sample.foreground, side, root.child(k, a))
            output = predict(weights, inst.corrupted, cfg.mc, model_cfg)
            cases.append(AnomalyCase(case_id, inst.placement, side, inst.truth_mask, sample.foreground, output))
            log.info("case %s placed at %s", case_id, inst.placement)
    report = threshold_sweep(
        [(c.output.scibilic, c.truth, c.foreground if sw.normalize_region == "foreground" else None)
         for c in cases],
        sw.thresholds, sw.iou_thresholds,
        sw.resamples, sw.level, RngStream(cfg.seed).child("bootstrap"),
        case_ids=[c.case_id for c in cases], detection_binarization=sw.detection_binarization,
    )
    return report, cases


def _write_cases(path: Path, cases):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["case_id", "row", "col", "side", "epistemic_inside", "epistemic_outside",
                    "aleatoric_inside", "aleatoric_outside", "scibilic_inside", "scibilic_outside"])
        for c in cases:
            vals = [v for name in ("epistemic", "aleatoric", "scibilic") for v in c.region_means(name)]
            w.writerow([c.case_id, c.placement[0], c.placement[1], c.side, *[repr(v) for v in vals]])


def summarize(report: EvalReport) -> str:
    best_t, best_d = report.best
    return (f"cases: {len(report.case_ids)}\n"
            f"best mean dice: {best_d!r} at threshold {best_t!r}\n"
            f"detection rate at IoU 0.1 (binarization {report.detection_binarization!r}): "
            f"{report.detection_at(0.1)!r}\n")


def evaluate(cfg: RunConfig, checkpoint=None, dataset: Dataset | None = None, out_dir=None):
    checkpoint = Path(checkpoint) if checkpoint is not None else Path(cfg.output_dir) / "checkpoint"
    weights, model_cfg, _ = unet.load_checkpoint(checkpoint)
    dataset = dataset if dataset is not None else load_dataset(_data_dir(cfg))
    report, cases = run_evaluation(cfg, weights, model_cfg, dataset.validation)
    out_dir = Path(out_dir) if out_dir is not None else Path(cfg.output_dir) / "eval"
    write_report(report, out_dir)
    _write_cases(out_dir / "anomaly_cases.csv", cases)
    text = summarize(report)
    (out_dir / "summary.txt").write_text(text)
    return report, cases, text
