"""Training loop, validation-based checkpoint selection and evaluation runs."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import codec, data, metrics
from .model import Csrn, CsrnConfig, count_params
from .optim import AdamState, LrSchedule, adam_step
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)


class DataError(ValueError):
    pass


class DivergenceError(RuntimeError):
    """Training loss went non-finite; carries the last good checkpoint path."""

    def __init__(self, message: str, checkpoint_path):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


@dataclass
class TrainConfig:
    model: CsrnConfig
    data_root: str | None = None
    out_dir: str = "."
    epochs: int = 100
    batch_size: int = 16
    schedule: LrSchedule = field(default_factory=LrSchedule)
    seed: int = 42
    patch_size: int = 96
    crop_stride: int = 96

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch size must be >= 1")


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    seconds: float


@dataclass
class TrainLog:
    entries: list[EpochStats] = field(default_factory=list)

    @property
    def best_epoch(self) -> int:
        if not self.entries:
            raise ValueError("empty training log")
        return min(self.entries, key=lambda e: e.val_loss).epoch

    def to_csv(self, include_timing: bool = True) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "val_loss", "lr", "seconds"])
        for e in self.entries:
            seconds = f"{e.seconds:.3f}" if include_timing else ""
            writer.writerow([e.epoch, f"{e.train_loss:.10e}", f"{e.val_loss:.10e}",
                             f"{e.lr:.6e}", seconds])
        return buf.getvalue()

    def write(self, path, include_timing: bool = True) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_csv(include_timing))


def _train_step(model: Csrn, batch: Tensor, state: AdamState, lr: float) -> float:
    tape = Tape()
    live = model.lift(tape)
    x_i, x_f = model.forward(batch, live)
    loss = metrics.csrn_loss(batch, x_i, x_f)
    node_grads = tape.backward(loss)
    grads = {name: node_grads[t.node_id].data for name, t in live.items()}
    model.params = adam_step(model.params, grads, state, lr)
    return loss.item()


def _validation_loss(model: Csrn, patches: list[data.Patch], batch_size: int) -> float:
    total = 0.0
    count = 0
    for start in range(0, len(patches), batch_size):
        chunk = [p.data for p in patches[start : start + batch_size]]
        x = Tensor(np.stack(chunk)[:, None, :, :].astype(np.float32))
        x_i, x_f = model.forward(x)
        total += metrics.csrn_loss(x, x_i, x_f).item() * len(chunk)
        count += len(chunk)
    return total / count


def train(
    config: TrainConfig,
    train_patches: list[data.Patch] | None = None,
    val_patches: list[data.Patch] | None = None,
) -> tuple[Csrn, TrainLog, Path]:
    """Run the full protocol and return (best model, log, best checkpoint path).

    Patch lists may be passed directly (tests, overfit runs); otherwise they
    are loaded from ``<data_root>/train`` and ``<data_root>/val``.
    """
    if train_patches is None:
        if config.data_root is None:
            raise DataError("either a data root or explicit patches is required")
        train_patches = data.load_split(config.data_root, "train",
                                        size=config.patch_size, stride=config.crop_stride)
        val_patches = data.load_split(config.data_root, "val",
                                      size=config.patch_size, stride=config.crop_stride)
    if not train_patches:
        raise DataError("empty training set")
    if not val_patches:
        val_patches = train_patches

    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    best_path = out_dir / "best.ckpt"

    model = Csrn.build(config.model, seed=config.seed, dtype=np.float32)
    state = AdamState()
    log_obj = TrainLog()
    best_val = math.inf

    for epoch in range(config.epochs):
        lr = config.schedule.at_epoch(epoch)
        started = time.perf_counter()
        losses = []
        for batch in data.batches(train_patches, config.batch_size, config.seed, epoch):
            step_loss = _train_step(model, batch, state, lr)
            if not math.isfinite(step_loss):
                raise DivergenceError(
                    f"non-finite training loss at epoch {epoch}",
                    best_path if best_path.exists() else None,
                )
            losses.append(step_loss)
        if not losses:
            raise DataError(
                f"batch size {config.batch_size} exceeds the training set size"
            )
        val_loss = _validation_loss(model, val_patches, config.batch_size)
        elapsed = time.perf_counter() - started
        log_obj.entries.append(
            EpochStats(epoch, float(np.mean(losses)), val_loss, lr, elapsed)
        )
        if val_loss < best_val:
            best_val = val_loss
            codec.save_checkpoint(
                model, best_path,
                codec.CheckpointMeta(seed=config.seed, epoch=epoch, val_loss=val_loss),
            )
        log.info("epoch %d: train %.6g val %.6g lr %.2e (%.1fs)",
                 epoch, log_obj.entries[-1].train_loss, val_loss, lr, elapsed)

    best_model, _ = codec.load_checkpoint(best_path)
    log_obj.write(out_dir / "train_log.csv")
    return best_model, log_obj, best_path


def evaluate(model: Csrn, dataset_dir, out_csv=None, identity: bool = False,
             quantize: bool = False) -> metrics.QualityReport:
    """Per-image PSNR/SSIM of decode(encode(img)) against the ground truth.

    ``identity`` bypasses the model (sanity path); ``quantize`` rounds the
    reconstruction to 8-bit levels before scoring.
    """
    dataset_dir = Path(dataset_dir)
    paths = sorted(
        p for p in dataset_dir.rglob("*") if p.suffix.lower() in data.IMAGE_SUFFIXES
    )
    if not paths:
        raise DataError(f"no images found under {dataset_dir}")
    report = metrics.QualityReport()
    for path in paths:
        try:
            luma = data.rgb_to_luma(data.load_image(path))
        except (OSError, data.ImageFormatError) as exc:
            log.warning("skipping unreadable image %s: %s", path, exc)
            continue
        if identity:
            recon = luma
        else:
            recon = codec.decode(model, codec.encode(model, luma))
        if quantize:
            recon = np.round(recon * 255.0) / 255.0
        report.append(path.name, metrics.psnr(luma, recon), metrics.ssim(luma, recon))
    if out_csv is not None:
        report.write(out_csv)
    return report


VARIANTS = {
    "progressive": {},
    "simple": {"progressive_init": False},
    "rb": {"use_rrfm": False},
    "no-fcm": {"use_fcm": False},
}


def variant_config(base: CsrnConfig, variant: str) -> CsrnConfig:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; pick one of {sorted(VARIANTS)}")
    return replace(base, **VARIANTS[variant])


def ablation_run(
    base: TrainConfig,
    variant: str,
    train_patches: list[data.Patch] | None = None,
    val_patches: list[data.Patch] | None = None,
) -> dict:
    """Train the base and one variant under identical seed/data order."""
    var_model = variant_config(base.model, variant)
    base_dir = Path(base.out_dir)
    base_cfg = replace(base, out_dir=str(base_dir / "base"))
    var_cfg = replace(base, model=var_model, out_dir=str(base_dir / variant))
    _, base_log, base_ckpt = train(base_cfg, train_patches, val_patches)
    _, var_log, var_ckpt = train(var_cfg, train_patches, val_patches)
    return {
        "base_log": base_log,
        "variant_log": var_log,
        "base_checkpoint": base_ckpt,
        "variant_checkpoint": var_ckpt,
        "base_params": count_params(base.model),
        "variant_params": count_params(var_model),
    }
