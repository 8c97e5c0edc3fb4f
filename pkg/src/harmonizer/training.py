"""Loss, optimizer, metrics, and the training loop."""
from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .config import RunConfig
from .data import (
    AugmentConfig,
    BatchLoader,
    Sample,
    load_manifest,
    resize_sample,
    stack_samples,
    synthetic_samples,
)
from .errors import ConfigError, EmptyRegionError, NonFiniteGradientError, ValidationError
from .generator import Generator
from .tensor import GradTape, ParamStore, Tensor, no_grad

logger = logging.getLogger(__name__)

PEAK = 255.0


# ---------------------------------------------------------------------------
# loss


def foreground_mse_loss(pred: Tensor, target, mask, min_fg_area: float = 100.0) -> Tensor:
    """Squared error summed over the frame, normalized by the (floored) mask area.

    Computed per sample and averaged over the batch. The floor keeps tiny
    masks from blowing up the loss scale.
    """
    target_t = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=pred.dtype))
    mask_arr = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    if pred.shape != target_t.shape:
        raise ValidationError(f"loss shapes disagree: {pred.shape} vs {target_t.shape}")
    n = pred.shape[0]
    diff = pred - target_t
    per_sample = (diff * diff).sum(axis=(1, 2, 3))
    denom = np.maximum(min_fg_area, mask_arr.sum(axis=(1, 2, 3)))
    weights = (1.0 / (n * denom)).astype(pred.dtype)
    return (per_sample * weights).sum()


# ---------------------------------------------------------------------------
# optimizer and schedule


@dataclass
class Schedule:
    """Step-decay learning-rate schedule over 1-based epochs."""

    total_epochs: int
    decay_epoch: int
    decay_factor: float = 0.1

    def __post_init__(self):
        if not 0 < self.decay_epoch < self.total_epochs:
            raise ValidationError(
                f"decay_epoch must lie in (0, total_epochs), got "
                f"{self.decay_epoch} of {self.total_epochs}"
            )

    def factor(self, epoch: int) -> float:
        return self.decay_factor if epoch >= self.decay_epoch else 1.0


class Adam:
    """Bias-corrected Adam over a ParamStore."""

    def __init__(self, params: ParamStore, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params}
        self.v = {name: np.zeros_like(p.data) for name, p in params}

    def step(self, lr_scale: float = 1.0) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        alpha = self.lr * lr_scale
        for name, p in self.params:
            grad = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.isfinite(grad).all():
                raise NonFiniteGradientError(
                    f"non-finite gradient in {name!r} at step {self.t}"
                )
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * grad
            v *= b2
            v += (1.0 - b2) * grad * grad
            update = alpha * (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            p.data = p.data - update.astype(p.data.dtype)


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricsReport:
    """Image-quality numbers on the [0, 255] scale."""

    psnr: float
    mse: float
    fmse: float

    def to_dict(self) -> dict:
        return {
            "psnr": "inf" if math.isinf(self.psnr) else self.psnr,
            "mse": self.mse,
            "fmse": self.fmse,
        }


def metrics(pred, gt, mask, quantize: bool = False) -> MetricsReport:
    """MSE over the frame, foreground MSE, and PSNR for one image.

    Inputs are [0, 1] arrays shaped (3, h, w) with an (h, w) or (1, h, w)
    mask; values are converted to continuous [0, 255] (or quantized 8-bit
    when asked). Identical images report PSNR as +inf.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    mask_arr = np.asarray(mask, dtype=np.float64)
    if mask_arr.ndim == 3:
        mask_arr = mask_arr[0]
    if pred.shape != gt.shape:
        raise ValidationError(f"metric shapes disagree: {pred.shape} vs {gt.shape}")
    p = pred * PEAK
    g = gt * PEAK
    if quantize:
        p = np.floor(np.clip(p, 0, PEAK) + 0.5)
        g = np.floor(np.clip(g, 0, PEAK) + 0.5)
    sq = (p - g) ** 2
    mse = float(sq.mean())
    fg_count = float(mask_arr.sum())
    if fg_count == 0:
        raise EmptyRegionError("fMSE undefined for an empty mask")
    fmse = float((sq * mask_arr).sum() / (fg_count * pred.shape[0]))
    psnr = math.inf if mse == 0.0 else 10.0 * math.log10(PEAK * PEAK / mse)
    return MetricsReport(psnr=psnr, mse=mse, fmse=fmse)


def metrics_for_arrays(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray,
                       quantize: bool = False) -> List[MetricsReport]:
    return [metrics(pred[i], gt[i], mask[i], quantize) for i in range(pred.shape[0])]


def aggregate_metrics(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Plain per-sample means; an infinite PSNR propagates."""
    if not reports:
        raise ValidationError("no reports to aggregate")
    return MetricsReport(
        psnr=float(np.mean([r.psnr for r in reports])),
        mse=float(np.mean([r.mse for r in reports])),
        fmse=float(np.mean([r.fmse for r in reports])),
    )


def evaluate_model(gen: Generator, samples: Sequence[Sample], batch_size: int = 4,
                   quantize: bool = False) -> Tuple[MetricsReport, List[MetricsReport]]:
    """Forward every sample (no recording) and score outputs against ground truth."""
    comp, mask, gt = stack_samples(samples)
    reports: List[MetricsReport] = []
    with no_grad():
        for start in range(0, len(samples), batch_size):
            sl = slice(start, start + batch_size)
            out = gen.forward(comp[sl], mask[sl]).output.data
            reports.extend(metrics_for_arrays(out, gt[sl], mask[sl], quantize))
    return aggregate_metrics(reports), reports


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    checkpoint_path: Path
    log_path: Path
    records: List[dict] = field(default_factory=list)
    halted: bool = False
    halt_reason: str = ""
    steps: int = 0


def build_samples(cfg: RunConfig) -> List[Sample]:
    ranges = {
        "gain": (cfg.pert_gain_min, cfg.pert_gain_max),
        "bias": (cfg.pert_bias_min, cfg.pert_bias_max),
        "gamma": (cfg.pert_gamma_min, cfg.pert_gamma_max),
        "saturation": (cfg.pert_sat_min, cfg.pert_sat_max),
    }
    if cfg.data_manifest:
        path = Path(cfg.data_manifest)
        if not path.is_file():
            raise ConfigError(f"data manifest not found: {path}")
        samples = load_manifest(path, ranges)
    elif cfg.synth_samples > 0:
        samples = synthetic_samples(
            cfg.synth_samples, cfg.synth_image_size(), cfg.seed,
            ranges, (cfg.mask_cover_min, cfg.mask_cover_max),
        )
    else:
        raise ConfigError("no data source: set data_manifest or synth_samples")
    return [resize_sample(s, cfg.input_size) for s in samples]


def _prefetch_enabled() -> bool:
    try:
        return int(os.environ.get("HARMONY_THREADS", "1")) >= 2
    except ValueError:
        return False


def train(cfg: RunConfig, out_dir) -> TrainResult:
    """Run the configured training, writing a checkpoint and a JSONL log.

    One log line per epoch: epoch, lr, loss, psnr, mse, fmse, wall_ms.
    Everything except wall_ms is a pure function of the config and seed. A
    non-finite loss or gradient halts training and keeps the last
    epoch-end parameters.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    checkpoint_path = out_dir / "checkpoint.hkpt"
    log_path = out_dir / "train.log.jsonl"

    samples = build_samples(cfg)
    gen = Generator(cfg.to_generator_config(), dtype=np.float32)
    optimizer = Adam(gen.params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
                     eps=cfg.adam_eps)
    schedule = (
        Schedule(cfg.epochs, cfg.decay_epoch, cfg.decay_factor)
        if 0 < cfg.decay_epoch < cfg.epochs
        else None
    )
    loader = BatchLoader(
        samples, cfg.batch_size, cfg.input_size, cfg.seed,
        AugmentConfig(cfg.augment, cfg.resize_scale, cfg.flip_prob),
        prefetch=_prefetch_enabled(),
    )

    result = TrainResult(checkpoint_path=checkpoint_path, log_path=log_path)
    last_good = gen.params.state()
    steps = 0
    stop = False

    with open(log_path, "w", encoding="utf-8") as log_file:
        for epoch in range(1, cfg.epochs + 1):
            epoch_start = time.perf_counter()
            lr_scale = schedule.factor(epoch) if schedule else 1.0
            losses = []
            for comp, mask, gt in loader.epoch(epoch):
                gen.params.zero_grad()
                with GradTape() as tape:
                    out = gen.forward(comp, mask)
                    loss = foreground_mse_loss(out.output, gt, mask, cfg.min_fg_area)
                loss_value = float(loss.data)
                if not math.isfinite(loss_value):
                    result.halted = True
                    result.halt_reason = f"non-finite loss at step {steps + 1}"
                    break
                tape.backward(loss)
                try:
                    optimizer.step(lr_scale)
                except NonFiniteGradientError as exc:
                    result.halted = True
                    result.halt_reason = str(exc)
                    break
                losses.append(loss_value)
                steps += 1
                if cfg.max_steps and steps >= cfg.max_steps:
                    stop = True
                    break
            if result.halted:
                logger.error("training halted: %s", result.halt_reason)
                gen.params.load_state(last_good)
                break

            report, _ = evaluate_model(gen, samples, cfg.batch_size, cfg.quantize_metrics)
            wall_ms = int(round((time.perf_counter() - epoch_start) * 1000))
            record = {
                "epoch": epoch,
                "lr": cfg.lr * lr_scale,
                "loss": float(np.mean(losses)) if losses else 0.0,
                "psnr": "inf" if math.isinf(report.psnr) else report.psnr,
                "mse": report.mse,
                "fmse": report.fmse,
                "wall_ms": wall_ms,
            }
            log_file.write(json.dumps(record) + "\n")
            log_file.flush()
            result.records.append(record)
            last_good = gen.params.state()
            if cfg.early_stop_fmse and report.fmse < cfg.early_stop_fmse:
                logger.info("early stop: fMSE %.2f below %.2f", report.fmse, cfg.early_stop_fmse)
                break
            if stop:
                break

    result.steps = steps
    save_checkpoint(checkpoint_path, cfg.to_text(), gen.params)
    return result
