"""Image I/O, synthetic disharmony generation, and batch loading.

Ground-truth images are smooth random color fields; a sampled per-channel
gain/bias/gamma/saturation perturbation applied inside a random mask turns
each one into a (composite, mask, ground-truth) triple, so desk-scale
training needs no external dataset. Directories of real triples are
supported through a JSON-lines manifest.
"""
from __future__ import annotations

import json
import queue
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DecodeError, ValidationError

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])

DEFAULT_RANGES = {
    "gain": (0.6, 1.4),
    "bias": (-0.15, 0.15),
    "gamma": (0.7, 1.4),
    "saturation": (0.6, 1.4),
}
DEFAULT_COVERAGE = (0.05, 0.40)


# ---------------------------------------------------------------------------
# image files


def load_image(path) -> np.ndarray:
    """Decode an 8-bit RGB PNG into an (h, w, 3) float array in [0, 1]."""
    try:
        with Image.open(path) as img:
            rgb = img.convert("RGB")
            arr = np.asarray(rgb, dtype=np.float64)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise DecodeError(f"cannot decode image {path}: {exc}") from exc
    return arr / 255.0


def save_image(path, values: np.ndarray) -> None:
    """Encode [0, 1] values as 8-bit PNG; clamps, then rounds half up."""
    arr = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    quantized = np.floor(arr * 255.0 + 0.5).astype(np.uint8)
    if quantized.ndim == 2:
        img = Image.fromarray(quantized, mode="L")
    elif quantized.ndim == 3 and quantized.shape[2] == 3:
        img = Image.fromarray(quantized, mode="RGB")
    else:
        raise ValidationError(f"save_image expects (h, w) or (h, w, 3), got {values.shape}")
    img.save(path, format="PNG")


def load_mask(path) -> np.ndarray:
    """Decode a mask PNG to an (h, w) binary {0, 1} array (0.5 threshold)."""
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("L"), dtype=np.float64)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise DecodeError(f"cannot decode mask {path}: {exc}") from exc
    return (arr / 255.0 >= 0.5).astype(np.float64)


def to_chw(image_hw3: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(image_hw3.transpose(2, 0, 1))


def to_hw3(image_chw: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(image_chw.transpose(1, 2, 0))


# ---------------------------------------------------------------------------
# resampling


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Channel-last bilinear resize with half-pixel centers."""
    h, w = image.shape[:2]
    if (h, w) == (out_h, out_w):
        return image.copy()
    ys = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    if image.ndim == 3:
        wy = wy[..., None]
        wx = wx[..., None]
    top = image[y0][:, x0] * (1 - wx) + image[y0][:, x1] * wx
    bottom = image[y1][:, x0] * (1 - wx) + image[y1][:, x1] * wx
    return top * (1 - wy) + bottom * wy


def nearest_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = image.shape[:2]
    if (h, w) == (out_h, out_w):
        return image.copy()
    ys = np.minimum(((np.arange(out_h) + 0.5) * (h / out_h)).astype(np.intp), h - 1)
    xs = np.minimum(((np.arange(out_w) + 0.5) * (w / out_w)).astype(np.intp), w - 1)
    return image[ys][:, xs]


# ---------------------------------------------------------------------------
# synthetic data


def generate_mask(h: int, w: int, seed: int,
                  coverage: Tuple[float, float] = DEFAULT_COVERAGE) -> np.ndarray:
    """Random binary ellipse or rectangle covering a bounded frame fraction."""
    lo, hi = coverage
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(200):
        use_ellipse = rng.uniform() < 0.5
        cy = rng.uniform(0.2, 0.8) * h
        cx = rng.uniform(0.2, 0.8) * w
        ay = rng.uniform(0.08, 0.45) * h
        ax = rng.uniform(0.08, 0.45) * w
        if use_ellipse:
            mask = (((yy - cy) / ay) ** 2 + ((xx - cx) / ax) ** 2 <= 1.0)
        else:
            mask = (np.abs(yy - cy) <= ay) & (np.abs(xx - cx) <= ax)
        frac = mask.mean()
        if lo <= frac <= hi:
            return mask.astype(np.float64)
    # deterministic fallback: centered rectangle at the midpoint coverage
    side_frac = np.sqrt((lo + hi) / 2)
    ry, rx = int(h * side_frac / 2), int(w * side_frac / 2)
    mask = (np.abs(yy - h / 2) <= ry) & (np.abs(xx - w / 2) <= rx)
    return mask.astype(np.float64)


def random_gt_image(h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth random color field in [0, 1], channel-last."""
    coarse = bilinear_resize(rng.uniform(0.0, 1.0, size=(5, 5, 3)), h, w)
    detail = bilinear_resize(rng.uniform(-1.0, 1.0, size=(17, 17, 3)), h, w)
    img = 0.12 + 0.72 * coarse + 0.10 * detail
    return np.clip(img, 0.0, 1.0)


@dataclass
class PerturbationSpec:
    """Per-channel affine + gamma + saturation recipe for disharmonizing a foreground."""

    gain: np.ndarray         # (3,)
    bias: np.ndarray         # (3,)
    gamma: float
    saturation: float
    seed: Optional[int] = None

    @classmethod
    def identity(cls) -> "PerturbationSpec":
        return cls(gain=np.ones(3), bias=np.zeros(3), gamma=1.0, saturation=1.0)

    @classmethod
    def sample(cls, seed: int, ranges=None) -> "PerturbationSpec":
        ranges = ranges or DEFAULT_RANGES
        rng = np.random.default_rng(seed)
        return cls(
            gain=rng.uniform(*ranges["gain"], size=3),
            bias=rng.uniform(*ranges["bias"], size=3),
            gamma=float(rng.uniform(*ranges["gamma"])),
            saturation=float(rng.uniform(*ranges["saturation"])),
            seed=seed,
        )

    def is_identity(self) -> bool:
        return (
            np.all(self.gain == 1.0)
            and np.all(self.bias == 0.0)
            and self.gamma == 1.0
            and self.saturation == 1.0
        )


def synthesize_composite(gt: np.ndarray, mask: np.ndarray,
                         spec: PerturbationSpec) -> np.ndarray:
    """Apply the perturbation inside the mask; background stays bit-equal.

    ``gt`` is (h, w, 3) in [0, 1], ``mask`` is (h, w) binary and non-empty.
    """
    if mask.sum() == 0:
        raise ValidationError("synthesize_composite: empty mask rejected")
    if not np.all((mask == 0) | (mask == 1)):
        raise ValidationError("synthesize_composite: mask must be binary")
    transformed = spec.gain * np.power(gt, spec.gamma) + spec.bias
    luma = transformed @ LUMA_WEIGHTS
    transformed = luma[..., None] + spec.saturation * (transformed - luma[..., None])
    transformed = np.clip(transformed, 0.0, 1.0)
    composite = gt.copy()
    sel = mask == 1
    composite[sel] = transformed[sel]
    return composite


@dataclass
class Sample:
    """One training/eval example, channel-first."""

    name: str
    composite: np.ndarray    # (3, h, w)
    mask: np.ndarray         # (1, h, w)
    gt: np.ndarray           # (3, h, w)


def synthetic_samples(count: int, size: int, seed: int, ranges=None,
                      coverage: Tuple[float, float] = DEFAULT_COVERAGE) -> List[Sample]:
    """Deterministic list of synthesized (composite, mask, gt) triples."""
    samples = []
    for i in range(count):
        rng = np.random.default_rng([seed, 17, i])
        gt = random_gt_image(size, size, rng)
        mask = generate_mask(size, size, seed=int(rng.integers(1 << 31)), coverage=coverage)
        spec = PerturbationSpec.sample(int(rng.integers(1 << 31)), ranges)
        composite = synthesize_composite(gt, mask, spec)
        samples.append(Sample(
            name=f"synth{i:04d}",
            composite=to_chw(composite),
            mask=mask[None],
            gt=to_chw(gt),
        ))
    return samples


def write_synthetic_dataset(out_dir, count: int, size: int, seed: int,
                            ranges=None,
                            coverage: Tuple[float, float] = DEFAULT_COVERAGE) -> Path:
    """Materialize a synthetic dataset as PNGs plus a JSON-lines manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.jsonl"
    lines = []
    for sample in synthetic_samples(count, size, seed, ranges, coverage):
        gt_path = out_dir / f"{sample.name}_gt.png"
        mask_path = out_dir / f"{sample.name}_mask.png"
        comp_path = out_dir / f"{sample.name}_composite.png"
        save_image(gt_path, to_hw3(sample.gt))
        save_image(mask_path, sample.mask[0])
        save_image(comp_path, to_hw3(sample.composite))
        lines.append(json.dumps({
            "gt_path": gt_path.name,
            "mask_path": mask_path.name,
            "composite_path": comp_path.name,
        }))
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


def load_manifest(path, ranges=None) -> List[Sample]:
    """Load a JSON-lines manifest of {gt_path, mask_path, composite_path?, seed?}.

    Paths are relative to the manifest. When composite_path is absent the
    composite is synthesized on the fly from the line's seed (defaults to
    the line number).
    """
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"manifest not found: {path}")
    base = path.parent
    samples = []
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines()):
        line = raw.strip()
        if not line:
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}:{lineno + 1}: bad JSON: {exc}") from exc
        if "gt_path" not in record or "mask_path" not in record:
            raise ValidationError(f"{path}:{lineno + 1}: needs gt_path and mask_path")
        gt = load_image(base / record["gt_path"])
        mask = load_mask(base / record["mask_path"])
        if mask.shape != gt.shape[:2]:
            raise ValidationError(
                f"{path}:{lineno + 1}: mask size {mask.shape} != image {gt.shape[:2]}"
            )
        if "composite_path" in record and record["composite_path"]:
            composite = load_image(base / record["composite_path"])
        else:
            spec = PerturbationSpec.sample(int(record.get("seed", lineno)), ranges)
            composite = synthesize_composite(gt, mask, spec)
        samples.append(Sample(
            name=Path(record["gt_path"]).stem,
            composite=to_chw(composite),
            mask=mask[None],
            gt=to_chw(gt),
        ))
    return samples


def resize_sample(sample: Sample, size: int) -> Sample:
    """Bilinear image / nearest mask resize to a square target."""
    if sample.composite.shape[1:] == (size, size):
        return sample
    return Sample(
        name=sample.name,
        composite=to_chw(bilinear_resize(to_hw3(sample.composite), size, size)),
        mask=nearest_resize(sample.mask[0], size, size)[None],
        gt=to_chw(bilinear_resize(to_hw3(sample.gt), size, size)),
    )


# ---------------------------------------------------------------------------
# augmentation and batching


@dataclass
class AugmentConfig:
    enabled: bool = True
    resize_scale: float = 1.125
    flip_prob: float = 0.5


def augment_sample(sample: Sample, out_size: int, rng: np.random.Generator,
                   cfg: AugmentConfig) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Random crop after upscale, plus horizontal flip; one geometry for the triple."""
    if not cfg.enabled:
        return sample.composite, sample.mask, sample.gt
    big = max(out_size, int(round(out_size * cfg.resize_scale)))
    comp = bilinear_resize(to_hw3(sample.composite), big, big)
    gt = bilinear_resize(to_hw3(sample.gt), big, big)
    mask = nearest_resize(sample.mask[0], big, big)
    y0 = int(rng.integers(0, big - out_size + 1))
    x0 = int(rng.integers(0, big - out_size + 1))
    comp = comp[y0 : y0 + out_size, x0 : x0 + out_size]
    gt = gt[y0 : y0 + out_size, x0 : x0 + out_size]
    mask = mask[y0 : y0 + out_size, x0 : x0 + out_size]
    if rng.uniform() < cfg.flip_prob:
        comp = comp[:, ::-1]
        gt = gt[:, ::-1]
        mask = mask[:, ::-1]
    return to_chw(comp), np.ascontiguousarray(mask)[None], to_chw(gt)


class BatchLoader:
    """Deterministic batch iterator with optional one-thread prefetch.

    Sample order and augmentation parameters derive from (seed, epoch)
    only, so prefetching never changes the produced batches. The queue is
    bounded to two batches of read-ahead.
    """

    def __init__(self, samples: Sequence[Sample], batch_size: int, size: int,
                 seed: int, augment: AugmentConfig, prefetch: bool = False):
        if not samples:
            raise ValidationError("no samples to load")
        self.samples = list(samples)
        self.batch_size = batch_size
        self.size = size
        self.seed = seed
        self.augment = augment
        self.prefetch = prefetch

    def batches_per_epoch(self) -> int:
        return (len(self.samples) + self.batch_size - 1) // self.batch_size

    def _build(self, epoch: int):
        rng = np.random.default_rng([self.seed, 7919, epoch])
        order = rng.permutation(len(self.samples))
        for start in range(0, len(order), self.batch_size):
            chunk = order[start : start + self.batch_size]
            comps, masks, gts = [], [], []
            for idx in chunk:
                comp, mask, gt = augment_sample(self.samples[idx], self.size, rng, self.augment)
                comps.append(comp)
                masks.append(mask)
                gts.append(gt)
            yield (
                np.stack(comps).astype(np.float32),
                np.stack(masks).astype(np.float32),
                np.stack(gts).astype(np.float32),
            )

    def epoch(self, epoch: int) -> Iterator[Tuple[np.ndarray, np.ndarray, np.ndarray]]:
        if not self.prefetch:
            yield from self._build(epoch)
            return
        q: queue.Queue = queue.Queue(maxsize=2)
        done = object()

        def producer():
            for batch in self._build(epoch):
                q.put(batch)
            q.put(done)

        thread = threading.Thread(target=producer, daemon=True)
        thread.start()
        while True:
            item = q.get()
            if item is done:
                break
            yield item
        thread.join()


def stack_samples(samples: Sequence[Sample]):
    """Canonical un-augmented arrays for whole-set evaluation."""
    comp = np.stack([s.composite for s in samples]).astype(np.float32)
    mask = np.stack([s.mask for s in samples]).astype(np.float32)
    gt = np.stack([s.gt for s in samples]).astype(np.float32)
    return comp, mask, gt
