"""Foreground/background mask handling across feature resolutions."""
from __future__ import annotations

import numpy as np

from .errors import ValidationError


def validate_binary(mask: np.ndarray, name: str = "mask") -> None:
    if not np.all((mask == 0) | (mask == 1)):
        raise ValidationError(f"{name} must be binary {{0, 1}}")


def downsample_mask(mask: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Nearest-neighbor resample of an (n, 1, h, w) binary mask, then 0.5 threshold.

    Nearest sampling keeps values in {0, 1}; the threshold only matters if a
    caller hands in a fractional mask.
    """
    n, c, h, w = mask.shape
    if (h, w) == (target_h, target_w):
        out = mask.copy()
    else:
        rows = np.minimum((np.arange(target_h) + 0.5) * (h / target_h), h - 1).astype(np.intp)
        cols = np.minimum((np.arange(target_w) + 0.5) * (w / target_w), w - 1).astype(np.intp)
        out = mask[:, :, rows][:, :, :, cols]
    return (out >= 0.5).astype(mask.dtype)


class MaskPair:
    """A binary foreground mask with its derived background complement."""

    def __init__(self, foreground: np.ndarray):
        fg = np.asarray(foreground)
        if fg.ndim == 2:
            fg = fg[None, None]
        elif fg.ndim == 3:
            fg = fg[:, None]
        if fg.ndim != 4 or fg.shape[1] != 1:
            raise ValidationError(f"mask must be (n, 1, h, w), got {foreground.shape}")
        validate_binary(fg)
        self.foreground = fg

    @property
    def background(self) -> np.ndarray:
        return 1.0 - self.foreground

    @property
    def shape(self):
        return self.foreground.shape

    def at_resolution(self, h: int, w: int) -> "MaskPair":
        return MaskPair(downsample_mask(self.foreground, h, w))

    def sample(self, index: int) -> "MaskPair":
        return MaskPair(self.foreground[index : index + 1])

    def coverage(self) -> float:
        return float(self.foreground.mean())
