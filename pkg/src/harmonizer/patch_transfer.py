"""Fine appearance translation on high-resolution features.

The background is cut into overlapping blocks. Each block is summarized
twice: an appearance token (masked per-channel mean and std) and a content
token (the block normalized within its own masked region, then squeezed to
the channel width by a shared linear projection). Each foreground
location, normalized over the whole foreground region, selects a convex
combination of block appearances by content similarity and is re-colored
as content * std + mean, so the structure survives while the local look is
borrowed from matching background regions.

Blocks with zero background coverage are dropped. If every block is
dropped while background pixels exist (possible only when the sliding grid
does not reach them), the whole background acts as a single pseudo-block,
which reduces the transfer to a global moment match. Background locations
always pass through bit-exact; an empty foreground is the identity.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from . import tensor as T
from .errors import EmptyPatchSetError
from .layers import LinearLayer, from_tokens, masked_instance_norm, to_tokens
from .masks import MaskPair
from .tensor import ParamStore, Tensor


@dataclass
class PatchSet:
    """Retained background blocks with their statistics and grid bookkeeping."""

    blocks: Tensor              # (k, c, p_h, p_w) background-masked crops
    patch_masks: np.ndarray     # (k, 1, p_h, p_w) binary coverage of each crop
    mean: Tensor                # (k, c) appearance means
    std: Tensor                 # (k, c) appearance stds (epsilon-floored)
    content: Tensor             # (k, c) content tokens
    origins: List[Tuple[int, int]]
    grid: Tuple[int, int]       # window grid before coverage filtering
    candidates: int             # window count before coverage filtering

    @property
    def count(self) -> int:
        return len(self.origins)


def _sliding_mask_windows(mask: np.ndarray, patch, stride) -> np.ndarray:
    """(1, 1, h, w) -> (k, 1, p_h, p_w) crops in the extract_windows order."""
    p_h, p_w = patch
    s_h, s_w = stride
    m = mask[0, 0]
    h, w = m.shape
    n_h = (h - p_h) // s_h + 1
    n_w = (w - p_w) // s_w + 1
    s0, s1 = m.strides
    view = np.lib.stride_tricks.as_strided(
        m, shape=(n_h, n_w, p_h, p_w), strides=(s0 * s_h, s1 * s_w, s0, s1), writeable=False
    )
    return view.reshape(n_h * n_w, 1, p_h, p_w)


def extract_patches(features: Tensor, background: np.ndarray, patch, stride,
                    project: Optional[LinearLayer], eps: float = 1e-5,
                    content_mode: str = "flatten") -> PatchSet:
    """Cut background-masked features into overlapping blocks with statistics.

    ``background`` is the (1, 1, h, w) binary background mask at feature
    resolution. Blocks whose mask crop has zero coverage are dropped;
    dropping all of them raises EmptyPatchSetError.
    """
    _, c, h, w = features.shape
    p_h, p_w = patch
    masked_bg = features * background.astype(features.dtype)
    mask_windows = _sliding_mask_windows(background, patch, stride)
    coverage = mask_windows.sum(axis=(1, 2, 3))
    keep = np.flatnonzero(coverage > 0)
    grid, origins = T.window_grid((h, w), patch, stride)
    candidates = mask_windows.shape[0]
    if len(keep) == 0:
        raise EmptyPatchSetError(
            f"all {candidates} candidate blocks have zero background coverage"
        )

    windows = T.extract_windows(masked_bg, patch, stride)
    blocks = T.take_rows(windows, keep) if len(keep) < candidates else windows
    patch_masks = np.ascontiguousarray(mask_windows[keep])
    k = len(keep)

    masks_t = Tensor(patch_masks.astype(features.dtype))
    mean, std = T.masked_moments(blocks, masks_t, eps=eps)
    normed = masked_instance_norm(blocks, masks_t, eps=eps)
    if content_mode == "flatten":
        content = project(normed.reshape(k, c * p_h * p_w))
    elif content_mode == "pool":
        counts = patch_masks.sum(axis=(2, 3))  # (k, 1)
        pooled = (normed * masks_t).sum(axis=(2, 3)) * (1.0 / counts).astype(features.dtype)
        content = project(pooled)
    else:
        raise ValueError(f"unknown content mode {content_mode!r}")

    return PatchSet(
        blocks=blocks,
        patch_masks=patch_masks,
        mean=mean,
        std=std,
        content=content,
        origins=[origins[i] for i in keep],
        grid=grid,
        candidates=candidates,
    )


class PatchTransfer:
    """Appearance transfer from content-matched background blocks to foreground locations."""

    def __init__(self, channels: int, patch, stride, store: ParamStore, name: str,
                 rng: np.random.Generator, dtype=np.float32, attn_scale: float = 1.0,
                 content_mode: str = "flatten", norm_eps: float = 1e-5):
        self.channels = channels
        self.patch = tuple(patch)
        self.stride = tuple(stride)
        self.attn_scale = attn_scale
        self.content_mode = content_mode
        self.norm_eps = norm_eps
        in_features = channels * self.patch[0] * self.patch[1] if content_mode == "flatten" else channels
        self.project = LinearLayer(in_features, channels, store, f"{name}.project", rng, dtype)
        # visualization state from the last forward, one slot per batch sample
        self.last_attention: List[Optional[np.ndarray]] = []
        self.last_patches: List[Optional[PatchSet]] = []

    def __call__(self, features: Tensor, mask: MaskPair) -> Tensor:
        n = features.shape[0]
        self.last_attention = [None] * n
        self.last_patches = [None] * n
        outs = []
        for i in range(n):
            fi = T.take_rows(features, np.array([i])) if n > 1 else features
            outs.append(self._forward_sample(fi, mask.sample(i), i))
        return outs[0] if n == 1 else T.concat(outs, axis=0)

    def _forward_sample(self, fi: Tensor, mask: MaskPair, slot: int) -> Tensor:
        shape = fi.shape
        _, c, h, w = shape
        fg_mask = mask.foreground
        fg_index = np.flatnonzero(fg_mask.reshape(-1) == 1)
        if len(fg_index) == 0:
            return fi

        bg_mask = mask.background
        patches: Optional[PatchSet] = None
        if float(bg_mask.sum()) == 0.0:
            return fi  # no background anywhere: nothing to borrow appearance from
        try:
            patches = extract_patches(fi, bg_mask, self.patch, self.stride,
                                      self.project, eps=self.norm_eps,
                                      content_mode=self.content_mode)
            appearance_mean, appearance_std = patches.mean, patches.std
            content_keys = patches.content
        except EmptyPatchSetError:
            # background exists but the block grid missed it: treat the whole
            # background as one pseudo-block (global moment transfer)
            mean, std = T.masked_moments(fi, Tensor(bg_mask.astype(fi.dtype)), eps=self.norm_eps)
            appearance_mean, appearance_std = mean, std
            content_keys = Tensor(np.zeros((1, c), dtype=fi.data.dtype))

        fg_tensor = Tensor(fg_mask.astype(fi.dtype))
        normed_map = masked_instance_norm(fi, fg_tensor, eps=self.norm_eps)
        fg_content = T.take_rows(to_tokens(normed_map), fg_index)

        logits = T.matmul(fg_content, content_keys.T)
        if self.attn_scale != 1.0:
            logits = logits * self.attn_scale
        attn = T.softmax_rows(logits)
        self.last_attention[slot] = attn.data.copy()
        self.last_patches[slot] = patches

        indexed_mean = T.matmul(attn, appearance_mean)
        indexed_std = T.matmul(attn, appearance_std)
        translated = fg_content * indexed_std + indexed_mean

        tokens_out = T.scatter_rows(to_tokens(fi), fg_index, translated)
        return from_tokens(tokens_out, shape)


def contribution_map(attention: np.ndarray, patches: Optional[PatchSet],
                     feature_size: Tuple[int, int]) -> np.ndarray:
    """Accumulate attention mass per background pixel, min-max normalized.

    Every retained block spreads the total attention it received (summed
    over all foreground locations) across its covered background pixels.
    Foreground pixels receive nothing.
    """
    h, w = feature_size
    heat = np.zeros((h, w))
    if patches is None or attention is None:
        return heat
    mass = attention.sum(axis=0)
    p_h, p_w = patches.patch_masks.shape[2:]
    for n, (y, x) in enumerate(patches.origins):
        heat[y : y + p_h, x : x + p_w] += mass[n] * patches.patch_masks[n, 0]
    lo, hi = heat.min(), heat.max()
    if hi > lo:
        heat = (heat - lo) / (hi - lo)
    return heat
