"""Coarse appearance translation on deep, low-resolution features.

Each foreground grid location is matched against every background location
by dot-product similarity and replaced with a fusion of itself and the
similarity-weighted combination of background features. The preamble is a
self-attention layer followed by (whole-frame) instance normalization; the
only learned weight after the preamble is the fusion linear that maps the
concatenated [foreground, matched-background] token back to the channel
width.

Background locations of the output keep their post-preamble values
exactly; degenerate masks (no foreground, or no background) short-circuit.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from . import tensor as T
from .layers import (
    LinearLayer,
    SelfAttentionLayer,
    from_tokens,
    instance_norm,
    masked_instance_norm,
    to_tokens,
)
from .masks import MaskPair
from .tensor import ParamStore, Tensor


@dataclass
class TokenSplit:
    """Foreground/background token rows of one feature map plus their grid indices."""

    fg_tokens: Tensor          # (L_f, c)
    bg_tokens: Tensor          # (L_b, c)
    fg_index: np.ndarray       # flat grid positions, row-major
    bg_index: np.ndarray

    @property
    def fg_count(self) -> int:
        return len(self.fg_index)

    @property
    def bg_count(self) -> int:
        return len(self.bg_index)


def split_tokens(features: Tensor, mask: MaskPair) -> TokenSplit:
    """Partition a (1, c, h, w) feature map into foreground and background tokens.

    Every grid location lands in exactly one side; scattering the two sides
    back by their indices reproduces the input bit-exact.
    """
    _, c, h, w = features.shape
    flat = mask.foreground.reshape(-1)
    if flat.size != h * w:
        raise ValueError(f"mask resolution {mask.shape} does not match features {features.shape}")
    fg_index = np.flatnonzero(flat == 1)
    bg_index = np.flatnonzero(flat == 0)
    tokens = to_tokens(features)
    return TokenSplit(
        fg_tokens=T.take_rows(tokens, fg_index),
        bg_tokens=T.take_rows(tokens, bg_index),
        fg_index=fg_index,
        bg_index=bg_index,
    )


class LocationFusion:
    """Attention-based fusion of foreground locations with related background ones."""

    def __init__(self, channels: int, store: ParamStore, name: str,
                 rng: np.random.Generator, dtype=np.float32,
                 attn_scale: float = 1.0, masked_norm: bool = False,
                 norm_eps: float = 1e-5):
        self.channels = channels
        self.attn_scale = attn_scale
        self.masked_norm = masked_norm
        self.norm_eps = norm_eps
        self.attention = SelfAttentionLayer(channels, store, f"{name}.preattn", rng, dtype)
        self.fuse = LinearLayer(2 * channels, channels, store, f"{name}.fuse", rng, dtype)
        # per-sample (L_f, L_b) attention of the last forward, for visualization
        self.last_attention: List[Optional[np.ndarray]] = []
        self.last_indices: List[Optional[TokenSplit]] = []

    def __call__(self, features: Tensor, mask: MaskPair) -> Tensor:
        n = features.shape[0]
        self.last_attention = [None] * n
        self.last_indices = [None] * n
        outs = []
        for i in range(n):
            fi = T.take_rows(features, np.array([i])) if n > 1 else features
            outs.append(self._forward_sample(fi, mask.sample(i), i))
        return outs[0] if n == 1 else T.concat(outs, axis=0)

    def _forward_sample(self, fi: Tensor, mask: MaskPair, slot: int) -> Tensor:
        shape = fi.shape
        fg_total = int(mask.foreground.sum())
        if fg_total == 0:
            return fi  # nothing to harmonize

        mixed = self.attention(fi)
        if self.masked_norm:
            normed = masked_instance_norm(mixed, Tensor(mask.foreground.astype(fi.dtype)),
                                          eps=self.norm_eps)
        else:
            normed = instance_norm(mixed, eps=self.norm_eps)

        split = split_tokens(normed, mask)
        self.last_indices[slot] = split
        if split.bg_count == 0:
            return normed  # whole frame is foreground: no references to pull from

        logits = T.matmul(split.fg_tokens, split.bg_tokens.T)
        if self.attn_scale != 1.0:
            logits = logits * self.attn_scale
        attn = T.softmax_rows(logits)
        self.last_attention[slot] = attn.data.copy()

        matched = T.matmul(attn, split.bg_tokens)
        fused = self.fuse(T.concat([split.fg_tokens, matched], axis=1))
        tokens_out = T.scatter_rows(to_tokens(normed), split.fg_index, fused)
        return from_tokens(tokens_out, shape)
