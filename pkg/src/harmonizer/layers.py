"""Reusable neural layers: linear maps, convolutions, instance norms,
and single-head self-attention over spatial tokens.

Normalization convention: instance norms inside the appearance-translation
modules carry no learnable affine (they act as content extractors, scale
and shift are re-injected explicitly downstream); backbone norms are plain
instance norm with affine. Weight init is Kaiming-uniform, biases zero.
"""
from __future__ import annotations

import logging
import math
from typing import Optional, Tuple

import numpy as np

from . import tensor as T
from .tensor import ParamStore, Tensor

logger = logging.getLogger(__name__)

LEAKY_SLOPE = 0.2


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, gain: float, dtype):
    bound = gain * math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def leaky_gain(slope: float = LEAKY_SLOPE) -> float:
    return math.sqrt(2.0 / (1.0 + slope * slope))


class LinearLayer:
    """Affine map on token rows: (rows, in) -> (rows, out)."""

    def __init__(self, in_features: int, out_features: int, store: ParamStore,
                 name: str, rng: np.random.Generator, dtype=np.float32,
                 gain: float = 1.0, zero_init: bool = False):
        if zero_init:
            w = np.zeros((out_features, in_features), dtype=dtype)
        else:
            w = kaiming_uniform(rng, (out_features, in_features), in_features, gain, dtype)
        self.weight = store.register(f"{name}.weight", w)
        self.bias = store.register(f"{name}.bias", np.zeros(out_features, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return T.matmul(x, self.weight.T) + self.bias


class Conv2dLayer:
    """3x3-style convolution with fixed stride/padding."""

    def __init__(self, in_channels: int, out_channels: int, store: ParamStore,
                 name: str, rng: np.random.Generator, dtype=np.float32,
                 kernel: int = 3, stride: int = 1, pad: int = 1,
                 gain: Optional[float] = None, zero_init: bool = False):
        self.stride = stride
        self.pad = pad
        fan_in = in_channels * kernel * kernel
        if zero_init:
            w = np.zeros((out_channels, in_channels, kernel, kernel), dtype=dtype)
        else:
            g = leaky_gain() if gain is None else gain
            w = kaiming_uniform(rng, (out_channels, in_channels, kernel, kernel), fan_in, g, dtype)
        self.weight = store.register(f"{name}.weight", w)
        self.bias = store.register(f"{name}.bias", np.zeros(out_channels, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero-mean unit-std per (sample, channel) over the spatial extent."""
    n, c, h, w = x.shape
    inv_count = 1.0 / (h * w)
    mean = x.sum(axis=(2, 3), keepdims=True) * inv_count
    dev = x - mean
    var = (dev * dev).sum(axis=(2, 3), keepdims=True) * inv_count
    return dev / T.sqrt(var + eps)


def masked_instance_norm(x: Tensor, mask, eps: float = 1e-5) -> Tensor:
    """Normalize inside the mask by the masked moments; pass the rest through.

    Locations with mask 0 keep their input values bit-exact. An empty mask
    degrades to the identity (logged) rather than raising, so batched
    callers can mix empty and non-empty samples.
    """
    mask_t = mask if isinstance(mask, Tensor) else Tensor(np.asarray(mask, dtype=x.dtype))
    m = mask_t.data
    if np.any(m.sum(axis=(2, 3)) == 0):
        logger.warning("masked_instance_norm: empty mask region, passing input through")
    n, c = x.shape[:2]
    mean, std = T.masked_moments(x, mask_t, eps=eps, empty="safe")
    normalized = (x - mean.reshape(n, c, 1, 1)) / std.reshape(n, c, 1, 1)
    return normalized * mask_t + x * (1.0 - m)


class InstanceNorm2d:
    """Backbone instance norm with learnable per-channel scale and shift."""

    def __init__(self, channels: int, store: ParamStore, name: str, dtype=np.float32,
                 eps: float = 1e-5):
        self.eps = eps
        self.scale = store.register(f"{name}.scale", np.ones(channels, dtype=dtype))
        self.shift = store.register(f"{name}.shift", np.zeros(channels, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        c = x.shape[1]
        normed = instance_norm(x, eps=self.eps)
        return normed * self.scale.reshape(1, c, 1, 1) + self.shift.reshape(1, c, 1, 1)


def to_tokens(x: Tensor) -> Tensor:
    """(1, c, h, w) feature map -> (h*w, c) token matrix, row-major grid order."""
    _, c, h, w = x.shape
    return x.reshape(c, h * w).T


def from_tokens(tokens: Tensor, shape: Tuple[int, int, int, int]) -> Tensor:
    """Inverse of to_tokens."""
    _, c, h, w = shape
    return tokens.T.reshape(1, c, h, w)


class SelfAttentionLayer:
    """Single-head scaled dot-product attention over all spatial tokens.

    Query/key/value and output projections are all channels -> channels;
    the result is added back to the input (residual form).
    """

    def __init__(self, channels: int, store: ParamStore, name: str,
                 rng: np.random.Generator, dtype=np.float32):
        self.channels = channels
        self.query = LinearLayer(channels, channels, store, f"{name}.query", rng, dtype)
        self.key = LinearLayer(channels, channels, store, f"{name}.key", rng, dtype)
        self.value = LinearLayer(channels, channels, store, f"{name}.value", rng, dtype)
        self.out = LinearLayer(channels, channels, store, f"{name}.out", rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        scale = 1.0 / math.sqrt(c)
        outs = []
        for i in range(n):
            xi = T.take_rows(x, np.array([i])) if n > 1 else x
            tokens = to_tokens(xi)
            q = self.query(tokens)
            k = self.key(tokens)
            v = self.value(tokens)
            attn = T.softmax_rows(T.matmul(q, k.T) * scale)
            mixed = self.out(T.matmul(attn, v))
            outs.append(xi + from_tokens(mixed, (1, c, h, w)))
        return outs[0] if n == 1 else T.concat(outs, axis=0)
