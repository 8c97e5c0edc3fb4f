"""Residual harmonization generator.

A U-Net over the 4-channel (image, mask) input: stride-2 convolution
encoder stages down to an 8x8 bottleneck, a mirrored decoder of
nearest-upsample + convolution stages with skip concatenations. The
location-fusion module sits on deep decoder features (default: one eighth
of the input size, clamped to the bottleneck), the patch-transfer module
on high-resolution decoder features (default: half the input size). The
3-channel head is zero-initialized and predicts a residual, so an
untrained model is the identity harmonizer and the background is preserved
bit-exact by construction: output = image + residual * mask.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .errors import ConfigError, ValidationError
from .layers import LEAKY_SLOPE, Conv2dLayer, InstanceNorm2d
from .location_fusion import LocationFusion
from .masks import MaskPair
from .patch_transfer import PatchTransfer
from .tensor import ParamStore, Tensor

BOTTLENECK_SIZE = 8
MAX_CHANNEL_FACTOR = 8


def _is_power_of_two(v: int) -> bool:
    return v >= 1 and (v & (v - 1)) == 0


@dataclass
class GeneratorConfig:
    """Architecture knobs; ``auto`` derives the placement family from the input size."""

    input_size: int = 256
    base_channels: int = 16
    channel_multiplier: int = 1
    fusion_layers: Tuple[int, ...] = (32,)
    transfer_layer: int = 128          # 0 disables the patch-transfer module
    transfer_patch: int = 16
    transfer_stride: int = 4
    fusion_attn_scale: float = 1.0
    transfer_attn_scale: float = 1.0
    fusion_masked_norm: bool = False
    transfer_content_mode: str = "flatten"
    compose_mode: str = "residual"
    norm_eps: float = 1e-5
    seed: int = 0

    @classmethod
    def auto(cls, input_size: int, **overrides) -> "GeneratorConfig":
        """Scale every placement by the same ratios the defaults use at 256."""
        fusion = overrides.pop("fusion_layers", None)
        transfer = overrides.pop("transfer_layer", None)
        if fusion is None:
            fusion = (max(BOTTLENECK_SIZE, input_size // 8),)
        if transfer is None:
            transfer = input_size // 2
        patch = overrides.pop("transfer_patch", None)
        stride = overrides.pop("transfer_stride", None)
        if patch is None:
            patch = max(1, transfer // 8) if transfer else 1
        if stride is None:
            stride = max(1, transfer // 32) if transfer else 1
        return cls(input_size=input_size, fusion_layers=tuple(fusion),
                   transfer_layer=transfer, transfer_patch=patch,
                   transfer_stride=stride, **overrides)

    @property
    def depth(self) -> int:
        return int(math.log2(self.input_size // BOTTLENECK_SIZE))

    def ladder_resolutions(self) -> List[int]:
        """Bottleneck plus decoder stage outputs, shallow to deep order reversed."""
        d = self.depth
        return [self.input_size // (1 << (d - j)) for j in range(d + 1)]

    def validate(self) -> None:
        if self.input_size % 32 != 0:
            raise ConfigError(f"input_size must be divisible by 32, got {self.input_size}")
        if not _is_power_of_two(self.input_size // BOTTLENECK_SIZE):
            raise ConfigError(
                f"input_size / {BOTTLENECK_SIZE} must be a power of two, got {self.input_size}"
            )
        if self.base_channels < 1 or self.channel_multiplier < 1:
            raise ConfigError("channel counts must be positive")
        ladder = set(self.ladder_resolutions())
        for res in self.fusion_layers:
            if res not in ladder:
                raise ConfigError(
                    f"fusion layer {res} not in decoder ladder {sorted(ladder)}"
                )
        if self.transfer_layer:
            if self.transfer_layer not in ladder:
                raise ConfigError(
                    f"transfer layer {self.transfer_layer} not in decoder ladder {sorted(ladder)}"
                )
            if not (1 <= self.transfer_patch <= self.transfer_layer):
                raise ConfigError(
                    f"transfer patch {self.transfer_patch} outside feature map "
                    f"{self.transfer_layer}"
                )
            if self.transfer_stride < 1:
                raise ConfigError("transfer stride must be >= 1")
        if self.compose_mode not in ("residual", "direct"):
            raise ConfigError(f"unknown compose mode {self.compose_mode!r}")
        if self.transfer_content_mode not in ("flatten", "pool"):
            raise ConfigError(f"unknown content mode {self.transfer_content_mode!r}")


@dataclass
class GeneratorOutput:
    output: Tensor
    residual: Tensor
    fusion_attention: Dict[int, List[Optional[np.ndarray]]] = field(default_factory=dict)
    transfer_attention: List[Optional[np.ndarray]] = field(default_factory=list)
    transfer_patches: list = field(default_factory=list)


def compose_residual(image: Tensor, residual: Tensor, mask) -> Tensor:
    """output = image + residual * mask; untouched (and bit-exact) where mask is 0."""
    if image.shape != residual.shape:
        raise ValidationError(f"shape mismatch {image.shape} vs {residual.shape}")
    return image + residual * mask


def compose_direct(image: Tensor, predicted: Tensor, mask) -> Tensor:
    """Baseline composition: predicted foreground pasted onto the real background."""
    if image.shape != predicted.shape:
        raise ValidationError(f"shape mismatch {image.shape} vs {predicted.shape}")
    mask_arr = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    return image * (1.0 - mask_arr) + predicted * mask_arr


class Generator:
    """U-Net harmonizer with attention-based appearance translation stages."""

    def __init__(self, config: GeneratorConfig, dtype=np.float32):
        config.validate()
        self.config = config
        self.dtype = dtype
        self.params = ParamStore()
        rng = np.random.default_rng(config.seed)

        c = config.base_channels * config.channel_multiplier
        d = config.depth
        self.stage_channels = [c * min(1 << i, MAX_CHANNEL_FACTOR) for i in range(d)]

        self.encoder: List[Tuple[Conv2dLayer, InstanceNorm2d]] = []
        in_ch = 4  # composite image plus mask plane
        for i, out_ch in enumerate(self.stage_channels):
            conv = Conv2dLayer(in_ch, out_ch, self.params, f"enc{i}", rng, dtype,
                               stride=2, pad=1)
            norm = InstanceNorm2d(out_ch, self.params, f"enc{i}.norm", dtype,
                                  eps=config.norm_eps)
            self.encoder.append((conv, norm))
            in_ch = out_ch

        deep = self.stage_channels[-1]
        self.bottleneck = (
            Conv2dLayer(deep, deep, self.params, "bottleneck", rng, dtype),
            InstanceNorm2d(deep, self.params, "bottleneck.norm", dtype, eps=config.norm_eps),
        )

        # decoder stage j produces resolution input / 2^(d-1-j)
        self.decoder: List[Tuple[Conv2dLayer, InstanceNorm2d]] = []
        self.decoder_resolutions: List[int] = []
        prev_ch = deep
        for j in range(d):
            res = config.input_size // (1 << (d - 1 - j))
            skip_ch = self.stage_channels[d - 2 - j] if j < d - 1 else 4
            out_ch = self.stage_channels[d - 2 - j] if j < d - 1 else self.stage_channels[0]
            conv = Conv2dLayer(prev_ch + skip_ch, out_ch, self.params, f"dec{j}", rng, dtype)
            norm = InstanceNorm2d(out_ch, self.params, f"dec{j}.norm", dtype,
                                  eps=config.norm_eps)
            self.decoder.append((conv, norm))
            self.decoder_resolutions.append(res)
            prev_ch = out_ch

        self.head = Conv2dLayer(self.stage_channels[0], 3, self.params, "head", rng,
                                dtype, zero_init=True)

        channel_at = {BOTTLENECK_SIZE: deep}
        for j, res in enumerate(self.decoder_resolutions):
            channel_at[res] = self.stage_channels[d - 2 - j] if j < d - 1 else self.stage_channels[0]

        self.fusion: Dict[int, LocationFusion] = {}
        for res in sorted(config.fusion_layers):
            self.fusion[res] = LocationFusion(
                channel_at[res], self.params, f"fusion{res}", rng, dtype,
                attn_scale=config.fusion_attn_scale,
                masked_norm=config.fusion_masked_norm,
                norm_eps=config.norm_eps,
            )
        self.transfer: Optional[PatchTransfer] = None
        if config.transfer_layer:
            self.transfer = PatchTransfer(
                channel_at[config.transfer_layer],
                (config.transfer_patch, config.transfer_patch),
                (config.transfer_stride, config.transfer_stride),
                self.params, "transfer", rng, dtype,
                attn_scale=config.transfer_attn_scale,
                content_mode=config.transfer_content_mode,
                norm_eps=config.norm_eps,
            )

    # ------------------------------------------------------------------

    def _validate_inputs(self, image: np.ndarray, mask: np.ndarray) -> None:
        size = self.config.input_size
        if image.ndim != 4 or image.shape[1] != 3:
            raise ValidationError(f"image must be (n, 3, h, w), got {image.shape}")
        if image.shape[2] != size or image.shape[3] != size:
            raise ValidationError(
                f"image spatial size {image.shape[2:]} does not match config {size}"
            )
        if mask.shape != (image.shape[0], 1, size, size):
            raise ValidationError(
                f"mask must be (n, 1, {size}, {size}), got {mask.shape}"
            )
        if not np.all((mask == 0) | (mask == 1)):
            raise ValidationError("mask must be binary {0, 1}")
        if image.min() < 0.0 or image.max() > 1.0:
            raise ValidationError("image values must lie in [0, 1]")

    def forward(self, image, mask) -> GeneratorOutput:
        image_t = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=self.dtype))
        mask_arr = mask.data if isinstance(mask, Tensor) else np.asarray(mask, dtype=self.dtype)
        self._validate_inputs(image_t.data, mask_arr)
        pair = MaskPair(mask_arr)
        cfg = self.config

        x0 = T.concat([image_t, Tensor(mask_arr.astype(self.dtype))], axis=1)
        skips = []
        x = x0
        for conv, norm in self.encoder:
            x = T.leaky_relu(norm(conv(x)), LEAKY_SLOPE)
            skips.append(x)

        conv, norm = self.bottleneck
        x = T.leaky_relu(norm(conv(x)), LEAKY_SLOPE)

        out = GeneratorOutput(output=x, residual=x)
        x = self._apply_modules(x, BOTTLENECK_SIZE, pair, out)

        d = cfg.depth
        for j, (conv, norm) in enumerate(self.decoder):
            res = self.decoder_resolutions[j]
            x = T.upsample_nearest(x, 2)
            skip = skips[d - 2 - j] if j < d - 1 else x0
            x = T.concat([x, skip], axis=1)
            x = T.leaky_relu(norm(conv(x)), LEAKY_SLOPE)
            x = self._apply_modules(x, res, pair, out)

        residual = self.head(x)
        if cfg.compose_mode == "residual":
            output = compose_residual(image_t, residual, Tensor(mask_arr))
        else:
            output = compose_direct(image_t, residual, mask_arr)
        out.output = output
        out.residual = residual
        return out

    def _apply_modules(self, x: Tensor, res: int, pair: MaskPair,
                       out: GeneratorOutput) -> Tensor:
        if res in self.fusion:
            level = pair.at_resolution(res, res)
            x = self.fusion[res](x, level)
            out.fusion_attention[res] = list(self.fusion[res].last_attention)
        if self.transfer is not None and res == self.config.transfer_layer:
            level = pair.at_resolution(res, res)
            x = self.transfer(x, level)
            out.transfer_attention = list(self.transfer.last_attention)
            out.transfer_patches = list(self.transfer.last_patches)
        return x

    def parameter_count(self) -> int:
        return self.params.size()
