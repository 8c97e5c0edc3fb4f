"""Flat key = value run configuration.

One text format serves the config files, the CLI, and the checkpoint
config block: UTF-8 lines of ``key = value``, blank lines and ``#``
comments allowed, unknown keys rejected. Serialization emits every key in
schema order with canonical formatting, so equal configs produce identical
bytes.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path
from typing import Tuple

from .errors import ConfigError
from .generator import BOTTLENECK_SIZE, GeneratorConfig


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class RunConfig:
    """Everything a training or inference run needs."""

    # architecture
    input_size: int = 256
    base_channels: int = 16
    channel_multiplier: int = 1
    fusion_layers: str = "auto"        # "auto" | "none" | "all" | comma list of resolutions
    transfer_layer: str = "auto"       # "auto" | "none" | resolution
    transfer_patch: int = 0            # 0 = one eighth of the transfer layer
    transfer_stride: int = 0           # 0 = one thirty-second of the transfer layer
    fusion_attn_scale: float = 1.0
    transfer_attn_scale: float = 1.0
    fusion_masked_norm: bool = False
    transfer_content_mode: str = "flatten"
    compose_mode: str = "residual"
    norm_eps: float = 1e-5
    # optimization
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 4
    epochs: int = 140
    decay_epoch: int = 120
    decay_factor: float = 0.1
    min_fg_area: float = 100.0
    max_steps: int = 0                 # 0 = no cap
    early_stop_fmse: float = 0.0       # 0 = off; stop once train fMSE drops below
    seed: int = 0
    # data and augmentation
    augment: bool = True
    flip_prob: float = 0.5
    resize_scale: float = 1.125
    quantize_metrics: bool = False
    data_manifest: str = ""
    synth_samples: int = 0
    synth_size: int = 0                # 0 = input_size
    mask_cover_min: float = 0.05
    mask_cover_max: float = 0.40
    pert_gain_min: float = 0.6
    pert_gain_max: float = 1.4
    pert_bias_min: float = -0.15
    pert_bias_max: float = 0.15
    pert_gamma_min: float = 0.7
    pert_gamma_max: float = 1.4
    pert_sat_min: float = 0.6
    pert_sat_max: float = 1.4
    # output
    out_dir: str = "runs/latest"

    # ------------------------------------------------------------------

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        known = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, _, value = line.partition("=")
            key = key.strip()
            value = value.strip()
            if key not in known:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            if key in values:
                raise ConfigError(f"line {lineno}: duplicate key {key!r}")
            values[key] = (lineno, value)

        kwargs = {}
        for f in fields(cls):
            if f.name not in values:
                continue
            lineno, raw_value = values[f.name]
            try:
                if f.type in ("int", int):
                    kwargs[f.name] = int(raw_value)
                elif f.type in ("float", float):
                    kwargs[f.name] = float(raw_value)
                elif f.type in ("bool", bool):
                    kwargs[f.name] = _parse_bool(raw_value)
                else:
                    kwargs[f.name] = raw_value
            except ValueError as exc:
                raise ConfigError(f"line {lineno}: bad value for {f.name!r}: {exc}") from exc
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        return cls.from_text(path.read_text(encoding="utf-8"))

    def to_text(self) -> str:
        lines = [f"{f.name} = {_format_value(getattr(self, f.name))}" for f in fields(self)]
        return "\n".join(lines) + "\n"

    # ------------------------------------------------------------------

    def resolved_fusion_layers(self) -> Tuple[int, ...]:
        spec = self.fusion_layers.strip().lower()
        if spec == "none":
            return ()
        if spec == "auto":
            return (max(BOTTLENECK_SIZE, self.input_size // 8),)
        if spec == "all":
            raw = (self.input_size // 16, self.input_size // 8, self.input_size // 4)
            return tuple(sorted({max(BOTTLENECK_SIZE, r) for r in raw}))
        try:
            return tuple(sorted({int(tok) for tok in spec.split(",") if tok.strip()}))
        except ValueError as exc:
            raise ConfigError(f"bad fusion_layers value {self.fusion_layers!r}") from exc

    def resolved_transfer_layer(self) -> int:
        spec = self.transfer_layer.strip().lower()
        if spec == "none":
            return 0
        if spec == "auto":
            return self.input_size // 2
        try:
            return int(spec)
        except ValueError as exc:
            raise ConfigError(f"bad transfer_layer value {self.transfer_layer!r}") from exc

    def to_generator_config(self) -> GeneratorConfig:
        transfer = self.resolved_transfer_layer()
        patch = self.transfer_patch or (max(1, transfer // 8) if transfer else 1)
        stride = self.transfer_stride or (max(1, transfer // 32) if transfer else 1)
        cfg = GeneratorConfig(
            input_size=self.input_size,
            base_channels=self.base_channels,
            channel_multiplier=self.channel_multiplier,
            fusion_layers=self.resolved_fusion_layers(),
            transfer_layer=transfer,
            transfer_patch=patch,
            transfer_stride=stride,
            fusion_attn_scale=self.fusion_attn_scale,
            transfer_attn_scale=self.transfer_attn_scale,
            fusion_masked_norm=self.fusion_masked_norm,
            transfer_content_mode=self.transfer_content_mode,
            compose_mode=self.compose_mode,
            norm_eps=self.norm_eps,
            seed=self.seed,
        )
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.epochs < 0 or self.max_steps < 0:
            raise ConfigError("epochs and max_steps cannot be negative")
        if self.decay_epoch < 1:
            raise ConfigError("decay_epoch must be >= 1")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigError("flip_prob must lie in [0, 1]")
        if self.resize_scale < 1.0:
            raise ConfigError("resize_scale must be >= 1")
        if not 0.0 < self.mask_cover_min <= self.mask_cover_max < 1.0:
            raise ConfigError("mask coverage bounds must satisfy 0 < min <= max < 1")
        for lo, hi, name in (
            (self.pert_gain_min, self.pert_gain_max, "gain"),
            (self.pert_bias_min, self.pert_bias_max, "bias"),
            (self.pert_gamma_min, self.pert_gamma_max, "gamma"),
            (self.pert_sat_min, self.pert_sat_max, "saturation"),
        ):
            if lo > hi:
                raise ConfigError(f"perturbation {name} range is inverted")
        # resolve placements now so bad geometry fails at load time
        self.to_generator_config()

    def synth_image_size(self) -> int:
        return self.synth_size or self.input_size
