"""Small convolutional backbone with effective output stride 8, plus the
stride-4/stride-8 feature fusion that feeds the recognizer.

Detection runs on the stride-8 tap only; recognition needs denser features,
so the stride-8 map is projected to 128 channels, upsampled, and added to
the projected stride-4 map (no activation after the addition).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class BackboneConfig:
    channels: tuple[int, ...] = (32, 64, 128, 128)
    strides: tuple[int, ...] = (2, 2, 2, 1)
    dilations: tuple[int, ...] = (1, 1, 1, 2)
    convs_per_block: int = 2
    norm_groups: int = 8
    fusion_channels: int = 128

    def __post_init__(self):
        if not len(self.channels) == len(self.strides) == len(self.dilations):
            raise ValueError("channels, strides, dilations must align")


@dataclass
class FeatureBundle:
    """det_features: [C_det, H/8, W/8]; rec_features: [128, H/4, W/4]."""

    det_features: torch.Tensor
    rec_features: torch.Tensor


def _layer_specs(config: BackboneConfig):
    """Flatten the block structure into (kernel, stride, dilation) triples,
    tagging the stride-4 and stride-8 tap points."""
    layers = []
    stride_so_far = 1
    tap4 = tap8 = -1
    for b, (ch, st, dil) in enumerate(
            zip(config.channels, config.strides, config.dilations)):
        for c in range(config.convs_per_block):
            layers.append((3, st if c == 0 else 1, dil))
        stride_so_far *= st
        if stride_so_far == 4 and tap4 < 0:
            tap4 = len(layers) - 1
        if stride_so_far == 8 and b == len(config.channels) - 1:
            tap8 = len(layers) - 1
    if tap4 < 0 or tap8 < 0:
        raise ValueError("config does not produce stride-4 and stride-8 taps")
    return layers, tap4, tap8


def receptive_field_of_layers(layers) -> int:
    """Receptive field of a conv stack given (kernel, stride, dilation)
    triples: rf += (effective_kernel - 1) * jump, then jump *= stride, with
    effective_kernel = dilation * (kernel - 1) + 1."""
    rf, jump = 1, 1
    for k, st, dil in layers:
        k_eff = dil * (k - 1) + 1
        rf = rf + (k_eff - 1) * jump
        jump *= st
    return rf


def receptive_field(config: BackboneConfig) -> tuple[int, int]:
    """Analytic receptive fields (pixels) of the stride-4 and stride-8 taps."""
    layers, tap4, tap8 = _layer_specs(config)
    return (receptive_field_of_layers(layers[:tap4 + 1]),
            receptive_field_of_layers(layers[:tap8 + 1]))


class Backbone(nn.Module):
    """Four conv blocks (stride 2, 2, 2, 1; dilation 2 in the last block)
    exposing a stride-4 tap and a stride-8 tap, fused for recognition."""

    def __init__(self, config: BackboneConfig | None = None):
        super().__init__()
        self.config = config or BackboneConfig()
        cfg = self.config
        layers, self._tap4, self._tap8 = _layer_specs(cfg)
        convs = []
        in_ch = 3
        li = 0
        self._tap4_channels = None
        for ch, st, dil in zip(cfg.channels, cfg.strides, cfg.dilations):
            for c in range(cfg.convs_per_block):
                stride = st if c == 0 else 1
                convs.append(nn.Sequential(
                    nn.Conv2d(in_ch, ch, 3, stride=stride, padding=dil,
                              dilation=dil, bias=False),
                    nn.GroupNorm(min(cfg.norm_groups, ch), ch),
                    nn.ReLU(inplace=True),
                ))
                in_ch = ch
                if li == self._tap4:
                    self._tap4_channels = ch
                li += 1
        self.convs = nn.ModuleList(convs)
        self.det_channels = cfg.channels[-1]
        # 1x1 projections feeding the additive fusion; bias-free so the
        # fusion stage is exactly linear
        self.project4 = nn.Conv2d(self._tap4_channels, cfg.fusion_channels, 1,
                                  bias=False)
        self.project8 = nn.Conv2d(self.det_channels, cfg.fusion_channels, 1,
                                  bias=False)

    def fuse(self, tap4: torch.Tensor, tap8: torch.Tensor) -> torch.Tensor:
        up = F.interpolate(self.project8(tap8), size=tap4.shape[-2:],
                           mode="bilinear", align_corners=False)
        return self.project4(tap4) + up

    def forward(self, image: torch.Tensor) -> FeatureBundle:
        """image: [B, 3, H, W] with H, W >= 32 and divisible by 4."""
        h, w = image.shape[-2:]
        if h < 32 or w < 32:
            raise ValueError(f"image must be at least 32x32, got {h}x{w}")
        if h % 4 or w % 4:
            raise ValueError(f"image dims must be divisible by 4, got {h}x{w}")
        x = image
        tap4 = None
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i == self._tap4:
                tap4 = x
        det = x
        rec = self.fuse(tap4, det)
        return FeatureBundle(det_features=det, rec_features=rec)


def pad_to_multiple(image: torch.Tensor, multiple: int = 4) -> torch.Tensor:
    """Zero-pad H and W on the bottom/right up to the next multiple."""
    h, w = image.shape[-2:]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph or pw:
        image = F.pad(image, (0, pw, 0, ph))
    return image
