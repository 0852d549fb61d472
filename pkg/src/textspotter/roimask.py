"""Per-instance recognition features: crop the fused feature map by the
axis-aligned box, multiply by the instance mask, and resize so the shorter
side is 14 while preserving aspect ratio.

No rectification happens here: curved instances stay in image orientation
and the attention decoder is expected to follow the text path on its own.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .detector import crop_and_resize


@dataclass(frozen=True)
class RoiMaskConfig:
    short_side: int = 14
    long_side_cap: int = 140  # longer crops are squeezed to the cap
    supersample: int = 2  # intermediate crop at 2x, then area-resize down
    feature_stride: int = 4
    # masking uses the soft head output; set True to binarize at 0.5 instead
    binarize_mask: bool = False


@dataclass
class MaskedTextFeature:
    """grid: [C, h', w'] masked features with min(h', w') = short_side;
    flat: [J, C], row-major over (i, j)."""

    grid: torch.Tensor
    flat: torch.Tensor
    source_box: np.ndarray
    source_mask: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape[-2], self.grid.shape[-1]


@dataclass
class InstanceBatch:
    """Zero-padded batch of masked instance features for the decoder.

    Attention energies at padded cells must be forced to -inf so their
    weights are exactly zero; ``validity`` marks the real cells.
    """

    features: torch.Tensor  # [B, J_max, C]
    validity: torch.Tensor  # [B, J_max] bool
    shapes: list[tuple[int, int]]


def output_shape(box, config: RoiMaskConfig) -> tuple[int, int]:
    """Aspect-preserving (h', w') with short side fixed and long side capped."""
    x0, y0, x1, y1 = (float(v) for v in np.asarray(box).reshape(4))
    bw, bh = x1 - x0, y1 - y0
    s = config.short_side
    if bw >= bh:
        return s, int(np.clip(round(s * bw / bh), s, config.long_side_cap))
    return int(np.clip(round(s * bh / bw), s, config.long_side_cap)), s


def extract_instance(rec_features: torch.Tensor, box, mask,
                     mode: str = "infer",
                     config: RoiMaskConfig | None = None) -> MaskedTextFeature:
    """Crop, mask, and resize one text instance.

    rec_features: [C, H/4, W/4] fused features; box: (x0, y0, x1, y1) image
    pixels; mask: [28, 28] instance mask registered to box (ground truth in
    train mode, predicted in infer mode). The mask multiplies the cropped
    features at an intermediate 2x grid, then a 2x2 area resize brings the
    grid to its final shape.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    config = config or RoiMaskConfig()
    box_arr = np.asarray(box, dtype=np.float64).reshape(4)
    if (box_arr[2] - box_arr[0]) <= 0 or (box_arr[3] - box_arr[1]) <= 0:
        raise ValueError(f"zero-area box {box_arr.tolist()}")
    mask_arr = np.ascontiguousarray(mask, dtype=np.float64)
    if config.binarize_mask:
        mask_arr = (mask_arr >= 0.5).astype(np.float64)
    if mask_arr.max() <= 0.0:
        warnings.warn("instance mask is empty; emitting all-zero features")
    h_out, w_out = output_shape(box_arr, config)
    ss = config.supersample
    hi, wi = h_out * ss, w_out * ss
    crop = crop_and_resize(rec_features, box_arr[None], hi, wi,
                           stride=config.feature_stride)[0]
    mask_t = torch.as_tensor(mask_arr, dtype=rec_features.dtype,
                             device=rec_features.device)
    mh, mw = mask_t.shape
    mask_grid = crop_and_resize(mask_t[None], np.array([[0.0, 0.0, mw, mh]]),
                                hi, wi, stride=1.0)[0, 0]
    masked = crop * mask_grid[None]
    grid = F.avg_pool2d(masked[None], ss)[0] if ss > 1 else masked
    c = grid.shape[0]
    flat = grid.reshape(c, -1).transpose(0, 1)
    return MaskedTextFeature(grid=grid, flat=flat, source_box=box_arr,
                             source_mask=mask_arr)


def batch_instances(features: list[MaskedTextFeature]) -> InstanceBatch:
    """Zero-pad instance grids to the batch max (h', w')."""
    if not features:
        raise ValueError("batch_instances needs a nonempty list")
    shapes = [f.shape for f in features]
    hm = max(h for h, _ in shapes)
    wm = max(w for _, w in shapes)
    c = features[0].grid.shape[0]
    ref = features[0].grid
    feats = ref.new_zeros((len(features), hm * wm, c))
    valid = torch.zeros((len(features), hm * wm), dtype=torch.bool,
                        device=ref.device)
    for b, f in enumerate(features):
        h, w = f.shape
        padded = F.pad(f.grid, (0, wm - w, 0, hm - h))
        feats[b] = padded.reshape(c, -1).transpose(0, 1)
        vmask = torch.zeros((hm, wm), dtype=torch.bool, device=ref.device)
        vmask[:h, :w] = True
        valid[b] = vmask.reshape(-1)
    return InstanceBatch(features=feats, validity=valid, shapes=shapes)
