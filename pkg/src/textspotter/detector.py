"""Two-stage text detector: RPN proposals over a stride-8 anchor grid, then
per-RoI text/non-text, box refinement, and mask heads.

Three suppression stages: greedy box NMS on proposals, greedy box NMS on
refined boxes, and a final greedy NMS computing IoU on the predicted masks.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import RotatedRect, box_iou_matrix, box_nms


@dataclass(frozen=True)
class DetectorConfig:
    # desk-scale anchor scales; the original (64, 128, 256, 512) remain
    # selectable for large canvases
    anchor_scales: tuple[float, ...] = (16.0, 32.0, 64.0, 128.0)
    anchor_aspects: tuple[float, ...] = (0.5, 1.0, 2.0)
    stride: int = 8
    rpn_pre_nms_top_n: int = 1000
    rpn_post_nms_top_n: int = 300
    rpn_nms_iou: float = 0.7
    rpn_positive_iou: float = 0.7
    rpn_negative_iou: float = 0.3
    rpn_batch_size: int = 256
    rpn_positive_fraction: float = 0.5
    roi_batch_size: int = 64
    roi_positive_fraction: float = 0.25
    roi_positive_iou: float = 0.5
    add_gt_to_rois: bool = True
    refine_nms_iou: float = 0.7
    mask_top_n: int = 100
    mask_nms_iou: float = 0.5
    score_threshold: float = 0.5
    min_box_size: float = 1.0
    mask_size: int = 28


@dataclass
class Proposals:
    boxes: np.ndarray  # [K, 4] clipped to image bounds
    objectness: np.ndarray  # [K] in [0, 1], descending


@dataclass
class Detection:
    box: np.ndarray
    score: float
    mask: np.ndarray  # [28, 28] in [0, 1], registered to box
    polygon: np.ndarray | None = None
    rotated_rect: RotatedRect | None = None
    transcription: str | None = None
    symbol_confidences: list[float] | None = None


# ---------------------------------------------------------------------------
# anchors

def anchor_box(center: tuple[float, float], scale: float, aspect: float) -> np.ndarray:
    """Box of area scale^2 with h/w = aspect, centered at center."""
    w = scale / np.sqrt(aspect)
    h = scale * np.sqrt(aspect)
    cx, cy = center
    return np.array([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2],
                    dtype=np.float64)


def generate_anchors(image_shape: tuple[int, int],
                     scales=(16.0, 32.0, 64.0, 128.0),
                     aspects=(0.5, 1.0, 2.0), stride: int = 8) -> np.ndarray:
    """Anchor boxes on the stride-8 grid, row-major over cells, then
    scale-major / aspect-minor within each cell: [(H/8)*(W/8)*S*A, 4]."""
    if not len(scales) or not len(aspects):
        raise ValueError("scales and aspects must be nonempty")
    h, w = image_shape
    gh, gw = int(np.ceil(h / stride)), int(np.ceil(w / stride))
    cy, cx = np.meshgrid((np.arange(gh) + 0.5) * stride,
                         (np.arange(gw) + 0.5) * stride, indexing="ij")
    centers = np.stack([cx.ravel(), cy.ravel()], axis=1)  # [G, 2]
    cell = np.array([anchor_box((0.0, 0.0), s, a)
                     for s in scales for a in aspects])  # [S*A, 4]
    boxes = centers[:, None, [0, 1, 0, 1]] + cell[None, :, :]
    return boxes.reshape(-1, 4)


# ---------------------------------------------------------------------------
# box delta codec (standard R-CNN parameterization)

def _to_ctr(boxes: np.ndarray):
    b = np.asarray(boxes, dtype=np.float64)
    w = b[..., 2] - b[..., 0]
    h = b[..., 3] - b[..., 1]
    return b[..., 0] + w / 2, b[..., 1] + h / 2, w, h


def encode_box_delta(anchor: np.ndarray, target_box: np.ndarray) -> np.ndarray:
    ax, ay, aw, ah = _to_ctr(anchor)
    bx, by, bw, bh = _to_ctr(target_box)
    if np.any(aw <= 0) or np.any(ah <= 0):
        raise ValueError("anchor has non-positive width or height")
    return np.stack([(bx - ax) / aw, (by - ay) / ah,
                     np.log(bw / aw), np.log(bh / ah)], axis=-1)


def decode_box_delta(anchor: np.ndarray, delta: np.ndarray) -> np.ndarray:
    ax, ay, aw, ah = _to_ctr(anchor)
    if np.any(aw <= 0) or np.any(ah <= 0):
        raise ValueError("anchor has non-positive width or height")
    d = np.asarray(delta, dtype=np.float64)
    cx = ax + d[..., 0] * aw
    cy = ay + d[..., 1] * ah
    w = aw * np.exp(d[..., 2])
    h = ah * np.exp(d[..., 3])
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def clip_boxes(boxes: np.ndarray, image_shape: tuple[int, int]) -> np.ndarray:
    h, w = image_shape
    out = np.asarray(boxes, dtype=np.float64).copy()
    out[..., 0::2] = np.clip(out[..., 0::2], 0.0, w)
    out[..., 1::2] = np.clip(out[..., 1::2], 0.0, h)
    return out


# ---------------------------------------------------------------------------
# bilinear region sampling

def crop_and_resize(features: torch.Tensor, boxes, out_h: int, out_w: int,
                    stride: float = 1.0) -> torch.Tensor:
    """Bilinearly sample box regions of a [C, H, W] feature map.

    Output cell (i, j) samples the image point
    (x0 + (j + 0.5) * bw / out_w, y0 + (i + 0.5) * bh / out_h), converted to
    feature coordinates via x / stride - 0.5 (pixel-center alignment), with
    border clamping. Differentiable w.r.t. features. Returns [N, C, out_h, out_w].
    """
    c, height, width = features.shape
    boxes_t = torch.as_tensor(np.asarray(boxes, dtype=np.float64),
                              dtype=features.dtype,
                              device=features.device).reshape(-1, 4)
    n = boxes_t.shape[0]
    if n == 0:
        return features.new_zeros((0, c, out_h, out_w))
    x0, y0, x1, y1 = boxes_t.unbind(1)
    fj = (torch.arange(out_w, dtype=features.dtype, device=features.device) + 0.5) / out_w
    fi = (torch.arange(out_h, dtype=features.dtype, device=features.device) + 0.5) / out_h
    xs = x0[:, None] + fj[None, :] * (x1 - x0)[:, None]  # [N, W']
    ys = y0[:, None] + fi[None, :] * (y1 - y0)[:, None]  # [N, H']
    # normalized grid_sample coordinates with align_corners=False place
    # pixel centers at ((k + 0.5) / size) * 2 - 1, matching x/stride - 0.5
    gx = xs / (stride * width) * 2.0 - 1.0
    gy = ys / (stride * height) * 2.0 - 1.0
    grid = torch.stack([gx[:, None, :].expand(n, out_h, out_w),
                        gy[:, :, None].expand(n, out_h, out_w)], dim=-1)
    inp = features[None].expand(n, c, height, width)
    return F.grid_sample(inp, grid, mode="bilinear", padding_mode="border",
                         align_corners=False)


# ---------------------------------------------------------------------------
# network heads

class RPNHead(nn.Module):
    def __init__(self, in_channels: int, anchors_per_cell: int):
        super().__init__()
        self.conv = nn.Sequential(
            nn.Conv2d(in_channels, in_channels, 3, padding=1, bias=False),
            nn.GroupNorm(8, in_channels),
            nn.ReLU(inplace=True),
        )
        self.objectness = nn.Conv2d(in_channels, anchors_per_cell, 1)
        self.deltas = nn.Conv2d(in_channels, anchors_per_cell * 4, 1)

    def forward(self, det_features: torch.Tensor):
        """det_features: [C, H8, W8] -> (logits [A_total], deltas [A_total, 4])
        in generate_anchors order (row-major cells, anchor-minor)."""
        x = self.conv(det_features[None])
        logits = self.objectness(x)[0]
        deltas = self.deltas(x)[0]
        a = logits.shape[0]
        logits = logits.permute(1, 2, 0).reshape(-1)
        deltas = deltas.permute(1, 2, 0).reshape(-1, a, 4).reshape(-1, 4)
        return logits, deltas


class RoIHeads(nn.Module):
    """Crops each RoI to 28x28, max-pools to 14x14, and runs the class,
    box-refinement, and mask heads."""

    def __init__(self, in_channels: int, mask_size: int = 28, stride: int = 8):
        super().__init__()
        self.stride = stride
        self.mask_size = mask_size
        half = mask_size // 2
        self.box_fc = nn.Sequential(
            nn.Linear(in_channels * (half // 2) ** 2, 256),
            nn.ReLU(inplace=True),
            nn.Linear(256, 256),
            nn.ReLU(inplace=True),
        )
        self.cls_head = nn.Linear(256, 2)  # (non-text, text)
        self.box_head = nn.Linear(256, 4)
        self.mask_stem = nn.Sequential(
            nn.Conv2d(in_channels, 64, 3, padding=1, bias=False),
            nn.GroupNorm(8, 64),
            nn.ReLU(inplace=True),
        )
        self.mask_up = nn.Sequential(
            nn.ConvTranspose2d(64, 32, 2, stride=2),
            nn.ReLU(inplace=True),
            nn.Conv2d(32, 1, 1),
        )

    def pool(self, det_features: torch.Tensor, rois) -> torch.Tensor:
        """Crop RoIs to 28x28 and max-pool to the shared 14x14 features."""
        crops = crop_and_resize(det_features, rois, self.mask_size,
                                self.mask_size, stride=self.stride)
        return F.max_pool2d(crops, 2)

    def box_branch(self, pooled: torch.Tensor):
        x = F.max_pool2d(pooled, 2)
        x = self.box_fc(x.flatten(1))
        return self.cls_head(x), self.box_head(x)

    def mask_branch(self, pooled: torch.Tensor, logits: bool = False):
        x = self.mask_stem(pooled)
        x = self.mask_up(x)[:, 0]
        return x if logits else torch.sigmoid(x)

    def forward_box(self, det_features: torch.Tensor, rois):
        """-> (cls_logits [N, 2], deltas [N, 4])"""
        return self.box_branch(self.pool(det_features, rois))

    def forward_mask(self, det_features: torch.Tensor, rois,
                     logits: bool = False) -> torch.Tensor:
        """-> mask probabilities (or logits) [N, 28, 28]"""
        return self.mask_branch(self.pool(det_features, rois), logits)


def roi_heads_forward(heads: RoIHeads, det_features: torch.Tensor, rois):
    """Per-RoI (text_prob, box_delta, mask), skipping zero-area RoIs.

    Returns (text_prob [M], deltas [M, 4], masks [M, 28, 28], kept indices).
    """
    boxes = np.asarray(rois, dtype=np.float64).reshape(-1, 4)
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    kept = np.nonzero(areas > 0)[0]
    if len(kept) < len(boxes):
        warnings.warn(f"skipping {len(boxes) - len(kept)} degenerate RoI(s)")
    boxes = boxes[kept]
    if len(boxes) == 0:
        z = det_features.new_zeros
        return z((0,)), z((0, 4)), z((0, heads.mask_size, heads.mask_size)), kept
    cls_logits, deltas = heads.forward_box(det_features, boxes)
    masks = heads.forward_mask(det_features, boxes)
    text_prob = torch.softmax(cls_logits, dim=1)[:, 1]
    return text_prob, deltas, masks, kept


# ---------------------------------------------------------------------------
# proposal generation

def propose(rpn_logits: torch.Tensor, rpn_deltas: torch.Tensor,
            anchors: np.ndarray, image_shape: tuple[int, int],
            config: DetectorConfig) -> Proposals:
    """Decode RPN outputs into scored proposals: box-delta decoding, clip to
    image, greedy NMS at rpn_nms_iou, keep the top rpn_post_nms_top_n."""
    scores = torch.sigmoid(rpn_logits).detach().cpu().numpy().astype(np.float64)
    deltas = rpn_deltas.detach().cpu().numpy().astype(np.float64)
    n = min(config.rpn_pre_nms_top_n, len(scores))
    order = np.lexsort((np.arange(len(scores)), -scores))[:n]
    boxes = decode_box_delta(anchors[order], deltas[order])
    boxes = clip_boxes(boxes, image_shape)
    wh = boxes[:, 2:] - boxes[:, :2]
    valid = (wh >= config.min_box_size).all(axis=1) & (scores[order] > 0.0)
    boxes, sub_scores = boxes[valid], scores[order][valid]
    keep = box_nms(boxes, sub_scores, config.rpn_nms_iou,
                   max_keep=config.rpn_post_nms_top_n)
    return Proposals(boxes=boxes[keep], objectness=sub_scores[keep])


# ---------------------------------------------------------------------------
# training target assignment

def assign_rpn_targets(anchors: np.ndarray, gt_boxes: np.ndarray,
                       config: DetectorConfig):
    """Per-anchor labels (1 pos, 0 neg, -1 ignore) and matched gt indices.

    Positive: IoU >= rpn_positive_iou with any gt, or argmax anchor for some
    gt. Negative: max IoU <= rpn_negative_iou. Others ignored.
    """
    n = len(anchors)
    labels = np.full(n, -1, dtype=np.int64)
    matched = np.zeros(n, dtype=np.int64)
    if len(gt_boxes) == 0:
        labels[:] = 0
        return labels, matched
    iou = box_iou_matrix(anchors, gt_boxes)
    best_gt = iou.argmax(axis=1)
    best_iou = iou[np.arange(n), best_gt]
    matched = best_gt
    labels[best_iou <= config.rpn_negative_iou] = 0
    labels[best_iou >= config.rpn_positive_iou] = 1
    # argmax anchor(s) for each gt are positive regardless of threshold
    gt_best = iou.max(axis=0)
    for g in range(len(gt_boxes)):
        hit = np.nonzero(iou[:, g] >= gt_best[g] - 1e-9)[0]
        labels[hit] = 1
        matched[hit] = g
    return labels, matched


def sample_balanced(labels: np.ndarray, batch_size: int,
                    positive_fraction: float, rng: np.random.Generator):
    """Pick up to batch_size indices with at most the given positive share."""
    pos = np.nonzero(labels == 1)[0]
    neg = np.nonzero(labels == 0)[0]
    n_pos = min(len(pos), int(round(batch_size * positive_fraction)))
    if len(pos) > n_pos:
        pos = rng.choice(pos, size=n_pos, replace=False)
    n_neg = min(len(neg), batch_size - len(pos))
    if len(neg) > n_neg:
        neg = rng.choice(neg, size=n_neg, replace=False)
    return np.sort(pos), np.sort(neg)


def sample_rois(proposals: np.ndarray, gt_boxes: np.ndarray,
                config: DetectorConfig, rng: np.random.Generator):
    """Assemble the per-image RoI training minibatch.

    Ground-truth boxes join the candidate pool (when configured); positives
    have IoU >= roi_positive_iou with some gt. Returns (rois [M, 4],
    labels [M] in {0, 1}, matched gt indices [M]).
    """
    pool = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    if config.add_gt_to_rois and len(gt_boxes):
        pool = np.concatenate([pool, np.asarray(gt_boxes, dtype=np.float64)])
    if len(pool) == 0:
        return pool.reshape(0, 4), np.zeros(0, np.int64), np.zeros(0, np.int64)
    if len(gt_boxes):
        iou = box_iou_matrix(pool, gt_boxes)
        best_gt = iou.argmax(axis=1)
        best_iou = iou[np.arange(len(pool)), best_gt]
    else:
        best_gt = np.zeros(len(pool), np.int64)
        best_iou = np.zeros(len(pool))
    labels = (best_iou >= config.roi_positive_iou).astype(np.int64)
    pos_idx, neg_idx = sample_balanced(labels, config.roi_batch_size,
                                       config.roi_positive_fraction, rng)
    sel = np.concatenate([pos_idx, neg_idx])
    return pool[sel], labels[sel], best_gt[sel]
