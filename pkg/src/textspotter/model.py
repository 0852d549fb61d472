"""The assembled spotter: backbone + RPN + RoI heads + attention decoder.

``detect`` runs the full detection pipeline (proposals, refinement NMS, top
regions to the mask head, mask-IoU NMS, polygon fitting); ``spot`` adds
greedy transcription over masked RoI features in the same forward pass.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import RunConfig
from .detector import (Detection, RoIHeads, RPNHead, clip_boxes,
                       decode_box_delta, generate_anchors, propose)
from .featnet import Backbone, FeatureBundle, pad_to_multiple
from .geometry import (GeometryError, box_nms, fit_polygon, greedy_nms,
                       mask_iou, min_area_rect)
from .recognizer import AttentionDecoder, AttentionTrace, Vocabulary
from .roimask import extract_instance


def image_to_tensor(image: np.ndarray, device="cpu") -> torch.Tensor:
    """[H, W, 3] float array in [0, 1] -> [1, 3, H, W] float tensor."""
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    t = torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))[None]
    return t.to(device)


def paste_mask(mask: np.ndarray, box, image_shape: tuple[int, int],
               threshold: float = 0.5) -> np.ndarray:
    """Paste a box-registered soft mask into a full-image boolean grid."""
    h, w = image_shape
    x0, y0, x1, y1 = (float(v) for v in np.asarray(box).reshape(4))
    xi0, yi0 = int(np.floor(x0)), int(np.floor(y0))
    xi1, yi1 = int(np.ceil(x1)), int(np.ceil(y1))
    xi0, yi0 = max(xi0, 0), max(yi0, 0)
    xi1, yi1 = min(xi1, w), min(yi1, h)
    out = np.zeros((h, w), dtype=bool)
    if xi1 <= xi0 or yi1 <= yi0:
        return out
    bw, bh = x1 - x0, y1 - y0
    xs = (np.arange(xi0, xi1) + 0.5 - x0) / bw * mask.shape[1] - 0.5
    ys = (np.arange(yi0, yi1) + 0.5 - y0) / bh * mask.shape[0] - 0.5
    xs = np.clip(np.round(xs).astype(int), 0, mask.shape[1] - 1)
    ys = np.clip(np.round(ys).astype(int), 0, mask.shape[0] - 1)
    region = np.asarray(mask)[np.ix_(ys, xs)] >= threshold
    out[yi0:yi1, xi0:xi1] = region
    return out


class TextSpotter(nn.Module):
    def __init__(self, config: RunConfig):
        super().__init__()
        self.config = config
        self.vocab = Vocabulary(symbols=config.alphabet)
        self.backbone = Backbone(config.backbone)
        n_anchor = len(config.detector.anchor_scales) * \
            len(config.detector.anchor_aspects)
        self.rpn = RPNHead(self.backbone.det_channels, n_anchor)
        self.roi_heads = RoIHeads(self.backbone.det_channels,
                                  mask_size=config.detector.mask_size,
                                  stride=config.detector.stride)
        rc = config.recognizer
        self.decoder = AttentionDecoder(
            self.vocab,
            feature_dim=config.backbone.fusion_channels,
            hidden_dim=rc.hidden_dim, attn_dim=rc.attn_dim,
            embed_dim=rc.embed_dim, recurrent_dropout=rc.recurrent_dropout,
            layer_norm=rc.layer_norm)

    # parameter groups -----------------------------------------------------
    def detector_exclusive_parameters(self):
        """Parameters reachable only through detection heads."""
        yield from self.rpn.parameters()
        yield from self.roi_heads.parameters()

    def recognizer_parameters(self):
        yield from self.decoder.parameters()

    # forward pieces -------------------------------------------------------
    def extract_features(self, image_tensor: torch.Tensor) -> FeatureBundle:
        return self.backbone(pad_to_multiple(image_tensor, 4))

    @torch.no_grad()
    def detect(self, image: np.ndarray,
               score_threshold: float | None = None) -> list[Detection]:
        """Full detection pipeline on one [H, W, 3] image in [0, 1]."""
        cfg = self.config.detector
        thr = cfg.score_threshold if score_threshold is None else score_threshold
        was_training = self.training
        self.eval()
        try:
            h_img, w_img = image.shape[:2]
            tensor = image_to_tensor(image, next(self.parameters()).device)
            tensor = pad_to_multiple(tensor, 4)
            hp, wp = tensor.shape[-2:]
            bundle = self.backbone(tensor)
            det_feat = bundle.det_features[0]
            anchors = generate_anchors((hp, wp), cfg.anchor_scales,
                                       cfg.anchor_aspects, cfg.stride)
            logits, deltas = self.rpn(det_feat)
            proposals = propose(logits, deltas, anchors, (h_img, w_img), cfg)
            if len(proposals.boxes) == 0:
                return []
            cls_logits, refine = self.roi_heads.forward_box(det_feat,
                                                            proposals.boxes)
            scores = torch.softmax(cls_logits, dim=1)[:, 1].cpu().numpy()
            boxes = decode_box_delta(proposals.boxes,
                                     refine.cpu().numpy().astype(np.float64))
            boxes = clip_boxes(boxes, (h_img, w_img))
            wh = boxes[:, 2:] - boxes[:, :2]
            valid = (wh >= cfg.min_box_size).all(axis=1)
            boxes, scores = boxes[valid], scores[valid]
            if len(boxes) == 0:
                return []
            # second NMS on refined boxes, then the top regions go on
            keep = box_nms(boxes, scores, cfg.refine_nms_iou)
            keep = keep[:cfg.mask_top_n]
            boxes, scores = boxes[keep], scores[keep]
            conf = scores >= thr
            boxes, scores = boxes[conf], scores[conf]
            if len(boxes) == 0:
                return []
            masks = self.roi_heads.forward_mask(det_feat, boxes).cpu().numpy()
            # final NMS computes IoU on masks pasted into image space
            pasted = [paste_mask(m, b, (h_img, w_img))
                      for m, b in zip(masks, boxes)]
            keep = greedy_nms(pasted, scores, mask_iou, cfg.mask_nms_iou)
            detections = []
            for i in keep:
                try:
                    polygon = fit_polygon(masks[i], boxes[i])
                except GeometryError:
                    continue  # empty mask: reject detection
                rect = min_area_rect(polygon)
                detections.append(Detection(
                    box=boxes[i], score=float(scores[i]),
                    mask=masks[i].astype(np.float64), polygon=polygon,
                    rotated_rect=rect))
            detections.sort(key=lambda d: -d.score)
            return detections
        finally:
            if was_training:
                self.train()

    @torch.no_grad()
    def spot(self, image: np.ndarray,
             score_threshold: float | None = None
             ) -> tuple[list[Detection], list[AttentionTrace]]:
        """Detect, then decode each instance from masked RoI features."""
        detections = self.detect(image, score_threshold)
        was_training = self.training
        self.eval()
        try:
            tensor = image_to_tensor(image, next(self.parameters()).device)
            tensor = pad_to_multiple(tensor, 4)
            rec_feat = self.backbone(tensor).rec_features[0]
            traces = []
            for det in detections:
                mask = det.mask if self.config.train.use_roi_masking \
                    else np.ones_like(det.mask)
                feat = extract_instance(rec_feat, det.box, mask, "infer",
                                        self.config.roimask)
                text, trace = self.decoder.greedy_decode(
                    feat.flat, feat.shape,
                    max_steps=self.config.recognizer.max_steps)
                det.transcription = text
                det.symbol_confidences = trace.confidences[:len(text)]
                traces.append(trace)
            return detections, traces
        finally:
            if was_training:
                self.train()


def build_model(config: RunConfig) -> TextSpotter:
    """Seeded model construction: same config + seed -> identical weights."""
    torch.manual_seed(config.seed)
    model = TextSpotter(config)
    model.to(config.resolved_device())
    return model
