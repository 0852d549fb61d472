"""The completeness-gated multitask objective, the SGD-momentum training
step, and the single-step / two-step training strategies.

Per sample the total loss is

    total = delta * (L_rpn + alpha * L_rcnn + beta * L_mask) + gamma * L_recog

with delta = 1 for fully labeled samples and 0 for partially labeled ones,
so partial data trains only the recognizer branch (the backbone still
receives gradient through it). Ground-truth boxes and masks feed the RoI
masking path during training; predictions are used only at inference.
"""

from __future__ import annotations

import csv
import os
import tempfile
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F

from .config import RunConfig, config_hash, config_to_dict
from .corpus import FULL, ImageSample
from .detector import (DetectorConfig, assign_rpn_targets, encode_box_delta,
                       generate_anchors, propose, sample_balanced, sample_rois)
from .geometry import rasterize_polygon_in_box
from .model import TextSpotter, build_model, image_to_tensor
from .featnet import pad_to_multiple
from .roimask import batch_instances, extract_instance


class NonFiniteLossError(RuntimeError):
    def __init__(self, component: str, value: float):
        super().__init__(f"non-finite loss component {component!r}: {value}")
        self.component = component


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.gamma < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class LossBreakdown:
    l_rpn: float
    l_rcnn: float
    l_mask: float
    l_recog: float
    delta: int
    total: float

    @classmethod
    def combine(cls, l_rpn, l_rcnn, l_mask, l_recog, delta: int,
                weights: LossWeights):
        """Build the breakdown with total computed from the components, so
        the documented identity holds to exact floating arithmetic."""
        total = delta * (l_rpn + weights.alpha * l_rcnn
                         + weights.beta * l_mask) + weights.gamma * l_recog
        return cls(l_rpn=l_rpn, l_rcnn=l_rcnn, l_mask=l_mask, l_recog=l_recog,
                   delta=delta, total=total)


def total_loss(l_rpn: float, l_rcnn: float, l_mask: float, l_recog: float,
               completeness: str, weights: LossWeights) -> LossBreakdown:
    """Gate the detection terms by label completeness (delta = 1 iff full).

    Detection components are carried through for logging either way; only
    their weight in ``total`` changes.
    """
    delta = 1 if completeness == FULL else 0
    return LossBreakdown.combine(l_rpn, l_rcnn, l_mask, l_recog, delta, weights)


# ---------------------------------------------------------------------------
# loss primitives

def smooth_l1(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Elementwise smooth-L1 (0.5 x^2 below 1, |x| - 0.5 above), mean-reduced."""
    diff = (pred - target).abs()
    per = torch.where(diff < 1.0, 0.5 * diff * diff, diff - 0.5)
    return per.mean()


def smoothed_targets(targets: torch.Tensor, vocab_size: int, smoothing: float,
                     mode: str = "on_value") -> torch.Tensor:
    """Label-smoothed target distributions, [.., V].

    on_value: the true symbol gets probability ``smoothing`` and the
    remaining mass spreads uniformly over the other V-1 symbols.
    mass: probability ``smoothing`` spreads uniformly over all V symbols
    and the true symbol keeps the rest.
    """
    if not 0.0 < smoothing <= 1.0:
        raise ValueError(f"smoothing must be in (0, 1], got {smoothing}")
    if mode == "on_value":
        off = (1.0 - smoothing) / (vocab_size - 1)
        q = torch.full((*targets.shape, vocab_size), off, dtype=torch.float64)
        q.scatter_(-1, targets[..., None], smoothing)
    elif mode == "mass":
        q = torch.full((*targets.shape, vocab_size), smoothing / vocab_size,
                       dtype=torch.float64)
        q.scatter_add_(-1, targets[..., None],
                       torch.full((*targets.shape, 1), 1.0 - smoothing,
                                  dtype=torch.float64))
    else:
        raise ValueError(f"unknown label smoothing mode {mode!r}")
    return q


def recognition_loss(logits: torch.Tensor, target: torch.Tensor,
                     smoothing: float = 0.9, mode: str = "on_value",
                     eos_id: int | None = None) -> torch.Tensor:
    """Mean over decode steps of cross-entropy against the smoothed target.

    logits: [T, V]; target: [T] symbol ids ending with EOS.
    """
    if logits.ndim != 2 or target.ndim != 1 or logits.shape[0] != target.shape[0]:
        raise ValueError(
            f"shape mismatch: logits {tuple(logits.shape)} vs target "
            f"{tuple(target.shape)}")
    if eos_id is not None and int(target[-1]) != eos_id:
        raise ValueError("target must end with EOS")
    q = smoothed_targets(target, logits.shape[-1], smoothing, mode)
    q = q.to(logits.dtype)
    logp = F.log_softmax(logits, dim=-1)
    return -(q * logp).sum(dim=-1).mean()


def recognition_loss_batch(logits: torch.Tensor, targets: torch.Tensor,
                           lengths: torch.Tensor, smoothing: float = 0.9,
                           mode: str = "on_value") -> torch.Tensor:
    """Mean over instances of the per-instance step-mean cross-entropy.

    logits: [B, T, V]; targets: [B, T] padded past each row's length.
    """
    q = smoothed_targets(targets, logits.shape[-1], smoothing, mode)
    q = q.to(logits.dtype)
    ce = -(q * F.log_softmax(logits, dim=-1)).sum(dim=-1)  # [B, T]
    steps = torch.arange(targets.shape[1], device=targets.device)
    valid = steps[None, :] < lengths[:, None]
    per_instance = (ce * valid).sum(dim=1) / lengths.to(ce.dtype)
    return per_instance.mean()


# ---------------------------------------------------------------------------
# detection loss assembly

@dataclass
class RpnOutputs:
    logits: torch.Tensor  # [S] sampled anchor objectness logits
    labels: torch.Tensor  # [S] float {0, 1}
    deltas: torch.Tensor  # [P, 4] predicted deltas at positive anchors
    delta_targets: torch.Tensor  # [P, 4]


@dataclass
class RoiOutputs:
    cls_logits: torch.Tensor  # [M, 2]
    labels: torch.Tensor  # [M] long {0, 1}
    deltas: torch.Tensor  # [P, 4] refinement at positive RoIs
    delta_targets: torch.Tensor  # [P, 4]
    mask_logits: torch.Tensor  # [P, 28, 28]
    mask_targets: torch.Tensor  # [P, 28, 28] in {0, 1}


def detection_losses(rpn: RpnOutputs, roi: RoiOutputs,
                     counters: dict | None = None):
    """(L_rpn, L_rcnn, L_mask) per the standard two-stage recipe:
    objectness BCE + positive-only smooth-L1; text/non-text CE +
    positive-only smooth-L1; per-pixel mask BCE on positive RoIs."""
    zero = rpn.logits.new_zeros(())
    l_rpn = F.binary_cross_entropy_with_logits(rpn.logits, rpn.labels) \
        if rpn.logits.numel() else zero
    if rpn.deltas.numel():
        l_rpn = l_rpn + smooth_l1(rpn.deltas, rpn.delta_targets)
    l_rcnn = F.cross_entropy(roi.cls_logits, roi.labels) \
        if roi.cls_logits.numel() else zero
    if roi.deltas.numel():
        l_rcnn = l_rcnn + smooth_l1(roi.deltas, roi.delta_targets)
    if roi.mask_logits.numel():
        l_mask = F.binary_cross_entropy_with_logits(roi.mask_logits,
                                                    roi.mask_targets)
    else:
        l_mask = zero
        if counters is not None:
            counters["no_positive_rois"] = counters.get("no_positive_rois", 0) + 1
    return l_rpn, l_rcnn, l_mask


def _gt_arrays(sample: ImageSample):
    boxes, polys, texts = [], [], []
    for ann in sample.annotations:
        if ann.ignore:
            continue
        b = ann.bbox()
        if b[2] - b[0] < 2.0 or b[3] - b[1] < 2.0:
            continue
        boxes.append(b)
        polys.append(np.asarray(ann.polygon, dtype=np.float64))
        texts.append(ann.transcription)
    return (np.asarray(boxes, dtype=np.float64).reshape(-1, 4), polys, texts)


def compute_detection_outputs(model: TextSpotter, det_feat: torch.Tensor,
                              sample: ImageSample, image_shape: tuple[int, int],
                              rng: np.random.Generator):
    """Forward the detection branches against this sample's annotations."""
    cfg: DetectorConfig = model.config.detector
    gt_boxes, gt_polys, _ = _gt_arrays(sample)
    anchors = generate_anchors(image_shape, cfg.anchor_scales,
                               cfg.anchor_aspects, cfg.stride)
    logits, deltas = model.rpn(det_feat)

    labels, matched = assign_rpn_targets(anchors, gt_boxes, cfg)
    pos, neg = sample_balanced(labels, cfg.rpn_batch_size,
                               cfg.rpn_positive_fraction, rng)
    sel = np.concatenate([pos, neg])
    rpn_labels = torch.as_tensor(labels[sel].astype(np.float32),
                                 device=logits.device).to(logits.dtype)
    if len(pos) and len(gt_boxes):
        rpn_delta_targets = encode_box_delta(anchors[pos], gt_boxes[matched[pos]])
    else:
        rpn_delta_targets = np.zeros((0, 4))
    rpn_out = RpnOutputs(
        logits=logits[torch.as_tensor(sel, device=logits.device, dtype=torch.long)]
        if len(sel) else logits[:0],
        labels=rpn_labels,
        deltas=deltas[torch.as_tensor(pos, device=logits.device, dtype=torch.long)]
        if len(pos) else deltas[:0],
        delta_targets=torch.as_tensor(rpn_delta_targets,
                                      dtype=deltas.dtype, device=deltas.device),
    )

    proposals = propose(logits, deltas, anchors, image_shape, cfg)
    rois, roi_labels, roi_matched = sample_rois(proposals.boxes, gt_boxes,
                                                cfg, rng)
    if len(rois):
        pooled = model.roi_heads.pool(det_feat, rois)
        cls_logits, roi_deltas = model.roi_heads.box_branch(pooled)
    else:
        cls_logits = det_feat.new_zeros((0, 2))
        roi_deltas = det_feat.new_zeros((0, 4))
    pos_idx = np.nonzero(roi_labels == 1)[0]
    if len(pos_idx) and len(gt_boxes):
        pos_rois = rois[pos_idx]
        pos_gt = roi_matched[pos_idx]
        roi_delta_targets = encode_box_delta(pos_rois, gt_boxes[pos_gt])
        pos_t_idx = torch.as_tensor(pos_idx, device=det_feat.device,
                                    dtype=torch.long)
        mask_logits = model.roi_heads.mask_branch(pooled[pos_t_idx],
                                                  logits=True)
        mask_targets = np.stack([
            rasterize_polygon_in_box(gt_polys[g], r, (cfg.mask_size,
                                                      cfg.mask_size))
            for g, r in zip(pos_gt, pos_rois)])
    else:
        roi_delta_targets = np.zeros((0, 4))
        mask_logits = det_feat.new_zeros((0, cfg.mask_size, cfg.mask_size))
        mask_targets = np.zeros((0, cfg.mask_size, cfg.mask_size))
    pos_t = torch.as_tensor(pos_idx, device=det_feat.device, dtype=torch.long)
    roi_out = RoiOutputs(
        cls_logits=cls_logits,
        labels=torch.as_tensor(roi_labels, device=det_feat.device,
                               dtype=torch.long),
        deltas=roi_deltas[pos_t] if len(pos_idx) else roi_deltas[:0],
        delta_targets=torch.as_tensor(roi_delta_targets, dtype=det_feat.dtype,
                                      device=det_feat.device),
        mask_logits=mask_logits,
        mask_targets=torch.as_tensor(mask_targets, dtype=det_feat.dtype,
                                     device=det_feat.device),
    )
    return rpn_out, roi_out


def compute_recognition_loss(model: TextSpotter, rec_feat: torch.Tensor,
                             sample: ImageSample,
                             generator: torch.Generator | None = None):
    """Teacher-forced recognition loss over this sample's ground-truth RoIs.

    Returns (loss tensor or None, number of instances used).
    """
    cfg = model.config
    mask_size = cfg.detector.mask_size
    instances, targets = [], []
    for ann in sample.annotations:
        if ann.ignore or ann.transcription is None:
            continue
        box = ann.bbox()
        if box[2] - box[0] < 2.0 or box[3] - box[1] < 2.0:
            continue
        if cfg.train.use_roi_masking:
            mask = rasterize_polygon_in_box(ann.polygon, box,
                                            (mask_size, mask_size))
        else:
            mask = np.ones((mask_size, mask_size))
        instances.append(extract_instance(rec_feat, box, mask, "train",
                                          cfg.roimask))
        targets.append(model.vocab.encode_target(ann.transcription))
    if not instances:
        return None, 0
    batch = batch_instances(instances)
    lengths = torch.tensor([len(t) for t in targets], dtype=torch.long)
    tmax = int(lengths.max())
    padded = torch.full((len(targets), tmax), model.vocab.eos_id,
                        dtype=torch.long, device=batch.features.device)
    for i, t in enumerate(targets):
        padded[i, :len(t)] = torch.tensor(t, dtype=torch.long)
    logits = model.decoder.teacher_forced_logits(batch.features,
                                                 batch.validity, padded,
                                                 generator)
    loss = recognition_loss_batch(logits, padded, lengths,
                                  smoothing=cfg.train.label_smoothing,
                                  mode=cfg.train.label_smoothing_mode)
    return loss, len(instances)


# ---------------------------------------------------------------------------
# optimizer step

@dataclass
class TrainState:
    optimizer: torch.optim.Optimizer
    step: int = 0
    counters: dict = field(default_factory=dict)
    train_recognizer: bool = True
    train_detector: bool = True


def make_optimizer(model: TextSpotter, config: RunConfig) -> torch.optim.Optimizer:
    return torch.optim.SGD(model.parameters(),
                           lr=config.train.learning_rate,
                           momentum=config.train.momentum)


def learning_rate_at(step: int, config: RunConfig) -> float:
    tc = config.train
    return tc.learning_rate / (tc.lr_decay_factor ** (step // tc.lr_decay_interval))


def _seeded_rng(*key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(key)))


def _as_float(x) -> float:
    return float(x.detach()) if torch.is_tensor(x) else float(x)


def train_step(model: TextSpotter, batch: list[ImageSample],
               state: TrainState) -> tuple[LossBreakdown, TrainState]:
    """One forward/backward/update pass over a batch of samples.

    Detection terms come from fully labeled samples (partial ones evaluate
    them without gradient, for logging); recognition uses ground-truth RoIs
    on every sample. Components are averaged over the samples that computed
    them, the batch delta is 1 iff any sample is fully labeled, and the
    update is SGD with momentum under the step-decay schedule.
    """
    cfg = model.config
    weights = LossWeights(cfg.train.loss_alpha, cfg.train.loss_beta,
                          cfg.train.loss_gamma)
    model.train()
    lr = learning_rate_at(state.step, cfg)
    for group in state.optimizer.param_groups:
        group["lr"] = lr

    device = next(model.parameters()).device
    # one backbone pass when the batch shares a canvas size
    same_shape = len({s.image.shape for s in batch}) == 1
    if same_shape:
        stacked = torch.cat([image_to_tensor(s.image, device) for s in batch])
        stacked = pad_to_multiple(stacked, 4)
        bundle_all = model.backbone(stacked)

    det_full = []  # (l_rpn, l_rcnn, l_mask) with gradient, full samples
    det_logged = []  # no-grad values from partial samples, logging only
    recog_terms = []
    for k, sample in enumerate(batch):
        if same_shape:
            shape = stacked.shape[-2:]
            det_feat = bundle_all.det_features[k]
            rec_feat = bundle_all.rec_features[k]
        else:
            tensor = pad_to_multiple(image_to_tensor(sample.image, device), 4)
            shape = tensor.shape[-2:]
            bundle = model.backbone(tensor)
            det_feat = bundle.det_features[0]
            rec_feat = bundle.rec_features[0]
        rng = _seeded_rng(cfg.seed, state.step, k)
        is_full = sample.completeness == FULL
        if state.train_detector and is_full:
            rpn_out, roi_out = compute_detection_outputs(
                model, det_feat, sample, shape, rng)
            det_full.append(detection_losses(rpn_out, roi_out, state.counters))
        elif state.train_detector and cfg.train.log_partial_detection_losses:
            with torch.no_grad():
                rpn_out, roi_out = compute_detection_outputs(
                    model, det_feat, sample, shape, rng)
                det_logged.append(detection_losses(rpn_out, roi_out,
                                                   state.counters))
        if state.train_recognizer:
            gen = torch.Generator()
            gen.manual_seed(int(_seeded_rng(cfg.seed, state.step, k, 7)
                                .integers(2 ** 62)))
            loss, n = compute_recognition_loss(model, rec_feat, sample, gen)
            if loss is not None:
                recog_terms.append(loss)

    any_full = any(s.completeness == FULL for s in batch)
    delta = 1 if (any_full and state.train_detector) else 0
    # detection components: mean over full samples when any exist (the
    # gradient path); otherwise the no-grad logging values from partials
    det_vals = det_full if det_full else det_logged
    zero = torch.zeros((), dtype=torch.float32)

    def _det_mean(i):
        if not det_vals:
            return zero
        return sum(v[i] for v in det_vals) / len(det_vals)

    l_rpn_t = _det_mean(0)
    l_rcnn_t = _det_mean(1)
    l_mask_t = _det_mean(2)
    l_recog_t = sum(recog_terms) / len(recog_terms) if recog_terms else zero

    for name, val in (("l_rpn", l_rpn_t), ("l_rcnn", l_rcnn_t),
                      ("l_mask", l_mask_t), ("l_recog", l_recog_t)):
        fval = _as_float(val)
        if not np.isfinite(fval):
            raise NonFiniteLossError(name, fval)

    total_t = delta * (l_rpn_t + weights.alpha * l_rcnn_t
                       + weights.beta * l_mask_t) + weights.gamma * l_recog_t
    if torch.is_tensor(total_t) and total_t.requires_grad:
        state.optimizer.zero_grad(set_to_none=True)
        total_t.backward()
        if cfg.train.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(),
                                           cfg.train.grad_clip)
        state.optimizer.step()

    breakdown = LossBreakdown.combine(
        _as_float(l_rpn_t), _as_float(l_rcnn_t), _as_float(l_mask_t),
        _as_float(l_recog_t), delta, weights)
    state.step += 1
    return breakdown, state


# ---------------------------------------------------------------------------
# checkpoints

class CheckpointError(RuntimeError):
    pass


def save_checkpoint(model: TextSpotter, state: TrainState, path: str) -> None:
    """Parameter blob + metadata, written atomically (temp file + rename)."""
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    payload = {
        "model": model.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "step": state.step,
        "counters": dict(state.counters),
        "config_hash": config_hash(model.config),
        "config": config_to_dict(model.config),
        "symbols": model.vocab.symbols,
    }
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".",
                               suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            torch.save(payload, fh)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def load_checkpoint(path: str, config: RunConfig | None = None):
    """Load a checkpoint; when a config is given its hash must match."""
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if config is not None and payload["config_hash"] != config_hash(config):
        raise CheckpointError(
            "checkpoint config hash mismatch: refusing to resume "
            f"({payload['config_hash']} != {config_hash(config)})")
    return payload


def restore_model(path: str) -> tuple[TextSpotter, dict]:
    from .config import config_from_dict

    payload = load_checkpoint(path)
    config = config_from_dict(payload["config"])
    model = build_model(config)
    model.load_state_dict(payload["model"])
    return model, payload


# ---------------------------------------------------------------------------
# training strategies

CSV_COLUMNS = ("step", "lr", "delta", "l_rpn", "l_rcnn", "l_mask", "l_recog",
               "total")


def _select_batch(pool: list[ImageSample], size: int,
                  rng: np.random.Generator) -> list[ImageSample]:
    idx = rng.integers(0, len(pool), size=size)
    return [pool[int(i)] for i in idx]


def run_strategy(strategy: str, config: RunConfig,
                 samples: list[ImageSample],
                 out_dir: str | None = None,
                 resume: str | None = None,
                 log_every: int = 0) -> tuple[TextSpotter, list[LossBreakdown]]:
    """Train per the chosen strategy and return (model, per-step history).

    single_step: joint training from scratch on mixed data. two_step: a
    detection-only phase on fully labeled data (phase1_steps), then joint
    fine-tuning; the recognizer is untouched during phase 1. Batches are
    homogeneous in completeness; a seeded coin picks the pool each step.
    """
    if strategy not in ("single_step", "two_step"):
        raise ValueError(f"unknown strategy {strategy!r}")
    config = replace(config, train=replace(config.train, strategy=strategy))
    full_pool = [s for s in samples if s.completeness == FULL]
    partial_pool = [s for s in samples if s.completeness != FULL] \
        if config.train.use_partial_data else []
    if not full_pool:
        raise ValueError("training needs at least one fully labeled sample")

    model = build_model(config)
    optimizer = make_optimizer(model, config)
    state = TrainState(optimizer=optimizer)
    start_step = 0
    if resume:
        payload = load_checkpoint(resume, config)
        model.load_state_dict(payload["model"])
        optimizer.load_state_dict(payload["optimizer"])
        state.step = payload["step"]
        state.counters.update(payload.get("counters", {}))
        start_step = state.step

    csv_fh = None
    csv_writer = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        csv_path = os.path.join(out_dir, "metrics.csv")
        csv_fh = open(csv_path, "a" if resume else "w", newline="")
        csv_writer = csv.writer(csv_fh)
        if not resume:
            csv_writer.writerow(CSV_COLUMNS)

    history: list[LossBreakdown] = []
    tc = config.train
    # resuming trains tc.steps ADDITIONAL steps, so N steps then a resume of
    # M steps reproduces a single (N + M)-step run exactly
    target_steps = start_step + tc.steps if resume else tc.steps
    try:
        for step in range(start_step, target_steps):
            if strategy == "two_step" and step < tc.phase1_steps:
                state.train_recognizer = False
                pool = full_pool
            else:
                state.train_recognizer = True
                coin = _seeded_rng(config.seed, step, 11).random()
                use_partial = partial_pool and coin < tc.partial_batch_ratio
                pool = partial_pool if use_partial else full_pool
            rng = _seeded_rng(config.seed, step, 13)
            batch = _select_batch(pool, tc.batch_size, rng)
            breakdown, state = train_step(model, batch, state)
            history.append(breakdown)
            if csv_writer:
                csv_writer.writerow([
                    state.step - 1, repr(learning_rate_at(state.step - 1, config)),
                    breakdown.delta, repr(breakdown.l_rpn),
                    repr(breakdown.l_rcnn), repr(breakdown.l_mask),
                    repr(breakdown.l_recog), repr(breakdown.total)])
            if log_every and (step + 1) % log_every == 0:
                print(f"step {step + 1}/{target_steps} "
                      f"total={breakdown.total:.4f} "
                      f"recog={breakdown.l_recog:.4f} delta={breakdown.delta}")
            if out_dir and tc.checkpoint_interval \
                    and state.step % tc.checkpoint_interval == 0:
                save_checkpoint(model, state,
                                os.path.join(out_dir, "checkpoint.pt"))
        if out_dir:
            save_checkpoint(model, state, os.path.join(out_dir, "checkpoint.pt"))
    finally:
        if csv_fh:
            csv_fh.close()
    return model, history
