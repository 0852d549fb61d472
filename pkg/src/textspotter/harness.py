"""Experiment harness: train a configuration, spot a dataset, and score it;
plus the four-way ablation grid (masking x partial data, and the two-step
training variant) reported as average precision."""

from __future__ import annotations

from dataclasses import replace

from .config import RunConfig
from .corpus import ImageSample
from .evalkit import evaluate
from .model import TextSpotter
from .objective import run_strategy


def spot_dataset(model: TextSpotter, samples: list[ImageSample],
                 score_threshold: float | None = None):
    """(detections, ground truth annotations) per image."""
    per_image = []
    for sample in samples:
        dets, _ = model.spot(sample.image, score_threshold)
        per_image.append((dets, sample.annotations))
    return per_image


def train_and_evaluate(config: RunConfig, train_samples: list[ImageSample],
                       eval_samples: list[ImageSample],
                       out_dir: str | None = None,
                       log_every: int = 0) -> tuple[TextSpotter, dict]:
    model, _ = run_strategy(config.train.strategy, config, train_samples,
                            out_dir=out_dir, log_every=log_every)
    per_image = spot_dataset(model, eval_samples)
    report = evaluate(per_image, iou_threshold=config.eval.iou_threshold,
                      case_sensitive=config.eval.case_sensitive)
    return model, report


ABLATION_VARIANTS = {
    # name -> (use_roi_masking, use_partial_data, strategy)
    "e2e_baseline": (False, False, "single_step"),
    "plus_mask": (True, False, "single_step"),
    "plus_pd": (False, True, "single_step"),
    "e2e_full": (True, True, "single_step"),
}


def variant_config(config: RunConfig, name: str) -> RunConfig:
    masking, partial, strategy = ABLATION_VARIANTS[name]
    train = replace(config.train, use_roi_masking=masking,
                    use_partial_data=partial, strategy=strategy)
    return replace(config, train=train)


def run_ablation(config: RunConfig, train_samples: list[ImageSample],
                 eval_samples: list[ImageSample],
                 variants: tuple[str, ...] = tuple(ABLATION_VARIANTS),
                 out_dir: str | None = None, log_every: int = 0) -> dict:
    """Train every requested variant on the same data and report AP.

    Returns {variant: {"detection_ap": ..., "end_to_end_ap": ...,
    "detection_f": ..., "end_to_end_f": ...}}.
    """
    import os

    results = {}
    for name in variants:
        cfg = variant_config(config, name)
        sub_dir = os.path.join(out_dir, name) if out_dir else None
        _, report = train_and_evaluate(cfg, train_samples, eval_samples,
                                       out_dir=sub_dir, log_every=log_every)
        results[name] = {
            "detection_ap": report["detection"]["ap"],
            "end_to_end_ap": report["end_to_end"]["ap"],
            "detection_f": report["detection"]["fscore"],
            "end_to_end_f": report["end_to_end"]["fscore"],
        }
    return results


def format_ablation_table(results: dict) -> str:
    header = f"{'variant':<14} {'mask':<5} {'PD':<4} {'AP_det':>8} {'AP_e2e':>8}"
    lines = [header, "-" * len(header)]
    for name, row in results.items():
        masking, partial, _ = ABLATION_VARIANTS[name]
        lines.append(f"{name:<14} {str(masking):<5} {str(partial):<4} "
                     f"{row['detection_ap']:>8.3f} {row['end_to_end_ap']:>8.3f}")
    return "\n".join(lines)
