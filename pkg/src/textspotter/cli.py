"""Command-line entry points: dataset generation, training, inference,
evaluation, and the ablation harness.

Every command is deterministic given config + seed; errors exit nonzero
with a single machine-parsable JSON line on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import corpus
from .config import ConfigError, RunConfig, load_config, save_config
from .corpus import SpecSampler, generate_samples, read_dataset, write_dataset
from .evalkit import evaluate
from .harness import format_ablation_table, run_ablation
from .objective import CheckpointError, restore_model, run_strategy
from .recognizer import export_attention_trace


class CliError(RuntimeError):
    pass


def _parse_overrides(pairs: list[str]) -> dict:
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise CliError(f"--set expects key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def _config_from_args(args) -> RunConfig:
    overrides = _parse_overrides(getattr(args, "set", None))
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    return load_config(getattr(args, "config", None), overrides)


def _sampler_from_config(config: RunConfig) -> SpecSampler:
    d = config.data
    return SpecSampler(alphabet=config.alphabet, word_length=d.word_length,
                       font_scale=d.font_scale, kinds=d.kinds,
                       max_words=d.max_words, rotation=d.rotation)


# ---------------------------------------------------------------------------
# commands

def cmd_gen(args) -> int:
    config = _config_from_args(args)
    out = args.out
    if os.path.exists(out) and os.listdir(out) and not args.force:
        raise CliError(f"output path {out!r} is not empty (use --force)")
    d = config.data
    n_train = args.num_samples if args.num_samples is not None else d.train_samples
    n_val = args.val_samples if args.val_samples is not None else d.val_samples
    partial_fraction = args.partial_fraction if args.partial_fraction is not None \
        else d.partial_fraction
    sampler = _sampler_from_config(config)
    train = generate_samples(n_train, d.canvas, seed=config.seed,
                             sampler=sampler,
                             partial_fraction=partial_fraction,
                             drop_fraction=d.drop_fraction)
    val = generate_samples(n_val, d.canvas, seed=config.seed + 1,
                           sampler=sampler)
    write_dataset(train, os.path.join(out, "train"))
    write_dataset(val, os.path.join(out, "val"))
    save_config(config, os.path.join(out, "config.yaml"))
    n_partial = sum(1 for s in train if s.completeness == corpus.PARTIAL)
    print(f"wrote {len(train)} train ({n_partial} partial) and {len(val)} "
          f"val samples to {out}")
    return 0


def _apply_train_flags(config: RunConfig, args) -> RunConfig:
    train = config.train
    updates = {}
    if args.steps is not None:
        updates["steps"] = args.steps
    if args.no_roi_masking:
        updates["use_roi_masking"] = False
    if args.no_partial_data:
        updates["use_partial_data"] = False
    if args.strategy is not None:
        updates["strategy"] = {"single": "single_step",
                               "two": "two_step"}[args.strategy]
    if args.phase1_steps is not None:
        updates["phase1_steps"] = args.phase1_steps
    if updates:
        train = dataclasses.replace(train, **updates)
        config = dataclasses.replace(config, train=train)
    return config


def cmd_train(args) -> int:
    config = _apply_train_flags(_config_from_args(args), args)
    samples = read_dataset(os.path.join(args.data, "train"))
    os.makedirs(args.out, exist_ok=True)
    save_config(config, os.path.join(args.out, "config.yaml"))
    model, history = run_strategy(config.train.strategy, config, samples,
                                  out_dir=args.out, resume=args.resume,
                                  log_every=args.log_every)
    last = history[-1] if history else None
    if last is not None:
        print(f"finished at step {len(history)}: total={last.total:.4f} "
              f"(checkpoint in {args.out})")
    else:
        print(f"nothing to do (checkpoint in {args.out})")
    return 0


def _detection_record(det) -> dict:
    rect = det.rotated_rect
    return {
        "polygon": np.asarray(det.polygon, dtype=float).tolist(),
        "rotated_rect": {
            "center": [float(rect.center[0]), float(rect.center[1])],
            "width": float(rect.width), "height": float(rect.height),
            "angle": float(rect.angle),
        },
        "score": float(det.score),
        "transcription": det.transcription,
        "symbol_confidences": [float(c) for c in det.symbol_confidences or []],
    }


def cmd_infer(args) -> int:
    model, payload = restore_model(args.checkpoint)
    if os.path.isdir(args.input):
        samples = read_dataset(args.input)
        images = [(s.image, rec.get("image_path", f"{i:05d}"))
                  for i, (s, rec) in enumerate(
                      zip(samples, _index_records(args.input)))]
    else:
        from PIL import Image
        arr = np.asarray(Image.open(args.input).convert("RGB"),
                         dtype=np.float32) / 255.0
        images = [(arr, os.path.basename(args.input))]
    out_doc = {"images": []}
    for idx, (image, name) in enumerate(images):
        dets, traces = model.spot(image, args.score_threshold)
        out_doc["images"].append({
            "image_path": name,
            "detections": [_detection_record(d) for d in dets],
        })
        if args.attention:
            for di, (det, trace) in enumerate(zip(dets, traces)):
                export_attention_trace(trace, image, det.box, args.attention,
                                       f"{idx:04d}_{di:02d}", model.vocab)
    doc = json.dumps(out_doc, indent=2, sort_keys=True)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(doc + "\n")
    else:
        print(doc)
    return 0


def _index_records(path: str) -> list[dict]:
    records = []
    with open(os.path.join(path, "index.jsonl")) as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


class _JsonDetection:
    def __init__(self, record: dict):
        self.polygon = np.asarray(record["polygon"], dtype=np.float64)
        self.score = float(record["score"])
        self.transcription = record.get("transcription")


def cmd_eval(args) -> int:
    config = _config_from_args(args)
    with open(args.detections) as fh:
        det_doc = json.load(fh)
    samples = read_dataset(args.data)
    records = _index_records(args.data)
    det_images = det_doc["images"]
    if len(det_images) != len(samples):
        raise CliError(
            f"image count mismatch: {len(det_images)} detections vs "
            f"{len(samples)} dataset images")
    per_image = []
    for rec, sample, det_img in zip(records, samples, det_images):
        if det_img.get("image_path") != rec.get("image_path"):
            raise CliError(
                f"image id mismatch: {det_img.get('image_path')!r} vs "
                f"{rec.get('image_path')!r}")
        dets = [_JsonDetection(r) for r in det_img["detections"]]
        per_image.append((dets, sample.annotations))
    report = evaluate(per_image, iou_threshold=config.eval.iou_threshold,
                      case_sensitive=config.eval.case_sensitive)
    doc = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(doc + "\n")
    else:
        print(doc)
    return 0


def cmd_ablate(args) -> int:
    config = _config_from_args(args)
    if args.steps is not None:
        config = dataclasses.replace(
            config, train=dataclasses.replace(config.train, steps=args.steps))
    train = read_dataset(os.path.join(args.data, "train"))
    val = read_dataset(os.path.join(args.data, "val"))
    results = run_ablation(config, train, val, out_dir=args.out,
                           log_every=args.log_every)
    print(format_ablation_table(results))
    if args.out:
        with open(os.path.join(args.out, "ablation.json"), "w") as fh:
            json.dump(results, fh, indent=2, sort_keys=True)
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="textspotter",
        description="Desk-scale end-to-end text spotting pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key (dotted path)")
        p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--num-samples", type=int, default=None)
    p.add_argument("--val-samples", type=int, default=None)
    p.add_argument("--partial-fraction", type=float, default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--strategy", choices=("single", "two"), default=None)
    p.add_argument("--phase1-steps", type=int, default=None)
    p.add_argument("--no-roi-masking", action="store_true")
    p.add_argument("--no-partial-data", action="store_true")
    p.add_argument("--resume", default=None)
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="run detection + recognition")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True,
                   help="an image file or a dataset directory")
    p.add_argument("--out", default=None)
    p.add_argument("--score-threshold", type=float, default=None)
    p.add_argument("--attention", default=None,
                   help="directory for attention heatmaps")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score detections against a dataset")
    common(p)
    p.add_argument("--detections", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the four-configuration ablation")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ConfigError, CheckpointError, corpus.CorpusError,
            FileNotFoundError, ValueError) as exc:
        sys.stderr.write(json.dumps({"error": str(exc)}) + "\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
