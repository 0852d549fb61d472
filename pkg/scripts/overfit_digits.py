#!/usr/bin/env python3
"""Overfit sanity experiment: 50 synthetic digit images (straight + arc
paths), single-step joint training, then end-to-end scoring on the
training set. Mirrors the acceptance protocol; expect F >= 0.90.

Usage: python scripts/overfit_digits.py [--steps 5000] [--out runs/overfit]
"""

import argparse
import json
import time

import torch

from textspotter.config import config_from_dict
from textspotter.corpus import SpecSampler, generate_samples
from textspotter.evalkit import evaluate
from textspotter.harness import spot_dataset
from textspotter.objective import run_strategy


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--steps", type=int, default=5000)
    parser.add_argument("--images", type=int, default=50)
    parser.add_argument("--lr", type=float, default=3e-3)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default=None)
    args = parser.parse_args()

    torch.set_num_threads(torch.get_num_threads())
    config = config_from_dict({
        "alphabet": "0123456789",
        "seed": args.seed,
        "data": {"canvas": [128, 128]},
        "detector": {"rpn_post_nms_top_n": 150},
        "train": {"steps": args.steps, "batch_size": 2,
                  "learning_rate": args.lr, "lr_decay_interval": 2000,
                  "use_partial_data": False, "checkpoint_interval": 1000},
    })
    sampler = SpecSampler(alphabet=config.alphabet, word_length=(3, 6),
                          kinds=("line", "arc"), max_words=2,
                          font_scale=(14.0, 20.0))
    samples = generate_samples(args.images, (128, 128), seed=11,
                               sampler=sampler)
    print(f"{args.images} images, "
          f"{sum(len(s.annotations) for s in samples)} words")
    start = time.time()
    model, _ = run_strategy("single_step", config, samples,
                            out_dir=args.out, log_every=200)
    print(f"trained {args.steps} steps in {(time.time() - start) / 60:.1f} min")
    report = evaluate(spot_dataset(model, samples))
    print(json.dumps({k: report[k] for k in ("detection", "end_to_end")},
                     indent=2))


if __name__ == "__main__":
    main()
