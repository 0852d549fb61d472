#!/usr/bin/env python3
"""Decode one synthetic curved instance with a trained checkpoint and dump
per-step attention heatmaps ({id}_{step}_{symbol}.png).

Usage: python scripts/visualize_attention.py --checkpoint runs/x/checkpoint.pt \
           --out attn/
"""

import argparse

import torch

from textspotter.corpus import PathSpec, render_sample
from textspotter.featnet import pad_to_multiple
from textspotter.geometry import rasterize_polygon_in_box
from textspotter.model import image_to_tensor
from textspotter.objective import restore_model
from textspotter.recognizer import export_attention_trace
from textspotter.roimask import extract_instance


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--checkpoint", required=True)
    parser.add_argument("--out", required=True)
    parser.add_argument("--text", default="35170")
    parser.add_argument("--curvature", type=float, default=1 / 60.0)
    args = parser.parse_args()

    model, _ = restore_model(args.checkpoint)
    spec = PathSpec(kind="arc", curvature=args.curvature, rotation=-0.5,
                    text=args.text, font_scale=18.0)
    sample = render_sample([spec], (128, 128), seed=5,
                           alphabet=model.vocab.symbols)
    ann = sample.annotations[0]

    model.eval()
    with torch.no_grad():
        tensor = pad_to_multiple(image_to_tensor(sample.image), 4)
        rec_feat = model.backbone(tensor).rec_features[0]
    box = ann.bbox()
    mask = rasterize_polygon_in_box(ann.polygon, box, (28, 28))
    inst = extract_instance(rec_feat, box, mask, "infer", model.config.roimask)
    text, trace = model.decoder.greedy_decode(
        inst.flat, inst.shape, max_steps=model.config.recognizer.max_steps)
    print(f"ground truth {ann.transcription!r} decoded as {text!r}")
    paths = export_attention_trace(trace, sample.image, box, args.out,
                                   "curved", model.vocab)
    print(f"wrote {len(paths)} heatmaps to {args.out}")


if __name__ == "__main__":
    main()
