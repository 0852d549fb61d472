"""Deterministic synthetic scene-text corpus.

Renders words along straight, circular-arc, and sine paths onto noisy gray
canvases, emits band polygons as ground truth, simulates partially labeled
data by dropping annotations, and defines the on-disk JSONL dataset format.

All generation is a pure function of (spec, canvas, seed): repeated calls
are bit-identical.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np
from PIL import Image

from . import strokefont
from .geometry import GeometryError, as_polygon

FULL = "full"
PARTIAL = "partial"

BACKGROUND_LEVEL = 0.55
NOISE_SIGMA = 0.05
BAND_HALF_HEIGHT = 0.56  # in font-scale units, covers glyph extent + stroke
BAND_END_PAD = 0.04
STROKE_THICKNESS = 0.13


class CorpusError(ValueError):
    pass


class DatasetFormatError(CorpusError):
    pass


@dataclass
class TextAnnotation:
    """A single text instance: bounding polygon plus optional transcription."""

    polygon: np.ndarray
    transcription: str | None
    ignore: bool = False

    def validate(self) -> None:
        poly = np.asarray(self.polygon, dtype=np.float64)
        if poly.ndim != 2 or poly.shape[1] != 2 or poly.shape[0] < 4:
            raise CorpusError(
                f"polygon needs at least 4 (x, y) points, got shape {poly.shape}")
        try:
            as_polygon(poly)
        except GeometryError as exc:
            raise CorpusError(f"polygon invalid: {exc}") from exc
        if not self.ignore and self.transcription is not None and not self.transcription:
            raise CorpusError("transcription present but empty")

    def bbox(self) -> np.ndarray:
        poly = np.asarray(self.polygon)
        return np.array([poly[:, 0].min(), poly[:, 1].min(),
                         poly[:, 0].max(), poly[:, 1].max()], dtype=np.float64)


@dataclass
class ImageSample:
    """An image plus its annotations and a label-completeness flag."""

    image: np.ndarray
    annotations: list[TextAnnotation]
    completeness: str = FULL

    def validate(self) -> None:
        if self.completeness not in (FULL, PARTIAL):
            raise CorpusError(f"bad completeness {self.completeness!r}")
        h, w = self.image.shape[:2]
        for ann in self.annotations:
            ann.validate()
            poly = np.asarray(ann.polygon)
            if poly[:, 0].min() < -1e-6 or poly[:, 1].min() < -1e-6 \
                    or poly[:, 0].max() > w + 1e-6 or poly[:, 1].max() > h + 1e-6:
                raise CorpusError("polygon outside image bounds")
            if self.completeness == FULL and not ann.ignore \
                    and ann.transcription is None:
                raise CorpusError("fully labeled sample with missing transcription")


@dataclass(frozen=True)
class PathSpec:
    """One word to render: path shape, placement jitter comes from the seed."""

    kind: str  # line | arc | sine
    curvature: float  # 1 / pixels; 0 means straight
    rotation: float  # radians, initial tangent direction
    text: str
    font_scale: float  # glyph cap height in pixels

    def __post_init__(self):
        if self.kind not in ("line", "arc", "sine"):
            raise CorpusError(f"unknown path kind {self.kind!r}")
        if self.font_scale <= 0:
            raise CorpusError("font_scale must be positive")


# ---------------------------------------------------------------------------
# path geometry

def _path_point_and_normal(spec: PathSpec, s: np.ndarray):
    """Point and unit normal of the path at arclength-like parameter s.

    The path starts at the origin with tangent (cos rot, sin rot); the
    caller translates it into place. curvature == 0 reproduces the straight
    line exactly for every kind.
    """
    rot = spec.rotation
    kappa = spec.curvature
    tx, ty = math.cos(rot), math.sin(rot)
    if spec.kind == "line" or kappa == 0.0:
        px = s * tx
        py = s * ty
        nx = np.full_like(s, -ty)
        ny = np.full_like(s, tx)
    elif spec.kind == "arc":
        phi = rot + kappa * s
        px = (np.sin(phi) - math.sin(rot)) / kappa
        py = (-np.cos(phi) + math.cos(rot)) / kappa
        nx = -np.sin(phi)
        ny = np.cos(phi)
    else:  # sine
        length = max(_text_length(spec), 1e-6)
        amp = kappa * (length / (2.0 * math.pi)) ** 2
        omega = 2.0 * math.pi / length
        off = amp * np.sin(omega * s)
        doff = amp * omega * np.cos(omega * s)
        px = s * tx + off * (-ty)
        py = s * ty + off * tx
        tan_x = tx - doff * ty
        tan_y = ty + doff * tx
        norm = np.hypot(tan_x, tan_y)
        nx = -tan_y / norm
        ny = tan_x / norm
    return np.stack([px, py], -1), np.stack([nx, ny], -1)


def _text_length(spec: PathSpec) -> float:
    n = len(spec.text)
    return ((n - 1) * strokefont.ADVANCE + strokefont.GLYPH_WIDTH) * spec.font_scale


def _band_polygon(spec: PathSpec, origin: np.ndarray) -> np.ndarray:
    """Ground-truth polygon: the band swept by the path, two samples per
    glyph, first point at the text start."""
    fs = spec.font_scale
    samples = []
    for k in range(len(spec.text)):
        s0 = k * strokefont.ADVANCE * fs
        samples.append(s0 - (BAND_END_PAD * fs if k == 0 else 0.0))
        s1 = s0 + strokefont.GLYPH_WIDTH * fs
        samples.append(s1 + (BAND_END_PAD * fs if k == len(spec.text) - 1 else 0.0))
    s = np.asarray(samples, dtype=np.float64)
    pts, normals = _path_point_and_normal(spec, s)
    top = pts - BAND_HALF_HEIGHT * fs * normals
    bottom = pts + BAND_HALF_HEIGHT * fs * normals
    poly = np.concatenate([top, bottom[::-1]]) + origin
    return poly


def _glyph_segments(spec: PathSpec, origin: np.ndarray) -> np.ndarray:
    """All stroke segments of the word, warped onto the path: (N, 2, 2)."""
    fs = spec.font_scale
    segs = []
    for k, ch in enumerate(spec.text):
        strokes = strokefont.GLYPHS[ch]
        s_base = k * strokefont.ADVANCE * fs
        for line in strokes:
            arr = np.asarray(line, dtype=np.float64)
            s = s_base + arr[:, 0] * fs
            off = (arr[:, 1] - 0.5) * fs
            pts, normals = _path_point_and_normal(spec, s)
            warped = pts + off[:, None] * normals + origin
            for a, b in zip(warped[:-1], warped[1:]):
                segs.append((a, b))
    return np.asarray(segs, dtype=np.float64)


def _rasterize_segments(canvas: np.ndarray, segs: np.ndarray, thickness: float):
    """Max-composite soft stroke coverage for each segment into canvas."""
    h, w = canvas.shape
    half = thickness / 2.0
    reach = half + 1.0
    for a, b in segs:
        x0 = max(int(math.floor(min(a[0], b[0]) - reach)), 0)
        x1 = min(int(math.ceil(max(a[0], b[0]) + reach)) + 1, w)
        y0 = max(int(math.floor(min(a[1], b[1]) - reach)), 0)
        y1 = min(int(math.ceil(max(a[1], b[1]) + reach)) + 1, h)
        if x0 >= x1 or y0 >= y1:
            continue
        xs = np.arange(x0, x1, dtype=np.float64) + 0.5
        ys = np.arange(y0, y1, dtype=np.float64) + 0.5
        px, py = np.meshgrid(xs, ys)
        dx, dy = b[0] - a[0], b[1] - a[1]
        l2 = dx * dx + dy * dy
        if l2 == 0.0:
            t = np.zeros_like(px)
        else:
            t = np.clip(((px - a[0]) * dx + (py - a[1]) * dy) / l2, 0.0, 1.0)
        dist = np.hypot(px - (a[0] + t * dx), py - (a[1] + t * dy))
        cov = np.clip(half + 0.5 - dist, 0.0, 1.0)
        np.maximum(canvas[y0:y1, x0:x1], cov, out=canvas[y0:y1, x0:x1])


# ---------------------------------------------------------------------------
# rendering

def render_sample(spec: list[PathSpec], canvas: tuple[int, int], seed: int,
                  alphabet: str | None = None) -> ImageSample:
    """Render a list of words onto one canvas with polygon ground truth.

    Placement, ink darkness, and background noise derive deterministically
    from ``seed``. Returns a fully labeled sample with one annotation per
    PathSpec, in order.
    """
    h, w = int(canvas[0]), int(canvas[1])
    if h <= 0 or w <= 0:
        raise CorpusError(f"canvas dimensions must be positive, got {canvas}")
    for sp in spec:
        if not sp.text:
            raise CorpusError("empty text in PathSpec")
        bad = [c for c in sp.text if c not in strokefont.GLYPHS
               or (alphabet is not None and c not in alphabet)]
        if bad:
            raise CorpusError(f"symbols outside inventory: {bad!r}")

    rng = np.random.default_rng(seed)
    image = np.full((h, w), BACKGROUND_LEVEL, dtype=np.float64)
    image += rng.normal(0.0, NOISE_SIGMA, size=(h, w))

    placed: list[np.ndarray] = []
    annotations: list[TextAnnotation] = []
    ink = np.zeros((h, w), dtype=np.float64)
    ink_levels = []
    for sp in spec:
        poly0 = _band_polygon(sp, np.zeros(2))
        lo = poly0.min(axis=0)
        hi = poly0.max(axis=0)
        extent = hi - lo
        margin = 2.0
        max_x = w - margin - extent[0]
        max_y = h - margin - extent[1]
        if max_x < margin or max_y < margin:
            raise CorpusError(
                f"text {sp.text!r} at font_scale {sp.font_scale} does not fit "
                f"on a {h}x{w} canvas")
        best = None
        for _ in range(40):
            ox = rng.uniform(margin, max_x) - lo[0]
            oy = rng.uniform(margin, max_y) - lo[1]
            origin = np.array([ox, oy])
            cand = poly0 + origin
            overlap = 0.0
            for prev in placed:
                ix = min(cand[:, 0].max(), prev[:, 0].max()) - \
                    max(cand[:, 0].min(), prev[:, 0].min())
                iy = min(cand[:, 1].max(), prev[:, 1].max()) - \
                    max(cand[:, 1].min(), prev[:, 1].min())
                overlap += max(ix, 0.0) * max(iy, 0.0)
            if best is None or overlap < best[0]:
                best = (overlap, origin, cand)
            if overlap == 0.0:
                break
        _, origin, poly = best
        placed.append(poly)
        level = rng.uniform(0.0, 0.22)
        ink_levels.append(level)
        word_ink = np.zeros((h, w), dtype=np.float64)
        segs = _glyph_segments(sp, origin)
        thickness = max(STROKE_THICKNESS * sp.font_scale, 1.2)
        _rasterize_segments(word_ink, segs, thickness)
        image = image * (1.0 - word_ink) + level * word_ink
        np.maximum(ink, word_ink, out=ink)
        annotations.append(TextAnnotation(
            polygon=np.clip(poly, [0, 0], [w, h]),
            transcription=sp.text,
            ignore=False,
        ))

    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    sample = ImageSample(image=np.repeat(image[:, :, None], 3, axis=2),
                         annotations=annotations, completeness=FULL)
    sample.validate()
    return sample


def degrade_to_partial(sample: ImageSample, drop_fraction: float,
                       seed: int) -> ImageSample:
    """Simulate machine-labeled data: drop a fraction of the non-ignore
    annotations uniformly at random and flag the sample as partial."""
    if not 0.0 <= drop_fraction <= 1.0:
        raise CorpusError(f"drop_fraction must be in [0, 1], got {drop_fraction}")
    if sample.completeness != FULL:
        raise CorpusError("degrade_to_partial expects a fully labeled sample")
    non_ignore = [i for i, a in enumerate(sample.annotations) if not a.ignore]
    n_drop = int(math.floor(drop_fraction * len(non_ignore)))
    rng = np.random.default_rng(seed)
    dropped = set(rng.choice(non_ignore, size=n_drop, replace=False).tolist()) \
        if n_drop else set()
    kept = [replace(a) for i, a in enumerate(sample.annotations) if i not in dropped]
    return ImageSample(image=sample.image.copy(), annotations=kept,
                       completeness=PARTIAL)


# ---------------------------------------------------------------------------
# dataset on disk: JSONL index + lossless PNG images

def write_dataset(samples: list[ImageSample], path: str) -> None:
    """Write a JSONL index plus lossless PNGs under ``path``.

    The writer requires exclusive access to its output path; readers may
    share freely afterwards.
    """
    os.makedirs(path, exist_ok=True)
    img_dir = os.path.join(path, "images")
    os.makedirs(img_dir, exist_ok=True)
    index = os.path.join(path, "index.jsonl")
    with open(index, "w") as fh:
        for i, sample in enumerate(samples):
            sample.validate()
            rel = os.path.join("images", f"{i:05d}.png")
            arr = np.clip(np.round(sample.image * 255.0), 0, 255).astype(np.uint8)
            Image.fromarray(arr).save(os.path.join(path, rel))
            record = {
                "image_path": rel,
                "completeness": sample.completeness,
                "annotations": [
                    {
                        "polygon": np.asarray(a.polygon, dtype=float).tolist(),
                        "text": a.transcription,
                        "ignore": bool(a.ignore),
                    }
                    for a in sample.annotations
                ],
            }
            fh.write(json.dumps(record) + "\n")


def _require(record: dict, key: str, lineno: int):
    if key not in record:
        raise DatasetFormatError(f"line {lineno}: missing field '{key}'")
    return record[key]


def read_dataset(path: str) -> list[ImageSample]:
    index = os.path.join(path, "index.jsonl")
    samples: list[ImageSample] = []
    with open(index) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"line {lineno}: invalid JSON: {exc}") from exc
            image_path = _require(record, "image_path", lineno)
            completeness = _require(record, "completeness", lineno)
            if completeness not in (FULL, PARTIAL):
                raise DatasetFormatError(
                    f"line {lineno}: bad field 'completeness': {completeness!r}")
            annotations = []
            for ann in _require(record, "annotations", lineno):
                poly = _require(ann, "polygon", lineno)
                text = _require(ann, "text", lineno)
                ignore = bool(ann.get("ignore", False))
                arr = np.asarray(poly, dtype=np.float64)
                if arr.ndim != 2 or arr.shape[1] != 2 or arr.shape[0] < 4:
                    raise DatasetFormatError(
                        f"line {lineno}: field 'polygon' needs at least 4 points")
                annotations.append(TextAnnotation(polygon=arr, transcription=text,
                                                  ignore=ignore))
            img = np.asarray(Image.open(os.path.join(path, image_path)),
                             dtype=np.float32) / 255.0
            sample = ImageSample(image=img, annotations=annotations,
                                 completeness=completeness)
            try:
                sample.validate()
            except CorpusError as exc:
                raise DatasetFormatError(f"line {lineno}: {exc}") from exc
            samples.append(sample)
    return samples


# ---------------------------------------------------------------------------
# random spec helpers for dataset generation

@dataclass(frozen=True)
class SpecSampler:
    """Draws random PathSpecs suited to a given canvas and alphabet."""

    alphabet: str = strokefont.ALPHANUMERIC_UPPER
    word_length: tuple[int, int] = (3, 6)
    font_scale: tuple[float, float] = (14.0, 20.0)
    kinds: tuple[str, ...] = ("line", "arc", "sine")
    max_words: int = 2
    rotation: tuple[float, float] = (-0.35, 0.35)

    def sample(self, rng: np.random.Generator, canvas: tuple[int, int]) -> list[PathSpec]:
        n_words = int(rng.integers(1, self.max_words + 1))
        specs = []
        for _ in range(n_words):
            length = int(rng.integers(self.word_length[0], self.word_length[1] + 1))
            text = "".join(rng.choice(list(self.alphabet), size=length))
            fs = float(rng.uniform(*self.font_scale))
            # shrink long words that cannot fit the canvas diagonal
            max_fs = 0.75 * min(canvas) / (
                (length - 1) * strokefont.ADVANCE + strokefont.GLYPH_WIDTH)
            fs = min(fs, max_fs)
            kind = str(rng.choice(list(self.kinds)))
            rot = float(rng.uniform(*self.rotation))
            if kind == "line":
                kappa = 0.0
            else:
                # keep the inner band radius comfortably positive
                kappa_max = 1.0 / (4.0 * BAND_HALF_HEIGHT * fs)
                kappa = float(rng.uniform(0.3, 1.0) * kappa_max)
                kappa *= 1 if rng.random() < 0.5 else -1
            specs.append(PathSpec(kind=kind, curvature=kappa, rotation=rot,
                                  text=text, font_scale=fs))
        return specs


def generate_samples(n: int, canvas: tuple[int, int], seed: int,
                     sampler: SpecSampler | None = None,
                     partial_fraction: float = 0.0,
                     drop_fraction: float = 0.5) -> list[ImageSample]:
    """Generate n samples; the first ``floor(partial_fraction * n)`` of a
    seeded shuffle are degraded to partial."""
    sampler = sampler or SpecSampler()
    samples = []
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        spec = sampler.sample(rng, canvas)
        samples.append(render_sample(spec, canvas, seed=int(rng.integers(2 ** 31))))
    n_partial = int(math.floor(partial_fraction * n))
    order = np.random.default_rng(np.random.SeedSequence([seed, 2 ** 31]))\
        .permutation(n)
    for idx in order[:n_partial]:
        samples[idx] = degrade_to_partial(samples[idx], drop_fraction,
                                          seed=seed + 7919 * int(idx))
    return samples
