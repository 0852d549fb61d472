"""Sequence-to-sequence attention decoder over flattened masked instance
features: teacher forcing at train time, greedy decoding at inference.

Per step, attention energies are e_j = v^T tanh(W_s s_prev + W_h h_j) with
e_j = -inf at padded cells, the context is the attention-weighted feature
sum, and the LSTM consumes the embedded previous symbol concatenated with
the context. Logits are a linear map of the LSTM output only. There is no
positional encoding: position awareness comes entirely from feature content
and the learned attention dynamics, which is what lets the decoder follow
curved text paths.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from . import strokefont


@dataclass(frozen=True)
class Vocabulary:
    """Glyph inventory plus START/EOS control symbols.

    Glyphs get ids 0..n-1; START = n, EOS = n + 1.
    """

    symbols: str = strokefont.ALPHANUMERIC_UPPER

    def __post_init__(self):
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("duplicate symbols in vocabulary")

    @property
    def start_id(self) -> int:
        return len(self.symbols)

    @property
    def eos_id(self) -> int:
        return len(self.symbols) + 1

    @property
    def size(self) -> int:
        return len(self.symbols) + 2

    def encode(self, text: str) -> list[int]:
        try:
            return [self.symbols.index(c) for c in text]
        except ValueError:
            bad = [c for c in text if c not in self.symbols]
            raise ValueError(f"symbols outside vocabulary: {bad!r}") from None

    def encode_target(self, text: str) -> list[int]:
        return self.encode(text) + [self.eos_id]

    def decode(self, ids) -> str:
        out = []
        for i in ids:
            if i == self.eos_id:
                break
            if 0 <= i < len(self.symbols):
                out.append(self.symbols[i])
        return "".join(out)

    def symbol_name(self, i: int) -> str:
        if i == self.eos_id:
            return "EOS"
        if i == self.start_id:
            return "START"
        return self.symbols[i]


def full_vocabulary() -> Vocabulary:
    """The 79-symbol inventory (digits, both cases, punctuation)."""
    return Vocabulary(symbols=strokefont.FULL_INVENTORY)


@dataclass
class DecoderStep:
    y_prev: torch.Tensor
    s_prev: tuple[torch.Tensor, torch.Tensor]
    s_next: tuple[torch.Tensor, torch.Tensor]
    o: torch.Tensor
    c: torch.Tensor
    alpha: torch.Tensor
    logits: torch.Tensor


@dataclass
class AttentionTrace:
    """Per-step attention grids (reshaped to the instance feature grid) for
    every emitted symbol, EOS included."""

    alphas: list[np.ndarray]
    symbol_ids: list[int]
    confidences: list[float]


class AttentionDecoder(nn.Module):
    """Single-layer LSTM (256 units at full scale) with additive attention,
    optional gate layer normalization and Gal-style recurrent dropout."""

    def __init__(self, vocab: Vocabulary, feature_dim: int = 128,
                 hidden_dim: int = 256, attn_dim: int = 128,
                 embed_dim: int = 64, recurrent_dropout: float = 0.1,
                 layer_norm: bool = True):
        super().__init__()
        self.vocab = vocab
        self.feature_dim = feature_dim
        self.hidden_dim = hidden_dim
        self.recurrent_dropout = recurrent_dropout
        self.embedding = nn.Embedding(vocab.size, embed_dim)
        self.w_x = nn.Linear(embed_dim + feature_dim, 4 * hidden_dim, bias=False)
        self.w_h = nn.Linear(hidden_dim, 4 * hidden_dim, bias=False)
        self.bias = nn.Parameter(torch.zeros(4 * hidden_dim))
        self.layer_norm = layer_norm
        if layer_norm:
            self.ln_x = nn.LayerNorm(4 * hidden_dim)
            self.ln_h = nn.LayerNorm(4 * hidden_dim)
            self.ln_c = nn.LayerNorm(hidden_dim)
        self.attn_state = nn.Linear(hidden_dim, attn_dim)
        self.attn_feat = nn.Linear(feature_dim, attn_dim, bias=False)
        self.attn_v = nn.Parameter(torch.zeros(attn_dim))
        self.out_proj = nn.Linear(hidden_dim, vocab.size)
        self.reset_parameters()

    def reset_parameters(self):
        for w in (self.w_x.weight, self.w_h.weight, self.attn_state.weight,
                  self.attn_feat.weight, self.out_proj.weight):
            nn.init.xavier_uniform_(w)
        nn.init.normal_(self.attn_v, std=1.0 / np.sqrt(self.attn_v.numel()))
        nn.init.zeros_(self.out_proj.bias)
        nn.init.zeros_(self.attn_state.bias)
        with torch.no_grad():
            # positive forget-gate bias
            self.bias.zero_()
            h = self.hidden_dim
            self.bias[h:2 * h] = 1.0

    def initial_state(self, batch: int, dtype=None, device=None):
        p = next(self.parameters())
        dtype = dtype or p.dtype
        device = device or p.device
        z = torch.zeros(batch, self.hidden_dim, dtype=dtype, device=device)
        return z, z.clone()

    def _lstm_step(self, x, state, drop_mask=None):
        h_prev, c_prev = state
        if drop_mask is not None:
            h_in = h_prev * drop_mask
        else:
            h_in = h_prev
        gx = self.w_x(x)
        gh = self.w_h(h_in)
        if self.layer_norm:
            gx = self.ln_x(gx)
            gh = self.ln_h(gh)
        pre = gx + gh + self.bias
        i, f, g, o = pre.chunk(4, dim=-1)
        c_next = torch.sigmoid(f) * c_prev + torch.sigmoid(i) * torch.tanh(g)
        c_for_h = self.ln_c(c_next) if self.layer_norm else c_next
        h_next = torch.sigmoid(o) * torch.tanh(c_for_h)
        return h_next, c_next

    def _attend(self, s_prev, flat, validity):
        # e_j = v^T tanh(W_s s_prev + W_h h_j); -inf off the real cells
        proj = self.attn_state(s_prev)[:, None, :] + self.attn_feat(flat)
        energy = torch.tanh(proj) @ self.attn_v
        energy = torch.where(validity, energy,
                             torch.tensor(float("-inf"), dtype=energy.dtype,
                                          device=energy.device))
        alpha = torch.softmax(energy, dim=1)
        context = torch.bmm(alpha[:, None, :], flat)[:, 0]
        return alpha, context

    def decode_step(self, y_prev: torch.Tensor,
                    s_prev: tuple[torch.Tensor, torch.Tensor],
                    flat_features: torch.Tensor, validity: torch.Tensor,
                    drop_mask: torch.Tensor | None = None) -> DecoderStep:
        """One decoder step.

        y_prev: [B] previous symbol ids; s_prev: (h, c) each [B, H];
        flat_features: [B, J, C]; validity: [B, J] bool.
        """
        if flat_features.shape[-1] != self.feature_dim:
            raise ValueError(
                f"feature dim {flat_features.shape[-1]} != {self.feature_dim}")
        alpha, context = self._attend(s_prev[0], flat_features, validity)
        x = torch.cat([self.embedding(y_prev), context], dim=-1)
        h_next, c_next = self._lstm_step(x, s_prev, drop_mask)
        logits = self.out_proj(h_next)
        return DecoderStep(y_prev=y_prev, s_prev=s_prev,
                           s_next=(h_next, c_next), o=h_next, c=context,
                           alpha=alpha, logits=logits)

    def _drop_mask(self, batch, dtype, device,
                   generator: torch.Generator | None = None):
        if not self.training or self.recurrent_dropout <= 0.0:
            return None
        keep = 1.0 - self.recurrent_dropout
        mask = torch.rand(batch, self.hidden_dim, dtype=dtype, device=device,
                          generator=generator)
        return (mask < keep).to(dtype) / keep

    def teacher_forced_logits(self, flat_features: torch.Tensor,
                              validity: torch.Tensor,
                              targets: torch.Tensor,
                              generator: torch.Generator | None = None) -> torch.Tensor:
        """Logits for every step of teacher forcing.

        targets: [B, T] ending with EOS (shorter rows padded with EOS).
        Step i consumes target symbol i-1 (START at step 0) and predicts
        target symbol i; returns [B, T, V].
        """
        if targets.ndim != 2 or targets.shape[1] == 0:
            raise ValueError("targets must be [B, T] with T >= 1")
        b, t = targets.shape
        state = self.initial_state(b, dtype=flat_features.dtype,
                                   device=flat_features.device)
        y = torch.full((b,), self.vocab.start_id, dtype=torch.long,
                       device=flat_features.device)
        drop = self._drop_mask(b, flat_features.dtype, flat_features.device,
                               generator)
        rows = []
        for i in range(t):
            step = self.decode_step(y, state, flat_features, validity, drop)
            rows.append(step.logits)
            state = step.s_next
            y = targets[:, i]
        return torch.stack(rows, dim=1)

    @torch.no_grad()
    def greedy_decode(self, flat_features: torch.Tensor,
                      grid_shape: tuple[int, int],
                      max_steps: int = 40) -> tuple[str, AttentionTrace]:
        """Greedy decoding of a single instance.

        flat_features: [J, C] (no padding). Emits the argmax symbol each
        step until EOS or max_steps; EOS is excluded from the transcription
        but its step is kept in the trace.
        """
        if max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        was_training = self.training
        self.eval()
        try:
            flat = flat_features[None]
            validity = torch.ones(flat.shape[:2], dtype=torch.bool,
                                  device=flat.device)
            state = self.initial_state(1, dtype=flat.dtype, device=flat.device)
            y = torch.full((1,), self.vocab.start_id, dtype=torch.long,
                           device=flat.device)
            ids: list[int] = []
            alphas: list[np.ndarray] = []
            confs: list[float] = []
            h, w = grid_shape
            for _ in range(max_steps):
                step = self.decode_step(y, state, flat, validity)
                probs = torch.softmax(step.logits, dim=-1)[0]
                sym = int(probs.argmax())
                ids.append(sym)
                confs.append(float(probs[sym]))
                alphas.append(step.alpha[0].reshape(h, w).cpu().numpy())
                if sym == self.vocab.eos_id:
                    break
                state = step.s_next
                y = torch.tensor([sym], dtype=torch.long, device=flat.device)
        finally:
            if was_training:
                self.train()
        trace = AttentionTrace(alphas=alphas, symbol_ids=ids, confidences=confs)
        text = self.vocab.decode(ids)
        return text, trace


def safe_symbol_name(vocab: Vocabulary, sym_id: int) -> str:
    name = vocab.symbol_name(sym_id)
    if re.fullmatch(r"[A-Za-z0-9]+", name):
        return name
    return f"sym{sym_id:02d}"


def export_attention_trace(trace: AttentionTrace, image: np.ndarray, box,
                           out_dir: str, detection_id: str,
                           vocab: Vocabulary) -> list[str]:
    """One grayscale heatmap per step: the attention grid upsampled to the
    source box and alpha-blended over the input crop. Returns written paths."""
    import os

    from PIL import Image

    os.makedirs(out_dir, exist_ok=True)
    x0, y0, x1, y1 = (int(round(float(v))) for v in np.asarray(box).reshape(4))
    h_img, w_img = image.shape[:2]
    x0, y0 = max(x0, 0), max(y0, 0)
    x1, y1 = min(max(x1, x0 + 1), w_img), min(max(y1, y0 + 1), h_img)
    crop = image[y0:y1, x0:x1]
    if crop.ndim == 3:
        crop = crop.mean(axis=2)
    paths = []
    for step, (alpha, sym) in enumerate(zip(trace.alphas, trace.symbol_ids)):
        t = torch.as_tensor(alpha, dtype=torch.float64)[None, None]
        up = torch.nn.functional.interpolate(
            t, size=crop.shape, mode="bilinear", align_corners=False)[0, 0].numpy()
        if up.max() > 0:
            up = up / up.max()
        blend = np.clip(0.55 * crop + 0.45 * up, 0.0, 1.0)
        arr = np.round(blend * 255.0).astype(np.uint8)
        name = f"{detection_id}_{step}_{safe_symbol_name(vocab, sym)}.png"
        path = os.path.join(out_dir, name)
        Image.fromarray(arr).save(path)
        paths.append(path)
    return paths
