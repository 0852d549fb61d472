"""Built-in stroke font.

Each glyph is a tuple of polylines in a unit cell: x in [0, 0.6], y in
[0, 1] with y pointing down (0 = cap line, 1 = baseline). Horizontal
advance between glyph origins is ``ADVANCE`` cell units. Lowercase letters
are rendered as reduced-size capitals; the full table covers 79 symbols
(digits, both cases, and 17 punctuation marks).
"""

from __future__ import annotations

GLYPH_WIDTH = 0.6
ADVANCE = 0.8

_UPPER = {
    "A": [[(0, 1), (0.3, 0), (0.6, 1)], [(0.15, 0.6), (0.45, 0.6)]],
    "B": [[(0, 0), (0, 1)],
          [(0, 0), (0.45, 0), (0.55, 0.12), (0.55, 0.38), (0.45, 0.5), (0, 0.5)],
          [(0, 0.5), (0.45, 0.5), (0.6, 0.62), (0.6, 0.88), (0.45, 1), (0, 1)]],
    "C": [[(0.6, 0.12), (0.45, 0), (0.15, 0), (0, 0.15), (0, 0.85), (0.15, 1),
           (0.45, 1), (0.6, 0.88)]],
    "D": [[(0, 0), (0, 1)], [(0, 0), (0.4, 0), (0.6, 0.2), (0.6, 0.8), (0.4, 1), (0, 1)]],
    "E": [[(0.6, 0), (0, 0), (0, 1), (0.6, 1)], [(0, 0.5), (0.45, 0.5)]],
    "F": [[(0.6, 0), (0, 0), (0, 1)], [(0, 0.5), (0.45, 0.5)]],
    "G": [[(0.6, 0.12), (0.45, 0), (0.15, 0), (0, 0.15), (0, 0.85), (0.15, 1),
           (0.45, 1), (0.6, 0.85), (0.6, 0.55), (0.35, 0.55)]],
    "H": [[(0, 0), (0, 1)], [(0.6, 0), (0.6, 1)], [(0, 0.5), (0.6, 0.5)]],
    "I": [[(0.15, 0), (0.45, 0)], [(0.3, 0), (0.3, 1)], [(0.15, 1), (0.45, 1)]],
    "J": [[(0.45, 0), (0.45, 0.85), (0.3, 1), (0.1, 1), (0, 0.85)]],
    "K": [[(0, 0), (0, 1)], [(0.55, 0), (0, 0.5), (0.6, 1)]],
    "L": [[(0, 0), (0, 1), (0.6, 1)]],
    "M": [[(0, 1), (0, 0), (0.3, 0.5), (0.6, 0), (0.6, 1)]],
    "N": [[(0, 1), (0, 0), (0.6, 1), (0.6, 0)]],
    "O": [[(0.15, 0), (0.45, 0), (0.6, 0.15), (0.6, 0.85), (0.45, 1), (0.15, 1),
           (0, 0.85), (0, 0.15), (0.15, 0)]],
    "P": [[(0, 1), (0, 0), (0.45, 0), (0.6, 0.12), (0.6, 0.38), (0.45, 0.5), (0, 0.5)]],
    "Q": [[(0.15, 0), (0.45, 0), (0.6, 0.15), (0.6, 0.85), (0.45, 1), (0.15, 1),
           (0, 0.85), (0, 0.15), (0.15, 0)], [(0.35, 0.7), (0.6, 1)]],
    "R": [[(0, 1), (0, 0), (0.45, 0), (0.6, 0.12), (0.6, 0.38), (0.45, 0.5), (0, 0.5)],
          [(0.2, 0.5), (0.6, 1)]],
    "S": [[(0.6, 0.12), (0.45, 0), (0.15, 0), (0, 0.12), (0, 0.38), (0.15, 0.5),
           (0.45, 0.5), (0.6, 0.62), (0.6, 0.88), (0.45, 1), (0.15, 1), (0, 0.88)]],
    "T": [[(0, 0), (0.6, 0)], [(0.3, 0), (0.3, 1)]],
    "U": [[(0, 0), (0, 0.85), (0.15, 1), (0.45, 1), (0.6, 0.85), (0.6, 0)]],
    "V": [[(0, 0), (0.3, 1), (0.6, 0)]],
    "W": [[(0, 0), (0.1, 1), (0.3, 0.5), (0.5, 1), (0.6, 0)]],
    "X": [[(0, 0), (0.6, 1)], [(0.6, 0), (0, 1)]],
    "Y": [[(0, 0), (0.3, 0.5), (0.6, 0)], [(0.3, 0.5), (0.3, 1)]],
    "Z": [[(0, 0), (0.6, 0), (0, 1), (0.6, 1)]],
}

_DIGITS = {
    "0": [[(0.12, 0), (0.48, 0), (0.6, 0.15), (0.6, 0.85), (0.48, 1), (0.12, 1),
           (0, 0.85), (0, 0.15), (0.12, 0)], [(0.5, 0.2), (0.1, 0.8)]],
    "1": [[(0.12, 0.18), (0.3, 0), (0.3, 1)], [(0.1, 1), (0.5, 1)]],
    "2": [[(0, 0.12), (0.12, 0), (0.48, 0), (0.6, 0.12), (0.6, 0.38), (0, 1), (0.6, 1)]],
    "3": [[(0, 0), (0.6, 0), (0.3, 0.45), (0.6, 0.45)],
          [(0.6, 0.45), (0.6, 0.88), (0.45, 1), (0.12, 1), (0, 0.88)]],
    "4": [[(0.45, 1), (0.45, 0), (0, 0.65), (0.6, 0.65)]],
    "5": [[(0.6, 0), (0, 0), (0, 0.42), (0.45, 0.42), (0.6, 0.55), (0.6, 0.85),
           (0.45, 1), (0.1, 1), (0, 0.9)]],
    "6": [[(0.55, 0), (0.15, 0), (0, 0.18), (0, 0.85), (0.12, 1), (0.48, 1),
           (0.6, 0.85), (0.6, 0.62), (0.48, 0.48), (0, 0.48)]],
    "7": [[(0, 0), (0.6, 0), (0.22, 1)]],
    "8": [[(0.12, 0), (0.48, 0), (0.58, 0.12), (0.58, 0.36), (0.44, 0.48),
           (0.16, 0.48), (0.02, 0.36), (0.02, 0.12), (0.12, 0)],
          [(0.16, 0.48), (0.44, 0.48), (0.6, 0.62), (0.6, 0.88), (0.48, 1),
           (0.12, 1), (0, 0.88), (0, 0.62), (0.16, 0.48)]],
    "9": [[(0.6, 0.52), (0.12, 0.52), (0, 0.38), (0, 0.15), (0.12, 0), (0.48, 0),
           (0.6, 0.15), (0.6, 0.82), (0.45, 1), (0.05, 1)]],
}

_PUNCT = {
    "!": [[(0.3, 0), (0.3, 0.7)], [(0.3, 0.92), (0.3, 1)]],
    "?": [[(0, 0.12), (0.15, 0), (0.45, 0), (0.6, 0.12), (0.6, 0.35), (0.3, 0.5),
           (0.3, 0.7)], [(0.3, 0.92), (0.3, 1)]],
    ".": [[(0.3, 0.92), (0.3, 1)]],
    ",": [[(0.33, 0.85), (0.26, 1)]],
    "'": [[(0.3, 0), (0.28, 0.2)]],
    '"': [[(0.22, 0), (0.2, 0.2)], [(0.4, 0), (0.38, 0.2)]],
    "-": [[(0.1, 0.5), (0.5, 0.5)]],
    "+": [[(0.1, 0.5), (0.5, 0.5)], [(0.3, 0.3), (0.3, 0.7)]],
    "=": [[(0.1, 0.4), (0.5, 0.4)], [(0.1, 0.62), (0.5, 0.62)]],
    "/": [[(0.6, 0), (0, 1)]],
    "\\": [[(0, 0), (0.6, 1)]],
    "(": [[(0.45, 0), (0.3, 0.2), (0.3, 0.8), (0.45, 1)]],
    ")": [[(0.15, 0), (0.3, 0.2), (0.3, 0.8), (0.15, 1)]],
    "[": [[(0.45, 0), (0.25, 0), (0.25, 1), (0.45, 1)]],
    "]": [[(0.15, 0), (0.35, 0), (0.35, 1), (0.15, 1)]],
    ":": [[(0.3, 0.3), (0.3, 0.38)], [(0.3, 0.7), (0.3, 0.78)]],
    ";": [[(0.3, 0.3), (0.3, 0.38)], [(0.33, 0.7), (0.26, 0.88)]],
}


def _small_caps(strokes):
    return [[(0.09 + 0.7 * x, 0.3 + 0.7 * y) for x, y in line] for line in strokes]


GLYPHS: dict[str, list[list[tuple[float, float]]]] = {}
GLYPHS.update(_DIGITS)
GLYPHS.update(_UPPER)
GLYPHS.update({c.lower(): _small_caps(s) for c, s in _UPPER.items()})
GLYPHS.update(_PUNCT)

DIGITS = "0123456789"
UPPERCASE = "ABCDEFGHIJKLMNOPQRSTUVWXYZ"
LOWERCASE = UPPERCASE.lower()
PUNCTUATION = "".join(_PUNCT)

# 36-symbol desk-scale inventory and the full 79-symbol inventory
ALPHANUMERIC_UPPER = DIGITS + UPPERCASE
FULL_INVENTORY = DIGITS + UPPERCASE + LOWERCASE + PUNCTUATION

assert len(FULL_INVENTORY) == 79
assert set(FULL_INVENTORY) == set(GLYPHS)
