"""Shared geometry, alphabet and detection types.

Boxes are kept in normalized center format (cx, cy, w, h), all relative to
image width/height, matching what a sigmoid box head produces. Corner form
is derived on demand.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

WHITESPACE = " "


@dataclass(frozen=True)
class BBox:
    """Normalized center-format box: center (cx, cy), size (w, h)."""

    cx: float
    cy: float
    w: float
    h: float

    def corners(self) -> tuple[float, float, float, float]:
        return to_corner(self)

    def area(self) -> float:
        return self.w * self.h

    def min_x(self) -> float:
        return self.cx - 0.5 * self.w

    def min_y(self) -> float:
        return self.cy - 0.5 * self.h

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)


def to_corner(b: BBox) -> tuple[float, float, float, float]:
    """(cx, cy, w, h) -> (x0, y0, x1, y1)."""
    return (b.cx - 0.5 * b.w, b.cy - 0.5 * b.h, b.cx + 0.5 * b.w, b.cy + 0.5 * b.h)


def from_corner(x0: float, y0: float, x1: float, y1: float) -> BBox:
    """Inverse of :func:`to_corner`. Rejects degenerate boxes."""
    if x1 <= x0 or y1 <= y0:
        raise ValueError(f"degenerate corner box: ({x0}, {y0}, {x1}, {y1})")
    return BBox(0.5 * (x0 + x1), 0.5 * (y0 + y1), x1 - x0, y1 - y0)


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union. Zero-area overlap counts as 0, never negative."""
    ax0, ay0, ax1, ay1 = to_corner(a)
    bx0, by0, bx1, by1 = to_corner(b)
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area() + b.area() - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def giou(a: BBox, b: BBox) -> float:
    """Generalized IoU: IoU minus the enclosing-box slack, in (-1, 1]."""
    ax0, ay0, ax1, ay1 = to_corner(a)
    bx0, by0, bx1, by1 = to_corner(b)
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area() + b.area() - inter
    ew = max(ax1, bx1) - min(ax0, bx0)
    eh = max(ay1, by1) - min(ay0, by0)
    enclose = ew * eh
    if union <= 0.0 or enclose <= 0.0:
        return 0.0
    return inter / union - (enclose - union) / enclose


class Alphabet:
    """Ordered set of character symbols with a dense index map.

    Whitespace is a first-class symbol (a detected class of its own) and
    must appear exactly once.
    """

    def __init__(self, symbols: Sequence[str]):
        symbols = list(symbols)
        if len(set(symbols)) != len(symbols):
            dupes = sorted({s for s in symbols if symbols.count(s) > 1})
            raise ValueError(f"duplicate symbols: {dupes!r}")
        if symbols.count(WHITESPACE) != 1:
            raise ValueError("alphabet must contain the whitespace symbol exactly once")
        self.symbols: tuple[str, ...] = tuple(symbols)
        self._index = {s: i for i, s in enumerate(self.symbols)}

    def __len__(self) -> int:
        return len(self.symbols)

    def __contains__(self, symbol: str) -> bool:
        return symbol in self._index

    def __eq__(self, other) -> bool:
        return isinstance(other, Alphabet) and self.symbols == other.symbols

    def index(self, symbol: str) -> int:
        return self._index[symbol]

    def symbol(self, index: int) -> str:
        return self.symbols[index]

    @property
    def whitespace_index(self) -> int:
        return self._index[WHITESPACE]

    def encode(self, text: str) -> list[int]:
        unknown = sorted({c for c in text if c not in self._index})
        if unknown:
            raise ValueError(f"symbols outside alphabet: {unknown!r}")
        return [self._index[c] for c in text]

    def decode(self, indices: Sequence[int]) -> str:
        return "".join(self.symbols[i] for i in indices)

    @classmethod
    def from_characters(cls, characters: str, include_whitespace: bool = True) -> "Alphabet":
        syms = list(dict.fromkeys(characters))
        if include_whitespace and WHITESPACE not in syms:
            syms = [WHITESPACE] + syms
        return cls(syms)


@dataclass
class Detection:
    """One decoder query's output: a box plus independent per-class probabilities."""

    box: BBox
    probs: np.ndarray  # shape (|alphabet|,), each in [0, 1], not normalized
    query_index: int = 0

    def score(self) -> float:
        """Confidence used for suppression: best class probability."""
        return float(np.max(self.probs)) if self.probs.size else 0.0


@dataclass(frozen=True)
class CharAnnotation:
    """Ground-truth character: class index into the alphabet plus its box."""

    symbol_index: int
    box: BBox


@dataclass
class LineSample:
    """A text line image with its transcript.

    ``char_annotations`` is present for synthetic data only; when present it
    has one entry per transcript symbol and its min-x order spells the
    transcript.
    """

    image: np.ndarray  # H x W x C float in [0, 1]
    transcript: list[int]
    char_annotations: Optional[list[CharAnnotation]] = None

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]
