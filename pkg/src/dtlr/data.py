"""Dataset ingestion and batching.

Datasets are JSONL manifests next to their image files. One object per
line: {"image": relative path, "text": str, "chars": [{"c": symbol,
"box": [cx, cy, w, h]}, ...]}; real (line-level only) datasets use the
same schema with "chars" absent.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
from PIL import Image

from .core import Alphabet, BBox, CharAnnotation, LineSample


def load_image(path: str, line_height: Optional[int] = None) -> np.ndarray:
    """Read an image as HxWx3 float in [0,1], optionally scaled to a height."""
    img = Image.open(path).convert("RGB")
    if line_height is not None and img.height != line_height:
        scale = line_height / img.height
        img = img.resize((max(1, int(round(img.width * scale))), line_height),
                         Image.BILINEAR)
    return np.asarray(img, dtype=np.float32) / 255.0


class LineDataset:
    """Manifest-backed list of LineSamples, held in memory."""

    def __init__(self, manifest_path: str, alphabet: Alphabet,
                 line_height: Optional[int] = None):
        self.alphabet = alphabet
        self.root = os.path.dirname(os.path.abspath(manifest_path))
        self.records: list[dict] = []
        with open(manifest_path, encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if line:
                    self.records.append(json.loads(line))
        bad = sorted({c for r in self.records for c in r["text"] if c not in alphabet})
        if bad:
            raise ValueError(f"transcript symbols outside alphabet: {bad!r}")
        self.line_height = line_height
        self._cache: dict[int, LineSample] = {}

    def __len__(self) -> int:
        return len(self.records)

    def image_path(self, i: int) -> str:
        return os.path.join(self.root, self.records[i]["image"])

    def text(self, i: int) -> str:
        return self.records[i]["text"]

    @property
    def has_char_boxes(self) -> bool:
        return all("chars" in r and r["chars"] for r in self.records) and len(self.records) > 0

    def get(self, i: int) -> LineSample:
        if i not in self._cache:
            rec = self.records[i]
            image = load_image(self.image_path(i), self.line_height)
            transcript = self.alphabet.encode(rec["text"])
            anns = None
            if rec.get("chars"):
                anns = [CharAnnotation(self.alphabet.index(c["c"]), BBox(*c["box"]))
                        for c in rec["chars"]]
            self._cache[i] = LineSample(image=image, transcript=transcript,
                                        char_annotations=anns)
        return self._cache[i]


@dataclass
class Batch:
    images: torch.Tensor                  # [B, 3, H, W]
    samples: list[LineSample]             # boxes renormalized to padded width
    widths: list[int]                     # original pixel widths


def _pad_sample(sample: LineSample, width: int, fill: float = 1.0) -> LineSample:
    h, w = sample.image.shape[:2]
    if w == width:
        return sample
    image = np.full((h, width, 3), fill, dtype=sample.image.dtype)
    image[:, :w] = sample.image
    scale = w / width
    anns = None
    if sample.char_annotations is not None:
        anns = [CharAnnotation(a.symbol_index,
                               BBox(a.box.cx * scale, a.box.cy, a.box.w * scale, a.box.h))
                for a in sample.char_annotations]
    return LineSample(image=image, transcript=list(sample.transcript), char_annotations=anns)


def collate(samples: Sequence[LineSample], pad_multiple: int = 32,
            dtype=torch.float32) -> Batch:
    """Right-pad images to a common width and renormalize boxes to it."""
    widths = [s.image.shape[1] for s in samples]
    target = max(widths)
    target = int(np.ceil(target / pad_multiple) * pad_multiple)
    padded = [_pad_sample(s, target) for s in samples]
    images = torch.as_tensor(
        np.stack([p.image for p in padded]), dtype=dtype).permute(0, 3, 1, 2).contiguous()
    return Batch(images=images, samples=padded, widths=widths)


def unpad_box(box: BBox, orig_width: int, padded_width: int) -> BBox:
    """Map a box normalized to the padded width back to the original image."""
    scale = padded_width / orig_width
    return BBox(box.cx * scale, box.cy, box.w * scale, box.h)
