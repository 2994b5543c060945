"""Synthetic annotated text line generation.

Lines are rendered from TTF fonts (or a per-character glyph-image bank)
over procedurally textured backgrounds, blended with value noise and
blurred. Every character, whitespace included, gets a bounding box; the
two-kind random erasing (full-height vertical blocks over characters,
thin full-width horizontal strips) never touches transcripts or
annotations, which is what forces the detector to guess occluded
characters from context.
"""
from __future__ import annotations

import json
import multiprocessing
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from PIL import Image, ImageDraw, ImageFilter, ImageFont

from .core import Alphabet, BBox, CharAnnotation, LineSample, WHITESPACE

SAMPLER_MODES = ("natural_text", "uniform_cipher", "random_sequence")


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def default_font_paths() -> list[str]:
    """Bundled TTF fonts shipped with matplotlib, if present."""
    try:
        import matplotlib
    except ImportError:
        return []
    d = os.path.join(os.path.dirname(matplotlib.__file__), "mpl-data", "fonts", "ttf")
    if not os.path.isdir(d):
        return []
    return sorted(os.path.join(d, f) for f in os.listdir(d)
                  if f.startswith("DejaVu") and f.endswith(".ttf"))


@dataclass
class CorpusSampler:
    """Sentence source: natural text lines, uniform cipher words, or raw
    uniform character sequences."""

    mode: str
    alphabet: Alphabet
    corpus: Optional[list[str]] = None
    max_len: int = 48

    def __post_init__(self):
        if self.mode not in SAMPLER_MODES:
            raise ValueError(f"mode must be one of {SAMPLER_MODES}")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")
        if self.mode == "natural_text":
            if not self.corpus:
                raise ValueError("natural_text mode needs a nonempty corpus")
            bad = sorted({c for line in self.corpus for c in line if c not in self.alphabet})
            if bad:
                raise ValueError(f"corpus symbols outside alphabet: {bad!r}")

    @property
    def letters(self) -> list[str]:
        return [s for s in self.alphabet.symbols if s != WHITESPACE]


def sample_sentence(sampler: CorpusSampler, rng_seed) -> str:
    """Draw one sentence; deterministic given the seed."""
    rng = _rng(rng_seed)
    if sampler.mode == "natural_text":
        line = sampler.corpus[int(rng.integers(0, len(sampler.corpus)))]
        return line[:sampler.max_len].rstrip(WHITESPACE) or line[0]
    letters = sampler.letters
    if sampler.mode == "random_sequence":
        lo = max(1, sampler.max_len // 2)
        n = int(rng.integers(lo, sampler.max_len + 1))
        return "".join(rng.choice(letters, size=n))
    # uniform_cipher: words of uniform characters separated by single spaces
    target = int(rng.integers(max(1, sampler.max_len // 2), sampler.max_len + 1))
    words = []
    used = 0
    while used < target:
        n = int(rng.integers(2, 8))
        n = min(n, sampler.max_len - used)
        if n < 1:
            break
        words.append("".join(rng.choice(letters, size=n)))
        used += n + 1
    return WHITESPACE.join(words)[:sampler.max_len].rstrip(WHITESPACE)


@dataclass
class RenderConfig:
    font_paths: list[str] = field(default_factory=default_font_paths)
    handwriting_prob: float = 0.5
    background_paths: list[str] = field(default_factory=list)
    line_height_px: int = 64
    max_width_px: int = 1024
    blur_sigma_range: tuple[float, float] = (0.3, 2.0)
    noise_strength: float = 0.35
    margin_px: int = 8
    glyph_bank: Optional[str] = None  # per-character image bank directory

    def __post_init__(self):
        if not 0.0 <= self.handwriting_prob <= 1.0:
            raise ValueError("handwriting_prob must lie in [0, 1]")
        if self.line_height_px <= 0:
            raise ValueError("line_height_px must be > 0")
        if self.blur_sigma_range[0] > self.blur_sigma_range[1]:
            raise ValueError("blur_sigma_range must be ordered")


@dataclass
class EraseConfig:
    vertical_block_prob_per_char: float = 0.1
    vertical_block_width_range: tuple[float, float] = (0.5, 1.5)  # x median char width
    horizontal_strip_prob: float = 0.5
    horizontal_strip_height_range: tuple[float, float] = (0.05, 0.15)  # x line height
    fill: object = "background"  # "background" or a constant in [0, 1]

    def __post_init__(self):
        for name in ("vertical_block_prob_per_char", "horizontal_strip_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        for name in ("vertical_block_width_range", "horizontal_strip_height_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} must be ordered")

    @classmethod
    def disabled(cls) -> "EraseConfig":
        return cls(vertical_block_prob_per_char=0.0, horizontal_strip_prob=0.0)


def _value_noise(rng: np.random.Generator, h: int, w: int, cell: int = 16) -> np.ndarray:
    """Smooth [0,1] noise: a coarse random grid bilinearly upsampled."""
    gh, gw = max(2, h // cell), max(2, w // cell)
    grid = rng.random((gh, gw)).astype(np.float32)
    img = Image.fromarray((grid * 255).astype(np.uint8), "L").resize((w, h), Image.BILINEAR)
    return np.asarray(img, dtype=np.float32) / 255.0


def _background(rng: np.random.Generator, h: int, w: int,
                background_paths: Sequence[str] = (),
                noise_strength: float = 0.35) -> np.ndarray:
    """HxWx3 float paper-like background."""
    if background_paths:
        path = background_paths[int(rng.integers(0, len(background_paths)))]
        img = Image.open(path).convert("RGB").resize((w, h), Image.BILINEAR)
        base = np.asarray(img, dtype=np.float32) / 255.0
    else:
        tone = rng.uniform(0.72, 0.96)
        tint = tone + rng.uniform(-0.04, 0.04, size=3)
        base = np.ones((h, w, 3), dtype=np.float32) * tint.astype(np.float32)
    noise = _value_noise(rng, h, w)[:, :, None] - 0.5
    out = base + noise_strength * 0.35 * noise
    return np.clip(out, 0.0, 1.0)


_NOTDEF_CACHE: dict[str, bytes] = {}


def _font_covers(font: ImageFont.FreeTypeFont, text: str) -> bool:
    """Glyph coverage probe: a character rendering like U+E000 is missing."""
    key = getattr(font, "path", None) or str(id(font))
    key = f"{key}:{font.size}"
    if key not in _NOTDEF_CACHE:
        notdef = font.getmask("")
        _NOTDEF_CACHE[key] = bytes(notdef) + str(notdef.size).encode()
    ref = _NOTDEF_CACHE[key]
    for ch in set(text):
        if ch == WHITESPACE:
            continue
        mask = font.getmask(ch)
        sig = bytes(mask) + str(mask.size).encode()
        if sig == ref or mask.size[0] == 0:
            return False
    return True


def _handwriting_pools(paths: Sequence[str]) -> tuple[list[str], list[str]]:
    markers = ("hand", "script", "italic", "oblique")
    hand = [p for p in paths if any(m in os.path.basename(p).lower() for m in markers)]
    plain = [p for p in paths if p not in hand]
    return hand, plain


def _pick_font(cfg: RenderConfig, text: str, rng: np.random.Generator):
    if not cfg.font_paths:
        raise ValueError("no fonts configured")
    hand, plain = _handwriting_pools(cfg.font_paths)
    if hand and plain:
        pool = hand if rng.random() < cfg.handwriting_prob else plain
    else:
        pool = list(cfg.font_paths)
    size = int(cfg.line_height_px * rng.uniform(0.45, 0.62))
    order = list(rng.permutation(len(pool)))
    candidates = [pool[i] for i in order] + [p for p in cfg.font_paths if p not in pool]
    for path in candidates:
        font = ImageFont.truetype(path, size)
        if _font_covers(font, text):
            return font
    raise ValueError(f"no configured font covers the text {text!r}")


def _render_font_line(text: str, cfg: RenderConfig, rng: np.random.Generator):
    """Ink mask plus per-character pixel boxes for TTF rendering."""
    font = _pick_font(cfg, text, rng)
    ascent, descent = font.getmetrics()
    band = ascent + descent
    h = cfg.line_height_px
    margin = cfg.margin_px
    total = font.getlength(text)
    w = int(np.ceil(total)) + 2 * margin
    top = (h - band) // 2 + int(rng.integers(-2, 3))
    top = max(0, min(top, h - band)) if band <= h else 0

    mask = Image.new("L", (w, h), 0)
    draw = ImageDraw.Draw(mask)
    draw.text((margin, top), text, font=font, fill=255)

    boxes = []
    for i, ch in enumerate(text):
        pen = margin + font.getlength(text[:i])
        adv = font.getlength(text[: i + 1]) - font.getlength(text[:i])
        if ch == WHITESPACE:
            y0 = top + 0.45 * ascent
            box = (pen, y0, pen + adv, top + ascent)
        else:
            bx0, by0, bx1, by1 = font.getbbox(ch)
            if bx1 <= bx0 or by1 <= by0:
                box = (pen, top, pen + adv, top + band)
            else:
                box = (pen + bx0, top + by0, pen + bx1, top + by1)
        boxes.append(box)
    return mask, boxes


def _render_bank_line(text: str, cfg: RenderConfig, rng: np.random.Generator):
    """Ink mask from a glyph-image bank: <bank>/<codepoint-hex>/<n>.png."""
    bank = cfg.glyph_bank
    h = cfg.line_height_px
    target = int(h * rng.uniform(0.55, 0.7))
    glyphs: list[Optional[np.ndarray]] = []
    for ch in text:
        if ch == WHITESPACE:
            glyphs.append(None)
            continue
        d = os.path.join(bank, f"{ord(ch):04x}")
        if not os.path.isdir(d):
            raise ValueError(f"glyph bank has no directory for {ch!r} ({d})")
        files = sorted(f for f in os.listdir(d) if f.endswith(".png"))
        if not files:
            raise ValueError(f"glyph bank directory {d} is empty")
        path = os.path.join(d, files[int(rng.integers(0, len(files)))])
        img = Image.open(path).convert("L")
        scale = target / img.height
        img = img.resize((max(1, int(img.width * scale)), target), Image.BILINEAR)
        glyphs.append(255 - np.asarray(img, dtype=np.uint8))  # ink bright on black

    margin = cfg.margin_px
    gap = lambda: int(rng.integers(1, 5))
    pen = margin
    placements = []
    boxes = []
    top = (h - target) // 2
    for ch, g in zip(text, glyphs):
        if g is None:
            adv = int(0.45 * target)
            boxes.append((pen, top + 0.45 * target, pen + adv, top + target))
            pen += adv
        else:
            placements.append((pen, top, g))
            boxes.append((pen, top, pen + g.shape[1], top + g.shape[0]))
            pen += g.shape[1] + gap()
    w = pen + margin
    mask_arr = np.zeros((h, w), dtype=np.uint8)
    for x, y, g in placements:
        mask_arr[y:y + g.shape[0], x:x + g.shape[1]] = np.maximum(
            mask_arr[y:y + g.shape[0], x:x + g.shape[1]], g)
    return Image.fromarray(mask_arr, "L"), boxes


def render_line(text: str, cfg: RenderConfig, rng_seed, alphabet: Alphabet) -> LineSample:
    """Render one annotated line; byte-identical for a fixed seed."""
    if len(text) == 0:
        raise ValueError("cannot render empty text")
    transcript = alphabet.encode(text)
    rng = _rng(rng_seed)

    if cfg.glyph_bank:
        mask, px_boxes = _render_bank_line(text, cfg, rng)
    else:
        mask, px_boxes = _render_font_line(text, cfg, rng)
    w, h = mask.size

    bg = _background(rng, h, w, cfg.background_paths, cfg.noise_strength)
    ink_color = rng.uniform(0.0, 0.38, size=3).astype(np.float32)
    alpha = np.asarray(mask, dtype=np.float32) / 255.0
    texture = 1.0 - cfg.noise_strength * _value_noise(rng, h, w, cell=8)
    alpha = alpha * texture
    img = bg * (1.0 - alpha[:, :, None]) + ink_color[None, None, :] * alpha[:, :, None]

    sigma = rng.uniform(*cfg.blur_sigma_range)
    pil = Image.fromarray((np.clip(img, 0, 1) * 255).astype(np.uint8), "RGB")
    pil = pil.filter(ImageFilter.GaussianBlur(radius=float(sigma)))

    scale_x = 1.0
    if w > cfg.max_width_px:
        scale_x = cfg.max_width_px / w
        new_h = max(1, int(round(h * scale_x)))
        scaled = pil.resize((cfg.max_width_px, new_h), Image.BILINEAR)
        canvas = Image.new("RGB", (cfg.max_width_px, h),
                           tuple(int(c * 255) for c in np.median(bg, axis=(0, 1))))
        pad_top = (h - new_h) // 2
        canvas.paste(scaled, (0, pad_top))
        pil = canvas
        px_boxes = [(x0 * scale_x, y0 * scale_x + pad_top, x1 * scale_x, y1 * scale_x + pad_top)
                    for x0, y0, x1, y1 in px_boxes]
        w = cfg.max_width_px

    image = np.asarray(pil, dtype=np.float32) / 255.0
    annotations = []
    for sym, (x0, y0, x1, y1) in zip(transcript, px_boxes):
        x0, x1 = max(0.0, x0) / w, min(float(w), x1) / w
        y0, y1 = max(0.0, y0) / h, min(float(h), y1) / h
        x1 = max(x1, x0 + 1.0 / w)
        y1 = max(y1, y0 + 1.0 / h)
        annotations.append(CharAnnotation(sym, BBox((x0 + x1) / 2, (y0 + y1) / 2,
                                                    x1 - x0, y1 - y0)))
    return LineSample(image=image, transcript=transcript, char_annotations=annotations)


def sample_erase_regions(sample: LineSample, cfg: EraseConfig, rng: np.random.Generator):
    """Pixel rectangles (kind, x0, x1, y0, y1) the eraser will cover, clipped."""
    h, w = sample.image.shape[:2]
    regions = []
    anns = sample.char_annotations
    if anns:
        median_w = float(np.median([a.box.w * w for a in anns]))
        centers = [a.box.cx * w for a in anns]
    else:
        median_w = 0.6 * h
        est = max(1, int(round(w / median_w)))
        centers = [(i + 0.5) * w / est for i in range(est)]
    for cx in centers:
        if rng.random() < cfg.vertical_block_prob_per_char:
            bw = rng.uniform(*cfg.vertical_block_width_range) * median_w
            x0 = int(np.clip(cx - bw / 2, 0, w))
            x1 = int(np.clip(cx + bw / 2, 0, w))
            if x1 > x0:
                regions.append(("vertical", x0, x1, 0, h))
    if rng.random() < cfg.horizontal_strip_prob:
        sh = rng.uniform(*cfg.horizontal_strip_height_range) * h
        y0 = rng.uniform(0, max(1e-6, h - sh))
        y0i, y1i = int(y0), int(min(h, np.ceil(y0 + sh)))
        if y1i > y0i:
            regions.append(("horizontal", 0, w, y0i, y1i))
    return regions


def apply_erasing(sample: LineSample, cfg: EraseConfig, rng_seed) -> LineSample:
    """Mask image regions; transcript and annotations stay untouched."""
    rng = _rng(rng_seed)
    regions = sample_erase_regions(sample, cfg, rng)
    image = sample.image.copy()
    h, w = image.shape[:2]
    if regions:
        if cfg.fill == "background":
            patch = _background(rng, h, w)
        else:
            patch = np.full_like(image, float(cfg.fill))
        for _, x0, x1, y0, y1 in regions:
            image[y0:y1, x0:x1] = patch[y0:y1, x0:x1]
    return LineSample(image=image, transcript=list(sample.transcript),
                      char_annotations=list(sample.char_annotations)
                      if sample.char_annotations is not None else None)


def _generate_one(args):
    (i, seed, mode, alphabet_symbols, corpus, max_len, render_cfg, erase_cfg, out_dir) = args
    alphabet = Alphabet(alphabet_symbols)
    sampler = CorpusSampler(mode=mode, alphabet=alphabet, corpus=corpus, max_len=max_len)
    text = sample_sentence(sampler, np.random.default_rng([seed, i, 0]))
    sample = render_line(text, render_cfg, np.random.default_rng([seed, i, 1]), alphabet)
    if erase_cfg is not None:
        sample = apply_erasing(sample, erase_cfg, np.random.default_rng([seed, i, 2]))
    rel = os.path.join("lines", f"line_{i:06d}.png")
    path = os.path.join(out_dir, rel)
    Image.fromarray((np.clip(sample.image, 0, 1) * 255).astype(np.uint8), "RGB").save(path)
    record = {
        "image": rel,
        "text": text,
        "chars": [{"c": alphabet.symbol(a.symbol_index),
                   "box": [a.box.cx, a.box.cy, a.box.w, a.box.h]}
                  for a in sample.char_annotations],
    }
    return i, record


def generate_dataset(n_lines: int, sampler: CorpusSampler, render_cfg: RenderConfig,
                     erase_cfg: Optional[EraseConfig], out_dir: str, rng_seed: int,
                     workers: int = 1) -> str:
    """Write n_lines PNGs plus a JSONL manifest; returns the manifest path.

    Each line depends only on (seed, index), so the worker count never
    changes the output.
    """
    os.makedirs(os.path.join(out_dir, "lines"), exist_ok=True)
    manifest_path = os.path.join(out_dir, "manifest.jsonl")
    jobs = [(i, rng_seed, sampler.mode, list(sampler.alphabet.symbols), sampler.corpus,
             sampler.max_len, render_cfg, erase_cfg, out_dir) for i in range(n_lines)]
    if workers > 1 and n_lines > 1:
        with multiprocessing.Pool(workers) as pool:
            results = list(pool.imap(_generate_one, jobs))
    else:
        results = [_generate_one(j) for j in jobs]
    results.sort(key=lambda r: r[0])
    with open(manifest_path, "w", encoding="utf-8") as f:
        for _, record in results:
            f.write(json.dumps(record, ensure_ascii=False) + "\n")
    return manifest_path
