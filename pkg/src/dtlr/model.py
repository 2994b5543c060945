"""Character detector: conv backbone, deformable-attention encoder with
two-stage query initialization, and a refinement decoder with independent
per-class sigmoid outputs.

Sampling locations for deformable attention live in normalized [0, 1]
image coordinates; bilinear lookups use half-pixel centers (a point at
((j+0.5)/W, (i+0.5)/H) hits feature cell (i, j) exactly) with zero padding
outside the map.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import Checkpoint
from .core import Alphabet, BBox, Detection


@dataclass
class ModelConfig:
    alphabet_size: int
    d_model: int = 128
    n_heads: int = 4
    n_encoder_layers: int = 3
    n_decoder_layers: int = 3
    n_queries: int = 100
    n_feature_levels: int = 3
    n_sampling_points: int = 4
    backbone_channels: tuple = (32, 64, 96, 128)
    ffn_dim: int = 0  # 0 -> 4 * d_model
    dropout: float = 0.0

    def __post_init__(self):
        if self.alphabet_size < 1:
            raise ValueError("alphabet_size must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        for name in ("n_heads", "n_encoder_layers", "n_decoder_layers",
                     "n_queries", "n_feature_levels", "n_sampling_points"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_feature_levels > len(self.backbone_channels):
            raise ValueError("more feature levels than backbone stages")
        if self.ffn_dim == 0:
            self.ffn_dim = 4 * self.d_model

    @classmethod
    def paper_scale(cls, alphabet_size: int) -> "ModelConfig":
        """Full-size preset; kept as documentation of record, not used in tests."""
        return cls(alphabet_size=alphabet_size, d_model=256, n_heads=8,
                   n_encoder_layers=6, n_decoder_layers=6, n_queries=900,
                   n_feature_levels=3, n_sampling_points=4,
                   backbone_channels=(64, 128, 256, 256), ffn_dim=2048,
                   dropout=0.0)


def inverse_sigmoid(x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    x = x.clamp(min=eps, max=1.0 - eps)
    return torch.log(x / (1.0 - x))


def sine_embedding(values: torch.Tensor, num_feats: int,
                   temperature: float = 10000.0) -> torch.Tensor:
    """Per-coordinate sine/cosine features: [..., K] -> [..., K * num_feats]."""
    dim_t = torch.arange(num_feats, dtype=values.dtype, device=values.device)
    dim_t = temperature ** (2 * torch.div(dim_t, 2, rounding_mode="floor") / num_feats)
    pos = values[..., None] * 2 * math.pi / dim_t
    pos = torch.stack([pos[..., 0::2].sin(), pos[..., 1::2].cos()], dim=-1).flatten(-2)
    return pos.flatten(-2)


class MLP(nn.Module):
    def __init__(self, in_dim: int, hidden: int, out_dim: int, n_layers: int):
        super().__init__()
        dims = [in_dim] + [hidden] * (n_layers - 1) + [out_dim]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.relu(x)
        return x


def _gn(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(8, channels), channels)


class ConvBackbone(nn.Module):
    """Small strided conv net; taps the deepest ``n_levels`` stage outputs."""

    def __init__(self, channels: Sequence[int], n_levels: int):
        super().__init__()
        self.n_levels = n_levels
        self.stem = nn.Sequential(
            nn.Conv2d(3, channels[0], 3, stride=2, padding=1),
            _gn(channels[0]), nn.ReLU(inplace=True))
        stages = []
        prev = channels[0]
        for ch in channels:
            stages.append(nn.Sequential(
                nn.Conv2d(prev, ch, 3, stride=2, padding=1),
                _gn(ch), nn.ReLU(inplace=True),
                nn.Conv2d(ch, ch, 3, stride=1, padding=1),
                _gn(ch), nn.ReLU(inplace=True)))
            prev = ch
        self.stages = nn.ModuleList(stages)
        # stage k has stride 2^(k+2); the deepest runs at /32
        self.min_size = 2 ** (len(channels) + 1)

    def forward(self, images: torch.Tensor) -> list[torch.Tensor]:
        if images.shape[-2] < self.min_size or images.shape[-1] < self.min_size:
            raise ValueError(
                f"image {tuple(images.shape[-2:])} smaller than total stride {self.min_size}")
        x = self.stem(images)
        outs = []
        for stage in self.stages:
            x = stage(x)
            outs.append(x)
        return outs[-self.n_levels:]


def _token_grid(h: int, w: int, dtype, device) -> torch.Tensor:
    """Normalized half-pixel centers of an h x w map, row-major: [h*w, 2] as (x, y)."""
    ys = (torch.arange(h, dtype=dtype, device=device) + 0.5) / h
    xs = (torch.arange(w, dtype=dtype, device=device) + 0.5) / w
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([gx, gy], dim=-1).reshape(-1, 2)


class DeformableAttention(nn.Module):
    """Multi-scale deformable attention.

    Per head, level and point the query predicts an offset (in feature
    cells) from its reference point and a softmax weight over all
    level x point samples; values are bilinearly sampled and combined.
    """

    def __init__(self, d_model: int, n_heads: int, n_levels: int, n_points: int):
        super().__init__()
        self.d_model, self.n_heads = d_model, n_heads
        self.n_levels, self.n_points = n_levels, n_points
        self.head_dim = d_model // n_heads
        self.value_proj = nn.Linear(d_model, d_model)
        self.sampling_offsets = nn.Linear(d_model, n_heads * n_levels * n_points * 2)
        self.attention_weights = nn.Linear(d_model, n_heads * n_levels * n_points)
        self.output_proj = nn.Linear(d_model, d_model)
        self._reset_parameters()

    def _reset_parameters(self):
        nn.init.zeros_(self.sampling_offsets.weight)
        angles = torch.arange(self.n_heads, dtype=torch.float32) * (2 * math.pi / self.n_heads)
        grid = torch.stack([angles.cos(), angles.sin()], dim=-1)
        grid = grid / grid.abs().max(dim=-1, keepdim=True).values
        grid = grid[:, None, None, :].repeat(1, self.n_levels, self.n_points, 1)
        for p in range(self.n_points):
            grid[:, :, p] *= p + 1
        with torch.no_grad():
            self.sampling_offsets.bias.copy_(grid.reshape(-1))
        nn.init.zeros_(self.attention_weights.weight)
        nn.init.zeros_(self.attention_weights.bias)
        nn.init.xavier_uniform_(self.value_proj.weight)
        nn.init.zeros_(self.value_proj.bias)
        nn.init.xavier_uniform_(self.output_proj.weight)
        nn.init.zeros_(self.output_proj.bias)

    def sampling_grid(self, query: torch.Tensor, reference_points: torch.Tensor,
                      shapes: Sequence[tuple[int, int]],
                      level_ids: Optional[Sequence[int]] = None):
        """Sampling locations [B, Lq, H, L, P, 2] and weights [B, Lq, H, L, P]."""
        b, lq, _ = query.shape
        ids = list(level_ids) if level_ids is not None else list(range(len(shapes)))
        offsets = self.sampling_offsets(query).view(
            b, lq, self.n_heads, self.n_levels, self.n_points, 2)
        weights = self.attention_weights(query).view(
            b, lq, self.n_heads, self.n_levels * self.n_points)
        weights = weights.softmax(dim=-1).view(
            b, lq, self.n_heads, self.n_levels, self.n_points)
        offsets = offsets[:, :, :, ids]
        weights = weights[:, :, :, ids]
        ref = reference_points.clamp(0.0, 1.0)[:, :, None, None, None, :]
        normalizer = torch.as_tensor([[w, h] for h, w in shapes],
                                     dtype=query.dtype, device=query.device)
        locations = ref + offsets / normalizer[None, None, None, :, None, :]
        return locations, weights

    def forward(self, query: torch.Tensor, reference_points: torch.Tensor,
                value: torch.Tensor, shapes: Sequence[tuple[int, int]],
                level_ids: Optional[Sequence[int]] = None) -> torch.Tensor:
        b, lq, _ = query.shape
        locations, weights = self.sampling_grid(query, reference_points, shapes, level_ids)
        v = self.value_proj(value).view(b, -1, self.n_heads, self.head_dim)

        out = None
        start = 0
        for l, (h, w) in enumerate(shapes):
            v_l = v[:, start:start + h * w]
            start += h * w
            v_l = v_l.permute(0, 2, 3, 1).reshape(b * self.n_heads, self.head_dim, h, w)
            grid = locations[:, :, :, l].permute(0, 2, 1, 3, 4)
            grid = grid.reshape(b * self.n_heads, lq, self.n_points, 2) * 2.0 - 1.0
            sampled = F.grid_sample(v_l, grid, mode="bilinear",
                                    padding_mode="zeros", align_corners=False)
            w_l = weights[:, :, :, l].permute(0, 2, 1, 3)
            w_l = w_l.reshape(b * self.n_heads, 1, lq, self.n_points)
            term = (sampled * w_l).sum(dim=-1)
            out = term if out is None else out + term
        out = out.view(b, self.n_heads, self.head_dim, lq).permute(0, 3, 1, 2)
        return self.output_proj(out.reshape(b, lq, self.d_model))


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.attn = DeformableAttention(cfg.d_model, cfg.n_heads,
                                        cfg.n_feature_levels, cfg.n_sampling_points)
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.ffn = nn.Sequential(nn.Linear(cfg.d_model, cfg.ffn_dim), nn.ReLU(inplace=True),
                                 nn.Dropout(cfg.dropout), nn.Linear(cfg.ffn_dim, cfg.d_model))
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x, pos, ref, shapes, level_ids=None):
        x = self.norm1(x + self.dropout(self.attn(x + pos, ref, x, shapes, level_ids)))
        x = self.norm2(x + self.dropout(self.ffn(x)))
        return x


class Encoder(nn.Module):
    """Refines flattened multi-scale tokens and scores proposal boxes."""

    # proposal size prior, in normalized units per level (finest first)
    BASE_SIZE = 0.05

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.n_encoder_layers))
        self.level_embed = nn.Parameter(torch.zeros(cfg.n_feature_levels, cfg.d_model))
        nn.init.normal_(self.level_embed)
        self.objectness = nn.Linear(cfg.d_model, 1)
        self.box_head = MLP(cfg.d_model, cfg.d_model, 4, 3)

    def flatten(self, feats: Sequence[torch.Tensor],
                level_ids: Optional[Sequence[int]] = None):
        ids = list(level_ids) if level_ids is not None else list(range(len(feats)))
        tokens, pos, refs, priors, shapes = [], [], [], [], []
        d = self.cfg.d_model
        for lid, f in zip(ids, feats):
            b, c, h, w = f.shape
            shapes.append((h, w))
            tokens.append(f.flatten(2).transpose(1, 2))
            grid = _token_grid(h, w, f.dtype, f.device)
            pe = sine_embedding(grid, d // 2) + self.level_embed[lid].to(f.dtype)
            pos.append(pe[None].expand(b, -1, -1))
            refs.append(grid[None].expand(b, -1, -1))
            size = torch.full_like(grid, self.BASE_SIZE * (2 ** lid))
            priors.append(torch.cat([grid, size], dim=-1)[None].expand(b, -1, -1))
        return (torch.cat(tokens, 1), torch.cat(pos, 1), torch.cat(refs, 1),
                torch.cat(priors, 1), shapes)

    def forward(self, feats: Sequence[torch.Tensor],
                level_ids: Optional[Sequence[int]] = None):
        x, pos, refs, priors, shapes = self.flatten(feats, level_ids)
        for layer in self.layers:
            x = layer(x, pos, refs, shapes, level_ids)
        scores = self.objectness(x).squeeze(-1).sigmoid()
        boxes = torch.sigmoid(inverse_sigmoid(priors) + self.box_head(x).clamp(-5.0, 5.0))
        return x, scores, boxes, shapes


def init_queries(scores: torch.Tensor, n_queries: int) -> torch.Tensor:
    """Indices of the top scoring proposals; ties keep the lower token index."""
    if scores.shape[-1] < n_queries:
        raise ValueError(
            f"{scores.shape[-1]} proposals for {n_queries} queries: "
            "use a wider input or a smaller n_queries")
    order = torch.argsort(scores, dim=-1, descending=True, stable=True)
    return order[..., :n_queries]


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(cfg.d_model, cfg.n_heads,
                                               dropout=cfg.dropout, batch_first=True)
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.cross_attn = DeformableAttention(cfg.d_model, cfg.n_heads,
                                              cfg.n_feature_levels, cfg.n_sampling_points)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.ffn = nn.Sequential(nn.Linear(cfg.d_model, cfg.ffn_dim), nn.ReLU(inplace=True),
                                 nn.Dropout(cfg.dropout), nn.Linear(cfg.ffn_dim, cfg.d_model))
        self.norm3 = nn.LayerNorm(cfg.d_model)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x, pos_q, anchors, memory, shapes):
        q = x + pos_q
        attn, _ = self.self_attn(q, q, x, need_weights=False)
        x = self.norm1(x + self.dropout(attn))
        x = self.norm2(x + self.dropout(
            self.cross_attn(x + pos_q, anchors[..., :2], memory, shapes)))
        x = self.norm3(x + self.dropout(self.ffn(x)))
        return x


@dataclass
class LineOutput:
    """One line's predictions, every decoder layer plus encoder proposals."""

    probs: torch.Tensor            # [Q, |A|]
    boxes: torch.Tensor            # [Q, 4]
    aux: list[tuple[torch.Tensor, torch.Tensor]]
    enc_scores: Optional[torch.Tensor] = None
    enc_boxes: Optional[torch.Tensor] = None


@dataclass
class ModelOutput:
    probs: torch.Tensor            # [B, Q, |A|]
    boxes: torch.Tensor            # [B, Q, 4]
    aux: list[tuple[torch.Tensor, torch.Tensor]]
    enc_scores: torch.Tensor       # [B, S]
    enc_boxes: torch.Tensor        # [B, S, 4]

    @property
    def n_queries(self) -> int:
        return self.probs.shape[1]

    def line(self, i: int) -> LineOutput:
        return LineOutput(self.probs[i], self.boxes[i],
                          [(p[i], b[i]) for p, b in self.aux],
                          self.enc_scores[i], self.enc_boxes[i])

    def detections(self, i: int) -> list[Detection]:
        probs = self.probs[i].detach().cpu().numpy()
        boxes = self.boxes[i].detach().cpu().numpy()
        return [Detection(box=BBox(*(float(v) for v in boxes[q])),
                          probs=probs[q], query_index=q)
                for q in range(probs.shape[0])]


class DetectionModel(nn.Module):
    """Full line-to-detections network."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = ConvBackbone(cfg.backbone_channels, cfg.n_feature_levels)
        taps = cfg.backbone_channels[-cfg.n_feature_levels:]
        self.input_proj = nn.ModuleList(
            nn.Sequential(nn.Conv2d(ch, cfg.d_model, 1), _gn(cfg.d_model)) for ch in taps)
        self.encoder = Encoder(cfg)
        self.content_proj = nn.Sequential(nn.Linear(cfg.d_model, cfg.d_model),
                                          nn.LayerNorm(cfg.d_model))
        self.anchor_pos = MLP(2 * cfg.d_model, cfg.d_model, cfg.d_model, 2)
        self.decoder_layers = nn.ModuleList(
            DecoderLayer(cfg) for _ in range(cfg.n_decoder_layers))
        self.box_head = MLP(cfg.d_model, cfg.d_model, 4, 3)
        self.class_head = nn.Linear(cfg.d_model, cfg.alphabet_size)
        # bias classes toward silence at init so no-object dominates early
        nn.init.constant_(self.class_head.bias, -2.0)

    def extract_features(self, images: torch.Tensor) -> list[torch.Tensor]:
        feats = self.backbone(images)
        return [proj(f) for proj, f in zip(self.input_proj, feats)]

    def _anchor_pos_embedding(self, anchors: torch.Tensor) -> torch.Tensor:
        return self.anchor_pos(sine_embedding(anchors, self.cfg.d_model // 2))

    def select_queries(self, memory, scores, boxes):
        idx = init_queries(scores, self.cfg.n_queries)
        gather = idx[..., None]
        content = self.content_proj(torch.take_along_dim(memory, gather, dim=1))
        anchors = torch.take_along_dim(boxes, gather, dim=1)
        return content, anchors

    def decode(self, content, anchors, memory, shapes):
        x = content
        per_layer = []
        for layer in self.decoder_layers:
            pos_q = self._anchor_pos_embedding(anchors)
            x = layer(x, pos_q, anchors, memory, shapes)
            delta = self.box_head(x).clamp(-5.0, 5.0)
            anchors = torch.sigmoid(inverse_sigmoid(anchors) + delta)
            per_layer.append((self.class_head(x).sigmoid(), anchors))
        return per_layer

    def forward(self, images: torch.Tensor) -> ModelOutput:
        feats = self.extract_features(images)
        memory, scores, boxes, shapes = self.encoder(feats)
        content, anchors = self.select_queries(memory, scores, boxes)
        per_layer = self.decode(content, anchors, memory, shapes)
        probs, out_boxes = per_layer[-1]
        return ModelOutput(probs=probs, boxes=out_boxes, aux=per_layer[:-1],
                           enc_scores=scores, enc_boxes=boxes)


def build_model(cfg: ModelConfig, seed: int = 0) -> DetectionModel:
    """Deterministic construction: same config and seed, same parameters."""
    torch.manual_seed(seed)
    return DetectionModel(cfg)


def model_to_checkpoint(model: DetectionModel, alphabet: Alphabet | Sequence[str],
                        step: int = 0, extra: Optional[dict] = None) -> Checkpoint:
    symbols = list(alphabet.symbols) if isinstance(alphabet, Alphabet) else list(alphabet)
    tensors = {name: p.detach().cpu().numpy().copy()
               for name, p in model.state_dict().items()}
    return Checkpoint(config=copy.deepcopy(model.cfg), alphabet_symbols=symbols,
                      step=step, tensors=tensors, extra=dict(extra or {}))


def checkpoint_to_model(ckpt: Checkpoint) -> DetectionModel:
    model = DetectionModel(ckpt.config)
    state = {name: torch.from_numpy(arr.copy())
             for name, arr in ckpt.tensors.items() if not name.startswith("optim/")}
    model.load_state_dict(state)
    return model


def replace_class_head(ckpt: Checkpoint, new_alphabet: Alphabet | Sequence[str],
                       rng_seed: int = 0) -> Checkpoint:
    """Resize the classification head for a new alphabet.

    Every new output row (weights and bias together) is copied from a
    uniformly sampled row of the old head; all other parameters are
    untouched. Optimizer state riding in the checkpoint is dropped since
    it no longer matches the parameters.
    """
    symbols = list(new_alphabet.symbols) if isinstance(new_alphabet, Alphabet) else list(new_alphabet)
    if len(symbols) == 0:
        raise ValueError("new alphabet is empty")
    rng = np.random.default_rng(rng_seed)
    old_w = ckpt.tensors["class_head.weight"]
    old_b = ckpt.tensors["class_head.bias"]
    rows = rng.integers(0, old_w.shape[0], size=len(symbols))
    tensors = {name: arr.copy() for name, arr in ckpt.tensors.items()
               if not name.startswith("optim/")}
    tensors["class_head.weight"] = old_w[rows].copy()
    tensors["class_head.bias"] = old_b[rows].copy()
    config = copy.deepcopy(ckpt.config)
    config.alphabet_size = len(symbols)
    extra = {k: v for k, v in ckpt.extra.items() if k != "optimizer"}
    return Checkpoint(config=config, alphabet_symbols=symbols, step=ckpt.step,
                      tensors=tensors, extra=extra)
