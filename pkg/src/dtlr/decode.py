"""From raw detections to transcripts and to the line-level training loss.

A detection's independent per-class probabilities are converted to one
joint distribution over alphabet + no-object; the no-object slot doubles
as the CTC blank. Because a certain-blank frame is inserted between every
pair of real frames, CTC never merges repeated characters across
detections, so the usual blank-between-repeats bookkeeping disappears.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .core import Alphabet, Detection, iou
from .ngram import BOS

NEG = -1e30  # stands in for log(0); keeps the forward pass NaN-free
INF_THRESHOLD = 1e20


@dataclass
class FrameDistribution:
    """Joint probability vector over alphabet classes plus trailing blank."""

    probs: np.ndarray  # length |alphabet| + 1; blank is the last slot

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 1 or p.size < 2:
            raise ValueError("frame distribution needs >= 2 entries")
        if np.any(p < 0) or abs(float(p.sum()) - 1.0) > 1e-6:
            raise ValueError("frame distribution must be nonnegative and sum to 1")
        self.probs = p

    @property
    def blank(self) -> float:
        return float(self.probs[-1])

    @classmethod
    def certain_blank(cls, n_classes: int) -> "FrameDistribution":
        p = np.zeros(n_classes + 1)
        p[-1] = 1.0
        return cls(p)


@dataclass
class DecodeConfig:
    epsilon: float = 0.003
    nms_iou: float = 0.4
    lm_weight: float = 0.3
    beam_width: int = 16

    def __post_init__(self):
        if not 0.0 < self.epsilon < 0.5:
            raise ValueError("epsilon must lie in (0, 0.5)")
        if not 0.0 < self.nms_iou <= 1.0:
            raise ValueError("nms_iou must lie in (0, 1]")
        if self.beam_width < 1:
            raise ValueError("beam_width must be >= 1")


def order_detections(detections: Sequence[Detection]) -> list[Detection]:
    """Reading order: ascending box min-x, then min-y, then query index."""
    return sorted(detections, key=lambda d: (d.box.min_x(), d.box.min_y(), d.query_index))


def joint_probs(probs: torch.Tensor, epsilon: float) -> torch.Tensor:
    """Append a no-object slot to independent class probabilities: [..., A] -> [..., A+1].

    When the class mass is short of 1 - epsilon the remainder becomes the
    no-object probability; otherwise the classes are rescaled to 1 - epsilon
    and the no-object slot gets exactly epsilon.
    """
    s = probs.sum(dim=-1, keepdim=True)
    low = s < 1.0 - epsilon
    scaled = probs * ((1.0 - epsilon) / s.clamp(min=epsilon))  # clamp only guards the untaken branch
    classes = torch.where(low, probs, scaled)
    blank = torch.where(low, 1.0 - s, torch.full_like(s, epsilon))
    return torch.cat([classes, blank], dim=-1)


def to_joint(detection: Detection, epsilon: float) -> FrameDistribution:
    """Joint distribution (alphabet + no-object) for one detection."""
    p = torch.as_tensor(np.asarray(detection.probs, dtype=np.float64))
    return FrameDistribution(joint_probs(p, epsilon).numpy())


def _log_frames(frames) -> torch.Tensor:
    """Frame probabilities -> [T, C] log tensor with exact zeros at NEG."""
    if isinstance(frames, torch.Tensor):
        p = frames
    else:
        p = torch.as_tensor(np.stack([f.probs for f in frames]), dtype=torch.float64)
    tiny = torch.finfo(p.dtype).tiny
    return torch.where(p > 0, torch.log(p.clamp(min=tiny)), torch.full_like(p, NEG))


def ctc_neg_log_likelihood(log_probs: torch.Tensor, target: Sequence[int],
                           blank: int) -> torch.Tensor:
    """Standard CTC forward pass in log space over [T, C] frame log-probs."""
    T = log_probs.shape[0]
    L = len(target)
    if L == 0:
        return -log_probs[:, blank].sum()

    # expanded state sequence: blank, t1, blank, t2, ..., tL, blank
    labels = torch.as_tensor(target, dtype=torch.long, device=log_probs.device)
    S = 2 * L + 1
    state_label = torch.full((S,), blank, dtype=torch.long, device=log_probs.device)
    state_label[1::2] = labels
    # a state may hop from two back only when labels differ (never for blanks)
    can_skip = torch.zeros(S, dtype=torch.bool, device=log_probs.device)
    if L > 1:
        can_skip[3::2] = labels[1:] != labels[:-1]

    neg = torch.full((1,), NEG, dtype=log_probs.dtype, device=log_probs.device)
    alpha = torch.full((S,), NEG, dtype=log_probs.dtype, device=log_probs.device)
    alpha = alpha.clone()
    alpha[0] = log_probs[0, blank]
    alpha[1] = log_probs[0, state_label[1]]
    for t in range(1, T):
        stay = alpha
        step = torch.cat([neg, alpha[:-1]])
        skip = torch.cat([neg, neg, alpha[:-2]])
        skip = torch.where(can_skip, skip, torch.full_like(skip, NEG))
        alpha = torch.logsumexp(torch.stack([stay, step, skip]), dim=0) + log_probs[t, state_label]
    total = torch.logsumexp(torch.stack([alpha[S - 1], alpha[S - 2]]), dim=0)
    return -total


def interleave_blanks(log_frames: torch.Tensor) -> torch.Tensor:
    """[Q, C] -> [2Q-1, C]: a certain-blank frame between consecutive rows."""
    q, c = log_frames.shape
    if q <= 1:
        return log_frames
    certain = torch.full((c,), NEG, dtype=log_frames.dtype, device=log_frames.device)
    certain[-1] = 0.0
    out = certain.repeat(2 * q - 1, 1)
    out[0::2] = log_frames
    return out


def interleaved_ctc_loss(frames, target: Sequence[int]) -> torch.Tensor:
    """Negative log-likelihood of the target over blank-interleaved frames.

    ``frames`` is a [Q, |A|+1] tensor of joint distributions (blank last)
    or a list of FrameDistribution, already in reading order. Differentiable
    w.r.t. frame probabilities. Returns +inf when no labeling of the frames
    collapses to the target.
    """
    lp = _log_frames(frames)
    q = lp.shape[0]
    if len(target) > q:
        raise ValueError(f"target length {len(target)} exceeds frame count {q}")
    blank = lp.shape[1] - 1
    nll = ctc_neg_log_likelihood(interleave_blanks(lp), list(target), blank)
    if float(nll) > INF_THRESHOLD:
        return torch.tensor(math.inf, dtype=lp.dtype)
    return nll


def nms(detections: Sequence[Detection], iou_threshold: float) -> list[Detection]:
    """Class-agnostic greedy suppression by best-class score.

    Within a cluster of mutually overlapping boxes the highest-scoring
    detection wins; score ties go to the lower query index.
    """
    ranked = sorted(detections, key=lambda d: (-d.score(), d.query_index))
    kept: list[Detection] = []
    for d in ranked:
        if all(iou(d.box, k.box) <= iou_threshold for k in kept):
            kept.append(d)
    return kept


def greedy_transcribe(detections: Sequence[Detection], cfg: DecodeConfig,
                      alphabet: Alphabet) -> tuple[str, list[Detection]]:
    """NMS, order by min-x, then emit each survivor's argmax class.

    A survivor whose joint-distribution argmax is the no-object slot emits
    nothing; consecutive whitespace symbols collapse to one.
    """
    kept = order_detections(nms(detections, cfg.nms_iou))
    blank = len(alphabet)
    ws = alphabet.whitespace_index
    symbols: list[int] = []
    for d in kept:
        k = int(np.argmax(to_joint(d, cfg.epsilon).probs))
        if k == blank:
            continue
        if k == ws and symbols and symbols[-1] == ws:
            continue
        symbols.append(k)
    return alphabet.decode(symbols), kept


def _segment_logprob(model, symbols: Sequence[str]) -> float:
    """Word log-probability: BOS-padded character contexts, no end marker."""
    history: list[str] = [BOS] * (model.order - 1)
    total = 0.0
    for s in symbols:
        total += model.logprob(s, history)
        history.append(s)
    return total


def lm_rescore(frames: Sequence[FrameDistribution], ngram, cfg: DecodeConfig,
               alphabet: Alphabet) -> str:
    """Best word for one whitespace-delimited segment of frames.

    Prefix beam search over per-frame emissions (symbol or nothing),
    maximizing log P(chars | frames) + lm_weight * log P_ngram(chars).
    Since certain blanks separate real frames, a prefix's frame likelihood
    is the sum over all emission patterns that spell it. Whitespace is a
    segment boundary, never a candidate symbol. Ties break lexicographically.
    """
    if len(frames) == 0:
        return ""
    ws = alphabet.whitespace_index
    lm_cache: dict[tuple, float] = {(): 0.0}

    def lm_score(prefix: tuple, parent: tuple) -> float:
        if prefix not in lm_cache:
            history = [BOS] * (ngram.order - 1) + [alphabet.symbol(i) for i in parent]
            lm_cache[prefix] = lm_cache[parent] + ngram.logprob(alphabet.symbol(prefix[-1]), history)
        return lm_cache[prefix]

    beams: dict[tuple, float] = {(): 0.0}
    for f in frames:
        probs = f.probs
        new: dict[tuple, float] = {}
        log_blank = math.log(probs[-1]) if probs[-1] > 0 else NEG
        for prefix, lp in beams.items():
            cur = new.get(prefix)
            cand = lp + log_blank
            new[prefix] = cand if cur is None else np.logaddexp(cur, cand)
            for i in range(len(probs) - 1):
                if i == ws or probs[i] <= 0:
                    continue
                ext = prefix + (i,)
                cand = lp + math.log(probs[i])
                cur = new.get(ext)
                new[ext] = cand if cur is None else np.logaddexp(cur, cand)
        scored = sorted(
            new.items(),
            key=lambda kv: (-(kv[1] + cfg.lm_weight * lm_score(kv[0], kv[0][:-1])),
                            tuple(alphabet.symbol(i) for i in kv[0])),
        )
        beams = dict(scored[:cfg.beam_width])

    best = min(beams.items(),
               key=lambda kv: (-(kv[1] + cfg.lm_weight * lm_score(kv[0], kv[0][:-1])),
                               tuple(alphabet.symbol(i) for i in kv[0])))
    return alphabet.decode(best[0])


def transcribe_with_lm(detections: Sequence[Detection], ngram, cfg: DecodeConfig,
                       alphabet: Alphabet) -> tuple[str, list[Detection]]:
    """Full-line decoding with per-word n-gram rescoring.

    NMS and ordering as in greedy decoding; kept detections whose joint
    argmax is whitespace split the line into word segments, and each
    segment is rescored independently.
    """
    kept = order_detections(nms(detections, cfg.nms_iou))
    ws = alphabet.whitespace_index
    blank = len(alphabet)
    segments: list[list[FrameDistribution]] = [[]]
    for d in kept:
        joint = to_joint(d, cfg.epsilon)
        k = int(np.argmax(joint.probs))
        if k == ws:
            segments.append([])
        elif k == blank:
            continue
        else:
            segments[-1].append(joint)
    words = [lm_rescore(seg, ngram, cfg, alphabet) for seg in segments]
    return " ".join(w for w in words if w), kept
