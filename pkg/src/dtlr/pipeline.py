"""Training, evaluation, prediction and visualization orchestration.

All randomness inside a training run is derived statelessly from
(seed, step), so runs are bitwise reproducible and a run resumed from a
checkpoint continues the exact trajectory of an uninterrupted one.
"""
from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from PIL import Image, ImageDraw

from . import metrics
from .checkpoint import Checkpoint, save_checkpoint
from .core import Alphabet, Detection, LineSample
from .criterion import LossWeights, detection_loss
from .data import Batch, LineDataset, collate, unpad_box
from .decode import (DecodeConfig, greedy_transcribe, interleaved_ctc_loss,
                     joint_probs, transcribe_with_lm)
from .model import (DetectionModel, checkpoint_to_model, model_to_checkpoint,
                    replace_class_head)
from .synthgen import EraseConfig, apply_erasing


@dataclass
class TrainConfig:
    phase: str = "pretrain"  # pretrain | finetune
    iterations: int = 5000
    batch_size: int = 4
    learning_rate: float = 1e-4
    lr_schedule: Optional[list[tuple[int, float]]] = None  # [(until_step, lr), ...]
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    freeze: str = "none"  # none | class_head_only
    erase_enabled: bool = True
    seed: int = 0
    grad_clip: float = 0.1
    checkpoint_every: int = 1000
    log_every: int = 25

    def __post_init__(self):
        if self.iterations <= 0:
            raise ValueError("iterations must be > 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.lr_schedule:
            bounds = [b for b, _ in self.lr_schedule]
            if bounds != sorted(bounds) or len(set(bounds)) != len(bounds):
                raise ValueError("lr_schedule boundaries must be increasing")
            if any(lr <= 0 for _, lr in self.lr_schedule):
                raise ValueError("scheduled learning rates must be > 0")
        if self.freeze not in ("none", "class_head_only"):
            raise ValueError("freeze must be 'none' or 'class_head_only'")

    def lr_at(self, step: int) -> float:
        if not self.lr_schedule:
            return self.learning_rate
        for until, lr in self.lr_schedule:
            if step < until:
                return lr
        return self.lr_schedule[-1][1]


def pretrain_paper_preset(seed: int = 0) -> TrainConfig:
    return TrainConfig(phase="pretrain", iterations=225_000, batch_size=4,
                       learning_rate=1e-4, weight_decay=1e-4, seed=seed,
                       checkpoint_every=10_000)


def pretrain_desk_preset(seed: int = 0, iterations: int = 5000) -> TrainConfig:
    return TrainConfig(phase="pretrain", iterations=iterations, batch_size=4,
                       learning_rate=2e-4, weight_decay=1e-4, seed=seed)


def finetune_paper_presets(seed: int = 0) -> tuple[TrainConfig, TrainConfig]:
    head = TrainConfig(phase="finetune", iterations=20_000, freeze="class_head_only",
                       learning_rate=1e-5, seed=seed, checkpoint_every=10_000)
    full = TrainConfig(phase="finetune", iterations=2_000_000, freeze="none",
                       learning_rate=1e-5, seed=seed + 1, checkpoint_every=50_000,
                       lr_schedule=[(1_200_000, 1e-5), (2_000_000, 1e-6)])
    return head, full


def finetune_desk_presets(seed: int = 0, head_iters: int = 400,
                          full_iters: int = 4600) -> tuple[TrainConfig, TrainConfig]:
    head = TrainConfig(phase="finetune", iterations=head_iters, freeze="class_head_only",
                       learning_rate=1e-3, seed=seed)
    full = TrainConfig(phase="finetune", iterations=full_iters, freeze="none",
                       learning_rate=1e-4, seed=seed + 1)
    return head, full


def _step_seed(seed: int, step: int) -> int:
    return int(np.random.SeedSequence([seed, step]).generate_state(1, np.uint32)[0])


def _trainable_params(model: DetectionModel, freeze: str):
    if freeze == "class_head_only":
        names = [n for n, _ in model.named_parameters() if n.startswith("class_head.")]
    else:
        names = [n for n, _ in model.named_parameters()]
    wanted = set(names)
    for n, p in model.named_parameters():
        p.requires_grad_(n in wanted)
    return names


def _make_optimizer(model: DetectionModel, cfg: TrainConfig):
    params = [p for p in model.parameters() if p.requires_grad]
    return torch.optim.AdamW(params, lr=cfg.learning_rate, betas=cfg.betas,
                             weight_decay=cfg.weight_decay)


def _optimizer_to_tensors(opt, model: DetectionModel) -> tuple[dict, dict]:
    by_id = {id(p): n for n, p in model.named_parameters()}
    tensors, steps = {}, {}
    for group in opt.param_groups:
        for p in group["params"]:
            state = opt.state.get(p)
            if not state:
                continue
            name = by_id[id(p)]
            tensors[f"optim/{name}/exp_avg"] = state["exp_avg"].detach().cpu().numpy().copy()
            tensors[f"optim/{name}/exp_avg_sq"] = state["exp_avg_sq"].detach().cpu().numpy().copy()
            steps[name] = int(state["step"])
    return tensors, steps


def _optimizer_from_checkpoint(opt, model: DetectionModel, ckpt: Checkpoint) -> None:
    steps = ckpt.extra.get("optimizer", {}).get("step_counts", {})
    named = dict(model.named_parameters())
    for group in opt.param_groups:
        for p in group["params"]:
            name = next(n for n, q in named.items() if q is p)
            key = f"optim/{name}/exp_avg"
            if key not in ckpt.tensors:
                continue
            opt.state[p] = {
                "step": torch.tensor(float(steps.get(name, 0))),
                "exp_avg": torch.from_numpy(ckpt.tensors[key].copy()).to(p.dtype),
                "exp_avg_sq": torch.from_numpy(
                    ckpt.tensors[f"optim/{name}/exp_avg_sq"].copy()).to(p.dtype),
            }


def _snapshot(model, alphabet, phase, loop_step, cfg, opt, extra=None) -> Checkpoint:
    ckpt = model_to_checkpoint(model, alphabet, step=loop_step)
    opt_tensors, steps = _optimizer_to_tensors(opt, model)
    ckpt.tensors.update(opt_tensors)
    ckpt.extra.update({
        "phase": phase,
        "loop_step": loop_step,
        "optimizer": {"type": "adamw", "step_counts": steps},
        "seed": cfg.seed,
    })
    if extra:
        ckpt.extra.update(extra)
    return ckpt


class _StepLog:
    def __init__(self, out_dir: Optional[str]):
        self.path = os.path.join(out_dir, "log.jsonl") if out_dir else None
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)

    def write(self, record: dict) -> None:
        if self.path:
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(json.dumps(record) + "\n")


def _erase_for_step(samples: Sequence[LineSample], cfg: TrainConfig,
                    erase_cfg: Optional[EraseConfig], step: int) -> list[LineSample]:
    eff = erase_cfg if cfg.erase_enabled else EraseConfig.disabled()
    if eff is None:
        eff = EraseConfig() if cfg.erase_enabled else EraseConfig.disabled()
    return [apply_erasing(s, eff, np.random.default_rng([cfg.seed, step, 7, k]))
            for k, s in enumerate(samples)]


def _train_loop(model: DetectionModel, dataset: LineDataset, cfg: TrainConfig,
                phase: str, step_loss: Callable[[Batch, int], tuple[torch.Tensor, dict]],
                alphabet: Alphabet, erase_cfg: Optional[EraseConfig],
                out_dir: Optional[str], resume: Optional[Checkpoint],
                extra: Optional[dict] = None) -> Checkpoint:
    log = _StepLog(out_dir)
    _ = _trainable_params(model, cfg.freeze)
    opt = _make_optimizer(model, cfg)
    start = 0
    if resume is not None:
        if resume.extra.get("phase") != phase:
            raise ValueError(f"resume checkpoint is from phase {resume.extra.get('phase')!r},"
                             f" expected {phase!r}")
        start = int(resume.extra["loop_step"])
        _optimizer_from_checkpoint(opt, model, resume)

    model.train()
    ckpt = None
    for step in range(start, cfg.iterations):
        torch.manual_seed(_step_seed(cfg.seed, step))
        for group in opt.param_groups:
            group["lr"] = cfg.lr_at(step)
        rng = np.random.default_rng([cfg.seed, step])
        idx = rng.integers(0, len(dataset), size=cfg.batch_size)
        samples = [dataset.get(int(i)) for i in idx]
        samples = _erase_for_step(samples, cfg, erase_cfg, step)
        batch = collate(samples)

        loss, breakdown = step_loss(batch, step)
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(
            [p for p in model.parameters() if p.requires_grad], cfg.grad_clip)
        opt.step()

        if step % cfg.log_every == 0 or step == cfg.iterations - 1:
            log.write({"step": step, **breakdown})
        if out_dir and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0 \
                and step + 1 < cfg.iterations:
            snap = _snapshot(model, alphabet, phase, step + 1, cfg, opt, extra)
            save_checkpoint(snap, os.path.join(out_dir, f"ckpt_{phase}_{step + 1:07d}.dtlr"))

    ckpt = _snapshot(model, alphabet, phase, cfg.iterations, cfg, opt, extra)
    if out_dir:
        save_checkpoint(ckpt, os.path.join(out_dir, f"ckpt_{phase}_final.dtlr"))
    return ckpt


def pretrain(model: DetectionModel, dataset: LineDataset, cfg: TrainConfig,
             weights: Optional[LossWeights] = None,
             erase_cfg: Optional[EraseConfig] = None,
             out_dir: Optional[str] = None,
             resume: Optional[Checkpoint] = None) -> Checkpoint:
    """Character-box supervised training on synthetic data."""
    if not dataset.has_char_boxes:
        raise ValueError("pretraining requires character supervision "
                         "(manifest records without 'chars' boxes)")
    w = weights or LossWeights()

    def step_loss(batch: Batch, step: int):
        out = model(batch.images)
        total = None
        agg = {"total": 0.0, "cls": 0.0, "l1": 0.0, "giou": 0.0, "n_gt": 0}
        for i, sample in enumerate(batch.samples):
            loss_i, br = detection_loss(out.line(i), sample.char_annotations, w)
            total = loss_i if total is None else total + loss_i
            for k in ("total", "cls", "l1", "giou", "n_gt"):
                agg[k] += br[k]
        n = len(batch.samples)
        for k in ("total", "cls", "l1", "giou"):
            agg[k] /= n
        return total / n, agg

    return _train_loop(model, dataset, cfg, "pretrain", step_loss,
                       dataset.alphabet, erase_cfg, out_dir, resume,
                       extra={"line_height": dataset.line_height or 64})


def _order_by_min_x(boxes: torch.Tensor) -> torch.Tensor:
    """Indices sorting queries by box min-x, then min-y, then query index."""
    b = boxes.detach().cpu().numpy()
    min_x = b[:, 0] - b[:, 2] / 2
    min_y = b[:, 1] - b[:, 3] / 2
    order = np.lexsort((np.arange(len(b)), min_y, min_x))
    return torch.as_tensor(order.copy(), dtype=torch.long, device=boxes.device)


def ctc_line_loss(line_out, transcript: Sequence[int], epsilon: float) -> torch.Tensor:
    """Reading-ordered joint probabilities scored against the transcript."""
    order = _order_by_min_x(line_out.boxes)
    frames = joint_probs(line_out.probs[order], epsilon)
    return interleaved_ctc_loss(frames, list(transcript))


def finetune(ckpt: Checkpoint, dataset: LineDataset, new_alphabet: Alphabet,
             stage_cfgs: tuple[TrainConfig, TrainConfig],
             decode_cfg: Optional[DecodeConfig] = None,
             erase_cfg: Optional[EraseConfig] = None,
             out_dir: Optional[str] = None,
             head_init_seed: int = 0,
             force_head_replacement: bool = False,
             resume: Optional[Checkpoint] = None) -> Checkpoint:
    """Two-stage line-level fine-tuning with the blank-interleaved CTC loss.

    Stage one trains only the (re-initialized) class head; stage two trains
    end to end. When the target alphabet equals the checkpoint's, the head
    is kept and stage one is skipped unless forced.
    """
    head_cfg, full_cfg = stage_cfgs
    if head_cfg.freeze != "class_head_only":
        head_cfg = replace(head_cfg, freeze="class_head_only")
    if full_cfg.freeze != "none":
        full_cfg = replace(full_cfg, freeze="none")
    eps = (decode_cfg or DecodeConfig()).epsilon

    bad = sorted({c for r in dataset.records for c in r["text"] if c not in new_alphabet})
    if bad:
        raise ValueError(f"transcript symbols outside the new alphabet: {bad!r}")

    same_alphabet = list(new_alphabet.symbols) == list(ckpt.alphabet_symbols)
    need_stage1 = force_head_replacement or not same_alphabet

    resume_phase = resume.extra.get("phase") if resume is not None else None
    if resume is not None:
        model = checkpoint_to_model(resume)
    else:
        if need_stage1:
            ckpt = replace_class_head(ckpt, new_alphabet, head_init_seed)
        model = checkpoint_to_model(ckpt)

    line_height = ckpt.extra.get("line_height", dataset.line_height or 64)
    extra = {"line_height": line_height}

    def step_loss(batch: Batch, step: int):
        out = model(batch.images)
        total = None
        for i, sample in enumerate(batch.samples):
            loss_i = ctc_line_loss(out.line(i), sample.transcript, eps)
            total = loss_i if total is None else total + loss_i
        total = total / len(batch.samples)
        return total, {"total": float(total.detach()), "ctc": float(total.detach())}

    last = resume
    if need_stage1 and resume_phase != "finetune_full":
        r = resume if resume_phase == "finetune_head" else None
        last = _train_loop(model, dataset, head_cfg, "finetune_head", step_loss,
                           new_alphabet, erase_cfg, out_dir, r, extra)
    r = resume if resume_phase == "finetune_full" else None
    return _train_loop(model, dataset, full_cfg, "finetune_full", step_loss,
                       new_alphabet, erase_cfg, out_dir, r, extra)


# ----- inference ------------------------------------------------------------


def line_detections(model: DetectionModel, image: np.ndarray) -> list[Detection]:
    """Run one line through the model and unpad the resulting boxes."""
    sample = LineSample(image=image, transcript=[])
    batch = collate([sample])
    model.eval()
    with torch.no_grad():
        out = model(batch.images)
    dets = out.detections(0)
    w, padded = batch.widths[0], batch.images.shape[-1]
    return [Detection(box=unpad_box(d.box, w, padded), probs=d.probs,
                      query_index=d.query_index) for d in dets]


def predict_lines(model: DetectionModel, alphabet: Alphabet,
                  images: Sequence[tuple[str, np.ndarray]],
                  cfg: Optional[DecodeConfig] = None, mode: str = "nms",
                  ngram=None, timing: bool = False) -> list[dict]:
    """Decode lines to JSONL-ready records, in input order."""
    cfg = cfg or DecodeConfig()
    if mode not in ("nms", "ngram"):
        raise ValueError("mode must be 'nms' or 'ngram'")
    if mode == "ngram" and ngram is None:
        raise ValueError("ngram mode needs a language model")
    records = []
    for name, image in images:
        t0 = time.perf_counter()
        dets = line_detections(model, image)
        if mode == "ngram":
            text, kept = transcribe_with_lm(dets, ngram, cfg, alphabet)
        else:
            text, kept = greedy_transcribe(dets, cfg, alphabet)
        rec = {
            "image": name,
            "pred": text,
            "boxes": [[d.box.cx, d.box.cy, d.box.w, d.box.h] for d in kept],
            "chars": [_emitted_symbol(d, cfg, alphabet) for d in kept],
        }
        if timing:
            rec["ms"] = (time.perf_counter() - t0) * 1000.0
        records.append(rec)
    return records


def _emitted_symbol(det: Detection, cfg: DecodeConfig, alphabet: Alphabet) -> str:
    from .decode import to_joint

    k = int(np.argmax(to_joint(det, cfg.epsilon).probs))
    return "" if k == len(alphabet) else alphabet.symbol(k)


def evaluate_dataset(model: DetectionModel, dataset: LineDataset,
                     cfg: Optional[DecodeConfig] = None, mode: str = "nms",
                     ngram=None, erase_cfg: Optional[EraseConfig] = None,
                     erase_seed: int = 0) -> tuple[dict, list[dict]]:
    """Metric report plus per-line predictions over a labeled dataset.

    ``erase_cfg`` optionally masks eval images (deterministically per line),
    for robustness probes.
    """
    images = []
    for i in range(len(dataset)):
        sample = dataset.get(i)
        if erase_cfg is not None:
            sample = apply_erasing(sample, erase_cfg,
                                   np.random.default_rng([erase_seed, i]))
        images.append((dataset.records[i]["image"], sample.image))
    records = predict_lines(model, dataset.alphabet, images, cfg, mode, ngram)
    pairs = [(dataset.text(i), records[i]["pred"]) for i in range(len(dataset))]
    report = metrics.full_report(pairs)
    return report, records


def dataset_cer(model: DetectionModel, dataset: LineDataset,
                cfg: Optional[DecodeConfig] = None, mode: str = "nms",
                ngram=None, erase_cfg: Optional[EraseConfig] = None) -> float:
    report, _ = evaluate_dataset(model, dataset, cfg, mode, ngram, erase_cfg)
    return report["cer"]


# ----- visualization --------------------------------------------------------


def _class_color(symbol: str) -> tuple[int, int, int]:
    """Stable symbol color from a hash; same alphabet, same colors."""
    digest = hashlib.md5(symbol.encode("utf-8")).digest()
    hue = digest[0] / 255.0
    import colorsys

    r, g, b = colorsys.hsv_to_rgb(hue, 0.85, 0.9)
    return int(r * 255), int(g * 255), int(b * 255)


def visualize(records: Sequence[dict], images_root: str, out_dir: str,
              caption_height: int = 24) -> list[str]:
    """Draw predicted boxes and a caption strip; one annotated PNG per record."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for rec in records:
        src = os.path.join(images_root, rec["image"])
        if not os.path.exists(src):
            print(f"warning: missing image {src}, skipping")
            continue
        img = Image.open(src).convert("RGB")
        w, h = img.size
        canvas = Image.new("RGB", (w, h + caption_height), (255, 255, 255))
        canvas.paste(img, (0, 0))
        draw = ImageDraw.Draw(canvas)
        for box, sym in zip(rec.get("boxes", []), rec.get("chars", [])):
            cx, cy, bw, bh = box
            x0, y0 = (cx - bw / 2) * w, (cy - bh / 2) * h
            x1, y1 = (cx + bw / 2) * w, (cy + bh / 2) * h
            draw.rectangle([x0, y0, x1, y1], outline=_class_color(sym or "∅"), width=1)
        draw.text((4, h + 4), rec.get("pred", ""), fill=(0, 0, 0))
        name = os.path.splitext(os.path.basename(rec["image"]))[0] + "_viz.png"
        path = os.path.join(out_dir, name)
        canvas.save(path)
        written.append(path)
    return written
