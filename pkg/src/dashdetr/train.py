"""Training loop, checkpoints and inference.

Each step runs forward -> matching cost -> Hungarian assignment -> set loss
-> backward -> gradient clipping -> Adam, with the patch-embedding
parameters in their own optimizer group (``lr_backbone``). Batch order is
drawn from ``(seed, epoch)`` only, so a run resumed from a checkpoint
replays exactly the batches the uninterrupted run would have seen.

Log files written to the output directory (tab-separated, with header):

* ``train_log.tsv``: ``step total class l1 giou matched_count``
* ``val_log.tsv``: ``epoch step mAP mAP50 mAR_10d mAR_100d``
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autograd import Adam, NonFiniteError, backward, clip_grad_norm, no_grad
from .autograd import checkpoint as ckpt
from .config import RunConfig, from_flat
from .data import ImageSample
from .evaluation import Detection, EvalReport, evaluate
from .loss import LossBreakdown, Target, batch_set_loss
from .matching import Assignment, MatchingError, MatchWeights, hungarian, pairwise_cost
from .model import Detector

log = logging.getLogger(__name__)

STEP_FIELDS = ("step", "total", "class", "l1", "giou", "matched_count")
VAL_FIELDS = ("epoch", "step", "mAP", "mAP50", "mAR_10d", "mAR_100d")


class NumericalError(RuntimeError):
    pass


@dataclass
class TrainLog:
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)

    @staticmethod
    def step_line(rec: dict) -> str:
        return "\t".join(str(rec[k]) if k in ("step", "matched_count") else repr(float(rec[k])) for k in STEP_FIELDS)

    @staticmethod
    def val_line(rec: dict) -> str:
        return "\t".join(str(rec[k]) if k in ("epoch", "step") else repr(float(rec[k])) for k in VAL_FIELDS)


def parse_step_log(text: str) -> list[dict]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or tuple(lines[0].split("\t")) != STEP_FIELDS:
        raise ValueError("not a training log: bad header")
    out = []
    for ln in lines[1:]:
        parts = ln.split("\t")
        rec = {k: float(v) for k, v in zip(STEP_FIELDS, parts)}
        rec["step"], rec["matched_count"] = int(rec["step"]), int(rec["matched_count"])
        out.append(rec)
    return out


def parse_val_log(text: str) -> list[dict]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or tuple(lines[0].split("\t")) != VAL_FIELDS:
        raise ValueError("not a validation log: bad header")
    out = []
    for ln in lines[1:]:
        rec = {k: float(v) for k, v in zip(VAL_FIELDS, ln.split("\t"))}
        rec["epoch"], rec["step"] = int(rec["epoch"]), int(rec["step"])
        out.append(rec)
    return out


def make_optimizer(model: Detector, cfg: RunConfig) -> Adam:
    return Adam([(model.backbone_parameters(), cfg.train.lr_backbone), (model.other_parameters(), cfg.train.lr)])


def match_batch(logits: np.ndarray, boxes: np.ndarray, targets: Sequence[Target], cfg: RunConfig) -> list[Assignment]:
    w = MatchWeights(cfg.loss.weight_class, cfg.loss.weight_l1, cfg.loss.weight_giou)
    return [hungarian(pairwise_cost(logits[i], boxes[i], t.classes, t.boxes, w)) for i, t in enumerate(targets)]


def training_step(model: Detector, opt: Adam, images: np.ndarray, targets: Sequence[Target],
                  cfg: RunConfig) -> LossBreakdown:
    try:
        pred = model(images)
        assignments = match_batch(pred.class_logits.data, pred.boxes.data, targets, cfg)
        losses = batch_set_loss(pred.class_logits, pred.boxes, targets, assignments, cfg.loss)
    except (NonFiniteError, MatchingError) as exc:
        raise NumericalError(str(exc)) from exc
    if not math.isfinite(losses.total.item()):
        raise NumericalError(f"non-finite loss {losses.total.item()}")
    backward(losses.total)
    clip_grad_norm(opt.all_params(), cfg.train.grad_clip)
    opt.step()
    return losses


# -- checkpoints -------------------------------------------------------------------

def checkpoint_tensors(model: Detector, opt: Adam | None) -> dict[str, np.ndarray]:
    out = {f"model.{k}": v for k, v in model.state_dict().items()}
    if opt is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        for g in opt.groups:
            for p, st in zip(g.params, g.states):
                out[f"adam.m.{names[id(p)]}"] = st.m
                out[f"adam.v.{names[id(p)]}"] = st.v
    return out


def save_checkpoint(path, model: Detector, opt: Adam | None, cfg: RunConfig, step: int) -> None:
    meta = {"config": cfg.flat(), "step": step, "adam_step": opt.step_count if opt else 0}
    ckpt.save(path, checkpoint_tensors(model, opt), meta)


def load_checkpoint(path, cfg: RunConfig | None = None) -> tuple[Detector, Adam, RunConfig, int]:
    """Rebuild model and optimizer from a checkpoint.

    ``cfg`` overrides the stored config (e.g. a different learning rate); the
    model shape must still agree with the stored tensors.
    """
    tensors, meta = ckpt.load(path)
    cfg = cfg or from_flat(meta["config"])
    model = Detector(cfg.model, seed=cfg.train.seed)
    model.load_state_dict({k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")})
    opt = make_optimizer(model, cfg)
    names = {id(p): n for n, p in model.named_parameters()}
    for g in opt.groups:
        for p, st in zip(g.params, g.states):
            name = names[id(p)]
            if f"adam.m.{name}" in tensors:
                st.m[...] = tensors[f"adam.m.{name}"]
                st.v[...] = tensors[f"adam.v.{name}"]
            st.step = int(meta.get("adam_step", 0))
    return model, opt, cfg, int(meta.get("step", 0))


# -- inference ---------------------------------------------------------------------

def predict(model: Detector, images: np.ndarray, batch_size: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """Class probabilities ``[B, N, C+1]`` and centre boxes ``[B, N, 4]``."""
    probs, boxes = [], []
    with no_grad():
        for s in range(0, len(images), batch_size):
            pred = model(images[s:s + batch_size])
            z = pred.class_logits.data
            e = np.exp(z - z.max(axis=-1, keepdims=True))
            probs.append(e / e.sum(axis=-1, keepdims=True))
            boxes.append(pred.boxes.data)
    return np.concatenate(probs), np.concatenate(boxes)


def postprocess(probs: np.ndarray, boxes: np.ndarray, threshold: float = 0.0,
                drop_no_object: bool = True) -> list[list[Detection]]:
    """Per-slot detections; no suppression of overlapping boxes is applied.

    A slot is kept when its best real class scores at least ``threshold``
    and, with ``drop_no_object``, when "no object" is not its argmax.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"confidence threshold {threshold} outside [0, 1]")
    out = []
    for p, b in zip(probs, boxes):
        dets = []
        real = p[:, :-1]
        cls = real.argmax(axis=-1)
        score = real.max(axis=-1)
        for i in range(len(p)):
            if drop_no_object and p[i].argmax() == p.shape[1] - 1:
                continue
            if score[i] < threshold:
                continue
            dets.append(Detection(b[i].copy(), int(cls[i]), float(min(score[i], 1.0))))
        out.append(dets)
    return out


@dataclass(frozen=True)
class PixelDetection:
    xyxy: np.ndarray
    class_id: int
    score: float


def infer(checkpoint, images: np.ndarray, confidence_threshold: float = 0.5,
          cfg: RunConfig | None = None) -> list[list[PixelDetection]]:
    """Detections in pixel corner form of the model input canvas."""
    if not 0.0 <= confidence_threshold <= 1.0:
        raise ValueError(f"confidence threshold {confidence_threshold} outside [0, 1]")
    model = checkpoint if isinstance(checkpoint, Detector) else load_checkpoint(checkpoint, cfg)[0]
    mc = model.cfg
    probs, boxes = predict(model, np.asarray(images, dtype=np.float64))
    scale = np.array([mc.image_width, mc.image_height, mc.image_width, mc.image_height], dtype=np.float64)
    out = []
    for dets in postprocess(probs, boxes, confidence_threshold, drop_no_object=True):
        rows = []
        for d in dets:
            cx, cy, w, h = d.box
            xyxy = np.clip(np.array([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2]), 0.0, 1.0) * scale
            rows.append(PixelDetection(xyxy, d.class_id, d.score))
        out.append(rows)
    return out


def evaluate_model(model: Detector, samples: Sequence[ImageSample], drop_no_object: bool = False) -> EvalReport:
    """Validation metrics; by default every slot is scored by its best real class."""
    images = np.stack([s.image for s in samples])
    probs, boxes = predict(model, images)
    dets = postprocess(probs, boxes, 0.0, drop_no_object=drop_no_object)
    return evaluate({i: d for i, d in enumerate(dets)}, {i: s.objects for i, s in enumerate(samples)},
                    num_classes=model.cfg.num_classes)


# -- the loop ----------------------------------------------------------------------

@dataclass
class TrainResult:
    log: TrainLog
    model: Detector
    optimizer: Adam
    step: int


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch, 7919]).permutation(n)


def train(cfg: RunConfig, train_set: Sequence[ImageSample], val_set: Sequence[ImageSample] = (),
          out_dir=None, resume=None, max_steps: int | None = None,
          on_step: Callable[[dict], None] | None = None) -> TrainResult:
    """Train from scratch (or from ``resume``) for ``cfg.train.epochs`` epochs.

    ``max_steps`` stops early at that global step (used to cut a run for
    resumption tests). Checkpoints go to ``out_dir/step_<n>.ckpt`` every
    ``checkpoint_interval`` steps, plus one at the start and one at the end.
    """
    if not train_set and cfg.train.epochs > 0:
        raise ValueError("training set is empty")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    if resume is not None:
        model, opt, _, step = load_checkpoint(resume, cfg)
    else:
        model = Detector(cfg.model, seed=cfg.train.seed)
        opt = make_optimizer(model, cfg)
        step = 0

    tlog = TrainLog()
    step_file = val_file = None
    if out is not None:
        mode = "a" if resume is not None and (out / "train_log.tsv").exists() else "w"
        step_file = open(out / "train_log.tsv", mode)
        val_file = open(out / "val_log.tsv", mode)
        if mode == "w":
            step_file.write("\t".join(STEP_FIELDS) + "\n")
            val_file.write("\t".join(VAL_FIELDS) + "\n")
        if step == 0:
            save_checkpoint(out / "step_0.ckpt", model, opt, cfg, 0)

    bs = cfg.train.batch_size
    n = len(train_set)
    per_epoch = math.ceil(n / bs) if n else 0
    targets = [s.target() for s in train_set]
    try:
        start_epoch = step // per_epoch if per_epoch else 0
        for epoch in range(start_epoch, cfg.train.epochs):
            order = epoch_order(cfg.train.seed, epoch, n)
            t0 = time.perf_counter()
            for b in range(step - epoch * per_epoch, per_epoch):
                if max_steps is not None and step >= max_steps:
                    break
                idx = order[b * bs:(b + 1) * bs]
                images = np.stack([train_set[i].image for i in idx])
                batch_targets = [targets[i] for i in idx]
                try:
                    losses = training_step(model, opt, images, batch_targets, cfg)
                except NumericalError:
                    if out is not None:
                        np.savez(out / f"nan_batch_step_{step}.npz", images=images, indices=idx)
                    raise
                step += 1
                rec = {"step": step, **losses.values()}
                tlog.steps.append(rec)
                if step_file:
                    step_file.write(TrainLog.step_line(rec) + "\n")
                if on_step:
                    on_step(rec)
                if out is not None and cfg.train.checkpoint_interval and step % cfg.train.checkpoint_interval == 0:
                    save_checkpoint(out / f"step_{step}.ckpt", model, opt, cfg, step)
            if max_steps is not None and step >= max_steps and step < (epoch + 1) * per_epoch:
                break
            log.info("epoch %d done in %.1fs, last loss %.4f", epoch, time.perf_counter() - t0,
                     tlog.steps[-1]["total"] if tlog.steps else float("nan"))
            if val_set and cfg.train.eval_every and (epoch + 1) % cfg.train.eval_every == 0:
                report = evaluate_model(model, val_set)
                rec = {"epoch": epoch + 1, "step": step, "mAP": report.map, "mAP50": report.map50,
                       "mAR_10d": report.mar_10d, "mAR_100d": report.mar_100d}
                tlog.epochs.append(rec)
                if val_file:
                    val_file.write(TrainLog.val_line(rec) + "\n")
                    val_file.flush()
                log.info("epoch %d: mAP %.3f mAP50 %.3f", epoch + 1, report.map, report.map50)
    finally:
        if step_file:
            step_file.close()
            val_file.close()
    if out is not None and step > 0:
        save_checkpoint(out / f"step_{step}.ckpt", model, opt, cfg, step)
    return TrainResult(tlog, model, opt, step)
