"""Supervised finetuning of a pretrained encoder with a linear head."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .audio import WaveformClip, select_channel, standardize, waveform_to_spectrogram
from .metrics import accuracy, confusion_counts, per_class_ap
from .model import MaskSpecModel
from .optim import AdamW, ScheduleConfig, lr_at
from .pretrain import patch_batch

logger = logging.getLogger(__name__)

TASK_TYPES = ("multiclass", "multilabel")
MIXUP_MODES = ("none", "waveform", "spectrogram", "both", "alternate")


@dataclass
class FinetuneConfig:
    num_classes: int
    task_type: str = "multiclass"
    epochs: int = 100
    warmup_epochs: int = 5
    layer_decay: float = 0.75
    mixup_alpha: float = 0.3
    mixup_mode: str = "alternate"
    roll: bool = True
    lr: float = 1e-4
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.95)
    batch_size: int = 8
    seed: int = 0
    stop_at_accuracy: float | None = None

    def __post_init__(self):
        if self.task_type not in TASK_TYPES:
            raise ValueError(f"task_type must be one of {TASK_TYPES}")
        if self.mixup_mode not in MIXUP_MODES:
            raise ValueError(f"mixup_mode must be one of {MIXUP_MODES}")
        if not 0 < self.layer_decay <= 1:
            raise ValueError("layer_decay must be in (0, 1]")
        if self.mixup_alpha < 0:
            raise ValueError("mixup_alpha must be non-negative")


@dataclass
class LabeledClip:
    """A standardized mono waveform (or stereo, for channel ensembles) and its class indices."""

    samples: np.ndarray
    labels: tuple[int, ...]
    fold: int | None = None


def mixup(batch_a, batch_b, lam: float):
    """Convex combination ``lam * a + (1 - lam) * b`` of inputs and label vectors."""
    (xa, ya), (xb, yb) = batch_a, batch_b
    xa, xb, ya, yb = (np.asarray(v) for v in (xa, xb, ya, yb))
    if xa.shape != xb.shape or ya.shape != yb.shape:
        raise ValueError(f"mixup shape mismatch: {xa.shape}/{xb.shape}, {ya.shape}/{yb.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"mixup weight {lam} outside [0, 1]")
    if lam == 1.0:
        return xa, ya
    return lam * xa + (1.0 - lam) * xb, lam * ya + (1.0 - lam) * yb


def time_roll(waveform, shift: int) -> np.ndarray:
    return np.roll(np.asarray(waveform), shift, axis=-1)


def layerwise_lr(base_lr: float, decay: float, layer_index: int, num_layers: int) -> float:
    """``base_lr * decay ** (num_layers - layer_index)``; the head sits at ``num_layers``."""
    if not 0 <= layer_index <= num_layers:
        raise ValueError(f"layer index {layer_index} outside [0, {num_layers}]")
    return base_lr * decay ** (num_layers - layer_index)


def layer_index(name: str, depth: int) -> int:
    """Patch embedding is layer 0, encoder block ``i`` is ``i + 1``, final norm and head ``depth + 1``."""
    if name.startswith("patch_embed."):
        return 0
    if name.startswith("encoder.blocks."):
        return int(name.split(".")[2]) + 1
    if name.startswith(("encoder.norm.", "head.")):
        return depth + 1
    raise ValueError(f"parameter {name!r} does not belong to the finetuning graph")


def layer_scales(names: Sequence[str], depth: int, decay: float) -> dict[str, float]:
    return {n: layerwise_lr(1.0, decay, layer_index(n, depth), depth + 1) for n in names}


def label_matrix(clips: Sequence[LabeledClip], num_classes: int) -> np.ndarray:
    y = np.zeros((len(clips), num_classes))
    for i, c in enumerate(clips):
        for k in c.labels:
            if not 0 <= k < num_classes:
                raise ValueError(f"label {k} out of range for {num_classes} classes")
            y[i, k] = 1.0
    return y


def prepare_for_finetuning(model: MaskSpecModel, num_classes: int, seed: int = 0) -> MaskSpecModel:
    """Drop the decoder and attach a fresh head (kept if it already has the right width)."""
    if model.config.decoder is not None or any(n.startswith("decoder.") for n in model.params):
        model.drop_decoder()
    head = model.params.get("head.weight")
    if head is None or head.shape[1] != num_classes:
        model.attach_head(num_classes, seed)
    return model


def spectrogram_batch(waveforms: np.ndarray, dtype) -> np.ndarray:
    return np.stack([waveform_to_spectrogram(w, dtype) for w in waveforms])


def predict_logits(model: MaskSpecModel, waveforms: Sequence[np.ndarray], batch_size: int = 8) -> np.ndarray:
    out = []
    for start in range(0, len(waveforms), batch_size):
        specs = spectrogram_batch(np.asarray(waveforms[start : start + batch_size]), model.dtype)
        out.append(model.classify(patch_batch(specs, model.config.patch)).data)
    return np.concatenate(out).astype(np.float64)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _softmax(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def evaluation_report(logits: np.ndarray, clips: Sequence[LabeledClip], num_classes: int, task_type: str) -> dict:
    """Per-class AP, mAP, and for single-label tasks accuracy and confusion counts."""
    y = label_matrix(clips, num_classes)
    scores = _softmax(logits) if task_type == "multiclass" else _sigmoid(logits)
    aps = per_class_ap(scores, y)
    valid = ~np.isnan(aps)
    report = {
        "num_clips": len(clips),
        "per_class_ap": [None if np.isnan(a) else float(a) for a in aps],
        "mAP": float(aps[valid].mean()) if valid.any() else None,
    }
    if task_type == "multiclass":
        truth = np.array([c.labels[0] for c in clips])
        preds = logits.argmax(axis=1)
        report["accuracy"] = accuracy(preds, truth)
        report["confusion"] = confusion_counts(preds, truth, num_classes).tolist()
    return report


def evaluate(model: MaskSpecModel, clips: Sequence[LabeledClip], num_classes: int, task_type: str = "multiclass", batch_size: int = 8) -> dict:
    logits = predict_logits(model, [c.samples for c in clips], batch_size)
    return evaluation_report(logits, clips, num_classes, task_type)


@dataclass
class FinetuneResult:
    model: MaskSpecModel
    report: dict
    history: list[dict] = field(default_factory=list)


def _augment(waveforms, targets, cfg: FinetuneConfig, rng: np.random.Generator, dtype):
    x = np.array(waveforms, dtype=np.float64)
    y = np.array(targets, dtype=np.float64)
    if cfg.roll:
        for i in range(len(x)):
            x[i] = time_roll(x[i], int(rng.integers(x.shape[1])))
    mode = cfg.mixup_mode if cfg.mixup_alpha > 0 and len(x) > 1 else "none"
    if mode == "alternate":
        mode = "waveform" if rng.random() < 0.5 else "spectrogram"
    if mode in ("waveform", "both"):
        perm = rng.permutation(len(x))
        x, y = mixup((x, y), (x[perm], y[perm]), float(rng.beta(cfg.mixup_alpha, cfg.mixup_alpha)))
    specs = spectrogram_batch(x, dtype)
    if mode in ("spectrogram", "both"):
        perm = rng.permutation(len(specs))
        specs, y = mixup((specs, y), (specs[perm], y[perm]), float(rng.beta(cfg.mixup_alpha, cfg.mixup_alpha)))
    return specs.astype(dtype, copy=False), y


def finetune_run(
    model: MaskSpecModel,
    train: Sequence[LabeledClip],
    evaluation: Sequence[LabeledClip],
    cfg: FinetuneConfig,
) -> FinetuneResult:
    """Train every encoder parameter plus the head; warmup then cosine decay.

    Multi-label tasks use per-class sigmoid cross-entropy, single-label tasks
    softmax cross-entropy.  The eval set is scored after every epoch; with
    ``cfg.stop_at_accuracy`` set, training ends once that accuracy is reached.
    """
    model = prepare_for_finetuning(model, cfg.num_classes, cfg.seed)
    depth = model.config.encoder.depth
    optimizer = AdamW(
        model.params,
        betas=cfg.betas,
        weight_decay=cfg.weight_decay,
        lr_scale=layer_scales(list(model.params), depth, cfg.layer_decay),
    )
    rng = np.random.default_rng(cfg.seed)
    y_train = label_matrix(train, cfg.num_classes)
    waves = np.stack([c.samples for c in train])
    steps_per_epoch = math.ceil(len(train) / cfg.batch_size)
    schedule = ScheduleConfig(min(cfg.warmup_epochs, cfg.epochs - 1), cfg.epochs, cfg.lr)
    loss_fn = T.cross_entropy if cfg.task_type == "multiclass" else T.binary_cross_entropy_with_logits
    patch = model.config.patch

    history = []
    report = evaluate(model, evaluation, cfg.num_classes, cfg.task_type, cfg.batch_size) if evaluation else {}
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            specs, targets = _augment(waves[idx], y_train[idx], cfg, rng, model.dtype)
            logits = model.classify(patch_batch(specs, patch))
            loss = loss_fn(logits, targets)
            T.backward(loss)
            optimizer.step(lr_at(min(step / steps_per_epoch, cfg.epochs), schedule))
            losses.append(loss.item())
            step += 1
        report = evaluate(model, evaluation, cfg.num_classes, cfg.task_type, cfg.batch_size) if evaluation else {}
        history.append({"epoch": epoch, "loss": float(np.mean(losses)), **{k: report.get(k) for k in ("accuracy", "mAP")}})
        logger.info("finetune epoch %d: loss %.4f eval %s", epoch, history[-1]["loss"], history[-1])
        if cfg.stop_at_accuracy is not None and report.get("accuracy", -1.0) >= cfg.stop_at_accuracy:
            break
    return FinetuneResult(model, report, history)


CHANNEL_VIEWS = ("left", "right", "mean")


@dataclass
class EnsembleResult:
    accuracy: float
    predictions: np.ndarray
    view_logits: dict[str, np.ndarray]


def ensemble_from_logits(view_logits: Mapping[str, np.ndarray]) -> np.ndarray:
    """Average the per-view logits and take the argmax per clip."""
    stacked = np.stack([np.asarray(v, dtype=np.float64) for v in view_logits.values()])
    return stacked.mean(axis=0).argmax(axis=1)


def channel_ensemble_eval(
    models: MaskSpecModel | Mapping[str, MaskSpecModel],
    clips: Sequence[WaveformClip],
    labels: Sequence[int],
    batch_size: int = 8,
) -> EnsembleResult:
    """Score left, right and mid (mean) channel views and ensemble their logits.

    ``models`` is one model used for all views, or a mapping view -> model
    (e.g. one model finetuned per channel).  A mono clip contributes the
    same waveform to every view, which reduces to single-view evaluation.
    """
    if not isinstance(models, Mapping):
        models = {v: models for v in CHANNEL_VIEWS}
    if any(c.channels == 1 for c in clips):
        logger.warning("mono input: channel ensemble falls back to a single view")
    view_logits = {}
    for view in CHANNEL_VIEWS:
        waves = [standardize(WaveformClip(select_channel(c.samples, view), c.sample_rate)).mono for c in clips]
        view_logits[view] = predict_logits(models[view], waves, batch_size)
    preds = ensemble_from_logits(view_logits)
    return EnsembleResult(accuracy(preds, labels), preds, view_logits)
