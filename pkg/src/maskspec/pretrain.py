"""Masked spectrogram pretraining loop.

For each clip: patchify, embed and add positions, mask a random subset of
patches, encode the survivors, project to decoder width, fill masked slots
with the shared mask token, add decoder positions, decode, and score only
the masked patches against the original log-mel values.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Iterator, NamedTuple, Sequence

import numpy as np

from . import tensor as T
from .model import MaskSpecModel
from .optim import AdamW, ScheduleConfig, lr_at
from .patching import MaskPlan, check_alpha, num_masked, patchify, random_mask, stack_plans, validate_plan
from .tensor import NonFiniteError, Tensor

logger = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "step", "lr", "loss_sum", "loss_mean")


class TrainingDivergedError(RuntimeError):
    pass


class MaskedLoss(NamedTuple):
    total: Tensor  # sum of squared errors over masked patches
    mean: Tensor  # per-element mean, the optimization objective


def mse_masked_loss(targets, recon) -> MaskedLoss:
    """Squared error between original and reconstructed masked patches.

    Both inputs hold only the masked rows, ordered by masked index.
    """
    recon = T.as_tensor(recon)
    targets = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=recon.dtype)
    if targets.shape != recon.shape:
        raise ValueError(f"target shape {targets.shape} != reconstruction shape {recon.shape}")
    if recon.ndim < 2 or recon.shape[-2] == 0:
        raise ValueError("masked loss needs at least one masked patch")
    diff = recon - targets
    sq = diff * diff
    return MaskedLoss(T.sum(sq), T.mean(sq))


def patch_batch(specs: np.ndarray, p: int = 16) -> np.ndarray:
    """``(B, T, F)`` spectrograms to ``(B, n, p*p)`` patch vectors."""
    return np.stack([patchify(s, p).patches for s in specs])


def masked_loss_for_batch(
    model: MaskSpecModel, patches: np.ndarray, plans: Sequence[MaskPlan], targets: np.ndarray | None = None
) -> MaskedLoss:
    """Loss of reconstructing ``targets`` (default: the input patches) at the masked positions."""
    recon = model.reconstruct(patches, list(plans))
    _, masked = stack_plans(plans)
    predicted = T.take_rows(recon, masked)
    targets = patches if targets is None else targets
    return mse_masked_loss(np.take_along_axis(targets, masked[..., None], axis=1), predicted)


def draw_plans(n: int, count: int, alpha: float, rng: np.random.Generator) -> list[MaskPlan]:
    plans = [random_mask(n, alpha, rng) for _ in range(count)]
    for plan in plans:
        validate_plan(plan)
    return plans


def iterate_batches(specs: np.ndarray, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    order = rng.permutation(len(specs))
    for start in range(0, len(order), batch_size):
        yield specs[order[start : start + batch_size]]


@dataclass
class StepRecord:
    epoch: int
    step: int
    lr: float
    loss_sum: float
    loss_mean: float

    def row(self) -> list[str]:
        return [str(self.epoch), str(self.step), repr(self.lr), repr(self.loss_sum), repr(self.loss_mean)]


@dataclass
class EpochResult:
    loss_sum: float  # summed squared error over the epoch
    loss_mean: float  # average of per-batch objectives
    records: list[StepRecord] = field(default_factory=list)


def pretrain_epoch(
    batches: Iterable[np.ndarray],
    model: MaskSpecModel,
    rng: np.random.Generator,
    optimizer: AdamW,
    alpha: float = 0.75,
    lr: float | Callable[[int], float] = 1e-3,
    epoch: int = 0,
    first_step: int = 0,
    max_steps: int | None = None,
) -> EpochResult:
    """One pass over ``batches`` with an optimizer step per batch.

    ``lr`` is a constant or a function of the global step index.  Masks are
    drawn from ``rng``, which the caller owns.
    """
    check_alpha(alpha)
    p = model.config.patch
    records = []
    step = first_step
    for specs in batches:
        if max_steps is not None and step >= max_steps:
            break
        patches = patch_batch(np.asarray(specs), p).astype(model.dtype, copy=False)
        plans = draw_plans(patches.shape[1], len(patches), alpha, rng)
        step_lr = lr(step) if callable(lr) else lr
        try:
            loss = masked_loss_for_batch(model, patches, plans)
            T.backward(loss.mean)
        except NonFiniteError as exc:
            raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, step {step}: {exc}") from exc
        optimizer.step(step_lr)
        rec = StepRecord(epoch, step, float(step_lr), loss.total.item(), loss.mean.item())
        logger.debug("epoch %d step %d lr %.3g loss %.5f", epoch, step, step_lr, rec.loss_mean)
        records.append(rec)
        step += 1
    total = float(sum(r.loss_sum for r in records))
    mean = float(np.mean([r.loss_mean for r in records])) if records else math.nan
    return EpochResult(total, mean, records)


@dataclass
class PretrainSettings:
    alpha: float = 0.75
    epochs: int = 80
    warmup_epochs: float = 40
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.95)
    seed: int = 0
    max_steps: int | None = None


def pretrain(
    model: MaskSpecModel,
    specs: np.ndarray,
    settings: PretrainSettings,
    on_epoch: Callable[[int, EpochResult], None] | None = None,
) -> list[StepRecord]:
    """Full run: warmup + cosine schedule over epochs, per-batch stepping.

    Data order and masks come from one generator seeded by ``settings.seed``.
    """
    specs = np.asarray(specs)
    rng = np.random.default_rng(settings.seed)
    optimizer = AdamW(model.params, betas=settings.betas, weight_decay=settings.weight_decay)
    steps_per_epoch = math.ceil(len(specs) / settings.batch_size)
    schedule = ScheduleConfig(settings.warmup_epochs, settings.epochs, settings.lr)

    def lr_for(step: int) -> float:
        return lr_at(min(step / steps_per_epoch, schedule.total_epochs), schedule)

    history: list[StepRecord] = []
    for epoch in range(settings.epochs):
        if settings.max_steps is not None and len(history) >= settings.max_steps:
            break
        result = pretrain_epoch(
            iterate_batches(specs, settings.batch_size, rng),
            model,
            rng,
            optimizer,
            settings.alpha,
            lr_for,
            epoch=epoch,
            first_step=len(history),
            max_steps=settings.max_steps,
        )
        history.extend(result.records)
        logger.info("epoch %d: mean loss %.5f", epoch, result.loss_mean)
        if on_epoch is not None:
            on_epoch(epoch, result)
    return history


def write_loss_csv(path: str | Path, records: Sequence[StepRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_FIELDS)
        for r in records:
            w.writerow(r.row())


SWEEP_RATIOS = tuple(round(0.05 + 0.1 * i, 2) for i in range(10))


@dataclass
class SweepRow:
    alpha: float
    n_masked: int
    n_survivors: int
    initial_loss: float
    final_loss: float


def sweep_settings(base: PretrainSettings, alpha: float, steps: int, n_specs: int) -> PretrainSettings:
    """Settings for one sweep run: ``steps`` optimizer steps with the schedule squeezed to fit."""
    epochs = max(2, math.ceil(steps / math.ceil(n_specs / base.batch_size)))
    return replace(base, alpha=alpha, epochs=epochs, warmup_epochs=min(base.warmup_epochs, epochs - 1), max_steps=steps)


def mask_ratio_sweep(
    ratios: Sequence[float],
    steps: int,
    model_factory: Callable[[], MaskSpecModel],
    specs: np.ndarray,
    settings: PretrainSettings | None = None,
    csv_path: str | Path | None = None,
) -> list[SweepRow]:
    """Short pretraining run per mask ratio on identical data and seed."""
    for a in ratios:
        check_alpha(a)
    base = settings or PretrainSettings()
    specs = np.asarray(specs)
    rows = []
    for alpha in ratios:
        model = model_factory()
        history = pretrain(model, specs, sweep_settings(base, alpha, steps, len(specs)))
        n = patch_batch(specs[:1], model.config.patch).shape[1]
        n_masked = num_masked(n, alpha)
        rows.append(SweepRow(alpha, n_masked, n - n_masked, history[0].loss_mean, history[-1].loss_mean))
        logger.info("alpha %.2f: loss %.5f -> %.5f", alpha, rows[-1].initial_loss, rows[-1].final_loss)
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["alpha", "n_masked", "n_survivors", "initial_loss", "final_loss"])
            for r in rows:
                w.writerow([repr(r.alpha), r.n_masked, r.n_survivors, repr(r.initial_loss), repr(r.final_loss)])
    return rows
