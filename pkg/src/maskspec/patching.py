"""Patch grids and random patch masking.

A ``(time, freq)`` spectrogram is cut into non-overlapping ``p x p`` tiles.
Tiles are enumerated frequency-major: tile ``k`` sits in frequency row
``k // cols`` and time column ``k % cols``.  Each tile is flattened
row-major in the spectrogram's own ``(time, freq)`` orientation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import Tensor, scatter_rows, take_rows

ALPHA_MIN = 0.05
ALPHA_MAX = 0.95


class MaskContractError(ValueError):
    """Arguments violate a masking contract (ratio range, sizes, ...)."""


@dataclass(frozen=True)
class PatchGrid:
    patches: np.ndarray  # (n, p*p)
    rows: int  # along frequency
    cols: int  # along time
    p: int

    @property
    def n(self) -> int:
        return self.rows * self.cols


def grid_shape(time_frames: int, freq_bins: int, p: int = 16) -> tuple[int, int]:
    """``(rows, cols)`` of the patch grid; trailing remainders are dropped."""
    if p <= 0 or p > time_frames or p > freq_bins:
        raise ValueError(f"patch side {p} invalid for a {time_frames}x{freq_bins} spectrogram")
    return freq_bins // p, time_frames // p


def patchify(spec: np.ndarray, p: int = 16) -> PatchGrid:
    spec = np.asarray(spec)
    if spec.ndim != 2:
        raise ValueError(f"expected a 2-D spectrogram, got shape {spec.shape}")
    rows, cols = grid_shape(spec.shape[0], spec.shape[1], p)
    tiles = spec[: cols * p, : rows * p].reshape(cols, p, rows, p)
    # (time tile, t, freq tile, f) -> (freq tile, time tile, t, f)
    patches = tiles.transpose(2, 0, 1, 3).reshape(rows * cols, p * p)
    return PatchGrid(np.ascontiguousarray(patches), rows, cols, p)


def unpatchify(grid: PatchGrid | np.ndarray, rows: int | None = None, cols: int | None = None, p: int | None = None) -> np.ndarray:
    """Inverse of :func:`patchify` for the covered region, ``(cols*p, rows*p)``."""
    if isinstance(grid, PatchGrid):
        patches, rows, cols, p = grid.patches, grid.rows, grid.cols, grid.p
    else:
        patches = np.asarray(grid)
    tiles = patches.reshape(rows, cols, p, p).transpose(1, 2, 0, 3)
    return tiles.reshape(cols * p, rows * p)


@dataclass(frozen=True)
class MaskPlan:
    n: int
    alpha: float
    masked_idx: np.ndarray
    survivor_idx: np.ndarray

    @property
    def N(self) -> int:
        return len(self.masked_idx)

    def to_json(self) -> str:
        return json.dumps({"n": self.n, "alpha": self.alpha, "masked_idx": self.masked_idx.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "MaskPlan":
        d = json.loads(text)
        return plan_from_masked(d["n"], d["alpha"], d["masked_idx"])


def num_masked(n: int, alpha: float) -> int:
    # the epsilon keeps e.g. 20 * 0.15 == 3 instead of 2.9999999999999996
    return int(np.floor(n * alpha + 1e-9))


def check_alpha(alpha: float) -> None:
    if not ALPHA_MIN - 1e-12 <= alpha <= ALPHA_MAX + 1e-12:
        raise MaskContractError(f"mask ratio {alpha} outside [{ALPHA_MIN}, {ALPHA_MAX}]")


def plan_from_masked(n: int, alpha: float, masked_idx: Sequence[int]) -> MaskPlan:
    masked = np.unique(np.asarray(masked_idx, dtype=np.int64))
    if len(masked) != len(masked_idx) or (len(masked) and (masked[0] < 0 or masked[-1] >= n)):
        raise MaskContractError("masked indices must be unique and within [0, n)")
    keep = np.ones(n, dtype=bool)
    keep[masked] = False
    return MaskPlan(n, float(alpha), masked, np.flatnonzero(keep).astype(np.int64))


def random_mask(n: int, alpha: float, rng: np.random.Generator | int | None = None) -> MaskPlan:
    """Mask ``floor(n * alpha)`` distinct patch indices drawn uniformly.

    Uses a partial Fisher-Yates shuffle, then sorts, so each subset of the
    right size is equally likely.
    """
    check_alpha(alpha)
    if n <= 0:
        raise ValueError("need at least one patch")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    count = num_masked(n, alpha)
    pool = np.arange(n, dtype=np.int64)
    for i in range(count):
        j = int(rng.integers(i, n))
        pool[i], pool[j] = pool[j], pool[i]
    masked = np.sort(pool[:count])
    survivors = np.sort(pool[count:])
    return MaskPlan(n, float(alpha), masked, survivors)


def _check_rows(x, n_expected: int, what: str) -> None:
    if x.shape[-2] != n_expected:
        raise MaskContractError(f"{what} has {x.shape[-2]} rows, expected {n_expected}")


def gather_survivors(patches, plan: MaskPlan):
    """Rows of ``patches`` at ``plan.survivor_idx``, in index order."""
    _check_rows(patches, plan.n, "patch set")
    if isinstance(patches, Tensor):
        return take_rows(patches, plan.survivor_idx)
    return np.asarray(patches)[plan.survivor_idx]


def gather_masked(patches, plan: MaskPlan):
    _check_rows(patches, plan.n, "patch set")
    if isinstance(patches, Tensor):
        return take_rows(patches, plan.masked_idx)
    return np.asarray(patches)[plan.masked_idx]


def scatter_with_mask_token(encoded, plan: MaskPlan, mask_token):
    """Full ``(n, d)`` sequence: encoded survivors in place, ``mask_token`` elsewhere."""
    _check_rows(encoded, plan.n - plan.N, "encoded sequence")
    if isinstance(encoded, Tensor) or isinstance(mask_token, Tensor):
        return scatter_rows(encoded, mask_token, plan.survivor_idx, plan.n)
    encoded = np.asarray(encoded)
    out = np.empty((plan.n, encoded.shape[-1]), dtype=encoded.dtype)
    out[:] = np.asarray(mask_token)
    out[plan.survivor_idx] = encoded
    return out


def stack_plans(plans: Sequence[MaskPlan]) -> tuple[np.ndarray, np.ndarray]:
    """Batch index arrays ``(survivor_idx, masked_idx)`` for plans of equal size."""
    if len({(p.n, p.N) for p in plans}) != 1:
        raise MaskContractError("all plans in a batch must share n and N")
    return np.stack([p.survivor_idx for p in plans]), np.stack([p.masked_idx for p in plans])


def validate_plan(plan: MaskPlan) -> None:
    """Raise unless the plan is a sorted, disjoint, exhaustive split of size ``floor(n*alpha)``."""
    m, s = plan.masked_idx, plan.survivor_idx
    if len(m) != num_masked(plan.n, plan.alpha):
        raise MaskContractError(f"{len(m)} masked patches, expected floor({plan.n}*{plan.alpha})")
    if np.any(np.diff(m) <= 0) or np.any(np.diff(s) <= 0):
        raise MaskContractError("index sets must be strictly increasing")
    both = np.concatenate([m, s])
    if len(both) != plan.n or not np.array_equal(np.sort(both), np.arange(plan.n)):
        raise MaskContractError("masked and survivor indices must partition 0..n-1")
