"""Long-tail shaping: exponential class-count profiles and dataset subsampling.

A profile assigns a target count to each rank (rank 0 = head), decaying
geometrically so that head/tail equals the requested imbalance factor. The
class_order permutation maps ranks to class indices; rotating it gives
different clients different head/tail patterns while keeping the counts.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .datasets import Dataset, class_counts, subset
from .errors import CapacityError, ProfileTooSteepError
from .seeding import rng_from

# Tolerance on the realized head/tail ratio after integer rounding.
PROFILE_IF_TOLERANCE = 0.02


@dataclass(frozen=True)
class LtProfile:
    """Per-rank sample counts plus the rank -> class assignment."""

    target_if: float
    counts: np.ndarray
    class_order: np.ndarray

    def __post_init__(self) -> None:
        counts = np.ascontiguousarray(self.counts, dtype=np.int64)
        order = np.ascontiguousarray(self.class_order, dtype=np.int64)
        m = counts.shape[0]
        if m < 2:
            raise ValueError("a profile needs at least two classes")
        if order.shape != (m,) or set(order.tolist()) != set(range(m)):
            raise ValueError("class_order must be a permutation of 0..M-1")
        if counts.min() < 1:
            raise ProfileTooSteepError("profile tail count fell to zero")
        if np.any(np.diff(counts) > 0):
            raise ProfileTooSteepError("profile counts must be non-increasing by rank")
        realized = counts[0] / counts[-1]
        if abs(realized - self.target_if) > PROFILE_IF_TOLERANCE * self.target_if:
            raise ProfileTooSteepError(
                f"integer rounding realizes IF {realized:.3f}, "
                f"outside {PROFILE_IF_TOLERANCE:.0%} of target {self.target_if}"
            )
        counts.flags.writeable = False
        order.flags.writeable = False
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "class_order", order)

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_json_dict(self) -> dict:
        return {
            "target_if": self.target_if,
            "counts": self.counts.tolist(),
            "class_order": self.class_order.tolist(),
        }


def profile_from_json(doc: dict) -> LtProfile:
    return LtProfile(
        target_if=float(doc["target_if"]),
        counts=np.asarray(doc["counts"], dtype=np.int64),
        class_order=np.asarray(doc["class_order"], dtype=np.int64),
    )


def profile_counts(n_max: int, num_classes: int, target_if: float) -> np.ndarray:
    """Raw geometric-decay counts: floor(n_max * IF^(-j/(M-1))), exact tail.

    The tail entry is forced to round(n_max / IF) so the realized head/tail
    ratio matches the target up to that rounding.
    """
    ranks = np.arange(num_classes, dtype=np.float64)
    raw = n_max * target_if ** (-ranks / (num_classes - 1))
    counts = np.floor(raw).astype(np.int64)
    counts[-1] = math.floor(n_max / target_if + 0.5)
    return counts


def exponential_profile(n_max: int, num_classes: int, target_if: float) -> LtProfile:
    """Build a head-first profile with identity class order.

    Raises ProfileTooSteepError when integer rounding cannot realize the
    target ratio (tiny n_max relative to target_if).
    """
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    if target_if < 1.0:
        raise ValueError("target_if must be >= 1")
    if n_max < target_if:
        raise ValueError("n_max must be at least target_if")
    return LtProfile(
        target_if=float(target_if),
        counts=profile_counts(n_max, num_classes, target_if),
        class_order=np.arange(num_classes, dtype=np.int64),
    )


def rotate_profile(profile: LtProfile, offset: int) -> LtProfile:
    """Shift which classes sit at the head: rank j maps to class (order[j] + offset) mod M."""
    m = profile.num_classes
    if not 0 <= offset < m:
        raise ValueError("offset must lie in [0, M)")
    return LtProfile(
        target_if=profile.target_if,
        counts=profile.counts.copy(),
        class_order=(profile.class_order + offset) % m,
    )


def shape_long_tailed(dataset: Dataset, profile: LtProfile, seed: int) -> Dataset:
    """Subsample a dataset so its class counts match the profile exactly.

    Selection within each class is uniform without replacement under the
    seed; unselected samples are simply discarded.
    """
    if profile.num_classes != dataset.num_classes:
        raise ValueError("profile and dataset class counts differ")
    have = class_counts(dataset)
    rng = rng_from(seed)
    picks: list[np.ndarray] = []
    for rank in range(profile.num_classes):
        cls = int(profile.class_order[rank])
        need = int(profile.counts[rank])
        if have[cls] < need:
            raise CapacityError(
                f"class {cls} has {int(have[cls])} samples, profile rank {rank} needs {need}"
            )
        pool = np.nonzero(dataset.labels == cls)[0]
        picks.append(rng.permutation(pool)[:need])
    chosen = np.sort(np.concatenate(picks))
    return subset(dataset, chosen, name=f"{dataset.name}-lt{profile.target_if:g}")
