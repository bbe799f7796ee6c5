"""Percentile bootstrap over audit pairs, seed aggregation, and AUROC."""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .errors import BootstrapError, ValidationError
from .metrics import _quantiles_sorted
from .rng import derive, splitmix64_block


@dataclass(frozen=True)
class BootstrapConfig:
    replicates: int = 100
    confidence: float = 0.95
    boot_seed: int = 0

    def __post_init__(self):
        if int(self.replicates) != self.replicates or self.replicates < 1:
            raise ValidationError("bad_replicates", str(self.replicates))
        if not (0.0 < self.confidence < 1.0):
            raise ValidationError("bad_confidence", str(self.confidence))


@dataclass(frozen=True)
class IntervalEstimate:
    point: float
    lower: float
    upper: float
    method: str = "percentile_bootstrap"


class LabeledScore(NamedTuple):
    score: float
    label: int


@dataclass(frozen=True, eq=False)
class LabeledScores:
    """Aligned scores and binary labels; resamplable like a profile."""

    pair_ids: tuple[str, ...]
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "pair_ids", tuple(self.pair_ids))
        object.__setattr__(self, "scores", np.asarray(self.scores, dtype=float))
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64))
        if not (len(self.pair_ids) == self.scores.size == self.labels.size):
            raise ValidationError("length_mismatch")

    def __len__(self) -> int:
        return len(self.pair_ids)

    def take(self, index) -> "LabeledScores":
        index = np.asarray(index, dtype=np.intp)
        return LabeledScores(
            tuple(self.pair_ids[i] for i in index), self.scores[index], self.labels[index]
        )

    def items(self) -> list[LabeledScore]:
        return [LabeledScore(float(s), int(y)) for s, y in zip(self.scores, self.labels)]


# -- AUROC ----------------------------------------------------------------------

def auroc_arrays(scores, labels) -> float:
    """Mann-Whitney AUROC with half credit for ties, O(N log N)."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValidationError("length_mismatch")
    if not np.isfinite(s).all():
        raise ValidationError("non_finite_score")
    if not np.isin(y, (0, 1)).all():
        raise ValidationError("non_binary_label")
    n_pos = int(np.count_nonzero(y == 1))
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("single_class", f"{n_pos} positives, {n_neg} negatives")
    order = np.argsort(s, kind="stable")
    s, y = s[order], y[order]
    # tie groups over the sorted scores
    starts = np.flatnonzero(np.concatenate([[True], s[1:] != s[:-1]]))
    pos_in = np.add.reduceat((y == 1).astype(np.int64), starts)
    neg_in = np.add.reduceat((y == 0).astype(np.int64), starts)
    neg_below = np.concatenate([[0], np.cumsum(neg_in)[:-1]])
    # twice the Mann-Whitney U, kept integral so the division is exact
    twice_u = int(np.sum(pos_in * (2 * neg_below + neg_in)))
    return twice_u / (2 * n_pos * n_neg)


def auroc(items: Sequence[LabeledScore]) -> float:
    if not items:
        raise ValidationError("empty_input")
    return auroc_arrays([it.score for it in items], [it.label for it in items])


# -- bootstrap ------------------------------------------------------------------

@functools.lru_cache(maxsize=64)
def _indices(boot_seed: int, replicates: int, n: int) -> np.ndarray:
    out = np.empty((replicates, n), dtype=np.intp)
    modulus = np.uint64(n)
    for r in range(replicates):
        out[r] = splitmix64_block(derive(boot_seed, r), n) % modulus
    out.setflags(write=False)
    return out


def bootstrap_indices(n: int, config: BootstrapConfig) -> np.ndarray:
    """(B, n) resampled pair indices; row ``r`` depends only on (seed, r)."""
    if n < 1:
        raise ValidationError("empty_profile")
    return _indices(config.boot_seed, int(config.replicates), n)


def _check_aligned(bundle: Sequence) -> int:
    if not bundle:
        raise ValidationError("empty_bundle")
    first = bundle[0]
    n = len(first)
    if n < 1:
        raise ValidationError("empty_profile")
    for other in bundle[1:]:
        if len(other) != n or other.pair_ids != first.pair_ids:
            raise ValidationError("misaligned_bundle", "profiles must share pair_id order")
    return n


Statistic = Callable[[Sequence], "float | np.ndarray"]


def bootstrap_replicates(bundle: Sequence, statistic: Statistic, config: BootstrapConfig) -> np.ndarray:
    """Statistic on each joint resample; shape (B,) or (B, k)."""
    n = _check_aligned(bundle)
    idx = bootstrap_indices(n, config)
    values = []
    for r in range(idx.shape[0]):
        resampled = [member.take(idx[r]) for member in bundle]
        try:
            values.append(np.asarray(statistic(resampled), dtype=float))
        except Exception as exc:
            raise BootstrapError("statistic_failed", str(exc), replicate=r) from exc
    return np.stack(values)


def percentile_interval(replicates, confidence: float) -> tuple[float, float]:
    """Percentile bounds using the same type-7 estimator as the metrics."""
    v = np.sort(np.asarray(replicates, dtype=float))
    tail = (1.0 - confidence) / 2.0
    lo, hi = _quantiles_sorted(v, np.array([tail, 1.0 - tail]))
    return float(lo), float(hi)


def percentile_intervals(replicates: np.ndarray, confidence: float) -> tuple[np.ndarray, np.ndarray]:
    """Column-wise :func:`percentile_interval` for a (B, k) array."""
    v = np.sort(np.asarray(replicates, dtype=float), axis=0)
    tail = (1.0 - confidence) / 2.0
    b = v.shape[0]
    out = []
    for level in (tail, 1.0 - tail):
        h = (b - 1) * level
        lo = int(math.floor(h))
        hi = min(lo + 1, b - 1)
        out.append(v[lo] + (h - lo) * (v[hi] - v[lo]))
    return out[0], out[1]


def bootstrap_ci(bundle: Sequence, statistic: Statistic, config: BootstrapConfig) -> IntervalEstimate:
    """Percentile bootstrap CI for ``statistic(bundle)``.

    Every member of ``bundle`` is resampled with the same pair indices, so
    statistics linking several aligned profiles (a mechanistic/spurious
    contrast, say) keep their per-pair linkage.
    """
    _check_aligned(bundle)
    point = float(statistic(list(bundle)))
    reps = bootstrap_replicates(bundle, statistic, config)
    lo, hi = percentile_interval(reps, config.confidence)
    return IntervalEstimate(point, lo, hi)


def aggregate_seeds(
    per_seed_values: Sequence[float],
    per_seed_bundles: Sequence[Sequence],
    statistic: Statistic,
    config: BootstrapConfig,
) -> tuple[float, IntervalEstimate]:
    """Mean over seeds with a jointly resampled percentile interval.

    Each replicate draws one set of pair indices and applies it to every
    seed's bundle before recomputing and averaging.
    """
    if not per_seed_bundles:
        raise ValidationError("no_seeds")
    if len(per_seed_values) != len(per_seed_bundles):
        raise ValidationError("length_mismatch", "one value per seed bundle")
    ids = None
    for bundle in per_seed_bundles:
        _check_aligned(bundle)
        if ids is None:
            ids = bundle[0].pair_ids
        elif bundle[0].pair_ids != ids:
            raise ValidationError("misaligned_seeds", "seed bundles cover different pairs")
    mean = float(np.mean(np.asarray(per_seed_values, dtype=float)))
    reps = np.mean(
        [bootstrap_replicates(b, statistic, config) for b in per_seed_bundles], axis=0
    )
    lo, hi = percentile_interval(reps, config.confidence)
    return mean, IntervalEstimate(mean, lo, hi)
