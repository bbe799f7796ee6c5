"""Coherence metrics on interventional response profiles.

A response profile pairs the raw scores of the audited inputs before and
after a perturbation.  The three metrics compare how far the perturbed
scores moved *as a distribution* against how far they moved *pointwise*:

* QBM    -- displacement of a few quantiles vs. paired RMS displacement.
* WCM    -- sorted-matching (1-D optimal transport) RMS vs. paired RMS.
* TI_WCM -- WCM with the mean shift removed from the transport term.

All three live in [0, 1].  Lower values mean the natural input-wise pairing
is closer to the optimal monotone coupling, i.e. a more coherent response.
"""

from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ValidationError

__all__ = [
    "MetricKind",
    "ResponseProfile",
    "QuantileGrid",
    "ProfileDiagnostics",
    "MetricValue",
    "WCMWitness",
    "ContrastValue",
    "empirical_quantile",
    "empirical_quantiles",
    "profile_diagnostics",
    "qbm",
    "qbm_order_statistics",
    "wcm",
    "wcm_bruteforce_oracle",
    "ti_wcm",
    "contrast",
    "compute_metric",
    "BRUTEFORCE_MAX_N",
]

BRUTEFORCE_MAX_N = 8


class MetricKind(str, enum.Enum):
    QBM = "QBM"
    WCM = "WCM"
    TI_WCM = "TI_WCM"

    @classmethod
    def parse(cls, text: str) -> "MetricKind":
        key = text.strip().upper().replace("-", "_")
        if key == "TIWCM":
            key = "TI_WCM"
        try:
            return cls(key)
        except ValueError:
            raise ValidationError("unknown_metric", text) from None


def _readonly(values, name: str) -> np.ndarray:
    arr = np.array(values, dtype=float)
    if arr.ndim != 1:
        raise ValidationError("bad_shape", f"{name} must be one-dimensional")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ResponseProfile:
    """Index-aligned original / perturbed raw scores."""

    pair_ids: tuple[str, ...]
    original: np.ndarray
    perturbed: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "pair_ids", tuple(self.pair_ids))
        original = _readonly(self.original, "original")
        perturbed = _readonly(self.perturbed, "perturbed")
        object.__setattr__(self, "original", original)
        object.__setattr__(self, "perturbed", perturbed)
        n = len(self.pair_ids)
        if n < 1:
            raise ValidationError("empty_profile")
        if original.shape != (n,) or perturbed.shape != (n,):
            raise ValidationError(
                "length_mismatch",
                f"{n} pair ids, {original.size} original, {perturbed.size} perturbed",
            )
        if not (np.isfinite(original).all() and np.isfinite(perturbed).all()):
            raise ValidationError("non_finite_score")

    def __len__(self) -> int:
        return len(self.pair_ids)

    def take(self, index) -> "ResponseProfile":
        index = np.asarray(index, dtype=np.intp)
        ids = tuple(self.pair_ids[i] for i in index)
        return ResponseProfile(ids, self.original[index], self.perturbed[index])

    def concat(self, other: "ResponseProfile") -> "ResponseProfile":
        return ResponseProfile(
            self.pair_ids + other.pair_ids,
            np.concatenate([self.original, other.original]),
            np.concatenate([self.perturbed, other.perturbed]),
        )

    def scaled(self, factor: float) -> "ResponseProfile":
        return ResponseProfile(self.pair_ids, self.original * factor, self.perturbed * factor)

    def shifted(self, offset: float) -> "ResponseProfile":
        return ResponseProfile(self.pair_ids, self.original + offset, self.perturbed + offset)


@dataclass(frozen=True)
class QuantileGrid:
    levels: tuple[float, ...]
    grid_id: str = ""

    def __post_init__(self):
        levels = tuple(float(q) for q in self.levels)
        object.__setattr__(self, "levels", levels)
        if not levels:
            raise ValidationError("empty_grid")
        for q in levels:
            if not (0.0 < q < 1.0):
                raise ValidationError("level_out_of_range", f"{q} not in (0, 1)")
        if any(b <= a for a, b in zip(levels, levels[1:])):
            raise ValidationError("grid_not_increasing", str(levels))
        if not self.grid_id:
            object.__setattr__(self, "grid_id", f"K{len(levels)}")

    @classmethod
    def equispaced(cls, k: int, grid_id: str = "") -> "QuantileGrid":
        """``k`` interior levels i/(k+1), i = 1..k."""
        return cls(tuple(i / (k + 1) for i in range(1, k + 1)), grid_id)

    def __len__(self) -> int:
        return len(self.levels)


DEFAULT_GRID = QuantileGrid((0.25, 0.50, 0.75), "K3")


@dataclass(frozen=True)
class ProfileDiagnostics:
    mean_original: float
    mean_perturbed: float
    paired_rms: float
    transport_rms: float
    n: int

    @property
    def mean_gap(self) -> float:
        return self.mean_original - self.mean_perturbed


@dataclass(frozen=True)
class MetricValue:
    metric_kind: MetricKind
    value: float
    degenerate: bool = False


@dataclass(frozen=True)
class WCMWitness:
    """Sorting permutations; pairing ``sort_original[i]`` with
    ``sort_perturbed[i]`` is an optimal assignment."""

    sort_original: tuple[int, ...]
    sort_perturbed: tuple[int, ...]

    def assignment(self) -> tuple[int, ...]:
        """``a[j]`` = perturbed index matched to original index ``j``."""
        out = [0] * len(self.sort_original)
        for i, j in zip(self.sort_original, self.sort_perturbed):
            out[i] = j
        return tuple(out)


@dataclass(frozen=True)
class ContrastValue:
    metric_kind: MetricKind
    mechanistic: float
    spurious: float
    delta: float


def _check_level(level: float) -> float:
    level = float(level)
    if not (0.0 < level < 1.0):
        raise ValidationError("level_out_of_range", f"{level} not in (0, 1)")
    return level


def _quantiles_sorted(v: np.ndarray, levels: np.ndarray) -> np.ndarray:
    # type-7 linear interpolation between order statistics, h = (n-1)p
    n = v.size
    h = (n - 1) * levels
    lo = np.floor(h).astype(np.intp)
    hi = np.minimum(lo + 1, n - 1)
    return v[lo] + (h - lo) * (v[hi] - v[lo])


def empirical_quantiles(values, levels) -> np.ndarray:
    """Vectorised :func:`empirical_quantile` over several levels."""
    v = np.asarray(values, dtype=float)
    if v.ndim != 1 or v.size == 0:
        raise ValidationError("empty_input", "quantile of an empty vector")
    if not np.isfinite(v).all():
        raise ValidationError("non_finite_value")
    lv = np.array([_check_level(q) for q in np.atleast_1d(levels)], dtype=float)
    return _quantiles_sorted(np.sort(v), lv)


def empirical_quantile(values, level: float) -> float:
    """Linear-interpolation order-statistic quantile.

    >>> empirical_quantile([1, 2, 3, 4], 0.5)
    2.5
    """
    return float(empirical_quantiles(values, [level])[0])


def _diagnostics_arrays(orig: np.ndarray, pert: np.ndarray):
    n = orig.size
    so = np.sort(orig)
    sp = np.sort(pert)
    paired_ms = float(np.dot(pert - orig, pert - orig)) / n
    sorted_diff = sp - so
    transport_ms = float(np.dot(sorted_diff, sorted_diff)) / n
    # The identity pairing is itself a feasible matching; when it is already
    # sorted the two sums differ only by summation order, so keep the smaller.
    transport_ms = min(transport_ms, paired_ms)
    return so, sp, sorted_diff, paired_ms, transport_ms


def profile_diagnostics(profile: ResponseProfile) -> ProfileDiagnostics:
    _, _, _, paired_ms, transport_ms = _diagnostics_arrays(profile.original, profile.perturbed)
    return ProfileDiagnostics(
        mean_original=float(np.mean(profile.original)),
        mean_perturbed=float(np.mean(profile.perturbed)),
        paired_rms=math.sqrt(paired_ms),
        transport_rms=math.sqrt(transport_ms),
        n=len(profile),
    )


def _clamp01(x: float) -> float:
    return min(1.0, max(0.0, x))


# The *_value helpers work on raw arrays and skip profile construction; the
# bootstrap calls them thousands of times.

def _qbm_value(orig: np.ndarray, pert: np.ndarray, levels: np.ndarray) -> tuple[float, bool]:
    d = pert - orig
    paired_ms = float(np.dot(d, d)) / d.size
    if paired_ms == 0.0:
        return 0.0, True
    qd = _quantiles_sorted(np.sort(pert), levels) - _quantiles_sorted(np.sort(orig), levels)
    quantile_ms = float(np.dot(qd, qd)) / qd.size
    return _clamp01(1.0 - math.sqrt(quantile_ms / paired_ms)), False


def _wcm_value(orig: np.ndarray, pert: np.ndarray) -> tuple[float, bool]:
    _, _, _, paired_ms, transport_ms = _diagnostics_arrays(orig, pert)
    if paired_ms == 0.0:
        return 0.0, True
    return _clamp01(1.0 - math.sqrt(transport_ms / paired_ms)), False


def _ti_wcm_value(orig: np.ndarray, pert: np.ndarray) -> tuple[float, bool]:
    _, _, sorted_diff, paired_ms, _ = _diagnostics_arrays(orig, pert)
    if paired_ms == 0.0:
        return 0.0, True
    # mean(sorted_diff) is exactly the mean gap, so this variance equals
    # transport_ms - gap**2 without the cancellation of the subtraction.
    centred = sorted_diff - sorted_diff.mean()
    shape_ms = max(0.0, float(np.dot(centred, centred)) / centred.size)
    return _clamp01(1.0 - math.sqrt(shape_ms / paired_ms)), False


def qbm(profile: ResponseProfile, grid: QuantileGrid = DEFAULT_GRID) -> MetricValue:
    value, degenerate = _qbm_value(profile.original, profile.perturbed, np.array(grid.levels))
    return MetricValue(MetricKind.QBM, value, degenerate)


def qbm_order_statistics(profile: ResponseProfile) -> MetricValue:
    """QBM on the grid refined to every order statistic.

    Uses levels i/(N-1), i = 0..N-1.  The interior levels go through the
    quantile estimator; the two endpoints (outside the open unit interval)
    contribute the sorted extremes directly.  The result coincides with WCM.
    """
    orig, pert = profile.original, profile.perturbed
    n = orig.size
    if n < 2:
        raise ValidationError("profile_too_short", "order-statistic grid needs N >= 2")
    d = pert - orig
    paired_ms = float(np.dot(d, d)) / n
    if paired_ms == 0.0:
        return MetricValue(MetricKind.QBM, 0.0, True)
    interior = np.arange(1, n - 1) / (n - 1)
    so, sp = np.sort(orig), np.sort(pert)
    q_orig = np.concatenate([[so[0]], _quantiles_sorted(so, interior), [so[-1]]])
    q_pert = np.concatenate([[sp[0]], _quantiles_sorted(sp, interior), [sp[-1]]])
    qd = q_pert - q_orig
    value = _clamp01(1.0 - math.sqrt(float(np.dot(qd, qd)) / n / paired_ms))
    return MetricValue(MetricKind.QBM, value, False)


def _stable_order(scores: np.ndarray, pair_ids: Sequence[str]) -> tuple[int, ...]:
    return tuple(sorted(range(len(scores)), key=lambda i: (scores[i], pair_ids[i], i)))


def wcm(profile: ResponseProfile) -> tuple[MetricValue, WCMWitness]:
    value, degenerate = _wcm_value(profile.original, profile.perturbed)
    witness = WCMWitness(
        _stable_order(profile.original, profile.pair_ids),
        _stable_order(profile.perturbed, profile.pair_ids),
    )
    return MetricValue(MetricKind.WCM, value, degenerate), witness


def wcm_bruteforce_oracle(profile: ResponseProfile) -> MetricValue:
    """WCM by enumerating every permutation. Test oracle, N <= 8."""
    n = len(profile)
    if n > BRUTEFORCE_MAX_N:
        raise ValidationError("too_large_for_enumeration", f"N={n} > {BRUTEFORCE_MAX_N}")
    orig = [float(x) for x in profile.original]
    pert = [float(x) for x in profile.perturbed]
    paired = sum((p - o) ** 2 for o, p in zip(orig, pert))
    if paired == 0.0:
        return MetricValue(MetricKind.WCM, 0.0, True)
    best = min(
        sum((pert[perm[i]] - orig[i]) ** 2 for i in range(n))
        for perm in itertools.permutations(range(n))
    )
    return MetricValue(MetricKind.WCM, _clamp01(1.0 - math.sqrt(best / paired)), False)


def ti_wcm(profile: ResponseProfile) -> MetricValue:
    value, degenerate = _ti_wcm_value(profile.original, profile.perturbed)
    return MetricValue(MetricKind.TI_WCM, value, degenerate)


def compute_metric(
    kind: MetricKind, profile: ResponseProfile, grid: QuantileGrid = DEFAULT_GRID
) -> MetricValue:
    if kind is MetricKind.QBM:
        return qbm(profile, grid)
    if kind is MetricKind.WCM:
        return wcm(profile)[0]
    if kind is MetricKind.TI_WCM:
        return ti_wcm(profile)
    raise ValidationError("unknown_metric", str(kind))


def metric_value_arrays(
    kind: MetricKind, orig: np.ndarray, pert: np.ndarray, levels: np.ndarray | None = None
) -> tuple[float, bool]:
    if kind is MetricKind.QBM:
        return _qbm_value(orig, pert, levels)
    if kind is MetricKind.WCM:
        return _wcm_value(orig, pert)
    return _ti_wcm_value(orig, pert)


def metric_panel(
    orig: np.ndarray, pert: np.ndarray, requests: Sequence[tuple[MetricKind, np.ndarray | None]]
) -> list[tuple[float, bool]]:
    """Evaluate several metrics on one profile, sorting each side once.

    ``requests`` holds (kind, levels) with levels used for QBM only.  Values
    are identical to the single-metric functions.
    """
    d = pert - orig
    paired_ms = float(np.dot(d, d)) / d.size
    if paired_ms == 0.0:
        return [(0.0, True)] * len(requests)
    so, sp = np.sort(orig), np.sort(pert)
    sorted_diff = sp - so
    out = []
    for kind, levels in requests:
        if kind is MetricKind.QBM:
            qd = _quantiles_sorted(sp, levels) - _quantiles_sorted(so, levels)
            ratio = float(np.dot(qd, qd)) / qd.size / paired_ms
        elif kind is MetricKind.WCM:
            ratio = float(np.dot(sorted_diff, sorted_diff)) / sorted_diff.size / paired_ms
        else:
            centred = sorted_diff - sorted_diff.mean()
            ratio = max(0.0, float(np.dot(centred, centred)) / centred.size) / paired_ms
        out.append((_clamp01(1.0 - math.sqrt(ratio)), False))
    return out


def contrast(mechanistic: MetricValue, spurious: MetricValue) -> ContrastValue:
    """Prior-relative contrast, spurious minus mechanistic.

    Positive: the response to perturbing prior-selected components is more
    coherent (lower metric) than to the matched outside-prior control.
    """
    if mechanistic.metric_kind != spurious.metric_kind:
        raise ValidationError(
            "metric_kind_mismatch", f"{mechanistic.metric_kind} vs {spurious.metric_kind}"
        )
    return ContrastValue(
        mechanistic.metric_kind,
        mechanistic.value,
        spurious.value,
        spurious.value - mechanistic.value,
    )
