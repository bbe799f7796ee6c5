"""Componentised inputs, structural priors and matched perturbation pairs.

Indices are 0-based throughout (prior files included).
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import AuditIOError, ValidationError
from .rng import SplitMix64, derive

AMINO_ACIDS = "ACDEFGHIKLMNPQRSTVWY"
DEFAULT_MASK_TOKEN = "X"

MASK = "mask"
CLASS_SUBSTITUTION = "class_substitution"
OPERATOR_KINDS = (MASK, CLASS_SUBSTITUTION)

MECHANISTIC_STREAM = 0
SPURIOUS_STREAM = 1


@dataclass(frozen=True)
class AuditRecord:
    pair_id: str
    context: str
    sequence: str
    label: int | None = None

    def __post_init__(self):
        if len(self.sequence) < 2:
            raise ValidationError("sequence_too_short", pair_id=self.pair_id)
        if self.label is not None and self.label not in (0, 1):
            raise ValidationError("bad_label", str(self.label), pair_id=self.pair_id)

    def __len__(self) -> int:
        return len(self.sequence)

    def check_alphabet(self, alphabet: str) -> None:
        bad = sorted(set(self.sequence) - set(alphabet))
        if bad:
            raise ValidationError("alphabet_violation", f"symbols {bad}", pair_id=self.pair_id)


@dataclass(frozen=True)
class StructuralPrior:
    record_id: str
    indices: frozenset[int]

    def __post_init__(self):
        object.__setattr__(self, "indices", frozenset(int(i) for i in self.indices))

    def __len__(self) -> int:
        return len(self.indices)


class ClassTable:
    """Partition of an alphabet into named substitution classes."""

    def __init__(self, classes: Mapping[str, Sequence[str]]):
        if not classes:
            raise ValidationError("empty_class_table")
        self.classes: dict[str, tuple[str, ...]] = {}
        self._class_of: dict[str, str] = {}
        for name, symbols in classes.items():
            members = tuple(sorted(set(symbols)))
            if not members:
                raise ValidationError("empty_class", name)
            for s in members:
                if not isinstance(s, str) or len(s) != 1:
                    raise ValidationError("bad_symbol", repr(s), class_name=name)
                if s in self._class_of:
                    raise ValidationError(
                        "overlapping_classes", f"{s!r} in {self._class_of[s]!r} and {name!r}"
                    )
                self._class_of[s] = name
            self.classes[name] = members

    @property
    def alphabet(self) -> str:
        return "".join(sorted(self._class_of))

    def class_of(self, symbol: str) -> str:
        try:
            return self._class_of[symbol]
        except KeyError:
            raise ValidationError("symbol_not_in_class_table", repr(symbol)) from None

    def members(self, symbol: str) -> tuple[str, ...]:
        return self.classes[self.class_of(symbol)]

    def check_covers(self, alphabet: str) -> None:
        missing = sorted(set(alphabet) - set(self._class_of))
        if missing:
            raise ValidationError("class_table_not_covering", f"missing {missing}")

    def to_dict(self) -> dict[str, list[str]]:
        return {k: list(v) for k, v in self.classes.items()}

    @classmethod
    def load(cls, path: str | Path) -> "ClassTable":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise AuditIOError("unreadable_class_table", str(exc), path=str(path)) from exc
        except json.JSONDecodeError as exc:
            raise ValidationError("class_table_parse_error", str(exc), path=str(path)) from exc
        if not isinstance(data, dict):
            raise ValidationError("class_table_parse_error", "expected a JSON object")
        return cls(data)

    @classmethod
    def default(cls) -> "ClassTable":
        text = resources.files("coherence_audit").joinpath("data/default_classes.json").read_text()
        return cls(json.loads(text))


@dataclass(frozen=True)
class PerturbationOperatorSpec:
    kind: str
    mask_token: str = DEFAULT_MASK_TOKEN
    class_table: ClassTable | None = None

    def __post_init__(self):
        if self.kind not in OPERATOR_KINDS:
            raise ValidationError("unknown_operator", self.kind)
        if self.kind == MASK and (not isinstance(self.mask_token, str) or len(self.mask_token) != 1):
            raise ValidationError("bad_mask_token", repr(self.mask_token))
        if self.kind == CLASS_SUBSTITUTION and self.class_table is None:
            raise ValidationError("missing_class_table")


@dataclass(frozen=True)
class MatchedVariantPair:
    record_id: str
    operator_kind: str
    mechanistic_scope: tuple[int, ...]
    spurious_scope: tuple[int, ...]
    mechanistic_sequence: str
    spurious_sequence: str
    sub_seed: int
    noop_positions: tuple[int, ...] = field(default=())


@dataclass
class CoverageStats:
    """Counts behind the auditing-set composition table."""

    n_records: int = 0
    missing_prior: int = 0
    invalid_prior: int = 0
    not_realizable: int = 0
    retained: int = 0
    orphan_priors: int = 0
    invalid_reasons: Counter = field(default_factory=Counter)
    prior_sizes: list[int] = field(default_factory=list)

    @property
    def with_prior(self) -> int:
        return self.n_records - self.missing_prior

    @property
    def with_valid_prior(self) -> int:
        return self.with_prior - self.invalid_prior

    @property
    def median_prior_size(self) -> float | None:
        if not self.prior_sizes:
            return None
        s = sorted(self.prior_sizes)
        mid = len(s) // 2
        return float(s[mid]) if len(s) % 2 else (s[mid - 1] + s[mid]) / 2

    def table(self) -> list[tuple[str, int, float | None]]:
        """(criterion, count, fraction of input) rows."""
        n = self.n_records
        frac = (lambda k: k / n) if n else (lambda k: None)
        return [
            ("Records in input", n, None),
            ("With prior", self.with_prior, frac(self.with_prior)),
            ("With valid prior", self.with_valid_prior, frac(self.with_valid_prior)),
            ("With realizable interventions", self.retained, frac(self.retained)),
        ]

    def to_dict(self) -> dict:
        return {
            "n_records": self.n_records,
            "with_prior": self.with_prior,
            "with_valid_prior": self.with_valid_prior,
            "retained": self.retained,
            "excluded": {
                "missing_prior": self.missing_prior,
                "invalid_prior": self.invalid_prior,
                "not_realizable": self.not_realizable,
            },
            "invalid_reasons": dict(sorted(self.invalid_reasons.items())),
            "orphan_priors": self.orphan_priors,
            "median_prior_size": self.median_prior_size,
        }


def validate_prior(record: AuditRecord, prior: StructuralPrior) -> StructuralPrior:
    if prior.record_id != record.pair_id:
        raise ValidationError("record_mismatch", f"{prior.record_id!r} != {record.pair_id!r}")
    m = len(record)
    if not prior.indices:
        raise ValidationError("empty_prior", record_id=prior.record_id)
    bad = sorted(i for i in prior.indices if i < 0 or i >= m)
    if bad:
        raise ValidationError("index_out_of_range", f"{bad} with M={m}", record_id=prior.record_id)
    if len(prior.indices) == m:
        raise ValidationError("full_prior", f"all {m} components selected", record_id=prior.record_id)
    return prior


def complement(record: AuditRecord, prior: StructuralPrior) -> list[int]:
    return [i for i in range(len(record)) if i not in prior.indices]


def check_realizable(record: AuditRecord, prior: StructuralPrior) -> tuple[bool, str | None]:
    n_comp = len(record) - len(prior.indices)
    if n_comp >= len(prior.indices):
        return True, None
    return False, "complement_too_small"


def sample_spurious_scope(record: AuditRecord, prior: StructuralPrior, sub_seed: int) -> tuple[int, ...]:
    """Uniform size-|P| subset of the complement (partial Fisher-Yates)."""
    ok, reason = check_realizable(record, prior)
    if not ok:
        raise ValidationError(reason, record_id=record.pair_id)
    pool = complement(record, prior)
    k = len(prior.indices)
    rng = SplitMix64(sub_seed)
    for i in range(k):
        j = i + rng.below(len(pool) - i)
        pool[i], pool[j] = pool[j], pool[i]
    return tuple(sorted(pool[:k]))


def _check_scope(sequence: str, scope: Iterable[int]) -> list[int]:
    positions = sorted(set(scope))
    for i in positions:
        if i < 0 or i >= len(sequence):
            raise ValidationError("index_out_of_range", f"{i} with M={len(sequence)}")
    return positions


def apply_mask(sequence: str, scope: Iterable[int], mask_token: str = DEFAULT_MASK_TOKEN) -> str:
    chars = list(sequence)
    for i in _check_scope(sequence, scope):
        chars[i] = mask_token
    return "".join(chars)


def apply_class_substitution(
    sequence: str, scope: Iterable[int], class_table: ClassTable, sub_seed: int
) -> tuple[str, tuple[int, ...]]:
    """Replace each scoped symbol with another member of its class.

    Returns the new sequence and the positions left unchanged because their
    class is a singleton.  Draws are taken in ascending position order.
    """
    chars = list(sequence)
    rng = SplitMix64(sub_seed)
    noops = []
    for i in _check_scope(sequence, scope):
        original = chars[i]
        candidates = [s for s in class_table.members(original) if s != original]
        if not candidates:
            noops.append(i)
            continue
        chars[i] = candidates[rng.below(len(candidates))]
    return "".join(chars), tuple(noops)


def build_matched_pair(
    record: AuditRecord, prior: StructuralPrior, operator: PerturbationOperatorSpec, sub_seed: int
) -> MatchedVariantPair:
    validate_prior(record, prior)
    mech_scope = tuple(sorted(prior.indices))
    spur_scope = sample_spurious_scope(record, prior, sub_seed)
    noops: tuple[int, ...] = ()
    if operator.kind == MASK:
        mech_seq = apply_mask(record.sequence, mech_scope, operator.mask_token)
        spur_seq = apply_mask(record.sequence, spur_scope, operator.mask_token)
    else:
        mech_seq, mech_noop = apply_class_substitution(
            record.sequence, mech_scope, operator.class_table, derive(sub_seed, MECHANISTIC_STREAM)
        )
        spur_seq, spur_noop = apply_class_substitution(
            record.sequence, spur_scope, operator.class_table, derive(sub_seed, SPURIOUS_STREAM)
        )
        noops = tuple(sorted(mech_noop + spur_noop))
    return MatchedVariantPair(
        record_id=record.pair_id,
        operator_kind=operator.kind,
        mechanistic_scope=mech_scope,
        spurious_scope=spur_scope,
        mechanistic_sequence=mech_seq,
        spurious_sequence=spur_seq,
        sub_seed=sub_seed,
        noop_positions=noops,
    )


def filter_auditing_set(
    records: Sequence[AuditRecord], priors: Iterable[StructuralPrior]
) -> tuple[list[tuple[AuditRecord, StructuralPrior]], CoverageStats]:
    """Keep records with a valid, realizable prior; report the rest."""
    by_id = {p.record_id: p for p in priors}
    stats = CoverageStats(n_records=len(records))
    known = {r.pair_id for r in records}
    stats.orphan_priors = sum(1 for rid in by_id if rid not in known)
    kept = []
    for record in records:
        prior = by_id.get(record.pair_id)
        if prior is None:
            stats.missing_prior += 1
            continue
        try:
            validate_prior(record, prior)
        except ValidationError as exc:
            stats.invalid_prior += 1
            stats.invalid_reasons[exc.code] += 1
            continue
        ok, _ = check_realizable(record, prior)
        if not ok:
            stats.not_realizable += 1
            continue
        kept.append((record, prior))
        stats.prior_sizes.append(len(prior))
    stats.retained = len(kept)
    return kept, stats
