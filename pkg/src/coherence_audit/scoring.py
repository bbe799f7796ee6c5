"""Black-box scoring contract and response-profile assembly.

The audit never looks inside a model; it sends batches of
``(pair_id, variant, context, sequence)`` items to an adapter and gets one
raw score per item back.  Three adapters are provided:

* :class:`SyntheticAdapter` -- deterministic toy models with a known read
  set, used to validate that the audit discriminates what it should.
* :class:`FileExchangeAdapter` -- JSONL request file out, CSV response in.
* :class:`SubprocessAdapter` -- line protocol over a child's stdin/stdout.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import subprocess
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .errors import AdapterError, AuditIOError, ValidationError
from .intervention import DEFAULT_MASK_TOKEN, AuditRecord, MatchedVariantPair, StructuralPrior
from .metrics import ResponseProfile
from .rng import SplitMix64, splitmix64_mix, stable_hash64

log = logging.getLogger(__name__)

ORIGINAL = "orig"
MECHANISTIC = "mech"
SPURIOUS = "spur"
VARIANTS = (ORIGINAL, MECHANISTIC, SPURIOUS)

EMBEDDING_SLOTS = 16


class ScoringItem(NamedTuple):
    pair_id: str
    variant: str
    context: str
    sequence: str

    def to_json(self) -> str:
        return json.dumps(
            {"pair_id": self.pair_id, "variant": self.variant,
             "context": self.context, "sequence": self.sequence},
            ensure_ascii=False,
        )


class ScoringAdapter:
    """Base class. Subclasses implement :meth:`score`."""

    kind = "abstract"

    def score(self, items: Sequence[ScoringItem]) -> list[float]:
        raise NotImplementedError

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def score_batch(adapter: ScoringAdapter, items: Sequence[ScoringItem]) -> list[float]:
    """Score ``items`` and enforce the contract: one finite real per item."""
    if not items:
        raise ValidationError("empty_batch")
    scores = adapter.score(items)
    if len(scores) != len(items):
        raise AdapterError(
            "count_mismatch", f"{len(scores)} scores for {len(items)} items", adapter=adapter.kind
        )
    out = []
    for item, s in zip(items, scores):
        try:
            value = float(s)
        except (TypeError, ValueError):
            raise AdapterError(
                "non_numeric_score", repr(s), pair_id=item.pair_id, variant=item.variant
            ) from None
        if not math.isfinite(value):
            raise AdapterError(
                "non_finite_score", repr(s), pair_id=item.pair_id, variant=item.variant
            )
        out.append(value)
    return out


# -- synthetic models ----------------------------------------------------------

READ_SETS = ("prior_only", "complement_only", "mixed")


@dataclass(frozen=True)
class SyntheticModelSpec:
    """Toy model: ``alpha*g(prior) + beta*g(complement) + noise``.

    ``g`` averages a per-(symbol, position mod 16) embedding over a region.
    The embedding is drawn in [-1, 1) from ``model_seed`` unless given
    explicitly; the mask token always embeds to 0.  Noise is a fixed
    per-pair offset (Irwin-Hall approximation of a Gaussian), identical for
    the original input and all of its variants.
    """

    read_set: str = "mixed"
    alpha: float = 1.0
    beta: float = 0.0
    noise_sigma: float = 0.0
    model_seed: int = 0
    mask_token: str = DEFAULT_MASK_TOKEN
    embedding: Mapping[str, Sequence[float]] | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.read_set not in READ_SETS:
            raise ValidationError("unknown_read_set", self.read_set)
        if not (math.isfinite(self.alpha) and math.isfinite(self.beta)):
            raise ValidationError("non_finite_weight")
        if not (self.noise_sigma >= 0 and math.isfinite(self.noise_sigma)):
            raise ValidationError("bad_noise_sigma", str(self.noise_sigma))
        if self.embedding is not None:
            for sym, row in self.embedding.items():
                if len(row) != EMBEDDING_SLOTS:
                    raise ValidationError("bad_embedding_row", f"{sym!r} has {len(row)} slots")

    @property
    def weights(self) -> tuple[float, float]:
        if self.read_set == "prior_only":
            return 1.0, 0.0
        if self.read_set == "complement_only":
            return 0.0, 1.0
        return float(self.alpha), float(self.beta)

    @classmethod
    def from_dict(cls, data: Mapping) -> "SyntheticModelSpec":
        allowed = {"read_set", "alpha", "beta", "noise_sigma", "model_seed", "mask_token", "embedding"}
        unknown = set(data) - allowed
        if unknown:
            raise ValidationError("unknown_synthetic_field", ", ".join(sorted(unknown)))
        return cls(**dict(data))


def embedding_value(model_seed: int, symbol: str, slot: int) -> float:
    u = (splitmix64_mix(model_seed, ord(symbol), slot) >> 11) * (1.0 / (1 << 53))
    return 2.0 * u - 1.0


def synthetic_noise(model_seed: int, pair_id: str, sigma: float) -> float:
    if sigma == 0.0:
        return 0.0
    rng = SplitMix64(splitmix64_mix(model_seed, stable_hash64(pair_id)))
    total = 0.0
    for _ in range(12):
        total += rng.next_float()
    return sigma * (total - 6.0)


class _EmbeddingTable:
    def __init__(self, spec: SyntheticModelSpec):
        self.spec = spec
        self._rows: dict[str, tuple[float, ...]] = {spec.mask_token: (0.0,) * EMBEDDING_SLOTS}
        if spec.embedding is not None:
            for sym, row in spec.embedding.items():
                if sym != spec.mask_token:
                    self._rows[sym] = tuple(float(x) for x in row)

    def row(self, symbol: str) -> tuple[float, ...]:
        r = self._rows.get(symbol)
        if r is None:
            if self.spec.embedding is not None:
                raise ValidationError("symbol_not_embedded", repr(symbol))
            r = tuple(embedding_value(self.spec.model_seed, symbol, k) for k in range(EMBEDDING_SLOTS))
            self._rows[symbol] = r
        return r


def _region_mean(table: _EmbeddingTable, sequence: str, positions: Sequence[int]) -> float:
    total = 0.0
    for i in positions:
        total += table.row(sequence[i])[i % EMBEDDING_SLOTS]
    return total / len(positions)


def synthetic_score(
    spec: SyntheticModelSpec,
    record: AuditRecord,
    prior: StructuralPrior,
    sequence: str | None = None,
    _table: _EmbeddingTable | None = None,
) -> float:
    """Score ``record`` (or a variant ``sequence`` of it) under ``spec``.

    The regions are always those of the *original* record's prior.
    """
    seq = record.sequence if sequence is None else sequence
    if len(seq) != len(record.sequence):
        raise ValidationError("length_changed", pair_id=record.pair_id)
    table = _table or _EmbeddingTable(spec)
    alpha, beta = spec.weights
    prior_pos = sorted(prior.indices)
    comp_pos = [i for i in range(len(seq)) if i not in prior.indices]
    value = alpha * _region_mean(table, seq, prior_pos) + beta * _region_mean(table, seq, comp_pos)
    return value + synthetic_noise(spec.model_seed, record.pair_id, spec.noise_sigma)


class SyntheticAdapter(ScoringAdapter):
    kind = "synthetic"

    def __init__(self, spec: SyntheticModelSpec, priors: Mapping[str, StructuralPrior]):
        self.spec = spec
        self.priors = dict(priors)
        self._table = _EmbeddingTable(spec)
        self._regions: dict[str, tuple[list[int], list[int]]] = {}
        self._noise: dict[str, float] = {}

    def _score_one(self, item: ScoringItem) -> float:
        pid = item.pair_id
        regions = self._regions.get(pid)
        if regions is None:
            prior = self.priors.get(pid)
            if prior is None:
                raise AdapterError("unknown_pair", "no prior for synthetic model", pair_id=pid)
            m = len(item.sequence)
            regions = (sorted(prior.indices), [i for i in range(m) if i not in prior.indices])
            self._regions[pid] = regions
            self._noise[pid] = synthetic_noise(self.spec.model_seed, pid, self.spec.noise_sigma)
        alpha, beta = self.spec.weights
        seq = item.sequence
        value = alpha * _region_mean(self._table, seq, regions[0])
        value += beta * _region_mean(self._table, seq, regions[1])
        return value + self._noise[pid]

    def score(self, items: Sequence[ScoringItem]) -> list[float]:
        return [self._score_one(it) for it in items]


# -- external adapters ---------------------------------------------------------

def _parse_score_line(line: str, lineno: int, source: str) -> tuple[str, str, float]:
    parts = line.rstrip("\r\n").rsplit(",", 2)
    if len(parts) != 3:
        raise AdapterError("malformed_line", repr(line), source=source, line=lineno)
    pid, variant, raw = parts
    try:
        value = float(raw)
    except ValueError:
        raise AdapterError("malformed_line", repr(line), source=source, line=lineno) from None
    return pid, variant, value


def _match_scores(
    items: Sequence[ScoringItem], rows: Iterable[tuple[str, str, float]], source: str
) -> list[float]:
    wanted = {}
    for idx, it in enumerate(items):
        key = (it.pair_id, it.variant)
        if key in wanted:
            raise ValidationError("duplicate_request", f"{key} appears twice in one batch")
        wanted[key] = idx
    out: list[float | None] = [None] * len(items)
    n_rows = 0
    for pid, variant, value in rows:
        n_rows += 1
        idx = wanted.get((pid, variant))
        if idx is None:
            raise AdapterError("unexpected_response", f"{pid},{variant}", source=source)
        if out[idx] is not None:
            raise AdapterError("duplicate_response", f"{pid},{variant}", source=source)
        out[idx] = value
    if n_rows != len(items):
        raise AdapterError("count_mismatch", f"{n_rows} responses for {len(items)} items", source=source)
    return out  # type: ignore[return-value]


class FileExchangeAdapter(ScoringAdapter):
    """Hand batches to an external scorer through the filesystem.

    Each batch overwrites ``request_path`` (JSON Lines, written atomically)
    and then waits for ``response_path``: a CSV with header
    ``pair_id,variant,score``, one row per request in any order.  The
    responder should also write atomically (write + rename).
    """

    kind = "file"

    def __init__(self, request_path, response_path, poll_interval: float = 0.5, timeout: float = 600.0):
        self.request_path = Path(request_path)
        self.response_path = Path(response_path)
        self.poll_interval = float(poll_interval)
        self.timeout = float(timeout)

    def score(self, items: Sequence[ScoringItem]) -> list[float]:
        try:
            if self.response_path.exists():
                self.response_path.unlink()
            self.request_path.parent.mkdir(parents=True, exist_ok=True)
            tmp = self.request_path.with_name(self.request_path.name + ".tmp")
            with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
                for it in items:
                    fh.write(it.to_json() + "\n")
            os.replace(tmp, self.request_path)
        except OSError as exc:
            raise AuditIOError("request_write_failed", str(exc), path=str(self.request_path)) from exc

        deadline = time.monotonic() + self.timeout
        while not self.response_path.exists():
            if time.monotonic() > deadline:
                raise AdapterError("response_timeout", f"no {self.response_path} after {self.timeout}s")
            time.sleep(self.poll_interval)
        try:
            text = self.response_path.read_text(encoding="utf-8")
        except OSError as exc:
            raise AuditIOError("response_read_failed", str(exc), path=str(self.response_path)) from exc
        return _match_scores(items, self._parse(text), str(self.response_path))

    def _parse(self, text: str):
        reader = csv.reader(io.StringIO(text))
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["pair_id", "variant", "score"]:
            raise AdapterError("bad_response_header", repr(header), source=str(self.response_path))
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise AdapterError("malformed_line", repr(row), source=str(self.response_path), line=lineno)
            try:
                value = float(row[2])
            except ValueError:
                raise AdapterError(
                    "malformed_line", repr(row), source=str(self.response_path), line=lineno
                ) from None
            yield row[0], row[1], value


class SubprocessAdapter(ScoringAdapter):
    """Long-lived child process speaking a one-line-per-item protocol.

    Requests go to the child's stdin as JSON objects, one per line; the child
    answers ``pair_id,variant,score`` lines on stdout, one per item, and must
    flush after each batch.  A malformed line, early EOF, or non-zero exit
    aborts with the offending line quoted.
    """

    kind = "subprocess"

    def __init__(self, command: Sequence[str], cwd=None, env: Mapping[str, str] | None = None):
        if isinstance(command, str) or not command:
            raise ValidationError("bad_command", "command must be a non-empty argv list")
        self.command = list(command)
        self.cwd = cwd
        self.env = dict(env) if env is not None else None
        self._proc: subprocess.Popen | None = None

    def _ensure_started(self) -> subprocess.Popen:
        if self._proc is None:
            try:
                self._proc = subprocess.Popen(
                    self.command,
                    stdin=subprocess.PIPE,
                    stdout=subprocess.PIPE,
                    cwd=self.cwd,
                    env=self.env,
                    text=True,
                    encoding="utf-8",
                    bufsize=1,
                )
            except OSError as exc:
                raise AdapterError("spawn_failed", str(exc), command=self.command) from exc
        return self._proc

    def score(self, items: Sequence[ScoringItem]) -> list[float]:
        proc = self._ensure_started()
        payload = "".join(it.to_json() + "\n" for it in items)
        write_error: list[BaseException] = []

        def _writer():
            try:
                proc.stdin.write(payload)
                proc.stdin.flush()
            except (BrokenPipeError, OSError) as exc:
                write_error.append(exc)

        t = threading.Thread(target=_writer, daemon=True)
        t.start()
        rows = []
        for lineno in range(1, len(items) + 1):
            line = proc.stdout.readline()
            if not line:
                code = proc.wait()
                raise AdapterError(
                    "child_exited" if code else "early_eof",
                    f"after {lineno - 1} of {len(items)} lines",
                    exit_code=code,
                )
            rows.append(_parse_score_line(line, lineno, "subprocess"))
        t.join()
        if write_error:
            raise AdapterError("write_failed", str(write_error[0]))
        return _match_scores(items, rows, "subprocess")

    def close(self) -> None:
        proc, self._proc = self._proc, None
        if proc is None:
            return
        try:
            proc.stdin.close()
        except OSError:
            pass
        code = proc.wait()
        proc.stdout.close()
        if code != 0:
            raise AdapterError("child_exited", f"exit status {code}", command=self.command)


def make_adapter(spec: Mapping, seed: int, priors: Mapping[str, StructuralPrior], base_dir=None) -> ScoringAdapter:
    """Instantiate an adapter from its config mapping for one model seed.

    String parameters of external adapters may use ``{seed}``.
    """
    spec = dict(spec)
    kind = spec.pop("kind", None)
    base = Path(base_dir) if base_dir is not None else Path.cwd()

    def _fmt(value):
        return value.format(seed=seed) if isinstance(value, str) else value

    if kind == "synthetic":
        spec.setdefault("model_seed", seed)
        return SyntheticAdapter(SyntheticModelSpec.from_dict(spec), priors)
    if kind == "file":
        return FileExchangeAdapter(
            base / _fmt(spec["request"]),
            base / _fmt(spec["response"]),
            poll_interval=spec.get("poll_interval", 0.5),
            timeout=spec.get("timeout", 600.0),
        )
    if kind == "subprocess":
        cwd = spec.get("cwd")
        return SubprocessAdapter([_fmt(a) for a in spec["command"]], cwd=base / cwd if cwd else base)
    raise ValidationError("unknown_adapter_kind", repr(kind))


# -- profile assembly ----------------------------------------------------------

SELECTORS = {"mechanistic": MECHANISTIC, "spurious": SPURIOUS}


def build_response_profile(
    adapter: ScoringAdapter,
    auditing_set: Sequence[AuditRecord],
    pairs: Mapping[str, MatchedVariantPair],
    selector: str,
    operator: str | None = None,
    original_scores: Mapping[str, float] | None = None,
) -> ResponseProfile:
    """Pair original scores with the scores of one variant class.

    Output is ordered by ascending ``pair_id``.  ``original_scores`` may
    carry already-computed scores for unperturbed inputs.
    """
    if selector not in SELECTORS:
        raise ValidationError("bad_selector", selector)
    variant = SELECTORS[selector]
    records = sorted(auditing_set, key=lambda r: r.pair_id)
    if not records:
        raise ValidationError("empty_auditing_set")
    items_orig, items_var = [], []
    for r in records:
        pair = pairs.get(r.pair_id)
        if pair is None:
            raise ValidationError("missing_variant", pair_id=r.pair_id, operator=operator)
        if operator is not None and pair.operator_kind != operator:
            raise ValidationError("operator_mismatch", pair.operator_kind, pair_id=r.pair_id)
        seq = pair.mechanistic_sequence if variant == MECHANISTIC else pair.spurious_sequence
        if original_scores is None or r.pair_id not in original_scores:
            items_orig.append(ScoringItem(r.pair_id, ORIGINAL, r.context, r.sequence))
        items_var.append(ScoringItem(r.pair_id, variant, r.context, seq))
    orig_map = dict(original_scores or {})
    if items_orig:
        orig_map.update(zip((it.pair_id for it in items_orig), score_batch(adapter, items_orig)))
    var_scores = score_batch(adapter, items_var)
    ids = tuple(r.pair_id for r in records)
    return ResponseProfile(ids, np.array([orig_map[i] for i in ids]), np.array(var_scores))
