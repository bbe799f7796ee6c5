"""Config loading, audit orchestration and report emission."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Mapping, Sequence

import numpy as np
import yaml

from .errors import AuditError, AuditIOError, BootstrapError, ValidationError
from .intervention import (
    AMINO_ACIDS,
    CLASS_SUBSTITUTION,
    DEFAULT_MASK_TOKEN,
    MASK,
    OPERATOR_KINDS,
    AuditRecord,
    ClassTable,
    CoverageStats,
    MatchedVariantPair,
    PerturbationOperatorSpec,
    StructuralPrior,
    build_matched_pair,
    filter_auditing_set,
)
from .metrics import DEFAULT_GRID, MetricKind, QuantileGrid, ResponseProfile, metric_panel
from .rng import derive, splitmix64_mix, stable_hash64
from .scoring import MECHANISTIC, ORIGINAL, SPURIOUS, ScoringItem, make_adapter, score_batch
from .stats import (
    BootstrapConfig,
    IntervalEstimate,
    LabeledScores,
    aggregate_seeds,
    auroc_arrays,
    bootstrap_ci,
    bootstrap_indices,
    percentile_intervals,
)

log = logging.getLogger(__name__)

OPERATOR_TAGS = {MASK: 1, CLASS_SUBSTITUTION: 2}
BOOT_SEED_TAG = 0xB0075712
ALL = "all"
CLASSES = ("mechanistic", "spurious")
PANELS = {MetricKind.QBM: "a", MetricKind.WCM: "b", MetricKind.TI_WCM: "c"}
SENSITIVITY_GRIDS = (
    QuantileGrid((0.25, 0.5, 0.75), "K3"),
    QuantileGrid.equispaced(5, "K5"),
    QuantileGrid.equispaced(9, "K9"),
)

ABSOLUTE_HEADER = ["model", "seed", "operator", "class", "metric", "grid", "value", "lo", "hi", "degenerate"]
CONTRAST_HEADER = ["model", "operator", "metric", "delta", "lo", "hi"]
PLOT_HEADER = ["panel", "model", "metric", "delta", "lo", "hi", "err_minus", "err_plus"]
SENSITIVITY_HEADER = [
    "grid", "model", "qbm_mech", "mech_lo", "mech_hi",
    "qbm_spur", "spur_lo", "spur_hi", "delta", "delta_lo", "delta_hi",
]


# -- config ---------------------------------------------------------------------

@dataclass(frozen=True)
class ModelConfig:
    model_id: str
    seeds: tuple[int, ...]
    adapter: Mapping[str, Any]


@dataclass(frozen=True)
class AuditConfig:
    audit_set: Path
    priors: Path
    models: tuple[ModelConfig, ...]
    class_table: Path | None = None
    alphabet: str = AMINO_ACIDS
    mask_token: str = DEFAULT_MASK_TOKEN
    operators: tuple[str, ...] = (MASK, CLASS_SUBSTITUTION)
    metrics: tuple[MetricKind, ...] = (MetricKind.QBM, MetricKind.WCM, MetricKind.TI_WCM)
    grids: tuple[QuantileGrid, ...] = (DEFAULT_GRID,)
    bootstrap: BootstrapConfig = BootstrapConfig()
    master_seed: int = 0
    output_dir: Path | None = None
    base_dir: Path = Path(".")
    raw: Mapping[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not self.operators:
            raise ValidationError("empty_operator_list")
        for op in self.operators:
            if op not in OPERATOR_KINDS:
                raise ValidationError("unknown_operator", op)
        if len(set(self.operators)) != len(self.operators):
            raise ValidationError("duplicate_operator")
        if not self.metrics:
            raise ValidationError("empty_metric_list")
        if not self.grids:
            raise ValidationError("empty_grid_list")
        if len({g.grid_id for g in self.grids}) != len(self.grids):
            raise ValidationError("duplicate_grid_id")
        if not self.models:
            raise ValidationError("no_models")
        if len({m.model_id for m in self.models}) != len(self.models):
            raise ValidationError("duplicate_model_id")

    @property
    def primary_grid(self) -> QuantileGrid:
        return self.grids[0]

    def provenance(self) -> dict:
        raw = dict(self.raw)
        raw["master_seed"] = self.master_seed
        return raw


_CONFIG_KEYS = {
    "audit_set", "priors", "class_table", "alphabet", "mask_token", "operators", "metrics",
    "grids", "bootstrap", "master_seed", "output_dir", "models",
}


def _u64(value, name: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int) or not (0 <= value < 2**64):
        raise ValidationError("bad_seed", f"{name}={value!r} is not an unsigned 64-bit integer")
    return value


def _or_default(data: Mapping, key: str, default):
    """``data[key]`` unless absent or null; an explicit empty list is kept (and rejected later)."""
    value = data.get(key)
    return default if value is None else value


def _parse_grid(entry) -> QuantileGrid:
    if isinstance(entry, Mapping):
        return QuantileGrid(tuple(entry["levels"]), str(entry.get("id", "")))
    return QuantileGrid(tuple(entry))


def config_from_dict(data: Mapping[str, Any], base_dir=".", seed_override: int | None = None) -> AuditConfig:
    if not isinstance(data, Mapping):
        raise ValidationError("bad_config", "top level must be a mapping")
    unknown = set(data) - _CONFIG_KEYS
    if unknown:
        raise ValidationError("unknown_config_key", ", ".join(sorted(unknown)))
    for key in ("audit_set", "priors", "models"):
        if key not in data:
            raise ValidationError("missing_config_key", key)
    base = Path(base_dir)

    def _path(key, required=True):
        value = data.get(key)
        if value is None:
            return None
        p = base / str(value)
        if required and not p.exists():
            raise AuditIOError("path_not_found", str(p), key=key)
        return p

    master_seed = _u64(data.get("master_seed", 0), "master_seed")
    if seed_override is not None:
        master_seed = _u64(seed_override, "seed")
    raw = dict(data)
    raw["master_seed"] = master_seed

    boot = dict(data.get("bootstrap") or {})
    boot_seed = boot.get("seed")
    boot_seed = derive(master_seed, BOOT_SEED_TAG) if boot_seed is None else _u64(boot_seed, "bootstrap.seed")
    bootstrap = BootstrapConfig(
        replicates=int(boot.get("replicates", 100)),
        confidence=float(boot.get("confidence", 0.95)),
        boot_seed=boot_seed,
    )

    models = []
    for entry in data["models"] or []:
        try:
            seeds = tuple(_u64(s, "seeds") for s in entry.get("seeds", [0]))
            models.append(ModelConfig(str(entry["id"]), seeds, dict(entry["adapter"])))
        except (KeyError, TypeError, AttributeError) as exc:
            raise ValidationError("bad_model_entry", repr(entry)) from exc
        if not seeds:
            raise ValidationError("no_seeds", entry["id"])

    grids = tuple(_parse_grid(g) for g in _or_default(data, "grids", ())) or (DEFAULT_GRID,)
    if data.get("grids") is not None and not data["grids"]:
        raise ValidationError("empty_grid_list")
    cfg = AuditConfig(
        audit_set=_path("audit_set"),
        priors=_path("priors"),
        class_table=_path("class_table"),
        alphabet=str(data.get("alphabet", AMINO_ACIDS)),
        mask_token=str(data.get("mask_token", DEFAULT_MASK_TOKEN)),
        operators=tuple(_or_default(data, "operators", (MASK, CLASS_SUBSTITUTION))),
        metrics=tuple(MetricKind.parse(m) for m in _or_default(data, "metrics", ("QBM", "WCM", "TI_WCM"))),
        grids=grids,
        bootstrap=bootstrap,
        master_seed=master_seed,
        output_dir=_path("output_dir", required=False),
        base_dir=base,
        models=tuple(models),
        raw=raw,
    )
    if CLASS_SUBSTITUTION in cfg.operators:
        load_class_table(cfg).check_covers(cfg.alphabet)
    return cfg


def load_config(path, seed_override: int | None = None) -> AuditConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise AuditIOError("unreadable_config", str(exc), path=str(path)) from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ValidationError("config_parse_error", str(exc), path=str(path)) from exc
    return config_from_dict(data, path.parent, seed_override)


def load_class_table(config: AuditConfig) -> ClassTable:
    return ClassTable.load(config.class_table) if config.class_table else ClassTable.default()


# -- ingestion ------------------------------------------------------------------

def _jsonl(path) -> Iterator[tuple[int, Any]]:
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise AuditIOError("unreadable_file", str(exc), path=str(path)) from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError("parse_error", exc.msg, path=str(path), line=lineno) from None


def load_audit_set(path, alphabet: str | None = None) -> list[AuditRecord]:
    """Read JSON Lines ``{"pair_id", "context", "sequence"[, "label"]}``."""
    records: list[AuditRecord] = []
    seen: dict[str, int] = {}
    for lineno, obj in _jsonl(path):
        if not isinstance(obj, dict):
            raise ValidationError("parse_error", "expected a JSON object", path=str(path), line=lineno)
        try:
            pid, seq = obj["pair_id"], obj["sequence"]
        except KeyError as exc:
            raise ValidationError("missing_field", str(exc), path=str(path), line=lineno) from None
        if not isinstance(pid, str) or not isinstance(seq, str):
            raise ValidationError("parse_error", "pair_id and sequence must be strings", line=lineno)
        if pid in seen:
            raise ValidationError(
                "duplicate_pair_id", f"{pid!r} on lines {seen[pid]} and {lineno}", path=str(path)
            )
        seen[pid] = lineno
        label = obj.get("label")
        try:
            record = AuditRecord(pid, str(obj.get("context", "")), seq, label)
            if alphabet is not None:
                record.check_alphabet(alphabet)
        except ValidationError as exc:
            raise ValidationError(exc.code, str(exc), path=str(path), line=lineno) from None
        records.append(record)
    if not records:
        raise ValidationError("empty_audit_set", path=str(path))
    return records


def load_priors(path) -> list[StructuralPrior]:
    """Read JSON Lines ``{"record_id", "indices": [0-based ints]}``."""
    priors = []
    seen: dict[str, int] = {}
    for lineno, obj in _jsonl(path):
        try:
            rid, indices = obj["record_id"], obj["indices"]
        except (KeyError, TypeError):
            raise ValidationError("parse_error", "need record_id and indices", path=str(path), line=lineno) from None
        if not isinstance(indices, list) or not all(
            isinstance(i, int) and not isinstance(i, bool) for i in indices
        ):
            raise ValidationError("parse_error", "indices must be a list of integers", line=lineno)
        if any(i < 0 for i in indices):
            raise ValidationError("negative_index", str(indices), path=str(path), line=lineno)
        if rid in seen:
            raise ValidationError("duplicate_prior", f"{rid!r} on lines {seen[rid]} and {lineno}")
        seen[rid] = lineno
        priors.append(StructuralPrior(str(rid), frozenset(indices)))
    return priors


# -- report types ---------------------------------------------------------------

@dataclass(frozen=True)
class MetricRow:
    model: str
    seed: str
    operator: str
    cls: str
    metric: MetricKind
    grid: str
    value: float
    lower: float
    upper: float
    degenerate: bool


@dataclass(frozen=True)
class ContrastRow:
    model: str
    seed: str
    operator: str
    metric: MetricKind
    grid: str
    mechanistic: float
    spurious: float
    delta: float
    lower: float
    upper: float


@dataclass
class MetricReport:
    config: AuditConfig
    rows: list[MetricRow] = field(default_factory=list)
    contrasts: list[ContrastRow] = field(default_factory=list)
    auroc: dict[str, dict] = field(default_factory=dict)
    coverage: CoverageStats | None = None
    profiles: dict[tuple[str, str, str, str], ResponseProfile] = field(default_factory=dict)
    substitution_noops: int = 0
    cardinality_matched: float = 1.0

    def row(self, model, seed, operator, cls, metric, grid=None) -> MetricRow:
        metric = MetricKind(metric)
        grid = self._grid_key(metric, grid)
        for r in self.rows:
            if (r.model, r.seed, r.operator, r.cls, r.metric, r.grid) == (model, str(seed), operator, cls, metric, grid):
                return r
        raise KeyError((model, seed, operator, cls, metric, grid))

    def contrast(self, model, seed, operator, metric, grid=None) -> ContrastRow:
        metric = MetricKind(metric)
        grid = self._grid_key(metric, grid)
        for c in self.contrasts:
            if (c.model, c.seed, c.operator, c.metric, c.grid) == (model, str(seed), operator, metric, grid):
                return c
        raise KeyError((model, seed, operator, metric, grid))

    def _grid_key(self, metric, grid):
        if metric is not MetricKind.QBM:
            return ""
        return grid or self.config.primary_grid.grid_id


# -- orchestration --------------------------------------------------------------

@contextmanager
def _provenance(**ctx):
    try:
        yield
    except AuditError as exc:
        merged = {**ctx, **exc.context}
        raise type(exc)(exc.code, exc.message, **merged) from exc


def pair_sub_seed(master_seed: int, pair_id: str, operator: str, seed: int) -> int:
    return splitmix64_mix(master_seed, stable_hash64(pair_id), OPERATOR_TAGS[operator], seed)


def build_pairs(
    config: AuditConfig,
    auditing_set: Sequence[tuple[AuditRecord, StructuralPrior]],
    operator: PerturbationOperatorSpec,
    seed: int,
) -> dict[str, MatchedVariantPair]:
    pairs = {}
    for record, prior in auditing_set:
        with _provenance(pair_id=record.pair_id, operator=operator.kind, seed=seed):
            sub = pair_sub_seed(config.master_seed, record.pair_id, operator.kind, seed)
            pairs[record.pair_id] = build_matched_pair(record, prior, operator, sub)
    return pairs


def _operator_specs(config: AuditConfig) -> dict[str, PerturbationOperatorSpec]:
    table = load_class_table(config) if CLASS_SUBSTITUTION in config.operators else None
    return {
        op: PerturbationOperatorSpec(op, mask_token=config.mask_token, class_table=table)
        for op in config.operators
    }


def _columns(config: AuditConfig):
    """(operator, class, metric, grid_id, levels) in report order."""
    cols = []
    for op in (*config.operators, ALL):
        for cls in CLASSES:
            for metric in config.metrics:
                if metric is MetricKind.QBM:
                    for g in config.grids:
                        cols.append((op, cls, metric, g.grid_id, np.array(g.levels)))
                else:
                    cols.append((op, cls, metric, "", None))
    return cols


class _SeedPanel:
    """All metric columns for one (model, seed), with bootstrap replicates."""

    def __init__(self, config: AuditConfig, profiles: Mapping[tuple[str, str], ResponseProfile]):
        self.config = config
        self.columns = _columns(config)
        first = profiles[(config.operators[0], "mechanistic")]
        self.pair_ids = first.pair_ids
        self.arrays = {}
        for key, prof in profiles.items():
            if prof.pair_ids != self.pair_ids:
                raise ValidationError("misaligned_profiles", str(key))
            self.arrays[key] = (prof.original, prof.perturbed)
        self.points, self.degenerate = self._evaluate(None)
        idx = bootstrap_indices(len(self.pair_ids), config.bootstrap)
        self.replicates = np.array([self._evaluate(idx[r])[0] for r in range(idx.shape[0])])

    def _profile(self, op, cls, index):
        if op == ALL:
            parts = [self._profile(o, cls, index) for o in self.config.operators]
            return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])
        orig, pert = self.arrays[(op, cls)]
        if index is None:
            return orig, pert
        return orig[index], pert[index]

    def _evaluate(self, index):
        values = np.empty(len(self.columns))
        degenerate = np.zeros(len(self.columns), dtype=bool)
        groups: dict[tuple[str, str], list[int]] = {}
        for j, (op, cls, *_rest) in enumerate(self.columns):
            groups.setdefault((op, cls), []).append(j)
        for (op, cls), js in groups.items():
            orig, pert = self._profile(op, cls, index)
            out = metric_panel(orig, pert, [(self.columns[j][2], self.columns[j][4]) for j in js])
            for j, (v, dg) in zip(js, out):
                values[j] = v
                degenerate[j] = dg
        return values, degenerate


def _score_seed(config, adapter, auditing_set, pairs_by_op, model_id, seed):
    records = sorted((r for r, _ in auditing_set), key=lambda r: r.pair_id)
    ids = tuple(r.pair_id for r in records)
    with _provenance(model=model_id, seed=seed, variant=ORIGINAL):
        orig = np.array(score_batch(adapter, [ScoringItem(r.pair_id, ORIGINAL, r.context, r.sequence) for r in records]))
    profiles = {}
    for op, pairs in pairs_by_op.items():
        items = []
        for r in records:
            pair = pairs[r.pair_id]
            items.append(ScoringItem(r.pair_id, MECHANISTIC, r.context, pair.mechanistic_sequence))
            items.append(ScoringItem(r.pair_id, SPURIOUS, r.context, pair.spurious_sequence))
        with _provenance(model=model_id, seed=seed, operator=op):
            scores = np.array(score_batch(adapter, items))
            profiles[(op, "mechanistic")] = ResponseProfile(ids, orig, scores[0::2])
            profiles[(op, "spurious")] = ResponseProfile(ids, orig, scores[1::2])
    return orig, profiles


def run_audit(config: AuditConfig) -> MetricReport:
    records = load_audit_set(config.audit_set, config.alphabet)
    priors = load_priors(config.priors)
    auditing_set, coverage = filter_auditing_set(records, priors)
    if not auditing_set:
        raise ValidationError("empty_auditing_set", "no record has a valid, realizable prior")
    labelled = [r.label is not None for r, _ in auditing_set]
    if any(labelled) and not all(labelled):
        raise ValidationError("partial_labels", "labels must be given for all audited records or none")
    has_labels = all(labelled)
    ordered = sorted(auditing_set, key=lambda rp: rp[0].pair_id)
    label_vec = np.array([r.label for r, _ in ordered]) if has_labels else None
    prior_map = {p.record_id: p for _, p in auditing_set}
    ops = _operator_specs(config)
    report = MetricReport(config=config, coverage=coverage)
    columns = _columns(config)
    conf = config.bootstrap.confidence

    pair_cache: dict[tuple[str, int], dict[str, MatchedVariantPair]] = {}
    n_pairs = n_matched = 0
    for model in config.models:
        panels: list[_SeedPanel] = []
        auroc_bundles, auroc_values, auroc_rows = [], [], []
        for seed in model.seeds:
            pairs_by_op = {}
            for op, spec in ops.items():
                key = (op, seed)
                if key not in pair_cache:
                    pair_cache[key] = build_pairs(config, auditing_set, spec, seed)
                    for pair in pair_cache[key].values():
                        n_pairs += 1
                        n_matched += len(pair.spurious_scope) == len(pair.mechanistic_scope)
                        report.substitution_noops += len(pair.noop_positions)
                pairs_by_op[op] = pair_cache[key]
            with _provenance(model=model.model_id, seed=seed):
                adapter = make_adapter(model.adapter, seed, prior_map, config.base_dir)
            try:
                orig, profiles = _score_seed(config, adapter, auditing_set, pairs_by_op, model.model_id, seed)
            finally:
                with _provenance(model=model.model_id, seed=seed):
                    adapter.close()
            for (op, cls), prof in profiles.items():
                report.profiles[(model.model_id, str(seed), op, cls)] = prof
            panel = _SeedPanel(config, profiles)
            panels.append(panel)
            _emit_rows(report, model.model_id, str(seed), columns, panel.points,
                       panel.degenerate, panel.replicates, conf)
            if has_labels:
                ls = LabeledScores(panel.pair_ids, orig, label_vec)
                auroc_bundles.append([ls])
                value = auroc_arrays(orig, label_vec)
                auroc_values.append(value)
                auroc_rows.append((str(seed), _auroc_ci([ls], config.bootstrap, value)))

        points = np.mean([p.points for p in panels], axis=0)
        degenerate = np.all([p.degenerate for p in panels], axis=0)
        reps = np.mean([p.replicates for p in panels], axis=0)
        _emit_rows(report, model.model_id, ALL, columns, points, degenerate, reps, conf)
        if has_labels:
            report.auroc[model.model_id] = _auroc_block(auroc_rows, auroc_values, auroc_bundles, config.bootstrap)
    report.cardinality_matched = n_matched / n_pairs if n_pairs else 1.0
    return report


def _emit_rows(report, model_id, seed, columns, points, degenerate, reps, conf):
    lo, hi = percentile_intervals(reps, conf)
    index = {}
    for j, (op, cls, metric, grid_id, _levels) in enumerate(columns):
        report.rows.append(MetricRow(
            model_id, seed, op, cls, metric, grid_id,
            float(points[j]), float(lo[j]), float(hi[j]), bool(degenerate[j]),
        ))
        index[(op, cls, metric, grid_id)] = j
    for (op, cls, metric, grid_id), jm in index.items():
        if cls != "mechanistic":
            continue
        js = index[(op, "spurious", metric, grid_id)]
        delta_reps = reps[:, js] - reps[:, jm]
        dlo, dhi = percentile_intervals(delta_reps[:, None], conf)
        report.contrasts.append(ContrastRow(
            model_id, seed, op, metric, grid_id,
            float(points[jm]), float(points[js]), float(points[js]) - float(points[jm]),
            float(dlo[0]), float(dhi[0]),
        ))


def _auroc_ci(bundle, boot: BootstrapConfig, value: float) -> IntervalEstimate:
    try:
        return bootstrap_ci(bundle, lambda b: auroc_arrays(b[0].scores, b[0].labels), boot)
    except BootstrapError as exc:
        log.warning("AUROC interval unavailable: %s", exc)
        return IntervalEstimate(value, math.nan, math.nan)


def _auroc_block(rows, values, bundles, boot: BootstrapConfig) -> dict:
    block = {"per_seed": [{"seed": s, "auroc": ci.point, "lo": ci.lower, "hi": ci.upper} for s, ci in rows]}
    try:
        mean, ci = aggregate_seeds(values, bundles, lambda b: auroc_arrays(b[0].scores, b[0].labels), boot)
        block.update(mean=mean, lo=ci.lower, hi=ci.upper)
    except BootstrapError as exc:
        log.warning("AUROC interval unavailable: %s", exc)
        block.update(mean=float(np.mean(values)), lo=math.nan, hi=math.nan)
    return block


# -- QBM grid sensitivity -------------------------------------------------------

@dataclass(frozen=True)
class SensitivityRow:
    grid: str
    model: str
    mechanistic: tuple[float, float, float]
    spurious: tuple[float, float, float]
    delta: tuple[float, float, float]


def qbm_sensitivity(
    config: AuditConfig, grids: Sequence[QuantileGrid] = SENSITIVITY_GRIDS, operator: str = ALL
) -> list[SensitivityRow]:
    """QBM per grid and model, seed-aggregated, for one operator (default pooled)."""
    cfg = dataclasses.replace(config, metrics=(MetricKind.QBM,), grids=tuple(grids))
    report = run_audit(cfg)
    out = []
    for g in grids:
        for model in config.models:
            m = report.row(model.model_id, ALL, operator, "mechanistic", MetricKind.QBM, g.grid_id)
            s = report.row(model.model_id, ALL, operator, "spurious", MetricKind.QBM, g.grid_id)
            c = report.contrast(model.model_id, ALL, operator, MetricKind.QBM, g.grid_id)
            out.append(SensitivityRow(
                g.grid_id, model.model_id,
                (m.value, m.lower, m.upper), (s.value, s.lower, s.upper), (c.delta, c.lower, c.upper),
            ))
    return out


# -- emission -------------------------------------------------------------------

def fmt_real(x: float) -> str:
    """Nine significant digits, trailing zeros kept, locale-free."""
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "nan"
    x = float(x)
    if x == 0.0:
        x = 0.0  # drop the sign of -0.0
    return format(x, "#.9g")


def _json_real(x):
    if x is None or math.isnan(x):
        return None
    return float(format(float(x), ".9g"))


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _metric_label(config: AuditConfig, metric: MetricKind, grid: str) -> str:
    if metric is MetricKind.QBM and grid != config.primary_grid.grid_id:
        return f"QBM_{grid}"
    return metric.value


def emit_report(report: MetricReport, out_dir) -> list[Path]:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        return _emit(report, out)
    except OSError as exc:
        raise AuditIOError("unwritable_output", str(exc), path=str(out)) from exc


def _emit(report: MetricReport, out: Path) -> list[Path]:
    cfg = report.config
    paths = {
        "absolute": out / "absolute_metrics.csv",
        "contrasts": out / "contrasts.csv",
        "plot": out / "delta_plot_data.csv",
        "coverage": out / "coverage.csv",
        "profiles": out / "profiles.csv",
        "summary": out / "summary.json",
    }
    _write_csv(paths["absolute"], ABSOLUTE_HEADER, [
        [r.model, r.seed, r.operator, r.cls, r.metric.value, r.grid or "-",
         fmt_real(r.value), fmt_real(r.lower), fmt_real(r.upper), "true" if r.degenerate else "false"]
        for r in report.rows
    ])
    pooled = [c for c in report.contrasts if c.seed == ALL]
    _write_csv(paths["contrasts"], CONTRAST_HEADER, [
        [c.model, c.operator, _metric_label(cfg, c.metric, c.grid),
         fmt_real(c.delta), fmt_real(c.lower), fmt_real(c.upper)]
        for c in pooled
    ])
    plot_rows = [
        [PANELS[c.metric], c.model, c.metric.value, fmt_real(c.delta), fmt_real(c.lower),
         fmt_real(c.upper), fmt_real(c.delta - c.lower), fmt_real(c.upper - c.delta)]
        for c in pooled
        if c.operator == ALL and (c.metric is not MetricKind.QBM or c.grid == cfg.primary_grid.grid_id)
    ]
    plot_rows.sort(key=lambda r: r[0])  # stable: panel, then model order
    _write_csv(paths["plot"], PLOT_HEADER, plot_rows)
    cov = report.coverage or CoverageStats()
    _write_csv(paths["coverage"], ["criterion", "count", "fraction"], [
        [name, count, "" if frac is None else fmt_real(frac)] for name, count, frac in cov.table()
    ] + [["Median prior size", "" if cov.median_prior_size is None else fmt_real(cov.median_prior_size), ""],
         ["Exact cardinality matching", "", fmt_real(report.cardinality_matched)]])
    profile_rows = []
    for (model, seed, op, cls), prof in report.profiles.items():
        for pid, o, p in zip(prof.pair_ids, prof.original, prof.perturbed):
            profile_rows.append([model, seed, op, cls, pid, fmt_real(o), fmt_real(p)])
    _write_csv(paths["profiles"], ["model", "seed", "operator", "class", "pair_id", "original", "perturbed"], profile_rows)

    summary = {
        "master_seed": cfg.master_seed,
        "config": cfg.provenance(),
        "bootstrap": {"replicates": cfg.bootstrap.replicates, "confidence": cfg.bootstrap.confidence,
                      "boot_seed": cfg.bootstrap.boot_seed, "method": "percentile_bootstrap"},
        "coverage": cov.to_dict(),
        "cardinality_matched": report.cardinality_matched,
        "substitution_noops": report.substitution_noops,
        "auroc": {
            model: {
                "mean": _json_real(b["mean"]), "lo": _json_real(b["lo"]), "hi": _json_real(b["hi"]),
                "per_seed": [{k: (_json_real(v) if k != "seed" else v) for k, v in row.items()}
                             for row in b["per_seed"]],
            }
            for model, b in report.auroc.items()
        },
        "contrasts": [
            {"model": c.model, "seed": c.seed, "operator": c.operator, "metric": c.metric.value,
             "grid": c.grid or None, "mechanistic": _json_real(c.mechanistic),
             "spurious": _json_real(c.spurious), "delta": _json_real(c.delta),
             "lo": _json_real(c.lower), "hi": _json_real(c.upper)}
            for c in report.contrasts
        ],
        "files": sorted(p.name for p in paths.values()),
    }
    with open(paths["summary"], "w", encoding="utf-8", newline="\n") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
    return list(paths.values())


def emit_sensitivity(rows: Sequence[SensitivityRow], out_dir) -> Path:
    out = Path(out_dir)
    path = out / "qbm_sensitivity.csv"
    try:
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(path, SENSITIVITY_HEADER, [
            [r.grid, r.model, *map(fmt_real, r.mechanistic), *map(fmt_real, r.spurious), *map(fmt_real, r.delta)]
            for r in rows
        ])
    except OSError as exc:
        raise AuditIOError("unwritable_output", str(exc), path=str(out)) from exc
    return path
