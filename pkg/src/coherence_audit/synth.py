"""Synthetic audit-set generator for demos and end-to-end tests.

Writes a labelled audit set, structural priors, a ready-to-run config and,
for each synthetic model, the original/mechanistic/spurious score files of
its first seed under the first configured operator.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import yaml

from .errors import AuditIOError, ValidationError
from .intervention import AMINO_ACIDS, MASK, AuditRecord, StructuralPrior
from .metrics import _quantiles_sorted
from .rng import SplitMix64, derive
from .scoring import SyntheticModelSpec, synthetic_score

SYNTH_TAG = 0x5EED
LABEL_TAG = 0x1ABE1

DEFAULT_MODELS = (
    {"id": "mixed", "read_set": "mixed", "alpha": 1.0, "beta": 0.1, "noise_sigma": 0.05},
    {"id": "complement_weighted", "read_set": "mixed", "alpha": 0.1, "beta": 1.0, "noise_sigma": 0.05},
)

_SPEC_KEYS = {
    "n_pairs", "length", "prior_size", "master_seed", "alphabet", "seeds", "operators",
    "labels", "models", "bootstrap", "metrics", "grids",
}


def generate_records(n_pairs: int, length: int, prior_size: int, seed: int, alphabet: str = AMINO_ACIDS):
    """``n_pairs`` random sequences with a uniformly drawn prior of ``prior_size``."""
    if n_pairs < 1 or length < 2:
        raise ValidationError("bad_synth_size", f"n_pairs={n_pairs}, length={length}")
    if not (1 <= prior_size <= length // 2):
        raise ValidationError("bad_prior_size", f"{prior_size} with length {length}")
    rng = SplitMix64(derive(seed, SYNTH_TAG))
    width = len(str(n_pairs - 1))
    records, priors = [], []
    for i in range(n_pairs):
        pid = f"p{i:0{width}d}"
        seq = "".join(alphabet[rng.below(len(alphabet))] for _ in range(length))
        pool = list(range(length))
        for j in range(prior_size):
            k = j + rng.below(length - j)
            pool[j], pool[k] = pool[k], pool[j]
        records.append(AuditRecord(pid, f"target{i % 8}", seq))
        priors.append(StructuralPrior(pid, frozenset(pool[:prior_size])))
    return records, priors


def assign_labels(records, priors, seed: int):
    """Label 1 where a prior-only reference model scores above its median."""
    truth = SyntheticModelSpec(read_set="prior_only", model_seed=derive(seed, LABEL_TAG))
    scores = np.array([synthetic_score(truth, r, p) for r, p in zip(records, priors)])
    (median,) = _quantiles_sorted(np.sort(scores), np.array([0.5]))
    return [
        AuditRecord(r.pair_id, r.context, r.sequence, int(s > median))
        for r, s in zip(records, scores)
    ]


def _write_jsonl(path: Path, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def generate(spec: Mapping[str, Any], out_dir) -> dict[str, Path]:
    unknown = set(spec) - _SPEC_KEYS
    if unknown:
        raise ValidationError("unknown_synth_key", ", ".join(sorted(unknown)))
    seed = int(spec.get("master_seed", 0))
    alphabet = str(spec.get("alphabet", AMINO_ACIDS))
    records, priors = generate_records(
        int(spec.get("n_pairs", 200)), int(spec.get("length", 100)),
        int(spec.get("prior_size", 20)), seed, alphabet,
    )
    if spec.get("labels", True):
        records = assign_labels(records, priors, seed)

    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        paths = {"audit_set": out / "audit_set.jsonl", "priors": out / "priors.jsonl", "config": out / "config.yaml"}
        _write_jsonl(paths["audit_set"], (
            {"pair_id": r.pair_id, "context": r.context, "sequence": r.sequence,
             **({} if r.label is None else {"label": r.label})}
            for r in records
        ))
        _write_jsonl(paths["priors"], (
            {"record_id": p.record_id, "indices": sorted(p.indices)} for p in priors
        ))
        models = []
        for m in spec.get("models") or DEFAULT_MODELS:
            m = dict(m)
            model_id = str(m.pop("id"))
            models.append({"id": model_id, "seeds": list(spec.get("seeds", [0, 1, 2, 3, 4])),
                           "adapter": {"kind": "synthetic", **m}})
        config = {
            "audit_set": paths["audit_set"].name,
            "priors": paths["priors"].name,
            "alphabet": alphabet,
            "operators": list(spec.get("operators", [MASK])),
            "master_seed": seed,
            "bootstrap": dict(spec.get("bootstrap", {"replicates": 100, "confidence": 0.95})),
            "models": models,
        }
        for key in ("metrics", "grids"):
            if key in spec:
                config[key] = spec[key]
        paths["config"].write_text(yaml.safe_dump(config, sort_keys=True), encoding="utf-8")
        paths.update(_write_scores(paths["config"], out / "scores"))
    except OSError as exc:
        raise AuditIOError("unwritable_output", str(exc), path=str(out)) from exc
    return paths


def _write_scores(config_path: Path, score_dir: Path) -> dict[str, Path]:
    """Score files (pair_id,score) for each model's first seed and first operator."""
    from .pipeline import _operator_specs, _score_seed, build_pairs, load_audit_set, load_config, load_priors
    from .intervention import filter_auditing_set
    from .scoring import make_adapter

    cfg = load_config(config_path)
    records = load_audit_set(cfg.audit_set, cfg.alphabet)
    auditing_set, _ = filter_auditing_set(records, load_priors(cfg.priors))
    prior_map = {p.record_id: p for _, p in auditing_set}
    op = cfg.operators[0]
    spec = _operator_specs(cfg)[op]
    score_dir.mkdir(parents=True, exist_ok=True)
    written = {}
    for model in cfg.models:
        seed = model.seeds[0]
        pairs = build_pairs(cfg, auditing_set, spec, seed)
        with make_adapter(model.adapter, seed, prior_map, cfg.base_dir) as adapter:
            orig, profiles = _score_seed(cfg, adapter, auditing_set, {op: pairs}, model.model_id, seed)
        columns = {
            "orig": orig,
            "mech": profiles[(op, "mechanistic")].perturbed,
            "spur": profiles[(op, "spurious")].perturbed,
        }
        ids = profiles[(op, "mechanistic")].pair_ids
        for tag, values in columns.items():
            path = score_dir / f"{model.model_id}_{tag}.csv"
            with open(path, "w", encoding="utf-8", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["pair_id", "score"])
                w.writerows((pid, repr(float(v))) for pid, v in zip(ids, values))
            written[f"{model.model_id}_{tag}"] = path
    return written
