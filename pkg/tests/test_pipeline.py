import json
import sys
import textwrap

import numpy as np
import pytest
import yaml

from coherence_audit.errors import AdapterError, AuditIOError, ValidationError
from coherence_audit.metrics import DEFAULT_GRID, MetricKind, compute_metric
from coherence_audit.pipeline import (
    ALL,
    CLASSES,
    config_from_dict,
    emit_report,
    fmt_real,
    load_audit_set,
    load_config,
    load_priors,
    pair_sub_seed,
    qbm_sensitivity,
    run_audit,
)
from coherence_audit.rng import splitmix64_mix, stable_hash64
from coherence_audit.synth import generate


def write_lines(path, lines):
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return path


@pytest.fixture(scope="module")
def small_set(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    generate(
        {"n_pairs": 40, "length": 24, "prior_size": 5, "seeds": [0, 1],
         "operators": ["mask", "class_substitution"],
         "bootstrap": {"replicates": 20, "confidence": 0.9}},
        out,
    )
    return out


def config_dict(small_set, **overrides):
    data = yaml.safe_load((small_set / "config.yaml").read_text())
    data.update(overrides)
    return data


@pytest.fixture(scope="module")
def report(small_set):
    return run_audit(load_config(small_set / "config.yaml"))


# -- ingestion ------------------------------------------------------------------

def test_load_audit_set_one_line(tmp_path):
    p = write_lines(tmp_path / "a.jsonl", ['{"pair_id": "a", "context": "t", "sequence": "ACDE", "label": 1}'])
    (rec,) = load_audit_set(p)
    assert (rec.pair_id, rec.context, rec.sequence, rec.label) == ("a", "t", "ACDE", 1)


def test_load_audit_set_duplicate_cites_both_lines(tmp_path):
    lines = [json.dumps({"pair_id": f"r{i}", "context": "", "sequence": "ACDE"}) for i in range(7)]
    lines[6] = json.dumps({"pair_id": "r2", "context": "", "sequence": "ACDE"})
    with pytest.raises(ValidationError, match="lines 3 and 7") as info:
        load_audit_set(write_lines(tmp_path / "a.jsonl", lines))
    assert info.value.code == "duplicate_pair_id"


def test_load_audit_set_empty_file(tmp_path):
    (tmp_path / "a.jsonl").write_text("")
    with pytest.raises(ValidationError) as info:
        load_audit_set(tmp_path / "a.jsonl")
    assert info.value.code == "empty_audit_set"


def test_load_audit_set_alphabet_violation_has_line(tmp_path):
    p = write_lines(tmp_path / "a.jsonl", [
        '{"pair_id": "a", "context": "", "sequence": "ACDE"}',
        '{"pair_id": "b", "context": "", "sequence": "AC*E"}',
    ])
    with pytest.raises(ValidationError) as info:
        load_audit_set(p, alphabet="ACDE")
    assert info.value.code == "alphabet_violation" and info.value.context["line"] == 2


def test_load_audit_set_parse_error_has_line(tmp_path):
    p = write_lines(tmp_path / "a.jsonl", ['{"pair_id": "a", "context": "", "sequence": "ACDE"}', "{oops"])
    with pytest.raises(ValidationError) as info:
        load_audit_set(p)
    assert info.value.code == "parse_error" and info.value.context["line"] == 2


def test_load_audit_set_missing_file(tmp_path):
    with pytest.raises(AuditIOError):
        load_audit_set(tmp_path / "nope.jsonl")


def test_load_priors_basic(tmp_path):
    (prior,) = load_priors(write_lines(tmp_path / "p.jsonl", ['{"record_id":"t1","indices":[2,3,4]}']))
    assert prior.record_id == "t1" and len(prior) == 3


def test_load_priors_negative_index(tmp_path):
    with pytest.raises(ValidationError) as info:
        load_priors(write_lines(tmp_path / "p.jsonl", ['{"record_id":"t1","indices":[-1]}']))
    assert info.value.code == "negative_index"


def test_record_without_prior_is_excluded(tmp_path):
    write_lines(tmp_path / "a.jsonl", [
        json.dumps({"pair_id": f"r{i}", "context": "", "sequence": "ACDEFGHIKL"}) for i in range(4)
    ])
    write_lines(tmp_path / "p.jsonl", [json.dumps({"record_id": f"r{i}", "indices": [1, 2]}) for i in range(3)])
    cfg = config_from_dict({
        "audit_set": "a.jsonl", "priors": "p.jsonl", "operators": ["mask"],
        "bootstrap": {"replicates": 5},
        "models": [{"id": "m", "seeds": [0], "adapter": {"kind": "synthetic", "alpha": 1, "beta": 1}}],
    }, tmp_path)
    rep = run_audit(cfg)
    assert rep.coverage.missing_prior == 1 and rep.coverage.retained == 3
    assert len(rep.profiles[("m", "0", "mask", "mechanistic")]) == 3


# -- config ---------------------------------------------------------------------

def test_config_rejects_unknown_key(small_set):
    with pytest.raises(ValidationError) as info:
        config_from_dict(config_dict(small_set, bogus=1), small_set)
    assert info.value.code == "unknown_config_key"


def test_config_missing_path(small_set):
    with pytest.raises(AuditIOError):
        config_from_dict(config_dict(small_set, priors="missing.jsonl"), small_set)


@pytest.mark.parametrize("key, value, code", [
    ("operators", ["mask", "blur"], "unknown_operator"),
    ("metrics", ["QBM", "KL"], "unknown_metric"),
    ("master_seed", -1, "bad_seed"),
    ("models", [], "no_models"),
    ("operators", [], "empty_operator_list"),
    ("metrics", [], "empty_metric_list"),
    ("grids", [], "empty_grid_list"),
])
def test_config_validation(small_set, key, value, code):
    with pytest.raises(ValidationError) as info:
        config_from_dict(config_dict(small_set, **{key: value}), small_set)
    assert info.value.code == code


def test_config_class_table_must_cover_alphabet(small_set, tmp_path):
    table = tmp_path / "classes.json"
    table.write_text(json.dumps({"a": "AC", "b": "DE"}))
    with pytest.raises(ValidationError) as info:
        config_from_dict(config_dict(small_set, class_table=str(table)), small_set)
    assert info.value.code == "class_table_not_covering"


def test_config_grids_and_seed_override(small_set):
    cfg = config_from_dict(
        config_dict(small_set, grids=[{"id": "med", "levels": [0.5]}, [0.1, 0.9]]), small_set, seed_override=9
    )
    assert [g.grid_id for g in cfg.grids] == ["med", "K2"]
    assert cfg.master_seed == 9 and cfg.provenance()["master_seed"] == 9


def test_sub_seed_derivation():
    expected = splitmix64_mix(5, stable_hash64("p1"), 1, 3)
    assert pair_sub_seed(5, "p1", "mask", 3) == expected
    assert pair_sub_seed(5, "p1", "class_substitution", 3) != expected


# -- run_audit ------------------------------------------------------------------

def test_report_completeness(report):
    cfg = report.config
    keys = [(r.model, r.seed, r.operator, r.cls, r.metric, r.grid) for r in report.rows]
    assert len(keys) == len(set(keys))
    expected = set()
    for m in cfg.models:
        for seed in [*map(str, m.seeds), ALL]:
            for op in [*cfg.operators, ALL]:
                for cls in CLASSES:
                    for metric in cfg.metrics:
                        grids = [g.grid_id for g in cfg.grids] if metric is MetricKind.QBM else [""]
                        for g in grids:
                            expected.add((m.model_id, seed, op, cls, metric, g))
    assert set(keys) == expected


def test_values_and_deltas_in_range(report):
    for r in report.rows:
        assert 0.0 <= r.value <= 1.0 and r.lower <= r.upper
    for c in report.contrasts:
        assert -1.0 <= c.delta <= 1.0


def test_contrast_consistency_exact(report):
    assert len(report.contrasts) == len(report.rows) // 2
    for c in report.contrasts:
        m = report.row(c.model, c.seed, c.operator, "mechanistic", c.metric, c.grid)
        s = report.row(c.model, c.seed, c.operator, "spurious", c.metric, c.grid)
        assert c.delta == s.value - m.value
        assert (c.mechanistic, c.spurious) == (m.value, s.value)


def test_operator_all_recomputable(report):
    cfg = report.config
    for m in cfg.models:
        for seed in map(str, m.seeds):
            for cls in CLASSES:
                parts = [report.profiles[(m.model_id, seed, op, cls)] for op in cfg.operators]
                pooled = parts[0].concat(*parts[1:]) if len(parts) > 1 else parts[0]
                for metric in cfg.metrics:
                    expected = compute_metric(metric, pooled, DEFAULT_GRID).value
                    got = report.row(m.model_id, seed, ALL, cls, metric).value
                    assert abs(got - expected) <= 1e-12


def test_seed_all_is_mean_of_seeds(report):
    for r in report.rows:
        if r.seed != ALL:
            continue
        seeds = report.config.models[[m.model_id for m in report.config.models].index(r.model)].seeds
        vals = [report.row(r.model, s, r.operator, r.cls, r.metric, r.grid).value for s in seeds]
        assert r.value == pytest.approx(np.mean(vals), abs=1e-15)


def test_auroc_block_present(report):
    for m in report.config.models:
        block = report.auroc[m.model_id]
        assert len(block["per_seed"]) == len(m.seeds)
        assert 0.0 <= block["mean"] <= 1.0


def test_prior_only_spurious_rows_degenerate(small_set):
    cfg = config_from_dict(config_dict(small_set, models=[
        {"id": "oracle", "seeds": [0, 1], "adapter": {"kind": "synthetic", "read_set": "prior_only"}}
    ]), small_set)
    rep = run_audit(cfg)
    spur = [r for r in rep.rows if r.cls == "spurious"]
    assert spur and all(r.degenerate and r.value == 0.0 for r in spur)
    assert not any(r.degenerate for r in rep.rows if r.cls == "mechanistic")


def test_partial_labels_rejected(tmp_path):
    write_lines(tmp_path / "a.jsonl", [
        '{"pair_id": "a", "context": "", "sequence": "ACDEFG", "label": 1}',
        '{"pair_id": "b", "context": "", "sequence": "ACDEFG"}',
    ])
    write_lines(tmp_path / "p.jsonl", ['{"record_id": "a", "indices": [0]}', '{"record_id": "b", "indices": [1]}'])
    cfg = config_from_dict({
        "audit_set": "a.jsonl", "priors": "p.jsonl", "operators": ["mask"],
        "models": [{"id": "m", "seeds": [0], "adapter": {"kind": "synthetic"}}],
    }, tmp_path)
    with pytest.raises(ValidationError) as info:
        run_audit(cfg)
    assert info.value.code == "partial_labels"


def test_adapter_failure_carries_provenance(small_set, tmp_path):
    script = tmp_path / "bad.py"
    script.write_text("import sys\nfor line in sys.stdin:\n    print('garbage')\n    sys.stdout.flush()\n")
    cfg = config_from_dict(config_dict(small_set, models=[
        {"id": "ext", "seeds": [3], "adapter": {"kind": "subprocess", "command": [sys.executable, str(script)]}}
    ]), small_set)
    with pytest.raises(AdapterError) as info:
        run_audit(cfg)
    assert info.value.code == "malformed_line"
    assert info.value.context["model"] == "ext" and info.value.context["seed"] == 3
    assert "garbage" in str(info.value)


def test_subprocess_adapter_matches_synthetic(small_set, tmp_path):
    """An external model that reproduces the synthetic scores gives the same report."""
    script = tmp_path / "model.py"
    script.write_text(textwrap.dedent(f"""
        import json, sys
        from coherence_audit.pipeline import load_priors
        from coherence_audit.scoring import SyntheticAdapter, SyntheticModelSpec, ScoringItem
        priors = {{p.record_id: p for p in load_priors({str(small_set / 'priors.jsonl')!r})}}
        model = SyntheticAdapter(SyntheticModelSpec(alpha=1.0, beta=0.1, noise_sigma=0.05, model_seed=int(sys.argv[1])), priors)
        for line in sys.stdin:
            obj = json.loads(line)
            (s,) = model.score([ScoringItem(obj["pair_id"], obj["variant"], obj["context"], obj["sequence"])])
            print(f"{{obj['pair_id']}},{{obj['variant']}},{{s!r}}", flush=True)
    """))
    common = {"operators": ["mask"], "bootstrap": {"replicates": 10, "seed": 1}}
    ext = config_from_dict(config_dict(small_set, **common, models=[
        {"id": "m", "seeds": [4], "adapter": {"kind": "subprocess", "command": [sys.executable, str(script), "{seed}"]}}
    ]), small_set)
    syn = config_from_dict(config_dict(small_set, **common, models=[
        {"id": "m", "seeds": [4], "adapter": {"kind": "synthetic", "alpha": 1.0, "beta": 0.1, "noise_sigma": 0.05}}
    ]), small_set)
    assert run_audit(ext).rows == run_audit(syn).rows


def test_uniform_shift_model_qbm_zero_on_every_grid(small_set):
    flat = {sym: [0.5] * 16 for sym in "ACDEFGHIKLMNPQRSTVWY"}
    cfg = config_from_dict(config_dict(small_set, operators=["mask"], models=[
        {"id": "shift", "seeds": [0], "adapter": {"kind": "synthetic", "read_set": "prior_only",
                                                  "noise_sigma": 0.1, "embedding": flat}}
    ]), small_set)
    for row in qbm_sensitivity(cfg):
        assert row.mechanistic[0] == pytest.approx(0.0, abs=1e-12)
        assert row.spurious[0] == 0.0


def test_sensitivity_k3_matches_default_run(small_set, report):
    cfg = config_from_dict(config_dict(small_set), small_set)
    for row in qbm_sensitivity(cfg):
        if row.grid != "K3":
            continue
        m = report.row(row.model, ALL, ALL, "mechanistic", MetricKind.QBM)
        s = report.row(row.model, ALL, ALL, "spurious", MetricKind.QBM)
        c = report.contrast(row.model, ALL, ALL, MetricKind.QBM)
        assert row.mechanistic == (m.value, m.lower, m.upper)
        assert row.spurious == (s.value, s.lower, s.upper)
        assert row.delta == (c.delta, c.lower, c.upper)


def test_adding_operator_keeps_mask_profiles(small_set):
    only_mask = run_audit(config_from_dict(config_dict(small_set, operators=["mask"]), small_set))
    both = run_audit(config_from_dict(config_dict(small_set), small_set))
    for key, prof in only_mask.profiles.items():
        other = both.profiles[key]
        assert np.array_equal(prof.perturbed, other.perturbed)


# -- emission -------------------------------------------------------------------

def test_fmt_real():
    assert fmt_real(0.093) == "0.0930000000"
    assert fmt_real(0.0) == "0.00000000"
    assert fmt_real(-0.0) == "0.00000000"
    assert fmt_real(1.0) == "1.00000000"
    assert fmt_real(float("nan")) == "nan"
    assert fmt_real(1 / 3) == "0.333333333"


def test_contrast_row_rendering(tmp_path, report):
    from coherence_audit.pipeline import ContrastRow, MetricReport

    rep = MetricReport(config=report.config, contrasts=[
        ContrastRow("modelX", ALL, ALL, MetricKind.QBM, "K3", 0.5, 0.593, 0.093, 0.039, 0.147)
    ])
    emit_report(rep, tmp_path)
    lines = (tmp_path / "contrasts.csv").read_text().splitlines()
    assert lines[1] == "modelX,all,QBM,0.0930000000,0.0390000000,0.147000000"


def test_empty_report_writes_headers_only(tmp_path, report):
    from coherence_audit.pipeline import MetricReport

    emit_report(MetricReport(config=report.config), tmp_path)
    assert (tmp_path / "contrasts.csv").read_text() == "model,operator,metric,delta,lo,hi\n"
    assert (tmp_path / "absolute_metrics.csv").read_text().count("\n") == 1


def test_emit_rerun_identical_bytes(tmp_path, report):
    paths = emit_report(report, tmp_path)
    first = {p.name: p.read_bytes() for p in paths}
    emit_report(report, tmp_path)
    assert first == {p.name: p.read_bytes() for p in paths}
    assert all(b"\r\n" not in data for data in first.values())


def test_emit_file_contents(tmp_path, report):
    emit_report(report, tmp_path)
    absolute = (tmp_path / "absolute_metrics.csv").read_text().splitlines()
    assert absolute[0] == "model,seed,operator,class,metric,grid,value,lo,hi,degenerate"
    assert len(absolute) == len(report.rows) + 1
    plot = (tmp_path / "delta_plot_data.csv").read_text().splitlines()
    assert len(plot) == 1 + len(report.config.models) * len(report.config.metrics)
    assert [line[0] for line in plot[1:]] == sorted(line[0] for line in plot[1:])
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["master_seed"] == report.config.master_seed
    assert summary["config"]["models"][0]["id"] == report.config.models[0].model_id


def test_emit_unwritable(tmp_path, report):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(AuditIOError):
        emit_report(report, blocker / "sub")


def test_qbm_label_for_secondary_grid(tmp_path, small_set):
    cfg = config_from_dict(config_dict(small_set, operators=["mask"], metrics=["QBM"],
                                       grids=[[0.25, 0.5, 0.75], {"id": "K9", "levels": [i / 10 for i in range(1, 10)]}]),
                           small_set)
    emit_report(run_audit(cfg), tmp_path)
    labels = {line.split(",")[2] for line in (tmp_path / "contrasts.csv").read_text().splitlines()[1:]}
    assert labels == {"QBM", "QBM_K9"}
