"""``audit`` command-line entry point."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import yaml

from .errors import AuditError, AuditIOError, ValidationError
from .metrics import DEFAULT_GRID, MetricKind, QuantileGrid, ResponseProfile, compute_metric, profile_diagnostics

log = logging.getLogger("coherence_audit")


def _u64(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError(f"{text} is not an unsigned 64-bit integer")
    return value


def _levels(text: str) -> QuantileGrid:
    try:
        return QuantileGrid(tuple(float(x) for x in text.split(",") if x.strip()))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def read_score_file(path) -> dict[str, float]:
    """Two-column CSV ``pair_id,score`` → mapping."""
    try:
        fh = open(path, encoding="utf-8", newline="")
    except OSError as exc:
        raise AuditIOError("unreadable_file", str(exc), path=str(path)) from exc
    out: dict[str, float] = {}
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["pair_id", "score"]:
            raise ValidationError("bad_header", f"expected pair_id,score, got {header}", path=str(path))
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise ValidationError("parse_error", f"expected 2 fields, got {len(row)}", path=str(path), line=lineno)
            pid, raw = row[0], row[1]
            if pid in out:
                raise ValidationError("duplicate_pair_id", pid, path=str(path), line=lineno)
            try:
                out[pid] = float(raw)
            except ValueError:
                raise ValidationError("non_numeric_score", repr(raw), path=str(path), line=lineno) from None
    if not out:
        raise ValidationError("empty_input", path=str(path))
    return out


def cmd_run(args) -> int:
    from .pipeline import emit_report, load_config, run_audit

    config = load_config(args.config, seed_override=args.seed)
    out = args.out or config.output_dir
    if out is None:
        raise ValidationError("no_output_dir", "pass --out or set output_dir in the config")
    report = run_audit(config)
    for path in emit_report(report, out):
        log.info("wrote %s", path)
    return 0


def cmd_metrics(args) -> int:
    original = read_score_file(args.original)
    perturbed = read_score_file(args.perturbed)
    if set(original) != set(perturbed):
        missing = sorted(set(original) ^ set(perturbed))
        raise ValidationError("misaligned_scores", f"{len(missing)} pair_ids differ, e.g. {missing[:3]}")
    ids = sorted(original)
    profile = ResponseProfile(ids, [original[i] for i in ids], [perturbed[i] for i in ids])
    kind = MetricKind.parse(args.metric)
    grid = args.grid or DEFAULT_GRID
    value = compute_metric(kind, profile, grid)
    diag = profile_diagnostics(profile)
    result = {
        "metric": kind.value,
        "value": value.value,
        "degenerate": value.degenerate,
        "n": diag.n,
        "paired_rms": diag.paired_rms,
        "transport_rms": diag.transport_rms,
    }
    if kind is MetricKind.QBM:
        result["grid"] = list(grid.levels)
    print(json.dumps(result, sort_keys=True))
    return 0


def cmd_sensitivity(args) -> int:
    from .pipeline import emit_sensitivity, load_config, qbm_sensitivity

    config = load_config(args.config, seed_override=args.seed)
    path = emit_sensitivity(qbm_sensitivity(config), args.out)
    log.info("wrote %s", path)
    return 0


def cmd_synth(args) -> int:
    from .synth import generate

    try:
        text = Path(args.spec).read_text(encoding="utf-8")
    except OSError as exc:
        raise AuditIOError("unreadable_spec", str(exc), path=str(args.spec)) from exc
    try:
        spec = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ValidationError("spec_parse_error", str(exc)) from exc
    if not isinstance(spec, dict):
        raise ValidationError("spec_parse_error", "top level must be a mapping")
    for name, path in sorted(generate(spec, args.out).items()):
        log.info("wrote %s: %s", name, path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="audit", description="Coherence audits under matched perturbations.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a configured audit and write the report")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.add_argument("--seed", type=_u64, help="override master_seed")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("metrics", help="evaluate one metric on two aligned score files")
    p.add_argument("--original", required=True)
    p.add_argument("--perturbed", required=True)
    p.add_argument("--metric", required=True, choices=["qbm", "wcm", "tiwcm"])
    p.add_argument("--grid", type=_levels, help="comma-separated quantile levels for QBM")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("sensitivity", help="QBM across quantile grids K3/K5/K9")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=_u64, help="override master_seed")
    p.set_defaults(func=cmd_sensitivity)

    p = sub.add_parser("synth", help="generate a synthetic audit set, priors, config and scores")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except AuditError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
