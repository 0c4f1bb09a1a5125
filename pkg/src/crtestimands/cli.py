"""Command-line entry point: ``analyze``, ``truth``, ``simulate`` and ``verify``.

Exit status is 0 on success, 1 for invalid input and 2 when no estimator
could be fitted.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .analysis import AnalysisOptions, analyze
from .core import (
    Averaging,
    BoundaryPolicy,
    EstimationError,
    Margin,
    Measure,
    OutcomeKind,
    ValidationError,
    Weighting,
)
from .estimands import all_estimands, precision_weighted_estimand
from .io import dump_config, load_config, load_observed_csv, load_potential_csv, write_observed_csv, write_potential_csv
from .simulation import generate, run_study

EXIT_OK, EXIT_INVALID, EXIT_ESTIMATION = 0, 1, 2

_MEASURES = {"or": Measure.ODDS_RATIO, "diff": Measure.DIFFERENCE}


def _cmd_analyze(args) -> int:
    data = load_observed_csv(args.input, args.outcome_kind)
    opts = AnalysisOptions(
        measure=None if args.measure is None else _MEASURES[args.measure],
        boundary_policy=args.boundary_policy,
        fg_bound=args.fg_bound,
        quad_nodes=args.quad_nodes,
        min_cluster_size=args.min_cluster_size,
        max_cluster_size=args.max_cluster_size,
    )
    grid = analyze(data, opts)
    out = grid.to_json() + "\n" if args.format == "json" else grid.render_text()
    sys.stdout.write(out)
    return EXIT_OK


def _cmd_truth(args) -> int:
    po = load_potential_csv(args.input, args.outcome_kind)
    if args.measure is not None:
        measures = [_MEASURES[args.measure]]
    elif po.outcome_kind is OutcomeKind.BINARY:
        measures = [Measure.ODDS_RATIO, Measure.DIFFERENCE]
    else:
        measures = [Measure.DIFFERENCE]
    doc = {"schema_version": 1, "n_clusters": po.n_clusters, "n_participants": po.n_participants, "estimands": []}
    for measure in measures:
        values = all_estimands(po, measure, Averaging(args.f), BoundaryPolicy(args.boundary_policy))
        for spec, v in values.items():
            entry = {"margin": spec.margin.value, "weighting": spec.weighting.value, "measure": measure.value}
            if isinstance(v, Exception):
                entry.update(value=None, error=type(v).__name__, message=str(v))
            else:
                entry["value"] = v
            doc["estimands"].append(entry)
    if args.rho is not None:
        doc["precision_weighted"] = {"rho": args.rho, "value": precision_weighted_estimand(po, args.rho)}

    if args.format == "json":
        sys.stdout.write(json.dumps(doc, indent=2) + "\n")
        return EXIT_OK
    table = []
    for e in doc["estimands"]:
        label = f"{e['margin']}, {e['weighting']} ({e['measure']})"
        shown = f"{e['value']:.6g}" if e["value"] is not None else f"undefined: {e['message']}"
        table.append((label, shown))
    if "precision_weighted" in doc:
        pw = doc["precision_weighted"]
        table.append((f"precision-weighted difference, rho = {pw['rho']:g}", f"{pw['value']:.6g}"))
    width = max(len(label) for label, _ in table)
    lines = [f"M = {po.n_clusters} clusters, N = {po.n_participants} participants", ""]
    lines += [f"{label:<{width}}  {shown}" for label, shown in table]
    sys.stdout.write("\n".join(lines) + "\n")
    return EXIT_OK


def _cmd_simulate(args) -> int:
    config = load_config(args.config)
    po, obs = generate(config, args.replicate)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_potential_csv(po, out / "potential.csv")
    write_observed_csv(obs, out / "observed.csv")
    (out / "config.toml").write_text(dump_config(config), encoding="utf-8")
    sys.stdout.write(f"wrote {po.n_clusters} clusters, {po.n_participants} participants to {out}\n")
    return EXIT_OK


def _cmd_verify(args) -> int:
    config = load_config(args.config)
    opts = AnalysisOptions(
        measure=None if args.measure is None else _MEASURES[args.measure],
        boundary_policy=args.boundary_policy,
        fg_bound=args.fg_bound,
    )
    report = run_study(config, replicates=args.replicates, options=opts, n_jobs=args.jobs)
    doc = report.to_dict(include_traces=args.traces)
    Path(args.out).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    if all(c.replicates == 0 for c in report.cells.values()):
        sys.stderr.write("error: every estimator failed on every replicate\n")
        return EXIT_ESTIMATION
    for c in report.cells.values():
        sys.stdout.write(
            f"{c.key:<32} mean {c.mean_estimate:10.5g}  truth {c.mean_truth:10.5g}  "
            f"coverage {c.coverage_average:5.3f}  fits {c.replicates}/{args.replicates}\n"
        )
    return EXIT_OK


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="crtestimands", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", help="fit every estimator to an observed trial CSV")
    a.add_argument("--input", required=True)
    a.add_argument("--measure", choices=sorted(_MEASURES))
    a.add_argument("--min-cluster-size", type=int)
    a.add_argument("--max-cluster-size", type=int)
    a.add_argument("--boundary-policy", choices=[b.value for b in BoundaryPolicy], default="error")
    a.add_argument("--fg-bound", type=float, default=0.75)
    a.add_argument("--quad-nodes", type=_positive_int, default=15)
    a.add_argument("--outcome-kind", choices=[k.value for k in OutcomeKind])
    a.add_argument("--format", choices=["text", "json"], default="text")
    a.set_defaults(func=_cmd_analyze)

    t = sub.add_parser("truth", help="evaluate the estimands on a potential-outcome CSV")
    t.add_argument("--input", required=True)
    t.add_argument("--f", choices=[x.value for x in Averaging], default="log")
    t.add_argument("--rho", type=float)
    t.add_argument("--measure", choices=sorted(_MEASURES))
    t.add_argument("--boundary-policy", choices=[b.value for b in BoundaryPolicy], default="error")
    t.add_argument("--outcome-kind", choices=[k.value for k in OutcomeKind])
    t.add_argument("--format", choices=["text", "json"], default="text")
    t.set_defaults(func=_cmd_truth)

    s = sub.add_parser("simulate", help="draw one trial from a config and write CSVs")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--replicate", type=int, default=0)
    s.set_defaults(func=_cmd_simulate)

    v = sub.add_parser("verify", help="Monte Carlo study of every estimator against its estimand")
    v.add_argument("--config", required=True)
    v.add_argument("--replicates", type=_positive_int, required=True)
    v.add_argument("--out", required=True)
    v.add_argument("--measure", choices=sorted(_MEASURES))
    v.add_argument("--boundary-policy", choices=[b.value for b in BoundaryPolicy], default="error")
    v.add_argument("--fg-bound", type=float, default=0.75)
    v.add_argument("--jobs", type=_positive_int, default=min(4, os.cpu_count() or 1))
    v.add_argument("--traces", action="store_true", help="include per-replicate values in the report")
    v.set_defaults(func=_cmd_verify)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    try:
        return args.func(args)
    except ValidationError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_INVALID
    except EstimationError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_ESTIMATION
    except ValueError as exc:  # bad option values, e.g. an out-of-range --rho
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
