"""Command-line entry point.

Exit codes: 0 success, 1 invalid input, 2 numeric or solver failure,
64 unknown subcommand or flag.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from .acflow import compare_models
from .control import Plant
from .errors import NumericError, ValidationError
from .experiment import (divergence_probe, load_scenario, run_scenario, trace_csv,
                         transition_multiplier)
from .feeder import load_feeder, scale_injections
from .lindistflow import build_model, coupling_report

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC, EXIT_USAGE = 0, 1, 2, 64


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _table(rows, fieldnames) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fieldnames, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _operating_point(args):
    feeder = load_feeder(args.feeder)
    feeder = scale_injections(feeder, args.load_scale, args.pv_scale)
    if args.v0 is not None:
        feeder = feeder.with_v0(args.v0)
    return feeder


def cmd_matrices(args) -> str:
    mats = build_model(load_feeder(args.feeder), args.model)
    if args.format == "json":
        return json.dumps(mats.to_dict(), indent=1)
    names = [f"{lab}.{ph}" for lab, ph in mats.labels]
    rows = []
    for name, row in zip(names, mats.X):
        rows.append({"pair": name, **{n: repr(float(x)) for n, x in zip(names, row)}})
    return _table(rows, ["pair", *names])


def cmd_bounds(args) -> str:
    mats = build_model(load_feeder(args.feeder), args.model)
    eig = mats.eig.to_dict()
    doc = {"model": mats.kind, "size": mats.size, **eig}
    if args.format == "json":
        return json.dumps(doc, indent=1)
    return _table([doc], list(doc))


def cmd_coupling(args) -> str:
    mats = build_model(load_feeder(args.feeder), "multi")
    rows = [{"phase_i": b.phase_i, "phase_j": b.phase_j, "case": b.case,
             "classification": b.classification, "min": b.min_entry, "max": b.max_entry,
             "count": b.count, "offending": len(b.offending)}
            for b in coupling_report(mats)]
    if args.format == "json":
        return json.dumps(rows, indent=1)
    return _table(rows, list(rows[0]) if rows else ["phase_i"])


def _run_one(path: str, plant: str | None, seed: int | None):
    scenario = load_scenario(path)
    if plant is not None:
        scenario = replace(scenario, plant=plant)
    if seed is not None:
        scenario = replace(scenario, seed=seed)
    result = run_scenario(scenario)
    return trace_csv(result.records), result.summary()


def cmd_run(args) -> str:
    paths = args.scenario
    if args.jobs > 1 and len(paths) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_run_one, paths, [args.plant] * len(paths),
                                    [args.seed] * len(paths)))
    else:
        results = [_run_one(p, args.plant, args.seed) for p in paths]

    traces = [t for t, _ in results]
    summaries = [s for _, s in results]
    # one header, then every scenario's rows
    body = traces[0] + "".join(t.split("\n", 1)[1] for t in traces[1:])
    if args.summary:
        Path(args.summary).write_text(json.dumps(summaries, indent=1) + "\n")
    if args.out:
        Path(args.out).write_text(body)
        return json.dumps(summaries, indent=1)
    return body


def cmd_validate(args) -> str:
    feeder = _operating_point(args)
    mats = build_model(feeder, args.model)
    report = compare_models(Plant.from_feeder(feeder, mats))
    if args.format == "json":
        return report.to_json()
    rows = report.to_dict()["entries"]
    return _table(rows, ["bus", "phase", "v_linear", "v_ac", "abs_error"])


def cmd_probe(args) -> str:
    feeder = _operating_point(args)
    plant = Plant.from_feeder(feeder, build_model(feeder, "multi"))
    rows = divergence_probe(plant, args.multipliers, iterations=args.max_iter, tol=args.tol)
    table = [{"multiplier": r.multiplier, "mu": r.mu, "outcome": r.outcome,
              "iterations": r.iterations, "final_dq": r.final_dq} for r in rows]
    if args.format == "json":
        return json.dumps({"contraction_bound": plant.mats.eig.contraction_bound,
                           "transition_multiplier": transition_multiplier(rows),
                           "rows": table}, indent=1)
    return _table(table, list(table[0]))


def _multipliers(text: str):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="voltreg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, feeder=True):
        if feeder:
            p.add_argument("--feeder", required=True, help="feeder JSON file")
        p.add_argument("--out", help="write the result here instead of stdout")
        p.add_argument("--format", choices=["json", "csv"], default="json")
        p.add_argument("--seed", type=int, default=None)
        return p

    def operating(p):
        p.add_argument("--load-scale", type=float, default=0.8)
        p.add_argument("--pv-scale", type=float, default=1.0)
        p.add_argument("--v0", type=float, default=None, help="squared substation voltage")

    p = common(sub.add_parser("matrices", help="dump the linearized model"))
    p.add_argument("--model", choices=["single", "multi"], default="single")
    p.set_defaults(func=cmd_matrices)

    p = common(sub.add_parser("bounds", help="eigenvalues, step-size bounds and kappa"))
    p.add_argument("--model", choices=["single", "multi"], default="single")
    p.set_defaults(func=cmd_bounds)

    p = common(sub.add_parser("coupling", help="inter-phase sign report"))
    p.set_defaults(func=cmd_coupling, format="csv")

    p = common(sub.add_parser("run", help="run scenario files, emit the trace CSV"), feeder=False)
    p.add_argument("--scenario", required=True, action="append")
    p.add_argument("--summary", help="write the summary JSON here")
    p.add_argument("--plant", choices=["linear", "ac"], default=None)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_run)

    p = common(sub.add_parser("validate", help="linear versus AC voltage comparison"))
    p.add_argument("--model", choices=["single", "multi"], default="multi")
    operating(p)
    p.set_defaults(func=cmd_validate)

    p = common(sub.add_parser("probe", help="step-size divergence sweep"))
    p.add_argument("--multipliers", type=_multipliers, default=[0.99, 1, 2, 3, 3.5, 4])
    p.add_argument("--max-iter", type=int, default=10_000)
    p.add_argument("--tol", type=float, default=1e-8)
    operating(p)
    p.set_defaults(func=cmd_probe)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    try:
        text = args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    _emit(text, args.out if args.command != "run" else None)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
