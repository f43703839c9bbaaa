"""Command-line entry point: ``lsmaudit <command> [options]``.

Exit status: 0 on success, 1 when a run produced violations or a
verification mismatch, 2 on usage or input errors.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from collections.abc import Sequence

from lsmaudit.errors import LsmAuditError

EXIT_OK = 0
EXIT_FINDING = 1
EXIT_USAGE = 2


def _write_json(path: str, data) -> None:
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_document(doc, path: str) -> None:
    with open(path, "w") as fh:
        if path.endswith(".ndjson"):
            doc.write_stream(fh)
        else:
            json.dump(doc.to_prov_json(), fh, indent=1)
            fh.write("\n")


def _read_trace(path: str):
    from lsmaudit.events import parse_trace

    with open(path) as fh:
        return parse_trace(fh)


# -- simulate -----------------------------------------------------------------------


def cmd_simulate(args: argparse.Namespace) -> int:
    from lsmaudit.harness.pipeline import RunOptions, run_end_to_end
    from lsmaudit.harness.scenario import Scenario, load_scenario

    trace = _read_trace(args.trace)
    scenario = load_scenario(args.scenario) if args.scenario else Scenario()
    options = RunOptions(
        merge=False if args.no_merge else None,
        avoid_versions=False if args.no_version_avoidance else None,
        drop_on_full=args.drop_on_full,
        capacity=args.capacity,
        threaded=args.threaded,
        seed=args.seed,
    )
    result = run_end_to_end(scenario, trace, options)
    stats = dict(result.stats, seed=args.seed, exit_status=result.exit_status)

    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write_document(result.document, os.path.join(args.out, "prov.ndjson"))
        _write_document(result.document, os.path.join(args.out, "prov.json"))
        with open(os.path.join(args.out, "violations.ndjson"), "w") as fh:
            for v in result.violations:
                fh.write(json.dumps(v.as_dict(), sort_keys=True) + "\n")
        _write_json(os.path.join(args.out, "stats.json"), stats)
    if args.prov_out:
        _write_document(result.document, args.prov_out)
    if args.stats:
        print(json.dumps(stats, indent=2, sort_keys=True))
    for v in result.violations:
        print(f"violation ts={v.timestamp} {v.hook} {v.subject}: {v.action} ({v.rule or 'default'})", file=sys.stderr)
    return result.exit_status


# -- verify-motifs --------------------------------------------------------------------


def cmd_verify_motifs(args: argparse.Namespace) -> int:
    from lsmaudit.events import KernelObjectId
    from lsmaudit.motifs import match, program_motif
    from lsmaudit.provenance import load_document

    trace = _read_trace(args.trace)
    doc = load_document(args.prov)
    meta = doc.meta or {}
    # reduce the prediction the same way the capture was configured
    merge = args.merge if args.merge is not None else meta.get("merge", True) is not False
    avoid = args.avoid_versions if args.avoid_versions is not None else meta.get("avoid_versions", True) is not False
    opaque = [KernelObjectId.parse(o) for o in meta.get("opaque", [])]
    motif = program_motif(trace, merge=merge, avoid_versions=avoid, opaque=opaque)
    report = match(doc, motif, embed=args.embed)
    summary = {
        "matched": report.matched,
        "mode": "embed" if args.embed else "exact",
        "merge": merge,
        "avoid_versions": avoid,
        "mismatches": report.mismatches,
    }
    if args.out:
        _write_json(args.out, summary)
    if report.matched:
        print(f"match: {len(doc.nodes)} nodes, {len(doc.edges)} edges")
        return EXIT_OK
    print("mismatch:")
    for line in report.mismatches:
        print(f"  {line}")
    return EXIT_FINDING


# -- compile-policy ------------------------------------------------------------------------


def cmd_compile_policy(args: argparse.Namespace) -> int:
    from lsmaudit.policy import compile_policy, parse_policy

    with open(args.input, "rb") as fh:
        policy = parse_policy(fh.read())
    pset = compile_policy(policy, {"source": os.path.basename(args.input)})
    plan = pset.plan()
    if args.out:
        _write_json(args.out, plan)
    if args.explain:
        print(pset.explain())
    elif not args.out:
        print(json.dumps(plan, indent=2, sort_keys=True))
    return EXIT_OK


# -- bench -------------------------------------------------------------------------------


def cmd_bench(args: argparse.Namespace) -> int:
    from lsmaudit.harness.bench import SUITES, run_bench

    suites = SUITES if args.suite == "all" else (args.suite,)
    reports = [run_bench(s, seed=args.seed) for s in suites]
    for r in reports:
        print(r.to_text())
        print()
    if args.out:
        _write_json(args.out, [r.as_dict() for r in reports])
    return EXIT_OK


# -- gen-trace ---------------------------------------------------------------------------


def cmd_gen_trace(args: argparse.Namespace) -> int:
    from lsmaudit.events import dump_trace
    from lsmaudit.harness.workloads import generate_trace

    records = generate_trace(args.workload, args.size, args.seed)
    if args.out:
        with open(args.out, "w") as fh:
            dump_trace(records, fh)
    else:
        dump_trace(records, sys.stdout)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    from lsmaudit.harness.bench import SUITES
    from lsmaudit.harness.workloads import WORKLOADS

    parser = argparse.ArgumentParser(prog="lsmaudit", description="LSM hook audit and provenance simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, out_help: str) -> None:
        p.add_argument("--seed", type=int, default=0, help="seed recorded in outputs (default 0)")
        p.add_argument("--out", help=out_help)

    p = sub.add_parser("simulate", help="replay a trace through dispatch, capture and serialization")
    p.add_argument("--trace", required=True, help="trace file (NDJSON)")
    p.add_argument("--scenario", help="scenario JSON; default captures every hook from the root cgroup")
    p.add_argument("--prov-out", help="also write the document here (.ndjson stream, otherwise PROV-JSON)")
    p.add_argument("--no-merge", action="store_true", help="keep parallel edges for repeated flows")
    p.add_argument("--no-version-avoidance", action="store_true", help="version on every inflow")
    p.add_argument("--drop-on-full", action="store_true", help="drop elements when the ring buffer is full")
    p.add_argument("--capacity", type=int, default=4096, help="ring buffer capacity (default 4096)")
    p.add_argument("--threaded", action="store_true", help="serialize on a separate consumer thread")
    p.add_argument("--stats", action="store_true", help="print run statistics as JSON")
    common(p, "output directory for prov.ndjson, prov.json, violations.ndjson and stats.json")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("verify-motifs", help="check a captured document against the predicted motif")
    p.add_argument("--trace", required=True)
    p.add_argument("--prov", required=True, help="document written by simulate (.ndjson or PROV-JSON)")
    p.add_argument("--embed", action="store_true", help="only require the motif to occur as a subgraph")
    p.add_argument("--merge", dest="merge", action="store_true", default=None, help="override the document's merge flag")
    p.add_argument("--no-merge", dest="merge", action="store_false")
    p.add_argument("--avoid-versions", dest="avoid_versions", action="store_true", default=None)
    p.add_argument("--no-version-avoidance", dest="avoid_versions", action="store_false")
    common(p, "write a JSON report here")
    p.set_defaults(func=cmd_verify_motifs)

    p = sub.add_parser("compile-policy", help="compile a JSON sandbox policy into a program plan")
    p.add_argument("--in", dest="input", required=True, help="policy JSON")
    p.add_argument("--explain", action="store_true", help="print hook -> program -> rules table")
    common(p, "write the plan JSON here (printed when omitted)")
    p.set_defaults(func=cmd_compile_policy)

    p = sub.add_parser("bench", help="run benchmark suites")
    p.add_argument("--suite", choices=[*SUITES, "all"], default="all")
    common(p, "write the reports as JSON here")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gen-trace", help="generate a built-in workload trace")
    p.add_argument("--workload", required=True, choices=sorted(WORKLOADS))
    p.add_argument("--size", type=int, default=1000)
    common(p, "trace file (stdout when omitted)")
    p.set_defaults(func=cmd_gen_trace)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (LsmAuditError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
