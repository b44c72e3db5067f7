"""Command-line entry points: classify, run, explain.

Exit codes: 0 success, 1 usage or configuration error, 2 analysis error,
3 runtime error. Every flag with a default can also be set through an
environment variable named PAGEFLOW_<FLAG> (for example PAGEFLOW_BUDGET,
PAGEFLOW_PAGE_SIZE, PAGEFLOW_SPILL_DIR).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile

from . import classify, containers as ct, engine, interp, ir, pagestore as ps, workloads
from .engine import ConfigError, PlanError, RunConfig

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_ANALYSIS = 2
EXIT_RUNTIME = 3


def _env(name: str, default, cast=str):
    raw = os.environ.get(f"PAGEFLOW_{name}")
    if raw is None:
        return default
    try:
        return cast(raw)
    except ValueError as exc:
        raise ConfigError(f"PAGEFLOW_{name}={raw!r}: {exc}") from None


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> _Parser:
    p = _Parser(prog="pageflow", description=__doc__, add_help=True)
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("classify", help="size-type classification of an IR file")
    c.add_argument("path", help="IR source file")
    c.add_argument("--phase", action="store_true", help="include per-phase verdicts")
    c.add_argument("--machine", action="store_true", help="tab-separated output")

    r = sub.add_parser("run", help="execute a built-in workload")
    r.add_argument("workload", help=f"one of: {', '.join(sorted(workloads.DRIVERS))}")
    r.add_argument("--mode", default=_env("MODE", "decomposed"), choices=["object", "decomposed"])
    r.add_argument("--page-size", type=int, default=_env("PAGE_SIZE", 65536, int))
    r.add_argument("--budget", type=int, default=_env("BUDGET", 64 * 1024 * 1024, int))
    r.add_argument("--cache-frac", type=float, default=_env("CACHE_FRAC", 0.6, float))
    r.add_argument("--spill-dir", default=_env("SPILL_DIR", None))
    r.add_argument("--partitions", type=int, default=_env("PARTITIONS", 1, int))
    r.add_argument("--threads", type=int, default=_env("THREADS", 1, int))
    r.add_argument("--seed", type=int, default=_env("SEED", 0, int))
    r.add_argument("--report", default=_env("REPORT", None), help="JSON-lines report path")
    r.add_argument("--input", default=None, help="read inputs from a text file")
    r.add_argument(
        "--scale",
        action="append",
        default=[],
        metavar="KEY=N",
        help="override a workload scale knob (repeatable), e.g. --scale n=1000",
    )

    e = sub.add_parser("explain", help="print the execution plan of a workload")
    e.add_argument("workload")
    return p


def cmd_classify(args) -> int:
    try:
        with open(args.path) as fh:
            text = fh.read()
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        prog = ir.parse_program(text)
        prog.analysis()
        reports = []
        if prog.jobs:
            for name in prog.jobs:
                reports.append(classify.phased_refine(prog.jobs[name], prog))
        else:
            reports.append(classify.classify_program(prog))
    except ir.IRError as exc:
        print(f"analysis error: {exc}", file=sys.stderr)
        return EXIT_ANALYSIS
    for rep in reports:
        for t, scope, verdict, evidence in rep.lines():
            if "/" in scope and not args.phase:
                continue
            if args.machine:
                print(f"{t}\t{scope}\t{verdict}\t{evidence}")
            else:
                line = f"{t} {scope} {verdict}"
                if evidence:
                    line += f"  [{evidence}]"
                print(line)
    return EXIT_OK


def _parse_scale(pairs: list[str]) -> dict:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"--scale expects KEY=N, got {pair!r}")
        k, v = pair.split("=", 1)
        out[k] = int(v)
    return out


def cmd_run(args) -> int:
    spill_dir = args.spill_dir or tempfile.mkdtemp(prefix="pageflow-spill-")
    config = RunConfig(
        mode=args.mode,
        page_capacity=args.page_size,
        budget=args.budget,
        cache_fraction=args.cache_frac,
        spill_dir=spill_dir,
        partitions=args.partitions,
        threads=args.threads,
        seed=args.seed,
        report_path=args.report,
    )
    config.validate()
    scale = _parse_scale(args.scale)
    driver = workloads.make_driver(args.workload)
    if args.input is not None:
        inputs = workloads.read_text_input(args.workload, args.input)
        first = next(iter(inputs.values()))
        scale.setdefault("n", len(first))
        driver.generate = lambda seed, sc: inputs  # type: ignore[assignment]
    report = driver.execute(config, scale)
    if args.report:
        report.write_jsonl(args.report)
    summary = report.summary_record()
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_explain(args) -> int:
    driver = workloads.make_driver(args.workload)
    prog = workloads.load_program(driver.program_name)
    for name in prog.jobs:
        plan = engine.plan_job(prog.jobs[name], prog)
        print(plan.describe())
        print()
    return EXIT_OK


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        if args.command == "classify":
            return cmd_classify(args)
        if args.command == "run":
            return cmd_run(args)
        if args.command == "explain":
            return cmd_explain(args)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ir.IRError, PlanError) as exc:
        print(f"analysis error: {exc}", file=sys.stderr)
        return EXIT_ANALYSIS
    except (engine.RuntimeFailure, interp.ExecutionError, ps.StoreError, ct.ContainerError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
