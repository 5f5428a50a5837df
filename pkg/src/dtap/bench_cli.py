"""`dtap-bench` command line: attack suite and benchmark runners."""

from __future__ import annotations

import argparse
import json
import sys
import tempfile
from pathlib import Path

from .bench import run_attack_suite, run_macrobench, run_microbench


def _table(rows: list[dict], columns: list[str]) -> str:
    widths = {
        col: max(len(col), *(len(str(row.get(col, ""))) for row in rows)) for col in columns
    }
    header = "  ".join(col.ljust(widths[col]) for col in columns)
    divider = "  ".join("-" * widths[col] for col in columns)
    lines = [header, divider]
    for row in rows:
        lines.append("  ".join(str(row.get(col, "")).ljust(widths[col]) for col in columns))
    return "\n".join(lines)


def _print_attacks(report: dict) -> None:
    print(
        _table(
            report["scenarios"],
            ["scenario", "expected", "actual", "outbox_delta", "passed"],
        )
    )
    honest = sum(c["executed"] for c in report["controls"])
    print(f"\nhonest control executions: {honest}/{len(report['controls'])}")
    print(f"xtoken violations: {len(report['xtoken_violations'])}")
    print(f"elapsed: {report['elapsed_s']}s")
    print(f"suite: {'PASS' if report['passed'] else 'FAIL'}")


def _print_micro(report: dict) -> None:
    storage = report["storage"]
    print("storage overhead per recipe:")
    print(f"  trigger grant: {storage['trigger_grant_bytes']} B")
    print(f"  action grant:  {storage['action_grant_bytes']} B")
    print(f"  total:         {storage['per_recipe_bytes']} B")
    print(f"  xtoken store:  {storage['xtoken_store_bytes']} B")
    print("\ntransmission per execution (all hops):")
    print(
        _table(
            report["transmission"],
            ["params", "dtap_bytes", "baseline_bytes", "overhead_bytes", "overhead_ratio"],
        )
    )


def _print_macro(report: dict) -> None:
    print("end-to-end latency (median ms per execution):")
    print(
        _table(
            report["latency"],
            ["params", "dtap_median_ms", "baseline_median_ms", "overhead_ms"],
        )
    )
    tp = report["throughput"]
    print(f"\nthroughput at concurrency {tp['concurrency']}:")
    rows = [
        {"system": "dtap", **tp["dtap"]},
        {"system": "baseline", **tp["baseline"]},
    ]
    print(_table(rows, ["system", "events", "executed", "elapsed_s", "throughput_rps"]))
    print(f"ratio (dtap/baseline): {tp['ratio']}")


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="dtap-bench", description="attack scenarios and performance benchmarks"
    )
    parser.add_argument("suite", choices=["attacks", "micro", "macro"])
    parser.add_argument("--workdir", help="scratch directory (default: a temp dir)")
    parser.add_argument("--json", dest="json_out", help="also write the report as JSON")
    parser.add_argument("--concurrency", type=int, default=200)
    parser.add_argument("--events", type=int, default=10_000)
    parser.add_argument("--latency-reps", type=int, default=25)
    args = parser.parse_args(argv)

    workdir = Path(args.workdir) if args.workdir else Path(tempfile.mkdtemp(prefix="dtap-bench-"))

    if args.suite == "attacks":
        report = run_attack_suite(workdir)
        _print_attacks(report)
        ok = report["passed"]
    elif args.suite == "micro":
        report = run_microbench(workdir)
        _print_micro(report)
        ok = True
    else:
        report = run_macrobench(
            workdir,
            concurrency=args.concurrency,
            total_events=args.events,
            latency_reps=args.latency_reps,
        )
        _print_macro(report)
        ok = True

    if args.json_out:
        Path(args.json_out).write_text(json.dumps(report, indent=2) + "\n")
        print(f"\nreport written to {args.json_out}")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
