"""Command line: ``python -m fogconf run ...`` / ``python -m fogconf summarize ...``."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace

from .bench import BackendBootFailure, MalformedCsv, ScenarioInvalid, resolve_scenario, run_scenario, summarize


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fogconf", description="Run naming-service experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario and write latency.csv / convergence.csv")
    run.add_argument("--scenario", required=True, help="built-in name (baseline, delay10, partition) or scenario file")
    run.add_argument("--backend", choices=("crdt", "quorum"))
    run.add_argument("--seed", type=int)
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument("--time", choices=("virtual", "real"), dest="time_mode")
    run.add_argument("--paper-zeros", action="store_true", help="write failed requests as 0 ms")

    summ = sub.add_parser("summarize", help="summarize a latency CSV")
    summ.add_argument("--in", dest="path", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "summarize":
        try:
            print(json.dumps(summarize(args.path), indent=2, sort_keys=True))
        except (OSError, MalformedCsv) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        return 0

    try:
        scenario = resolve_scenario(args.scenario)
        overrides = {k: v for k, v in (("backend", args.backend), ("seed", args.seed), ("time_mode", args.time_mode)) if v is not None}
        scenario = replace(scenario, **overrides)
        result = run_scenario(scenario, args.out, paper_zeros=args.paper_zeros)
    except ScenarioInvalid as exc:
        print(f"invalid scenario: {exc}", file=sys.stderr)
        return ScenarioInvalid.exit_code
    except BackendBootFailure as exc:
        print(f"boot failure: {exc}", file=sys.stderr)
        return BackendBootFailure.exit_code
    for name, path in sorted(result.paths.items()):
        print(f"wrote {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
