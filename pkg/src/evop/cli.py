"""``evop`` command line.

Exit codes: 0 success, 1 validation failure (bad input, divergent traces),
2 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace

from evop.broker import inspect_cache
from evop.errors import CorruptCache, EvopError, ParseError, UnreadableTrace, ValidationError
from evop.harness import diff_traces, run_scenario
from evop.library import ModelLibrary, read_descriptors
from evop.scenario import BUNDLED, bundled_scenario, load_config, parse_scenario

EXIT_OK, EXIT_INVALID, EXIT_INTERNAL = 0, 1, 2


def _sim_run(args) -> int:
    if args.scenario.startswith("bundled:"):
        name = args.scenario.split(":", 1)[1]
        if name not in BUNDLED:
            print(f"unknown bundled scenario {name!r}; choose from {', '.join(BUNDLED)}", file=sys.stderr)
            return EXIT_INVALID
        spec = bundled_scenario(name)
    else:
        spec = parse_scenario(args.scenario)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    report = run_scenario(spec, trace_path=args.trace)
    text = report.to_json()
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _sim_diff(args) -> int:
    result = diff_traces(args.a, args.b)
    if result.equal:
        print("traces are identical")
        return EXIT_OK
    print(f"first divergence at line {result.line}")
    print(f"< {result.left if result.left is not None else '<end of file>'}")
    print(f"> {result.right if result.right is not None else '<end of file>'}")
    return EXIT_INVALID


def _library_path(args) -> str:
    return args.library or load_config().library_path


def _library_ls(args) -> int:
    lib = ModelLibrary.load(_library_path(args))
    for d in lib.list_images():
        print(f"{d.image_id}\tv{d.version}\t{d.model_class.value}\tmax_sessions={d.max_sessions}\t"
              f"{','.join(sorted(d.model_ids))}")
    return EXIT_OK


def _library_register(args) -> int:
    lib = ModelLibrary.load(_library_path(args))
    for d in read_descriptors(args.file):
        image_id, version = lib.register_image(d)
        print(f"registered {image_id} v{version}")
    return EXIT_OK


def _broker_recover(args) -> int:
    try:
        sessions, report = inspect_cache(args.cache)
    except FileNotFoundError:
        print(f"{args.cache}: no such file", file=sys.stderr)
        return EXIT_INVALID
    out = {
        "records": report.records,
        "valid_bytes": report.valid_bytes,
        "total_bytes": report.total_bytes,
        "truncated": report.truncated,
        "reason": report.reason,
        "sessions": [s.to_dict() for s in sessions],
    }
    print(json.dumps(out, sort_keys=True, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evop", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="group", required=True)

    sim = sub.add_parser("sim", help="run and compare simulations").add_subparsers(dest="cmd", required=True)
    run = sim.add_parser("run", help="run a scenario file (or bundled:<name>)")
    run.add_argument("--scenario", required=True)
    run.add_argument("--seed", type=int)
    run.add_argument("--trace")
    run.add_argument("--report")
    run.set_defaults(func=_sim_run)
    diff = sim.add_parser("diff", help="report the first divergent trace line")
    diff.add_argument("a")
    diff.add_argument("b")
    diff.set_defaults(func=_sim_diff)

    lib = sub.add_parser("library", help="inspect or extend the model library")
    lib.add_argument("--library", help="registry file (default: from EVOP_CONFIG)")
    lib_sub = lib.add_subparsers(dest="cmd", required=True)
    lib_sub.add_parser("ls").set_defaults(func=_library_ls)
    reg = lib_sub.add_parser("register")
    reg.add_argument("--file", required=True)
    reg.set_defaults(func=_library_register)

    broker = sub.add_parser("broker").add_subparsers(dest="cmd", required=True)
    rec = broker.add_parser("recover", help="inspect an Active Sessions cache offline")
    rec.add_argument("--cache", required=True)
    rec.set_defaults(func=_broker_recover)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ValidationError as exc:
        for problem in exc.errors:
            print(f"error: {problem}", file=sys.stderr)
        return EXIT_INVALID
    except (ParseError, UnreadableTrace, CorruptCache) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except EvopError as exc:
        print(f"error: {exc.code}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001
        logging.getLogger("evop").exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
