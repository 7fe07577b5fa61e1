"""Command-line entry point: ``foundry save|load|inspect|diff|bench``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from foundry import pipeline
from foundry.errors import FoundryError
from foundry.workload import load_spec


def _int(text):
    return int(text, 0)


def build_parser():
    parser = argparse.ArgumentParser(prog="foundry", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log pipeline steps")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("save", help="run warmup and capture once, write an archive")
    p.add_argument("--workload", required=True, help="preset name or key = value spec file")
    p.add_argument("--out", required=True, help="archive path")
    p.add_argument("--packed", action="store_true", help="write a single packed file instead of a directory")
    p.add_argument("--json", action="store_true", help="also write a JSON mirror of every graph")

    p = sub.add_parser("load", help="reconstruct a serving context from an archive")
    p.add_argument("--archive", required=True)
    p.add_argument("--rank", type=int, default=0)
    p.add_argument("--world", type=int, default=1)
    p.add_argument("--no-prealloc", action="store_true", help="map allocations one by one (debug)")
    p.add_argument("--replay-all", action="store_true", help="serve and replay every batch size")
    p.add_argument("--base", type=_int, default=None, help="override the allocator base (debug)")

    p = sub.add_parser("inspect", help="summarize an archive")
    p.add_argument("archive")

    p = sub.add_parser("diff", help="compare two archives structurally")
    p.add_argument("a")
    p.add_argument("b")

    p = sub.add_parser("bench", help="measure save, templated load or naive rebuild")
    p.add_argument("--workload", required=True)
    p.add_argument("--mode", choices=("save", "load", "naive"), default="load")
    return parser


def _cmd_save(args):
    spec = load_spec(args.workload)
    saved = pipeline.save(spec, args.out, packed=args.packed, json_graphs=args.json)
    g = saved.grouping
    print(
        f"saved {g.total} graphs ({g.template_count} templates, {len(saved.catalog.binaries)} binaries) to {args.out}"
    )
    return 0


def _cmd_load(args):
    opts = pipeline.LoadOptions(rank=args.rank, world=args.world, prealloc=not args.no_prealloc, base_override=args.base)
    inst = pipeline.load(args.archive, opts)
    c = inst.load_counters
    print(
        f"rank {inst.rank}/{inst.world}: {inst.grouping.template_count} templates ready in "
        f"{inst.timings['total'] * 1000:.1f} ms"
    )
    print("load counters: " + ", ".join(f"{k}={v}" for k, v in c.items()))
    if args.replay_all:
        traces = inst.replay_all()
        after = inst.counters()
        print(f"replayed {len(traces)} batch sizes, {after['update'] - c['update']} in-place updates")
    return 0


def _cmd_inspect(args):
    print(pipeline.inspect(args.archive))
    return 0


def _cmd_diff(args):
    lines = pipeline.diff_archives(args.a, args.b)
    for line in lines:
        print(line)
    return 1 if lines else 0


def _cmd_bench(args):
    metrics = pipeline.bench(load_spec(args.workload), args.mode)
    print(json.dumps(metrics, indent=2, sort_keys=True))
    return 0


COMMANDS = {
    "save": _cmd_save,
    "load": _cmd_load,
    "inspect": _cmd_inspect,
    "diff": _cmd_diff,
    "bench": _cmd_bench,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except FoundryError as exc:
        print(f"foundry {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        print(f"foundry {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
