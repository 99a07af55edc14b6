"""Command-line front end.

    netrig validate <config>
    netrig run <config> -o <dir>
    netrig monolith <config> -o <dir>
    netrig diff <dirA> <dirB> [--include-sync]
    netrig replay <config> -o <dir> -n <k>

Exit status is 0 only on full success. NETRIG_VERBOSE=1 enables debug
logging.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from . import runner
from .config import ConfigError, load_config, validate


def _setup_logging() -> None:
    level = logging.DEBUG if os.environ.get("NETRIG_VERBOSE") else logging.INFO
    logging.basicConfig(level=level, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def _load(path: str):
    try:
        return load_config(path)
    except ConfigError as e:
        for err in e.errors:
            print(f"config error: {err}", file=sys.stderr)
        sys.exit(1)


def _cmd_validate(args) -> int:
    config = _load(args.config)
    errors = validate(config)
    if errors:
        for e in errors:
            print(f"invalid: {e}")
        return 1
    print(f"ok: {config.name} ({len(config.components)} components, "
          f"{len(config.channels)} channels)")
    return 0


def _report(art: runner.RunArtifacts) -> int:
    if art.ok:
        print(f"ok: artifacts in {art.out_dir} ({art.wall_seconds:.1f}s wall)")
        return 0
    print(f"failed: {art.error}", file=sys.stderr)
    for name, code in sorted(art.exit_codes.items()):
        if code != 0:
            print(f"  {name}: exit {code}", file=sys.stderr)
    return 1


def _cmd_run(args) -> int:
    config = _load(args.config)
    try:
        art = runner.run(config, args.out, trace_sync=args.trace_sync,
                         watchdog_s=args.watchdog)
    except (ConfigError, runner.RunError) as e:
        print(f"failed: {e}", file=sys.stderr)
        return 1
    return _report(art)


def _cmd_monolith(args) -> int:
    config = _load(args.config)
    try:
        art = runner.monolith(config, args.out)
    except ConfigError as e:
        print(f"failed: {e}", file=sys.stderr)
        return 1
    return _report(art)


def _cmd_diff(args) -> int:
    div = runner.diff_traces(args.dir_a, args.dir_b, include_sync=args.include_sync)
    if div is None:
        print("identical")
        return 0
    print(div)
    return 1


def _cmd_replay(args) -> int:
    config = _load(args.config)
    try:
        arts, div = runner.replay(config, args.out, args.n, trace_sync=args.trace_sync)
    except (ConfigError, runner.RunError) as e:
        print(f"failed: {e}", file=sys.stderr)
        return 1
    bad = [a for a in arts if not a.ok]
    if bad:
        return _report(bad[0])
    if div is not None:
        print(f"nondeterministic: {div}", file=sys.stderr)
        return 1
    print(f"deterministic: {len(arts)} runs byte-identical")
    return 0


def main(argv=None) -> int:
    _setup_logging()
    ap = argparse.ArgumentParser(prog="netrig")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("validate", help="check a config without running")
    p.add_argument("config")
    p.set_defaults(fn=_cmd_validate)

    p = sub.add_parser("run", help="run all components as processes")
    p.add_argument("config")
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--trace-sync", action="store_true")
    p.add_argument("--watchdog", type=float, default=runner.DEFAULT_WATCHDOG_S)
    p.set_defaults(fn=_cmd_run)

    p = sub.add_parser("monolith", help="single-process reference run")
    p.add_argument("config")
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(fn=_cmd_monolith)

    p = sub.add_parser("diff", help="compare canonical traces of two runs")
    p.add_argument("dir_a")
    p.add_argument("dir_b")
    p.add_argument("--include-sync", action="store_true")
    p.set_defaults(fn=_cmd_diff)

    p = sub.add_parser("replay", help="k runs plus all-pairs trace diff")
    p.add_argument("config")
    p.add_argument("-o", "--out", required=True)
    p.add_argument("-n", type=int, default=5)
    p.add_argument("--trace-sync", action="store_true")
    p.set_defaults(fn=_cmd_replay)

    args = ap.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
