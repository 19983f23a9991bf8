"""Operator command line: record, replay, analyze, export, serve.

Exit codes: 0 success, 1 usage error, 2 runtime failure, 3 environment or
privilege failure. Options fall back to PRISMLIKE_* environment variables,
then to built-in defaults (flags > environment > defaults).
"""

from __future__ import annotations

import argparse
import json
import os
import signal
import sys
from typing import List, Optional

from .analyzer import (
    DEFAULT_ALPHA, DEFAULT_MIN_EFFECT, Range, full_search,
    selective_thread_tracking,
)
from .api import parse_range
from .collector import (
    LiveSource, ProbeLoadError, ReplaySource, SessionConfig, SessionError,
    run_session,
)
from .model import WINDOW_NS
from .store import MetricStore, StoreError
from .traceio import TraceParseError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_ENV = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _env(name: str, default=None):
    return os.environ.get(f"PRISMLIKE_{name}", default)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="prismlike",
                description="thread-dynamics performance degradation diagnosis")
    sub = p.add_subparsers(dest="command", required=True)

    rec = sub.add_parser("record", help="record a live session via kernel probes")
    rec.add_argument("--pids", required=True,
                     help="comma-separated bootstrap process ids")
    rec.add_argument("--out", default=_env("DB"), help="output .db3 path")
    rec.add_argument("--duration", type=float, default=None,
                     help="seconds to record; omit to run until SIGINT")
    rec.add_argument("--window-ns", type=int,
                     default=int(_env("WINDOW_NS", WINDOW_NS)))

    rep = sub.add_parser("replay", help="replay a recorded trace into a store")
    rep.add_argument("--trace", required=True)
    rep.add_argument("--out", default=_env("DB"))
    rep.add_argument("--window-ns", type=int,
                     default=int(_env("WINDOW_NS", WINDOW_NS)))

    ana = sub.add_parser("analyze", help="run selective thread tracking")
    ana.add_argument("--db", default=_env("DB"))
    ana.add_argument("--baseline", required=True, help="seconds, e.g. 5..25")
    ana.add_argument("--compare", required=True, help="seconds, e.g. 35..55")
    ana.add_argument("--pids", default=None,
                     help="comma-separated tgids to restrict tracking to")
    ana.add_argument("--alpha", type=float,
                     default=float(_env("ALPHA", DEFAULT_ALPHA)))
    ana.add_argument("--min-effect", type=float,
                     default=float(_env("MIN_EFFECT", DEFAULT_MIN_EFFECT)))
    ana.add_argument("--full", action="store_true",
                     help="exhaustive search instead of selective tracking")

    exp = sub.add_parser("export", help="dump every table as newline-delimited JSON")
    exp.add_argument("--db", default=_env("DB"))
    exp.add_argument("--out", required=True, help="output directory")

    srv = sub.add_parser("serve", help="serve the read-only HTTP API")
    srv.add_argument("--db", default=_env("DB"))
    srv.add_argument("--host", default=_env("HOST", "127.0.0.1"))
    srv.add_argument("--port", type=int, default=int(_env("PORT", 8501)))
    return p


def _parse_pids(text: Optional[str]) -> Optional[List[int]]:
    if not text:
        return None
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"bad pid list {text!r}")


def _require(value, flag: str):
    if not value:
        raise UsageError(f"{flag} is required (flag or PRISMLIKE_ environment)")
    return value


def cmd_record(args) -> int:
    out = _require(args.out, "--out")
    pids = _parse_pids(args.pids)
    if not pids:
        raise UsageError("--pids must name at least one process")
    if args.duration is not None and args.duration <= 0:
        MetricStore.create(out, args.window_ns).close()
        print(json.dumps({"windows_flushed": 0, "threads_seen": 0,
                          "discovery_edges": 0, "output_db_path": out}))
        return EXIT_OK
    config = SessionConfig(LiveSource(tuple(pids), args.duration), out,
                           window_ns=args.window_ns)
    summary = run_session(config)
    print(json.dumps(summary.__dict__, sort_keys=True))
    return EXIT_OK


def cmd_replay(args) -> int:
    out = _require(args.out, "--out")
    config = SessionConfig(ReplaySource(args.trace), out,
                           window_ns=args.window_ns)
    summary = run_session(config)
    print(json.dumps(summary.__dict__, sort_keys=True))
    return EXIT_OK


def cmd_analyze(args) -> int:
    db = _require(args.db, "--db")
    try:
        baseline = parse_range(args.baseline)
        compare = parse_range(args.compare)
    except ValueError as e:
        raise UsageError(str(e))
    pids = _parse_pids(args.pids)
    with MetricStore.open_ro(db) as store:
        if args.full:
            flags = full_search(store, baseline, compare, pids,
                                args.alpha, args.min_effect)
            print(json.dumps({"flags": [f.to_json() for f in flags]},
                             sort_keys=True, indent=2))
        else:
            report = selective_thread_tracking(store, baseline, compare, pids,
                                               args.alpha, args.min_effect)
            print(report.to_json_str(store))
    return EXIT_OK


def cmd_export(args) -> int:
    db = _require(args.db, "--db")
    with MetricStore.open_ro(db) as store:
        written = store.export_ndjson(args.out)
    print(json.dumps({"tables": written}, sort_keys=True, indent=2))
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    from .api import create_app
    db = _require(args.db, "--db")
    app = create_app(db)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        handler = {"record": cmd_record, "replay": cmd_replay,
                   "analyze": cmd_analyze, "export": cmd_export,
                   "serve": cmd_serve}[args.command]
        return handler(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ProbeLoadError as e:
        print(f"environment error: {e}", file=sys.stderr)
        return EXIT_ENV
    except TraceParseError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (SessionError, StoreError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except KeyboardInterrupt:
        return EXIT_OK  # SIGINT is the documented way to stop a recording


if __name__ == "__main__":
    sys.exit(main())
