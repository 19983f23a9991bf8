#!/usr/bin/env python3
"""End-to-end demo: replay the lock-contention fixture, run selective thread
tracking, and print a human-readable account of the propagation path."""

import os
import sys
import tempfile

REPO = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.insert(0, os.path.join(REPO, "src"))

from prismlike.analyzer import Range, selective_thread_tracking
from prismlike.collector import ReplaySource, SessionConfig, run_session
from prismlike.graph import build_thread_graph, resource_aliases, thread_aliases
from prismlike.scenarios import BASELINE_RANGE, COMPARE_RANGE
from prismlike.store import MetricStore


def main() -> int:
    trace = os.path.join(REPO, "fixtures", "lock_contention.jsonl")
    if not os.path.exists(trace):
        print("run scripts/make_fixtures.py first", file=sys.stderr)
        return 1
    with tempfile.TemporaryDirectory() as td:
        db = os.path.join(td, "lock.db3")
        summary = run_session(SessionConfig(ReplaySource(trace), db))
        print(f"replayed {summary.events_ingested} events into "
              f"{summary.windows_flushed} windows")
        with MetricStore.open_ro(db) as store:
            base, comp = Range(*BASELINE_RANGE), Range(*COMPARE_RANGE)
            report = selective_thread_tracking(store, base, comp, tgids=[100])
            taliases = thread_aliases(store, base.start_ns, comp.end_ns)
            raliases = resource_aliases(store, base.start_ns, comp.end_ns)
            print(f"entry threads: "
                  f"{[taliases.get(t.tid) for t in report.tracked.t_entry]}")
            for flag in report.flagged_chain:
                talias = taliases.get(flag.thread.tid, flag.thread.tid)
                res = ""
                if flag.resource is not None:
                    from prismlike.model import bri_key
                    res = f" on {raliases.get(bri_key(flag.resource), '?')}"
                print(f"  iteration {flag.iteration}: {talias} "
                      f"({flag.thread.comm}) {flag.metric.value}{res} "
                      f"{flag.shift.direction}, p={flag.shift.p_value:.2e}, "
                      f"d={flag.shift.cohens_d:.2f}")
            g = build_thread_graph(store, comp.start_ns, comp.end_ns, [100])
            print(f"thread graph: {len(g.nodes)} nodes, {len(g.edges)} edges")
    return 0


if __name__ == "__main__":
    sys.exit(main())
