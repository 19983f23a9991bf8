#!/usr/bin/env python3
"""Regenerate the committed scenario fixtures and their golden outputs.

For every named scenario this writes:
  fixtures/<name>.jsonl            the replayable event trace
  fixtures/<name>.kpi.csv          the matching KPI series
  fixtures/golden/<name>/*.jsonl   canonical store export after replay
  fixtures/golden/<name>/manifest.json   per-table row counts
  fixtures/golden/<name>/report.json     tracking report on the suggested ranges

Goldens are frozen once and diffed by the test suite; regenerate only when
the collection semantics intentionally change, and re-review the diffs.
"""

import json
import os
import sys
import tempfile

REPO = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.insert(0, os.path.join(REPO, "src"))

from prismlike import scenarios
from prismlike.analyzer import Range, selective_thread_tracking
from prismlike.collector import ReplaySource, SessionConfig, run_session
from prismlike.store import MetricStore
from prismlike.traceio import write_trace


def main() -> int:
    fixtures = os.path.join(REPO, "fixtures")
    os.makedirs(os.path.join(fixtures, "golden"), exist_ok=True)
    for name in sorted(scenarios.SCENARIOS):
        bundle = scenarios.build(name)
        trace_path = os.path.join(fixtures, f"{name}.jsonl")
        write_trace(bundle.events, trace_path)
        with open(os.path.join(fixtures, f"{name}.kpi.csv"), "w") as fh:
            fh.write(bundle.kpi_csv)
        golden_dir = os.path.join(fixtures, "golden", name)
        os.makedirs(golden_dir, exist_ok=True)
        with tempfile.TemporaryDirectory() as td:
            db = os.path.join(td, f"{name}.db3")
            summary = run_session(SessionConfig(ReplaySource(trace_path), db))
            with MetricStore.open_ro(db) as store:
                store.export_ndjson(golden_dir)
                manifest = {"row_counts": store.row_counts(),
                            "windows_flushed": summary.windows_flushed,
                            "threads_seen": summary.threads_seen,
                            "discovery_edges": summary.discovery_edges,
                            "events": summary.events_ingested}
                report = selective_thread_tracking(
                    store, Range(*bundle.baseline), Range(*bundle.compare),
                    tgids=bundle.tgids)
                with open(os.path.join(golden_dir, "report.json"), "w") as fh:
                    fh.write(report.to_json_str(store))
                    fh.write("\n")
        with open(os.path.join(golden_dir, "manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
        print(f"{name}: {manifest['events']} events, "
              f"{manifest['row_counts']}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
