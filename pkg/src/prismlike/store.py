"""Single-file metric database (*.db3) with a templated query surface.

Tables hold window-start timestamps (`ts`), per-thread scheduler state times,
per-(thread, resource) waits, futex wakes, epoll-to-file waits, device IO,
process metadata and discovery edges. Views expose `pid` (= tgid) so query
templates read naturally. Writers append; duplicate keys are conflicts. Every
table exports to newline-delimited JSON for cross-run diffing.
"""

from __future__ import annotations

import json
import os
import re
import sqlite3
from dataclasses import dataclass
from importlib import resources
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

from .model import (
    WINDOW_NS, BlockDev, Bri, DiscoveryEdge, MetricKind, MetricSample,
    ProcessMeta, SocketTuple, bri_key,
)

SCHEMA_VERSION = 1


class StoreError(Exception):
    pass


class ConflictError(StoreError):
    pass


class UnknownTemplate(StoreError):
    pass


class InvalidBinding(StoreError):
    pass


_SCHEMA = """
CREATE TABLE task_samples (
    ts INTEGER NOT NULL,
    tgid INTEGER NOT NULL,
    tid INTEGER NOT NULL,
    comm TEXT NOT NULL DEFAULT '',
    runtime_ns INTEGER NOT NULL DEFAULT 0,
    rq_time_ns INTEGER NOT NULL DEFAULT 0,
    sleep_time_ns INTEGER NOT NULL DEFAULT 0,
    block_time_ns INTEGER NOT NULL DEFAULT 0,
    iowait_time_ns INTEGER NOT NULL DEFAULT 0,
    blkio_share REAL NOT NULL DEFAULT 0.0,
    PRIMARY KEY (ts, tid)
);
CREATE TABLE resource_waits (
    ts INTEGER NOT NULL,
    tgid INTEGER NOT NULL,
    tid INTEGER NOT NULL,
    res_kind TEXT NOT NULL,
    bri_key TEXT NOT NULL,
    wait_ns INTEGER NOT NULL DEFAULT 0,
    wait_count INTEGER NOT NULL DEFAULT 0,
    PRIMARY KEY (ts, tid, res_kind, bri_key)
);
CREATE TABLE futex_wakes (
    ts INTEGER NOT NULL,
    tgid INTEGER NOT NULL,
    tid INTEGER NOT NULL,
    bri_key TEXT NOT NULL,
    wake_count INTEGER NOT NULL,
    PRIMARY KEY (ts, tid, bri_key)
);
CREATE TABLE epoll_file_waits (
    ts INTEGER NOT NULL,
    epoll_key TEXT NOT NULL,
    bri_key TEXT NOT NULL,
    wait_ns INTEGER NOT NULL,
    PRIMARY KEY (ts, epoll_key, bri_key)
);
CREATE TABLE device_io (
    ts INTEGER NOT NULL,
    tgid INTEGER NOT NULL,
    tid INTEGER NOT NULL,
    dev_major INTEGER NOT NULL,
    dev_minor INTEGER NOT NULL,
    sectors INTEGER NOT NULL,
    PRIMARY KEY (ts, tid, dev_major, dev_minor)
);
CREATE TABLE processes (
    tgid INTEGER PRIMARY KEY,
    comm TEXT NOT NULL DEFAULT '',
    first_seen INTEGER NOT NULL,
    parent_tgid INTEGER
);
CREATE TABLE discovery_edges (
    from_tgid INTEGER NOT NULL,
    to_tgid INTEGER NOT NULL,
    bri_key TEXT NOT NULL,
    first_seen INTEGER NOT NULL,
    PRIMARY KEY (from_tgid, to_tgid, bri_key)
);
CREATE TABLE meta (
    key TEXT PRIMARY KEY,
    value TEXT NOT NULL
);
CREATE VIEW taskstats_view AS
    SELECT ts, tgid AS pid, tid, comm, runtime_ns, rq_time_ns, sleep_time_ns,
           block_time_ns, iowait_time_ns, blkio_share
    FROM task_samples;
CREATE VIEW waits_view AS
    SELECT ts, tgid AS pid, tid, res_kind, bri_key, wait_ns, wait_count
    FROM resource_waits;
CREATE VIEW wakes_view AS
    SELECT ts, tgid AS pid, tid, bri_key, wake_count FROM futex_wakes;
CREATE VIEW epoll_file_view AS
    SELECT ts, epoll_key, bri_key, wait_ns FROM epoll_file_waits;
CREATE VIEW device_io_view AS
    SELECT ts, tgid AS pid, tid, dev_major, dev_minor, sectors FROM device_io;
"""

TABLES = ("task_samples", "resource_waits", "futex_wakes", "epoll_file_waits",
          "device_io", "processes", "discovery_edges")

# interaction tag stored in resource_waits.res_kind: base kind plus the
# direction needed to tell pipe writers from readers in the dynamics graph
_RES_KIND = {
    (MetricKind.PIPE_WAIT_TIME, "read"): "pipe_read",
    (MetricKind.PIPE_WAIT_TIME, "write"): "pipe_write",
    (MetricKind.PIPE_WAIT_TIME, "poll"): "pipe_poll",
    (MetricKind.SOCKET_WAIT_TIME, "recv"): "socket_recv",
    (MetricKind.SOCKET_WAIT_TIME, "send"): "socket_send",
    (MetricKind.SOCKET_WAIT_TIME, "poll"): "socket_poll",
}

PIPE_KINDS = ("pipe_read", "pipe_write", "pipe_poll")
SOCKET_KINDS = ("socket_recv", "socket_send", "socket_poll")


def res_kind_for(metric: MetricKind, dir: Optional[str]) -> str:
    if metric in (MetricKind.PIPE_WAIT_TIME, MetricKind.PIPE_WAIT_COUNT):
        return _RES_KIND[(MetricKind.PIPE_WAIT_TIME, dir or "read")]
    if metric in (MetricKind.SOCKET_WAIT_TIME, MetricKind.SOCKET_WAIT_COUNT):
        return _RES_KIND[(MetricKind.SOCKET_WAIT_TIME, dir or "recv")]
    if metric in (MetricKind.FUTEX_WAIT_TIME, MetricKind.FUTEX_WAIT_COUNT):
        return "futex"
    if metric in (MetricKind.EPOLL_WAIT_TIME, MetricKind.EPOLL_WAIT_COUNT):
        return "epoll"
    raise StoreError(f"{metric.value} does not map to a resource_waits row")


def blkio_shares(rows: Iterable[Tuple[int, int, int, int, int]]) -> Dict[Tuple[int, int], float]:
    """Per-thread share of device traffic within one window.

    rows: (tgid, tid, dev_major, dev_minor, sectors). A thread's share is its
    sectors over the total sectors requested on the same device; threads on
    several devices get the sector-weighted combination.
    """
    per_dev_total: Dict[Tuple[int, int], int] = {}
    per_thread: Dict[Tuple[int, int], Dict[Tuple[int, int], int]] = {}
    for tgid, tid, major, minor, sectors in rows:
        dev = (major, minor)
        per_dev_total[dev] = per_dev_total.get(dev, 0) + sectors
        per_thread.setdefault((tgid, tid), {})
        per_thread[(tgid, tid)][dev] = per_thread[(tgid, tid)].get(dev, 0) + sectors
    shares: Dict[Tuple[int, int], float] = {}
    for key, devs in per_thread.items():
        own = sum(devs.values())
        total = sum(per_dev_total[d] for d in devs)
        shares[key] = (own / total) if total else 0.0
    return shares


@dataclass(frozen=True)
class QueryTemplate:
    name: str
    text: str
    columns: Tuple[str, ...]
    plot: str  # line | histogram | bar


_PLACEHOLDER = re.compile(r"\{\{\s*(\w+)\s*\}\}")

# accepted predicate fragments; anything else is rejected before substitution
_PID_FRAGMENT = re.compile(
    r"^\(?\s*(pid|tgid)\s*(=\s*\d+|\s+[Ii][Nn]\s+\(\s*\d+(\s*,\s*\d+)*\s*\))\s*\)?$")
_TS_FRAGMENT = re.compile(
    r"^\(?\s*ts\s*(>=|<=|>|<)\s*\d+(\s+[Aa][Nn][Dd]\s+ts\s*(>=|<=|>|<)\s*\d+)?\s*\)?$")


def validate_binding(name: str, fragment: str) -> str:
    fragment = fragment.strip()
    if name == "pid_filter":
        if not _PID_FRAGMENT.match(fragment):
            raise InvalidBinding(f"pid_filter must be a pid equality or IN list, got {fragment!r}")
    elif name in ("baseline_filter", "compare_filter"):
        if not _TS_FRAGMENT.match(fragment):
            raise InvalidBinding(f"{name} must be a ts range predicate, got {fragment!r}")
    else:
        raise InvalidBinding(f"unknown placeholder {name!r}")
    if not fragment.startswith("("):
        fragment = f"({fragment})"
    return fragment


def pid_filter_fragment(pids: Sequence[int]) -> str:
    pids = sorted(int(p) for p in pids)
    if len(pids) == 1:
        return f"(pid={pids[0]})"
    return "(pid IN ({}))".format(",".join(str(p) for p in pids))


def range_filter_fragment(start_ns: int, end_ns: int) -> str:
    return f"(ts >= {int(start_ns)} AND ts < {int(end_ns)})"


def _load_templates() -> Dict[str, QueryTemplate]:
    templates = {}
    root = resources.files("prismlike").joinpath("sql")
    for entry in sorted(root.iterdir(), key=lambda e: e.name):
        if not entry.name.endswith(".sql"):
            continue
        text = entry.read_text(encoding="utf-8")
        meta = {"name": entry.name[:-4], "columns": "", "plot": "line"}
        body_lines = []
        for line in text.splitlines():
            m = re.match(r"^--\s*(name|columns|plot):\s*(.+)$", line.strip())
            if m:
                meta[m.group(1)] = m.group(2).strip()
            else:
                body_lines.append(line)
        tpl = QueryTemplate(
            name=meta["name"],
            text="\n".join(body_lines).strip(),
            columns=tuple(c.strip() for c in meta["columns"].split(",") if c.strip()),
            plot=meta["plot"],
        )
        templates[tpl.name] = tpl
    return templates


class MetricStore:
    """One writer or many readers over a single .db3 file."""

    def __init__(self, conn: sqlite3.Connection, writable: bool):
        self._conn = conn
        self._writable = writable
        self._templates: Optional[Dict[str, QueryTemplate]] = None

    # -- lifecycle ------------------------------------------------------------

    @classmethod
    def create(cls, path: str, window_ns: int = WINDOW_NS) -> "MetricStore":
        if os.path.exists(path):
            os.remove(path)
        conn = sqlite3.connect(path)
        conn.executescript(_SCHEMA)
        conn.execute("INSERT INTO meta VALUES ('schema_version', ?)", (str(SCHEMA_VERSION),))
        conn.execute("INSERT INTO meta VALUES ('window_ns', ?)", (str(window_ns),))
        conn.commit()
        return cls(conn, writable=True)

    @classmethod
    def open_ro(cls, path: str) -> "MetricStore":
        if not os.path.exists(path):
            raise StoreError(f"no such store: {path}")
        conn = sqlite3.connect(f"file:{path}?mode=ro", uri=True)
        return cls(conn, writable=False)

    @classmethod
    def open_rw(cls, path: str) -> "MetricStore":
        if not os.path.exists(path):
            raise StoreError(f"no such store: {path}")
        return cls(sqlite3.connect(path), writable=True)

    def close(self) -> None:
        self._conn.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    @property
    def window_ns(self) -> int:
        row = self._conn.execute("SELECT value FROM meta WHERE key='window_ns'").fetchone()
        return int(row[0]) if row else WINDOW_NS

    def set_meta(self, key: str, value: str) -> None:
        self._conn.execute("INSERT OR REPLACE INTO meta VALUES (?, ?)", (key, value))
        self._conn.commit()

    def get_meta(self, key: str) -> Optional[str]:
        row = self._conn.execute("SELECT value FROM meta WHERE key=?", (key,)).fetchone()
        return row[0] if row else None

    # -- append ----------------------------------------------------------------

    def append(self, batch: Iterable[Union[MetricSample, DiscoveryEdge, ProcessMeta]],
               blkio: Optional[Dict[Tuple[int, int], float]] = None) -> None:
        """Write a batch durably. Samples of one (window, thread, resource) are
        merged into their row; re-appending an existing row key is a conflict.

        blkio: optional per-(tgid, tid) device-traffic share stamped onto the
        task rows written by this batch.
        """
        if not self._writable:
            raise StoreError("store opened read-only")
        tasks: Dict[Tuple[int, int], dict] = {}
        waits: Dict[Tuple[int, int, str, str], dict] = {}
        wakes: Dict[Tuple[int, int, str], dict] = {}
        epolls: Dict[Tuple[int, str, str], dict] = {}
        devio: Dict[Tuple[int, int, int, int], dict] = {}
        procs: List[ProcessMeta] = []
        edges: List[DiscoveryEdge] = []
        for item in batch:
            if isinstance(item, MetricSample):
                self._bucket_sample(item, tasks, waits, wakes, epolls, devio)
            elif isinstance(item, DiscoveryEdge):
                edges.append(item)
            elif isinstance(item, ProcessMeta):
                procs.append(item)
            else:
                raise StoreError(f"cannot append {type(item).__name__}")
        if blkio:
            ts_values = ({row["ts"] for row in devio.values()}
                         | {row["ts"] for row in tasks.values()})
            if len(ts_values) > 1:
                raise StoreError("blkio shares apply to a single-window batch")
            if ts_values:
                ts = ts_values.pop()
                for (tgid, tid), share in blkio.items():
                    row = tasks.setdefault((ts, tid), self._task_stub(ts, tgid, tid))
                    row["blkio_share"] = share
        cur = self._conn.cursor()
        try:
            for row in tasks.values():
                cur.execute(
                    "INSERT INTO task_samples VALUES (:ts,:tgid,:tid,:comm,"
                    ":runtime_ns,:rq_time_ns,:sleep_time_ns,:block_time_ns,"
                    ":iowait_time_ns,:blkio_share)", row)
            for row in waits.values():
                cur.execute(
                    "INSERT INTO resource_waits VALUES (:ts,:tgid,:tid,:res_kind,"
                    ":bri_key,:wait_ns,:wait_count)", row)
            for row in wakes.values():
                cur.execute("INSERT INTO futex_wakes VALUES (:ts,:tgid,:tid,:bri_key,:wake_count)", row)
            for row in epolls.values():
                cur.execute("INSERT INTO epoll_file_waits VALUES (:ts,:epoll_key,:bri_key,:wait_ns)", row)
            for row in devio.values():
                cur.execute("INSERT INTO device_io VALUES (:ts,:tgid,:tid,:dev_major,:dev_minor,:sectors)", row)
            for p in procs:
                cur.execute("INSERT INTO processes VALUES (?,?,?,?)",
                            (p.tgid, p.comm, p.first_seen, p.parent_tgid))
            for e in edges:
                cur.execute("INSERT INTO discovery_edges VALUES (?,?,?,?)",
                            (e.from_tgid, e.to_tgid, bri_key(e.via), e.first_seen))
        except sqlite3.IntegrityError as exc:
            self._conn.rollback()
            raise ConflictError(str(exc)) from exc
        self._conn.commit()

    @staticmethod
    def _task_stub(ts: int, tgid: int, tid: int) -> dict:
        return {"ts": ts, "tgid": tgid, "tid": tid, "comm": "",
                "runtime_ns": 0, "rq_time_ns": 0, "sleep_time_ns": 0,
                "block_time_ns": 0, "iowait_time_ns": 0, "blkio_share": 0.0}

    def _bucket_sample(self, s: MetricSample, tasks, waits, wakes, epolls, devio) -> None:
        ts = s.window.start_ns
        m = s.metric
        if m in (MetricKind.RUNTIME, MetricKind.RQ_TIME, MetricKind.SLEEP_TIME,
                 MetricKind.BLOCK_TIME, MetricKind.IOWAIT_TIME):
            row = tasks.setdefault((ts, s.thread.tid),
                                   self._task_stub(ts, s.thread.tgid, s.thread.tid))
            row["comm"] = row["comm"] or s.thread.comm
            col = {MetricKind.RUNTIME: "runtime_ns", MetricKind.RQ_TIME: "rq_time_ns",
                   MetricKind.SLEEP_TIME: "sleep_time_ns",
                   MetricKind.BLOCK_TIME: "block_time_ns",
                   MetricKind.IOWAIT_TIME: "iowait_time_ns"}[m]
            row[col] += s.value
        elif m is MetricKind.SECTOR_COUNT:
            dev = s.resource
            assert isinstance(dev, BlockDev)
            key = (ts, s.thread.tid, dev.major, dev.minor)
            row = devio.setdefault(key, {"ts": ts, "tgid": s.thread.tgid,
                                         "tid": s.thread.tid, "dev_major": dev.major,
                                         "dev_minor": dev.minor, "sectors": 0})
            row["sectors"] += s.value
        elif m is MetricKind.FUTEX_WAKE_COUNT:
            key = (ts, s.thread.tid, bri_key(s.resource))
            row = wakes.setdefault(key, {"ts": ts, "tgid": s.thread.tgid,
                                         "tid": s.thread.tid,
                                         "bri_key": bri_key(s.resource), "wake_count": 0})
            row["wake_count"] += s.value
        elif m is MetricKind.EPOLL_FILE_WAIT:
            key = (ts, bri_key(s.epoll), bri_key(s.resource))
            row = epolls.setdefault(key, {"ts": ts, "epoll_key": bri_key(s.epoll),
                                          "bri_key": bri_key(s.resource), "wait_ns": 0})
            row["wait_ns"] += s.value
        else:
            kind = res_kind_for(m, s.dir)
            key = (ts, s.thread.tid, kind, bri_key(s.resource))
            row = waits.setdefault(key, {"ts": ts, "tgid": s.thread.tgid,
                                         "tid": s.thread.tid, "res_kind": kind,
                                         "bri_key": bri_key(s.resource),
                                         "wait_ns": 0, "wait_count": 0})
            if m.is_time:
                row["wait_ns"] += s.value
            else:
                row["wait_count"] += s.value

    # -- derived ---------------------------------------------------------------

    def derive_blkio_share(self, window_start_ns: int) -> Dict[Tuple[int, int], float]:
        """Per-thread share of device sector traffic in one window (0 if idle)."""
        rows = self._conn.execute(
            "SELECT tgid, tid, dev_major, dev_minor, sectors FROM device_io WHERE ts=?",
            (window_start_ns,)).fetchall()
        return blkio_shares(rows)

    # -- raw reads ---------------------------------------------------------------

    def sql(self, query: str, params: Sequence = ()) -> List[tuple]:
        return self._conn.execute(query, params).fetchall()

    def row_counts(self) -> Dict[str, int]:
        return {t: self._conn.execute(f"SELECT COUNT(*) FROM {t}").fetchone()[0]
                for t in TABLES}

    # -- templates ----------------------------------------------------------------

    def templates(self) -> Dict[str, QueryTemplate]:
        if self._templates is None:
            self._templates = _load_templates()
        return self._templates

    def query(self, template: Union[str, QueryTemplate],
              bindings: Dict[str, str]) -> List[tuple]:
        """Run a registered template with validated predicate fragments.

        Binding values are restricted predicate fragments (pid equality or ts
        range); arbitrary text never reaches the SQL engine.
        """
        if isinstance(template, str):
            tpl = self.templates().get(template)
            if tpl is None:
                raise UnknownTemplate(template)
        else:
            tpl = template
        needed = set(_PLACEHOLDER.findall(tpl.text))
        missing = needed - set(bindings)
        if missing:
            raise InvalidBinding(f"missing bindings: {sorted(missing)}")
        validated = {name: validate_binding(name, bindings[name]) for name in needed}
        sql = _PLACEHOLDER.sub(lambda m: validated[m.group(1)], tpl.text)
        return self._conn.execute(sql).fetchall()

    # -- export -----------------------------------------------------------------

    def export_ndjson(self, outdir: str) -> Dict[str, str]:
        """Write one canonical newline-delimited JSON file per table.

        Rows are sorted by primary key and serialized with sorted keys, so two
        replays of the same trace export byte-identical files.
        """
        os.makedirs(outdir, exist_ok=True)
        written = {}
        for table in TABLES:
            cols = [r[1] for r in self._conn.execute(f"PRAGMA table_info({table})")]
            rows = self._conn.execute(
                f"SELECT {', '.join(cols)} FROM {table}").fetchall()
            dicts = sorted((dict(zip(cols, row)) for row in rows),
                           key=lambda d: json.dumps(d, sort_keys=True, default=str))
            path = os.path.join(outdir, f"{table}.jsonl")
            with open(path, "w", encoding="utf-8") as fh:
                for d in dicts:
                    fh.write(json.dumps(d, sort_keys=True, separators=(",", ":")))
                    fh.write("\n")
            written[table] = path
        return written
