"""Session driver: feeds events from a trace or from live probes into the
metric engine, discovers communicating processes transitively, and persists
everything into a metric store.

Replay determinism: virtual time is the trace's own timestamps; a window is
flushed when the first event at or past its end arrives, and the tail flushes
at stream end. Replaying one trace twice produces identical store exports.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Set, Tuple, Union

from .engine import MetricEngine
from .model import (
    WINDOW_NS, Bri, DiscoveryEdge, KernelEvent, MetricKind, MetricSample,
    ProcessMeta, SockAccess, SocketFamily, SocketTuple, ThreadRef, VfsAccess,
    bri_key,
)
from .store import MetricStore, blkio_shares
from .traceio import read_trace

EXTERNAL_TGID_BASE = -1000  # synthetic ids for off-host endpoints, descending


class SessionError(Exception):
    pass


class ProbeLoadError(SessionError):
    """Raised when live probes cannot be loaded (privileges, kernel, backend)."""


@dataclass(frozen=True)
class ReplaySource:
    trace_path: str


@dataclass(frozen=True)
class LiveSource:
    bootstrap_pids: Tuple[int, ...]
    duration_s: Optional[float] = None

    def __post_init__(self):
        if not self.bootstrap_pids:
            raise SessionError("live sessions need at least one bootstrap pid")


@dataclass(frozen=True)
class SessionConfig:
    source: Union[ReplaySource, LiveSource]
    output_db_path: str
    window_ns: int = WINDOW_NS
    max_bris_per_thread: int = 128


@dataclass
class SessionSummary:
    windows_flushed: int = 0
    threads_seen: int = 0
    discovery_edges: int = 0
    events_ingested: int = 0
    events_dropped: int = 0
    output_db_path: str = ""


# ---------------------------------------------------------------------------
# Transitive process discovery
# ---------------------------------------------------------------------------

@dataclass
class _Touch:
    tgid: int
    first_ts: int
    remote: Optional[str] = None


class DiscoveryTracker:
    """Watches IPC-capable resources (FIFOs, sockets) and links the processes
    that share them. With a monitored set, newly linked processes join it;
    without one, every process counts as monitored.

    Internet sockets that only ever see one local process are classified as
    external dependencies when the session ends.
    """

    def __init__(self, monitored: Optional[Set[int]] = None):
        self.monitored = monitored
        self._touches: Dict[str, List[_Touch]] = {}
        self._edges: Dict[Tuple[int, int, str], DiscoveryEdge] = {}
        self._bris: Dict[str, Bri] = {}

    def is_monitored(self, tgid: int) -> bool:
        return self.monitored is None or tgid in self.monitored

    def observe(self, ev: KernelEvent) -> List[DiscoveryEdge]:
        body = ev.body
        if isinstance(body, VfsAccess):
            if body.file_kind != "fifo":
                return []
            bri, remote = body.bri, None
        elif isinstance(body, SockAccess):
            bri, remote = body.bri, body.remote
        else:
            return []
        key = bri_key(bri)
        self._bris[key] = bri
        touches = self._touches.setdefault(key, [])
        tgid = ev.thread.tgid
        mine = next((t for t in touches if t.tgid == tgid), None)
        if mine is None:
            mine = _Touch(tgid, ev.ts, remote)
            touches.append(mine)
        elif remote is not None:
            mine.remote = remote
        new_edges = []
        for other in touches:
            if other.tgid == tgid:
                continue
            edge = self._link(bri, ev.ts, tgid, other.tgid)
            if edge is not None:
                new_edges.append(edge)
        return new_edges

    def _link(self, bri: Bri, ts: int, a: int, b: int) -> Optional[DiscoveryEdge]:
        if not (self.is_monitored(a) or self.is_monitored(b)):
            return None
        # edge points from the already-monitored party to its counterpart
        if self.is_monitored(a) and not self.is_monitored(b):
            frm, to = a, b
        elif self.is_monitored(b) and not self.is_monitored(a):
            frm, to = b, a
        else:
            earlier = min(self._touches[bri_key(bri)], key=lambda t: t.first_ts)
            frm, to = (earlier.tgid, b if earlier.tgid == a else a)
        if self.monitored is not None:
            self.monitored.update((a, b))
        edge_key = (frm, to, bri_key(bri))
        if edge_key in self._edges:
            return None
        edge = DiscoveryEdge(frm, to, bri, ts)
        self._edges[edge_key] = edge
        return edge

    def finalize_external(self) -> Tuple[List[DiscoveryEdge], List[ProcessMeta]]:
        """Turn single-process inet sockets into edges to synthetic external
        endpoints (negative tgids), deterministically ordered."""
        candidates = []
        for key, touches in sorted(self._touches.items()):
            bri = self._bris[key]
            if not isinstance(bri, SocketTuple):
                continue
            if bri.family not in (SocketFamily.INET4, SocketFamily.INET6):
                continue
            if len(touches) != 1:
                continue
            touch = touches[0]
            if not self.is_monitored(touch.tgid):
                continue
            endpoint = touch.remote or bri.b
            candidates.append((touch.first_ts, endpoint, touch.tgid, bri))
        candidates.sort(key=lambda c: (c[0], c[1], c[2]))
        endpoint_ids: Dict[str, int] = {}
        procs, edges = [], []
        for first_ts, endpoint, tgid, bri in candidates:
            if endpoint not in endpoint_ids:
                endpoint_ids[endpoint] = EXTERNAL_TGID_BASE - len(endpoint_ids)
                procs.append(ProcessMeta(endpoint_ids[endpoint],
                                         f"external:{endpoint}", first_ts))
            ext = endpoint_ids[endpoint]
            if (tgid, ext, bri_key(bri)) not in self._edges:
                edge = DiscoveryEdge(tgid, ext, bri, first_ts)
                self._edges[(tgid, ext, bri_key(bri))] = edge
                edges.append(edge)
        return edges, procs

    @property
    def edge_count(self) -> int:
        return len(self._edges)


def discover(event: KernelEvent, monitored: Set[int],
             tracker: Optional[DiscoveryTracker] = None,
             ) -> Tuple[Optional[DiscoveryEdge], DiscoveryTracker]:
    """Single-event discovery step over a caller-owned monitored set.

    Returns the newly created edge (if the event linked a monitored process to
    an unmonitored counterpart, which is then added to the set) and the tracker
    to pass back in for subsequent events.
    """
    if tracker is None:
        tracker = DiscoveryTracker(monitored)
    edges = tracker.observe(event)
    return (edges[0] if edges else None), tracker


# ---------------------------------------------------------------------------
# Window assembly shared by replay and live ingestion
# ---------------------------------------------------------------------------

class _WindowWriter:
    def __init__(self, store: MetricStore):
        self.store = store
        self.comms: Dict[int, ThreadRef] = {}
        self.process_first_seen: Dict[int, Tuple[int, str]] = {}

    def register_thread(self, thread: ThreadRef, ts: int) -> None:
        # first sighting wins; labels stay stable for the whole session
        self.comms.setdefault(thread.tid, thread)
        if thread.tgid not in self.process_first_seen:
            comm = thread.comm if thread.tid == thread.tgid else thread.comm
            self.process_first_seen[thread.tgid] = (ts, comm)
        elif thread.tid == thread.tgid:
            ts0, _ = self.process_first_seen[thread.tgid]
            self.process_first_seen[thread.tgid] = (ts0, thread.comm)

    def canonical(self, sample: MetricSample) -> MetricSample:
        if sample.thread is None:
            return sample
        stable = self.comms.get(sample.thread.tid)
        if stable is None or stable.comm == sample.thread.comm:
            return sample
        return MetricSample(window=sample.window, metric=sample.metric,
                            value=sample.value, thread=stable,
                            resource=sample.resource, epoll=sample.epoll,
                            dir=sample.dir)

    def write(self, samples: List[MetricSample],
              edges: List[DiscoveryEdge]) -> None:
        if not samples and not edges:
            return
        samples = [self.canonical(s) for s in samples]
        by_window: Dict[int, List[MetricSample]] = {}
        for s in samples:
            by_window.setdefault(s.window.start_ns, []).append(s)
        remaining_edges = list(edges)
        for ts in sorted(by_window):
            batch = by_window[ts]
            dev_rows = [(s.thread.tgid, s.thread.tid, s.resource.major,
                         s.resource.minor, s.value)
                        for s in batch if s.metric is MetricKind.SECTOR_COUNT]
            shares = blkio_shares(dev_rows) if dev_rows else None
            self.store.append(batch + remaining_edges, blkio=shares)
            remaining_edges = []
        if remaining_edges:
            self.store.append(remaining_edges)

    def write_processes(self, extra: List[ProcessMeta]) -> None:
        procs = [ProcessMeta(tgid, comm, ts)
                 for tgid, (ts, comm) in sorted(self.process_first_seen.items())]
        self.store.append(procs + extra)


# ---------------------------------------------------------------------------
# Sessions
# ---------------------------------------------------------------------------

def run_session(config: SessionConfig, probe_backend=None) -> SessionSummary:
    if isinstance(config.source, ReplaySource):
        return _run_replay(config)
    return _run_live(config, probe_backend)


def _run_replay(config: SessionConfig) -> SessionSummary:
    events = read_trace(config.source.trace_path)
    store = MetricStore.create(config.output_db_path, config.window_ns)
    engine = MetricEngine(config.window_ns)
    tracker = DiscoveryTracker(monitored=None)
    writer = _WindowWriter(store)
    pending_edges: List[DiscoveryEdge] = []
    summary = SessionSummary(output_db_path=config.output_db_path)
    for ev in events:
        writer.register_thread(ev.thread, ev.ts)
        pending_edges.extend(tracker.observe(ev))
        flushed = engine.observe(ev)
        if flushed:
            writer.write(flushed, pending_edges)
            pending_edges = []
    tail = engine.end_of_stream()
    ext_edges, ext_procs = tracker.finalize_external()
    writer.write(tail, pending_edges + ext_edges)
    writer.write_processes(ext_procs)
    store.set_meta("source", "replay")
    store.set_meta("trace_path", os.path.basename(config.source.trace_path))
    store.close()
    summary.windows_flushed = engine.windows_flushed
    summary.threads_seen = engine.threads_seen
    summary.discovery_edges = tracker.edge_count
    summary.events_ingested = len(events)
    summary.events_dropped = engine.diagnostics.total_dropped()
    return summary


def _run_live(config: SessionConfig, backend) -> SessionSummary:
    from . import probes  # local import: live-only dependency

    source = config.source
    if backend is None:
        backend = probes.load_default_backend()
    if backend.layout_version() != probes.MAP_LAYOUT_VERSION:
        raise ProbeLoadError(
            f"probe map layout {backend.layout_version()} does not match "
            f"collector layout {probes.MAP_LAYOUT_VERSION}")
    store = MetricStore.create(config.output_db_path, config.window_ns)
    writer = _WindowWriter(store)
    decoder = probes.SnapshotDecoder(config.window_ns)
    monitored: Set[int] = set(source.bootstrap_pids)
    backend.set_monitored(monitored)
    summary = SessionSummary(output_db_path=config.output_db_path)
    edge_keys: Set[Tuple[int, int, str]] = set()
    ext_procs: List[ProcessMeta] = []
    known_ext: Set[int] = set()
    for win_start in backend.ticks():
        edges: List[DiscoveryEdge] = []
        for raw in backend.poll_records():
            rec = probes.decode_ring_record(raw)
            if isinstance(rec, probes.BriInternRecord):
                decoder.intern(rec)
            elif isinstance(rec, probes.ThreadMetaRecord):
                decoder.register_thread(rec)
                writer.register_thread(
                    ThreadRef(rec.tid, rec.tgid, rec.comm), rec.ts)
            elif isinstance(rec, probes.DiscoveryRecord):
                edge = rec.edge
                if edge.to_tgid > 0:
                    monitored.update((edge.from_tgid, edge.to_tgid))
                    backend.set_monitored(monitored)
                elif edge.to_tgid not in known_ext:
                    known_ext.add(edge.to_tgid)
                    ext_procs.append(ProcessMeta(
                        edge.to_tgid, f"external:{rec.endpoint}", edge.first_seen))
                key = (edge.from_tgid, edge.to_tgid, bri_key(edge.via))
                if key not in edge_keys:
                    edge_keys.add(key)
                    edges.append(edge)
        snaps = {name: backend.snapshot_and_reset(name)
                 for name in probes.MAP_LAYOUTS}
        samples = decoder.decode_window(win_start, snaps)
        writer.write(samples, edges)
        summary.windows_flushed += 1
    writer.write_processes(ext_procs)
    store.set_meta("source", "live")
    store.close()
    summary.threads_seen = len(writer.comms)
    summary.discovery_edges = len(edge_keys)
    return summary
