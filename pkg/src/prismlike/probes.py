"""Kernel-probe interface: map layouts, ring records and the backend protocol.

The in-kernel component aggregates per-thread/per-resource statistics in maps
whose key/value byte layouts are mirrored here and versioned; a version
mismatch at load time is fatal. Resources are keyed by a 16-byte digest of
their canonical text identity, interned through metadata ring records.

`SyntheticProbeBackend` stands in for the kernel side: it replays an event
stream through the same aggregation semantics, applies the monitored-tgid
filter, reports IPC counterparts upward for discovery instead of silently
tracking them, and serves 1 Hz snapshots whose counters reset on read. It is
the loopback harness used to check that the live path and trace replay agree.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from typing import Dict, Iterable, Iterator, List, Optional, Set, Tuple, Union

from .collector import DiscoveryTracker, ProbeLoadError
from .engine import MetricEngine
from .model import (
    WINDOW_NS, BlockDev, Bri, DiscoveryEdge, EpollObj, KernelEvent,
    MetricKind, MetricSample, ThreadRef, TimeWindow, bri_from_key, bri_key,
)
from .store import res_kind_for

MAP_LAYOUT_VERSION = 1

# map name -> (key struct, value struct)
SCHED_KEY = struct.Struct("<II")            # tgid, tid
SCHED_VAL = struct.Struct("<5Q")            # runtime, rq, sleep, block, iowait
WAIT_KEY = struct.Struct("<II16sB7x")       # tgid, tid, bri digest, interaction
WAIT_VAL = struct.Struct("<QQ")             # wait_ns, wait_count
WAKE_KEY = struct.Struct("<II16s")          # tgid, tid, futex digest
WAKE_VAL = struct.Struct("<Q")              # wake_count
EPF_KEY = struct.Struct("<16s16s")          # epoll digest, file digest
EPF_VAL = struct.Struct("<Q")               # wait_ns
DEV_KEY = struct.Struct("<IIII")            # tgid, tid, major, minor
DEV_VAL = struct.Struct("<Q")               # sectors

MAP_LAYOUTS = {
    "sched_times": (SCHED_KEY, SCHED_VAL),
    "resource_waits": (WAIT_KEY, WAIT_VAL),
    "futex_wakes": (WAKE_KEY, WAKE_VAL),
    "epoll_file_waits": (EPF_KEY, EPF_VAL),
    "device_io": (DEV_KEY, DEV_VAL),
}

# interaction codes in WAIT_KEY
INTERACTIONS = {
    "pipe_read": 1, "pipe_write": 2, "pipe_poll": 3,
    "socket_recv": 4, "socket_send": 5, "socket_poll": 6,
    "futex": 7, "epoll": 8,
}
INTERACTION_NAMES = {v: k for k, v in INTERACTIONS.items()}

_DIR_BY_KIND = {
    "pipe_read": ("pipe", "read"), "pipe_write": ("pipe", "write"),
    "pipe_poll": ("pipe", "poll"),
    "socket_recv": ("socket", "recv"), "socket_send": ("socket", "send"),
    "socket_poll": ("socket", "poll"),
    "futex": ("futex", None), "epoll": ("epoll", None),
}


def bri_digest(bri: Bri) -> bytes:
    return hashlib.sha256(bri_key(bri).encode("utf-8")).digest()[:16]


@dataclass(frozen=True)
class BriInternRecord:
    digest: bytes
    key: str


@dataclass(frozen=True)
class ThreadMetaRecord:
    tgid: int
    tid: int
    comm: str
    ts: int


@dataclass(frozen=True)
class DiscoveryRecord:
    edge: DiscoveryEdge
    endpoint: str = ""  # remote endpoint text for external counterparts


RingRecord = Union[BriInternRecord, ThreadMetaRecord, DiscoveryRecord]


def encode_ring_record(rec: RingRecord) -> bytes:
    if isinstance(rec, BriInternRecord):
        payload = rec.key.encode("utf-8")
        return struct.pack("<B16sH", 1, rec.digest, len(payload)) + payload
    if isinstance(rec, ThreadMetaRecord):
        comm = rec.comm.encode("utf-8")[:16].ljust(16, b"\0")
        return struct.pack("<BII16sQ", 2, rec.tgid, rec.tid, comm, rec.ts)
    if isinstance(rec, DiscoveryRecord):
        e = rec.edge
        endpoint = rec.endpoint.encode("utf-8")
        return (struct.pack("<Bqq16sQH", 3, e.from_tgid, e.to_tgid,
                            bri_digest(e.via), e.first_seen, len(endpoint))
                + endpoint + bri_key(e.via).encode("utf-8"))
    raise TypeError(f"unencodable ring record {type(rec).__name__}")


def decode_ring_record(raw: bytes) -> RingRecord:
    kind = raw[0]
    if kind == 1:
        digest, length = struct.unpack_from("<16sH", raw, 1)
        key = raw[19:19 + length].decode("utf-8")
        return BriInternRecord(digest, key)
    if kind == 2:
        tgid, tid, comm, ts = struct.unpack_from("<II16sQ", raw, 1)
        return ThreadMetaRecord(tgid, tid, comm.rstrip(b"\0").decode("utf-8"), ts)
    if kind == 3:
        frm, to, digest, ts, ep_len = struct.unpack_from("<qq16sQH", raw, 1)
        off = 1 + struct.calcsize("<qq16sQH")
        endpoint = raw[off:off + ep_len].decode("utf-8")
        key = raw[off + ep_len:].decode("utf-8")
        return DiscoveryRecord(DiscoveryEdge(frm, to, bri_from_key(key), ts), endpoint)
    raise ValueError(f"unknown ring record type {kind}")


# ---------------------------------------------------------------------------
# Backend protocol
# ---------------------------------------------------------------------------

class ProbeBackend:
    """What a real probe loader must provide to the live collector."""

    def layout_version(self) -> int:
        raise NotImplementedError

    def set_monitored(self, tgids: Set[int]) -> None:
        raise NotImplementedError

    def ticks(self) -> Iterator[int]:
        """Yield the start timestamp of each window whose counters are ready
        to snapshot, one per collection interval."""
        raise NotImplementedError

    def poll_records(self) -> List[bytes]:
        """Drain ring-buffer records accumulated since the last poll."""
        raise NotImplementedError

    def snapshot_and_reset(self, map_name: str) -> Dict[bytes, bytes]:
        """Read and zero one map; per-key read-then-delete, no lost updates."""
        raise NotImplementedError


def load_default_backend() -> ProbeBackend:
    raise ProbeLoadError(
        "no kernel probe backend is available: live recording needs the probe "
        "component loaded on a BPF-capable Linux host with root privileges")


# ---------------------------------------------------------------------------
# Snapshot decoding (live collector side)
# ---------------------------------------------------------------------------

class SnapshotDecoder:
    """Turns raw map snapshots back into metric samples, resolving digests
    through interned metadata."""

    def __init__(self, window_ns: int = WINDOW_NS):
        self.window_ns = window_ns
        self._bris: Dict[bytes, Bri] = {}
        self._threads: Dict[int, ThreadRef] = {}
        self.unknown_digests = 0

    def intern(self, rec: BriInternRecord) -> None:
        self._bris[rec.digest] = bri_from_key(rec.key)

    def register_thread(self, rec: ThreadMetaRecord) -> None:
        self._threads.setdefault(rec.tid, ThreadRef(rec.tid, rec.tgid, rec.comm))

    def thread(self, tgid: int, tid: int) -> ThreadRef:
        return self._threads.get(tid) or ThreadRef(tid, tgid)

    def _bri(self, digest: bytes) -> Optional[Bri]:
        bri = self._bris.get(digest)
        if bri is None:
            self.unknown_digests += 1
        return bri

    def decode_window(self, window_start_ns: int,
                      snaps: Dict[str, Dict[bytes, bytes]]) -> List[MetricSample]:
        window = TimeWindow(window_start_ns, window_start_ns + self.window_ns)
        out: List[MetricSample] = []
        for raw_key, raw_val in snaps.get("sched_times", {}).items():
            tgid, tid = SCHED_KEY.unpack(raw_key)
            runtime, rq, sleep, block, iowait = SCHED_VAL.unpack(raw_val)
            thread = self.thread(tgid, tid)
            for metric, val in ((MetricKind.RUNTIME, runtime),
                                (MetricKind.RQ_TIME, rq),
                                (MetricKind.SLEEP_TIME, sleep),
                                (MetricKind.BLOCK_TIME, block),
                                (MetricKind.IOWAIT_TIME, iowait)):
                if val:
                    out.append(MetricSample(window, metric, val, thread=thread))
        for raw_key, raw_val in snaps.get("resource_waits", {}).items():
            tgid, tid, digest, code = WAIT_KEY.unpack(raw_key)
            wait_ns, count = WAIT_VAL.unpack(raw_val)
            bri = self._bri(digest)
            if bri is None:
                continue
            base, dir = _DIR_BY_KIND[INTERACTION_NAMES[code]]
            time_metric = {"pipe": MetricKind.PIPE_WAIT_TIME,
                           "socket": MetricKind.SOCKET_WAIT_TIME,
                           "futex": MetricKind.FUTEX_WAIT_TIME,
                           "epoll": MetricKind.EPOLL_WAIT_TIME}[base]
            count_metric = {"pipe": MetricKind.PIPE_WAIT_COUNT,
                            "socket": MetricKind.SOCKET_WAIT_COUNT,
                            "futex": MetricKind.FUTEX_WAIT_COUNT,
                            "epoll": MetricKind.EPOLL_WAIT_COUNT}[base]
            thread = self.thread(tgid, tid)
            if wait_ns:
                out.append(MetricSample(window, time_metric, wait_ns,
                                        thread=thread, resource=bri, dir=dir))
            if count:
                out.append(MetricSample(window, count_metric, count,
                                        thread=thread, resource=bri, dir=dir))
        for raw_key, raw_val in snaps.get("futex_wakes", {}).items():
            tgid, tid, digest = WAKE_KEY.unpack(raw_key)
            (count,) = WAKE_VAL.unpack(raw_val)
            bri = self._bri(digest)
            if bri is not None and count:
                out.append(MetricSample(window, MetricKind.FUTEX_WAKE_COUNT, count,
                                        thread=self.thread(tgid, tid), resource=bri))
        for raw_key, raw_val in snaps.get("epoll_file_waits", {}).items():
            ep_digest, file_digest = EPF_KEY.unpack(raw_key)
            (wait_ns,) = EPF_VAL.unpack(raw_val)
            ep = self._bri(ep_digest)
            bri = self._bri(file_digest)
            if ep is not None and bri is not None and wait_ns:
                out.append(MetricSample(window, MetricKind.EPOLL_FILE_WAIT, wait_ns,
                                        resource=bri, epoll=ep))
        for raw_key, raw_val in snaps.get("device_io", {}).items():
            tgid, tid, major, minor = DEV_KEY.unpack(raw_key)
            (sectors,) = DEV_VAL.unpack(raw_val)
            if sectors:
                out.append(MetricSample(window, MetricKind.SECTOR_COUNT, sectors,
                                        thread=self.thread(tgid, tid),
                                        resource=BlockDev(major, minor)))
        out.sort(key=lambda s: (s.metric.index,
                                s.thread.tid if s.thread else -1,
                                bri_key(s.resource) if s.resource else "",
                                s.dir or ""))
        return out


# ---------------------------------------------------------------------------
# Synthetic backend (loopback harness)
# ---------------------------------------------------------------------------

class SyntheticProbeBackend(ProbeBackend):
    """Kernel-side stand-in driven by a recorded event stream.

    Aggregates exactly like the probes would (completion-time wait accounting,
    scheduler time settled at each snapshot), honours the monitored-tgid
    filter, and emits intern/thread/discovery records through the ring.
    """

    def __init__(self, events: Iterable[KernelEvent], window_ns: int = WINDOW_NS,
                 layout_version: int = MAP_LAYOUT_VERSION):
        self._events = sorted(events, key=lambda e: e.ts)
        self.window_ns = window_ns
        self._version = layout_version
        self._monitored: Optional[Set[int]] = None
        self._engine = MetricEngine(window_ns)
        self._tracker = DiscoveryTracker(monitored=None)
        self._ring: List[bytes] = []
        self._interned: Set[bytes] = set()
        self._known_threads: Set[int] = set()
        self._emitted_edges: Set[Tuple[int, int, str]] = set()
        self._maps: Dict[str, Dict[bytes, bytes]] = {n: {} for n in MAP_LAYOUTS}
        self._cursor = 0

    # -- protocol -------------------------------------------------------------

    def layout_version(self) -> int:
        return self._version

    def set_monitored(self, tgids: Set[int]) -> None:
        self._monitored = set(tgids)

    def ticks(self) -> Iterator[int]:
        if not self._events:
            return
        w = self.window_ns
        last_ts = self._events[-1].ts
        final_win_start = (last_ts // w) * w
        win_start = (self._events[0].ts // w) * w
        while win_start < final_win_start:
            self._advance(win_start + w, final=False)
            yield win_start
            win_start += w
        self._advance(last_ts, final=True)
        yield final_win_start

    def poll_records(self) -> List[bytes]:
        out, self._ring = self._ring, []
        return out

    def snapshot_and_reset(self, map_name: str) -> Dict[bytes, bytes]:
        snap = self._maps[map_name]
        self._maps[map_name] = {}
        return snap

    # -- kernel-side simulation -------------------------------------------------

    def _monitored_check(self, tgid: int) -> bool:
        return self._monitored is None or tgid in self._monitored

    def _advance(self, upto: int, final: bool) -> None:
        while self._cursor < len(self._events):
            ev = self._events[self._cursor]
            if not final and ev.ts >= upto:
                break
            self._cursor += 1
            self._observe(ev)
        flushed = (self._engine.end_of_stream() if final
                   else self._engine.advance_to(upto))
        for sample in flushed:
            self._store_sample(sample)
        if final:
            self._ring.extend(self.finalize_external_records())

    def _observe(self, ev: KernelEvent) -> None:
        for edge in self._tracker.observe(ev):
            if not (self._monitored_check(edge.from_tgid)
                    or self._monitored_check(edge.to_tgid)):
                continue
            key = (edge.from_tgid, edge.to_tgid, bri_key(edge.via))
            if key not in self._emitted_edges:
                self._emitted_edges.add(key)
                self._intern(edge.via)
                self._ring.append(encode_ring_record(DiscoveryRecord(edge)))
            if self._monitored is not None:
                self._monitored.update((edge.from_tgid, edge.to_tgid))
        if not self._monitored_check(ev.thread.tgid):
            return
        if ev.thread.tid not in self._known_threads:
            self._known_threads.add(ev.thread.tid)
            self._ring.append(encode_ring_record(ThreadMetaRecord(
                ev.thread.tgid, ev.thread.tid, ev.thread.comm, ev.ts)))
        for sample in self._engine.observe(ev):
            self._store_sample(sample)

    def finalize_external_records(self) -> List[bytes]:
        records = []
        edges, procs = self._tracker.finalize_external()
        endpoints = {p.tgid: p.comm.split("external:", 1)[-1] for p in procs}
        for edge in edges:
            if not self._monitored_check(edge.from_tgid):
                continue
            self._intern(edge.via)
            records.append(encode_ring_record(DiscoveryRecord(
                edge, endpoints.get(edge.to_tgid, ""))))
        return records

    def _intern(self, bri: Bri) -> None:
        digest = bri_digest(bri)
        if digest not in self._interned:
            self._interned.add(digest)
            self._ring.append(encode_ring_record(
                BriInternRecord(digest, bri_key(bri))))

    def _bump(self, map_name: str, key: bytes, deltas: Tuple[int, ...],
              val_struct: struct.Struct) -> None:
        m = self._maps[map_name]
        current = val_struct.unpack(m[key]) if key in m else (0,) * len(deltas)
        m[key] = val_struct.pack(*(c + d for c, d in zip(current, deltas)))

    def _store_sample(self, s: MetricSample) -> None:
        m = s.metric
        if m in (MetricKind.RUNTIME, MetricKind.RQ_TIME, MetricKind.SLEEP_TIME,
                 MetricKind.BLOCK_TIME, MetricKind.IOWAIT_TIME):
            key = SCHED_KEY.pack(s.thread.tgid, s.thread.tid)
            deltas = [0, 0, 0, 0, 0]
            deltas[(MetricKind.RUNTIME, MetricKind.RQ_TIME, MetricKind.SLEEP_TIME,
                    MetricKind.BLOCK_TIME, MetricKind.IOWAIT_TIME).index(m)] = s.value
            self._bump("sched_times", key, tuple(deltas), SCHED_VAL)
        elif m is MetricKind.SECTOR_COUNT:
            key = DEV_KEY.pack(s.thread.tgid, s.thread.tid,
                               s.resource.major, s.resource.minor)
            self._bump("device_io", key, (s.value,), DEV_VAL)
        elif m is MetricKind.FUTEX_WAKE_COUNT:
            self._intern(s.resource)
            key = WAKE_KEY.pack(s.thread.tgid, s.thread.tid, bri_digest(s.resource))
            self._bump("futex_wakes", key, (s.value,), WAKE_VAL)
        elif m is MetricKind.EPOLL_FILE_WAIT:
            self._intern(s.resource)
            self._intern(s.epoll)
            key = EPF_KEY.pack(bri_digest(s.epoll), bri_digest(s.resource))
            self._bump("epoll_file_waits", key, (s.value,), EPF_VAL)
        else:
            self._intern(s.resource)
            code = INTERACTIONS[res_kind_for(m, s.dir)]
            key = WAIT_KEY.pack(s.thread.tgid, s.thread.tid,
                                bri_digest(s.resource), code)
            if m.is_time:
                self._bump("resource_waits", key, (s.value, 0), WAIT_VAL)
            else:
                self._bump("resource_waits", key, (0, s.value), WAIT_VAL)
