"""Thread dynamics and process dependency graphs over a stored time range.

Thread graph: thread and resource nodes with directed interaction edges
(waits_on/wakes point thread→resource, writes point thread→resource, reads
point resource→thread, schedules points waker→waiter, registered_in points
file→epoll, io_to points thread→device). Node aliases (t1, f1, p1, ...) are
assigned by first appearance within the range, so reruns on the same store
and range produce identical labels.

Construction is a pure read of the store; edges below the weight threshold
(1 ms of time or 1 count by default) are suppressed as noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from .model import (
    BlockDev, Bri, EpollObj, FutexAddr, SocketTuple, VfsInode, bri_from_key,
    bri_key,
)
from .store import PIPE_KINDS, SOCKET_KINDS, MetricStore

DEFAULT_MIN_TIME_NS = 1_000_000
DEFAULT_MIN_COUNT = 1

_ALIAS_PREFIX = {
    "thread": "t", "futex": "f", "pipe": "p", "socket": "s",
    "epoll": "e", "device": "d", "external": "x", "process": "proc",
}


@dataclass(frozen=True)
class DynNode:
    id: str
    kind: str
    alias: str
    key: str  # raw identity: "tgid:tid" for threads, bri key for resources

    def to_json(self) -> dict:
        return {"id": self.id, "kind": self.kind, "alias": self.alias,
                "key": self.key}


@dataclass(frozen=True)
class DynEdge:
    src: str
    dst: str
    kind: str  # waits_on|wakes|writes|reads|schedules|registered_in|io_to
    weight: int
    unit: str  # "ns" | "count" | "sectors"

    def to_json(self) -> dict:
        return {"from": self.src, "to": self.dst, "kind": self.kind,
                "weight": self.weight, "unit": self.unit}


@dataclass
class Graph:
    nodes: List[DynNode] = field(default_factory=list)
    edges: List[DynEdge] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"nodes": [n.to_json() for n in self.nodes],
                "edges": [e.to_json() for e in self.edges]}

    def node_by_alias(self, alias: str) -> Optional[DynNode]:
        return next((n for n in self.nodes if n.alias == alias), None)

    def edges_between(self, src_alias: str, dst_alias: str) -> List[DynEdge]:
        a = self.node_by_alias(src_alias)
        b = self.node_by_alias(dst_alias)
        if a is None or b is None:
            return []
        return [e for e in self.edges if e.src == a.id and e.dst == b.id]


def resource_node_kind(bri: Bri, res_kind_hint: str = "") -> str:
    if isinstance(bri, FutexAddr):
        return "futex"
    if isinstance(bri, VfsInode):
        return "pipe"
    if isinstance(bri, SocketTuple):
        return "socket"
    if isinstance(bri, EpollObj):
        return "epoll"
    if isinstance(bri, BlockDev):
        return "device"
    return "resource"


def _tgid_clause(tgids: Optional[Sequence[int]], col: str = "tgid") -> str:
    if not tgids:
        return "1=1"
    ids = ",".join(str(int(t)) for t in tgids)
    return f"{col} IN ({ids})"


class _Builder:
    def __init__(self):
        self.first_seen: Dict[str, Tuple[int, int, str, str]] = {}
        self.order: List[str] = []

    def touch(self, node_id: str, ts: int, order_key, kind: str, key: str) -> None:
        cur = self.first_seen.get(node_id)
        item = (ts, order_key, kind, key)
        if cur is None:
            self.first_seen[node_id] = item
            self.order.append(node_id)
        elif (ts, order_key) < (cur[0], cur[1]):
            self.first_seen[node_id] = item

    def assign_aliases(self) -> Dict[str, DynNode]:
        ranked = sorted(self.first_seen.items(),
                        key=lambda kv: (kv[1][0], str(kv[1][1])))
        counters: Dict[str, int] = {}
        nodes = {}
        for node_id, (_, _, kind, key) in ranked:
            counters[kind] = counters.get(kind, 0) + 1
            alias = f"{_ALIAS_PREFIX.get(kind, 'n')}{counters[kind]}"
            nodes[node_id] = DynNode(node_id, kind, alias, key)
        return nodes


def build_thread_graph(store: MetricStore, start_ns: int, end_ns: int,
                       tgids: Optional[Sequence[int]] = None,
                       min_time_ns: int = DEFAULT_MIN_TIME_NS,
                       min_count: int = DEFAULT_MIN_COUNT) -> Graph:
    rng = (start_ns, end_ns)
    tg = _tgid_clause(tgids)
    builder = _Builder()
    weights: Dict[Tuple[str, str, str, str], int] = {}

    def thread_id(tgid: int, tid: int) -> str:
        return f"thread:{tgid}:{tid}"

    def add_edge(src: str, dst: str, kind: str, weight: int, unit: str) -> None:
        key = (src, dst, kind, unit)
        weights[key] = weights.get(key, 0) + weight

    task_rows = store.sql(
        f"SELECT ts, tgid, tid FROM task_samples WHERE ts >= ? AND ts < ? AND {tg}",
        rng)
    for ts, tgid, tid in task_rows:
        builder.touch(thread_id(tgid, tid), ts, tid, "thread", f"{tgid}:{tid}")

    wait_rows = store.sql(
        f"SELECT ts, tgid, tid, res_kind, bri_key, wait_ns, wait_count "
        f"FROM resource_waits WHERE ts >= ? AND ts < ? AND {tg} "
        f"ORDER BY ts, tid, res_kind, bri_key", rng)
    for ts, tgid, tid, res_kind, key, wait_ns, count in wait_rows:
        bri = bri_from_key(key)
        tnode = thread_id(tgid, tid)
        rkind = resource_node_kind(bri, res_kind)
        rnode = f"{rkind}:{key}"
        builder.touch(tnode, ts, tid, "thread", f"{tgid}:{tid}")
        builder.touch(rnode, ts, key, rkind, key)
        if res_kind == "pipe_write":
            add_edge(tnode, rnode, "writes", wait_ns, "ns")
        elif res_kind == "pipe_read":
            add_edge(rnode, tnode, "reads", wait_ns, "ns")
        elif res_kind == "socket_send":
            add_edge(tnode, rnode, "writes", wait_ns, "ns")
        elif res_kind == "socket_recv":
            add_edge(rnode, tnode, "reads", wait_ns, "ns")
        else:  # futex, epoll, poll-attributed pipe/socket time
            add_edge(tnode, rnode, "waits_on", wait_ns, "ns")

    wake_rows = store.sql(
        f"SELECT ts, tgid, tid, bri_key, wake_count FROM futex_wakes "
        f"WHERE ts >= ? AND ts < ? AND {tg} ORDER BY ts, tid, bri_key", rng)
    for ts, tgid, tid, key, count in wake_rows:
        tnode = thread_id(tgid, tid)
        rnode = f"futex:{key}"
        builder.touch(tnode, ts, tid, "thread", f"{tgid}:{tid}")
        builder.touch(rnode, ts, key, "futex", key)
        add_edge(tnode, rnode, "wakes", count, "count")

    epf_rows = store.sql(
        "SELECT ts, epoll_key, bri_key, wait_ns FROM epoll_file_waits "
        "WHERE ts >= ? AND ts < ? ORDER BY ts, epoll_key, bri_key", rng)
    for ts, ep_key, key, wait_ns in epf_rows:
        bri = bri_from_key(key)
        rkind = resource_node_kind(bri)
        rnode = f"{rkind}:{key}"
        enode = f"epoll:{ep_key}"
        builder.touch(enode, ts, ep_key, "epoll", ep_key)
        builder.touch(rnode, ts, key, rkind, key)
        add_edge(rnode, enode, "registered_in", wait_ns, "ns")

    dev_rows = store.sql(
        f"SELECT ts, tgid, tid, dev_major, dev_minor, sectors FROM device_io "
        f"WHERE ts >= ? AND ts < ? AND {tg} ORDER BY ts, tid", rng)
    for ts, tgid, tid, major, minor, sectors in dev_rows:
        key = bri_key(BlockDev(major, minor))
        tnode = thread_id(tgid, tid)
        rnode = f"device:{key}"
        builder.touch(tnode, ts, tid, "thread", f"{tgid}:{tid}")
        builder.touch(rnode, ts, key, "device", key)
        add_edge(tnode, rnode, "io_to", sectors, "sectors")

    # userspace scheduling: waker -> waiter through a shared futex
    futex_waits: Dict[str, Dict[str, int]] = {}
    for ts, tgid, tid, res_kind, key, wait_ns, count in wait_rows:
        if res_kind == "futex" and wait_ns > 0:
            futex_waits.setdefault(key, {})[thread_id(tgid, tid)] = wait_ns
    futex_wakers: Dict[str, Dict[str, int]] = {}
    for ts, tgid, tid, key, count in wake_rows:
        if count > 0:
            node = thread_id(tgid, tid)
            futex_wakers.setdefault(key, {})
            futex_wakers[key][node] = futex_wakers[key].get(node, 0) + count
    for key, wakers in sorted(futex_wakers.items()):
        for waker, count in sorted(wakers.items()):
            for waiter in sorted(futex_waits.get(key, {})):
                if waiter != waker:
                    add_edge(waker, waiter, "schedules", count, "count")

    nodes_by_id = builder.assign_aliases()
    edges = []
    for (src, dst, kind, unit), weight in sorted(weights.items()):
        floor = min_time_ns if unit == "ns" else min_count
        if weight >= floor:
            edges.append(DynEdge(src, dst, kind, weight, unit))
    used = {e.src for e in edges} | {e.dst for e in edges}
    nodes = [n for nid, n in nodes_by_id.items()
             if n.kind == "thread" or nid in used]
    nodes.sort(key=lambda n: (n.kind != "thread", n.alias[0], int(n.alias[1:])))
    return Graph(nodes=nodes, edges=edges)


def build_process_graph(store: MetricStore, start_ns: int, end_ns: int) -> Graph:
    procs = store.sql(
        "SELECT tgid, comm, first_seen FROM processes ORDER BY first_seen, tgid")
    edge_rows = store.sql(
        "SELECT from_tgid, to_tgid, bri_key, first_seen FROM discovery_edges "
        "WHERE first_seen < ? ORDER BY first_seen, from_tgid, to_tgid", (end_ns,))
    builder = _Builder()
    for tgid, comm, first_seen in procs:
        kind = "external" if tgid < 0 else "process"
        label = comm or str(tgid)
        builder.touch(f"proc:{tgid}", first_seen, tgid, kind, f"{tgid}:{label}")
    edges = []
    for frm, to, key, first_seen in edge_rows:
        for tgid in (frm, to):
            if f"proc:{tgid}" not in builder.first_seen:
                kind = "external" if tgid < 0 else "process"
                builder.touch(f"proc:{tgid}", first_seen, tgid, kind, str(tgid))
        edges.append(DynEdge(f"proc:{frm}", f"proc:{to}", "ipc", first_seen,
                             "first_seen_ns"))
    nodes_by_id = builder.assign_aliases()
    nodes = sorted(nodes_by_id.values(), key=lambda n: n.id)
    return Graph(nodes=nodes, edges=edges)


def thread_aliases(store: MetricStore, start_ns: int, end_ns: int,
                   tgids: Optional[Sequence[int]] = None) -> Dict[int, str]:
    """tid -> display alias over the given range (thresholds do not apply)."""
    g = build_thread_graph(store, start_ns, end_ns, tgids,
                           min_time_ns=0, min_count=0)
    out = {}
    for n in g.nodes:
        if n.kind == "thread":
            out[int(n.key.split(":")[1])] = n.alias
    return out


def resource_aliases(store: MetricStore, start_ns: int, end_ns: int,
                     tgids: Optional[Sequence[int]] = None) -> Dict[str, str]:
    """bri key -> display alias over the given range."""
    g = build_thread_graph(store, start_ns, end_ns, tgids,
                           min_time_ns=0, min_count=0)
    return {n.key: n.alias for n in g.nodes if n.kind != "thread"}
