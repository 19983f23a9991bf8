"""Named synthetic degradation scenarios.

Each builder produces a 60-second event trace with a healthy phase (windows
0-29) and a degraded phase (windows 30-59), plus a KPI series and suggested
baseline/compare analysis ranges. Metrics that must stay quiet are generated
with identical per-phase value multisets (a repeating pattern), so they can
never trip a distribution test; metrics meant to shift get a real jump plus
seeded jitter.

Scenarios:
  lock_contention   two request handlers serializing on one futex; the
                    contender has no inet traffic and is only reachable
                    through the shared lock.
  chain3            a three-hop propagation path: gateway <- futex <- relay
                    <- pipe <- disk-bound worker.
  pipe_chain        a worker pool feeding one pipe drained by an epoll-driven
                    network thread; workers saturate on disk and the pipe
                    starves.
  external_socket   a web frontend whose only shifted resource is the
                    connection to an off-host backend.
  mysql_like        steady mixed workload: three socket-facing handlers, a
                    disk writer, a background purge thread, one co-located
                    disk hog and a driving client process.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from .model import (
    BlockDev, BlockRq, Bri, EpollCtl, EpollObj, EpollWaitEnter, EpollWaitExit,
    FutexEnter, FutexExit, KernelEvent, PollEnter, PollExit, SchedSwitchIn,
    SchedSwitchOut, SchedWakeup, SockAccess, SocketTuple, ThreadRef,
    ThreadState, VfsAccess, VfsInode, canonicalize_socket,
)

MS = 1_000_000
SEC = 1_000_000_000
N_WINDOWS = 60
DEGRADE_AT = 30  # first degraded window

BASELINE_RANGE = (5 * SEC, 25 * SEC)
COMPARE_RANGE = (35 * SEC, 55 * SEC)


@dataclass
class ScenarioBundle:
    name: str
    events: List[KernelEvent]
    kpi_csv: str
    baseline: Tuple[int, int] = BASELINE_RANGE
    compare: Tuple[int, int] = COMPARE_RANGE
    tgids: Tuple[int, ...] = ()


def pattern(k: int, base: float, step: float = 0.0, period: int = 4) -> int:
    """Deterministic value in ns with a phase-independent repeating wobble.

    Both analysis ranges span whole multiples of the period, so baseline and
    compare see identical multisets and no test can flag the metric.
    """
    return int((base + (k % period) * step) * MS)


class Script:
    """Emits a coherent per-thread event timeline.

    A thread sleeps between bursts; a burst wakes it, runs its segments back
    to back, and puts it back to sleep. Blocking segments share timestamps
    with their scheduler transitions, so wait time and sleep state agree
    exactly.
    """

    def __init__(self, sink: List[KernelEvent], thread: ThreadRef):
        self.sink = sink
        self.th = thread

    def _emit(self, ts: int, body) -> None:
        self.sink.append(KernelEvent(ts, self.th, body))

    def begin(self, ts: int = 0) -> None:
        self._emit(ts, SchedSwitchOut(ThreadState.SLEEP))

    def burst(self, ts: int, segments: Sequence[tuple], rq_ns: int = 0) -> int:
        self._emit(ts, SchedWakeup())
        t = ts + rq_ns
        self._emit(t, SchedSwitchIn())
        for seg in segments:
            t = self._segment(t, seg)
        self._emit(t, SchedSwitchOut(ThreadState.SLEEP))
        return t

    def _blocking(self, t: int, dur: int, enter_body, exit_body,
                  state=ThreadState.SLEEP, iowait=False) -> int:
        if enter_body is not None:
            self._emit(t, enter_body)
        self._emit(t, SchedSwitchOut(state, iowait))
        self._emit(t + dur, SchedWakeup())
        self._emit(t + dur, SchedSwitchIn())
        if exit_body is not None:
            self._emit(t + dur, exit_body)
        return t + dur

    def _segment(self, t: int, seg: tuple) -> int:
        op = seg[0]
        if op == "run":
            return t + seg[1]
        if op == "futex_wait":
            _, uaddr, dur = seg
            return self._blocking(t, dur, FutexEnter(uaddr, "wait"), FutexExit(0))
        if op == "futex_wake":
            _, uaddr, result = seg
            self._emit(t, FutexEnter(uaddr, "wake", val=1))
            self._emit(t, FutexExit(result))
            return t
        if op == "pipe":
            _, bri, dir, dur = seg
            return self._blocking(
                t, dur, VfsAccess(bri, dir, "fifo", True, enter=True),
                VfsAccess(bri, dir, "fifo", True, enter=False))
        if op == "sock":
            _, bri, dir, dur, remote = seg
            enter = SockAccess(bri, dir, enter=True, remote=remote)
            exit_ = SockAccess(bri, dir, enter=False, remote=remote)
            if dur == 0:
                self._emit(t, enter)
                self._emit(t, exit_)
                return t
            return self._blocking(t, dur, enter, exit_)
        if op == "epoll_wait":
            _, ep, dur = seg
            return self._blocking(t, dur, EpollWaitEnter(ep), EpollWaitExit(ep))
        if op == "epoll_ctl":
            _, ep, target, action = seg
            self._emit(t, EpollCtl(ep, target, action))
            return t
        if op == "poll":
            _, api, bris, dur = seg
            return self._blocking(t, dur, PollEnter(api, tuple(bris)), PollExit(api))
        if op == "block_rq":
            _, dev, sectors = seg
            self._emit(t, BlockRq(dev, sectors))
            return t
        if op == "block":
            _, dur, iowait = seg
            return self._blocking(t, dur, None, None,
                                  state=ThreadState.BLOCK, iowait=iowait)
        raise ValueError(f"unknown segment {op!r}")


def _finish(events: List[KernelEvent], kpi_rows: List[Tuple[float, float]]) -> Tuple[List[KernelEvent], str]:
    events.sort(key=lambda e: e.ts)
    kpi = "ts,value\n" + "".join(f"{ts:.1f},{val:.3f}\n" for ts, val in kpi_rows)
    return events, kpi


def _kpi(healthy: float, degraded: float, wobble: float = 0.02) -> List[Tuple[float, float]]:
    rows = []
    for k in range(N_WINDOWS):
        base = healthy if k < DEGRADE_AT else degraded
        rows.append((k + 0.5, base * (1.0 + wobble * (k % 5))))
    return rows


# ---------------------------------------------------------------------------

def lock_contention(seed: int = 11) -> ScenarioBundle:
    rng = random.Random(seed)
    tgid = 100
    events: List[KernelEvent] = []
    main = Script(events, ThreadRef(101, tgid, "app-main"))
    helper = Script(events, ThreadRef(102, tgid, "app-helper"))
    writer = Script(events, ThreadRef(103, tgid, "app-writer"))
    reader = Script(events, ThreadRef(104, tgid, "app-reader"))
    client = Script(events, ThreadRef(991, 99, "loadgen"))

    f1 = 0x7fa000001040
    sock_unix = canonicalize_socket("unix", "socket:[9731]", "/run/app-helper.sock")
    sock_inet = canonicalize_socket("inet4", "10.0.0.5:3306", "10.0.0.9:44001")

    for s in (main, helper, writer, reader, client):
        s.begin(0)
    for k in range(N_WINDOWS):
        w = k * SEC
        degraded = k >= DEGRADE_AT
        main.burst(w + 5 * MS, [("run", pattern(k, 3, 0.5))])
        helper.burst(w + 8 * MS, [
            ("sock", sock_unix, "recv", pattern(k, 2, 0.3), "socket:[9731]"),
            ("run", pattern(k, 2, 0.2)),
        ])
        writer_segs = [
            ("sock", sock_unix, "recv", pattern(k, 1.5, 0.2), "/run/app-helper.sock"),
            ("run", pattern(k, 8, 0.5) if not degraded
             else int((55 + rng.random() * 6) * MS)),
        ]
        wakes = 2 if not degraded else 10
        writer_segs += [("futex_wake", f1, 1)] * wakes
        writer.burst(w + 10 * MS, writer_segs)
        reader.burst(w + 12 * MS, [
            ("sock", sock_inet, "recv", pattern(k, 15, 1.0), "10.0.0.9:44001"),
            ("run", pattern(k, 10, 0.8)),
            ("futex_wait", f1, pattern(k, 2, 0.3) if not degraded
             else int((250 + rng.random() * 80) * MS)),
        ])
        client.burst(w + 2 * MS, [
            ("sock", sock_inet, "send", pattern(k, 3, 0.4), "10.0.0.5:3306"),
            ("run", pattern(k, 1, 0.1)),
        ])
    events, kpi = _finish(events, _kpi(5.0, 290.0))
    return ScenarioBundle("lock_contention", events, kpi, tgids=(tgid,))


def chain3(seed: int = 23) -> ScenarioBundle:
    rng = random.Random(seed)
    tgid = 150
    events: List[KernelEvent] = []
    gateway = Script(events, ThreadRef(151, tgid, "svc-gateway"))
    relay = Script(events, ThreadRef(152, tgid, "svc-relay"))
    worker = Script(events, ThreadRef(153, tgid, "svc-worker"))

    fa = 0x7fb000002080
    pb = VfsInode(41, 9200)
    sock_in = canonicalize_socket("inet4", "10.0.1.5:8080", "10.0.1.9:51000")
    dev = BlockDev(259, 2)

    for s in (gateway, relay, worker):
        s.begin(0)
    for k in range(N_WINDOWS):
        w = k * SEC
        degraded = k >= DEGRADE_AT
        gateway.burst(w + 5 * MS, [
            ("sock", sock_in, "recv", pattern(k, 10, 1.0), "10.0.1.9:51000"),
            ("run", pattern(k, 5, 0.4)),
            ("futex_wait", fa, pattern(k, 3, 0.3) if not degraded
             else int((300 + rng.random() * 50) * MS)),
        ])
        relay.burst(w + 10 * MS, [
            ("pipe", pb, "read", pattern(k, 4, 0.4) if not degraded
             else int((350 + rng.random() * 40) * MS)),
            ("run", pattern(k, 6, 0.3)),
            ("futex_wake", fa, 1),
            ("futex_wake", fa, 1),
        ])
        worker.burst(w + 20 * MS, [
            ("pipe", pb, "write", pattern(k, 2, 0.2)),
            ("block_rq", dev, 96),
            ("block", pattern(k, 50, 1.0) if not degraded
             else int((700 + rng.random() * 30) * MS), True),
            ("run", pattern(k, 4, 0.3)),
        ])
    events, kpi = _finish(events, _kpi(12.0, 340.0))
    return ScenarioBundle("chain3", events, kpi, tgids=(tgid,))


def pipe_chain(seed: int = 37) -> ScenarioBundle:
    rng = random.Random(seed)
    tgid = 200
    events: List[KernelEvent] = []
    workers = [Script(events, ThreadRef(200 + i, tgid, f"broker-worker{i}"))
               for i in range(1, 9)]
    net = [Script(events, ThreadRef(208 + i, tgid, f"broker-net{i - 1}"))
           for i in range(1, 4)]
    t9, t10, t11 = net

    p1 = VfsInode(41, 9100)
    e1 = EpollObj(0xffff8800AA000000)
    dev = BlockDev(259, 0)
    socks = [canonicalize_socket("inet4", "10.2.0.1:9092", f"10.9.9.9:5000{i}")
             for i in range(1, 4)]
    remotes = [f"10.9.9.9:5000{i}" for i in range(1, 4)]

    for s in workers + net:
        s.begin(0)
    # the drain thread owns the epoll: pipe and its client socket registered once
    t9.burst(1 * MS, [("epoll_ctl", e1, p1, "insert"),
                      ("epoll_ctl", e1, socks[0], "insert"),
                      ("run", 1 * MS)])
    for k in range(N_WINDOWS):
        w = k * SEC
        degraded = k >= DEGRADE_AT
        for i, wk in enumerate(workers):
            if not degraded:
                segs = [
                    ("run", pattern(k, 10, 0.5)),
                    ("pipe", p1, "write", pattern(k, 2, 0.3)),
                    ("pipe", p1, "write", pattern(k, 3, 0.2)),
                    ("block_rq", dev, 192),
                    ("block", pattern(k, 80, 2.0), True),
                ]
            else:
                segs = [
                    ("run", pattern(k, 10, 0.5)),
                    ("pipe", p1, "write", pattern(k, 2, 0.3)),
                    ("block_rq", dev, 192),
                    ("block", int((280 + rng.random() * 10) * MS), True),
                    ("block", int((280 + rng.random() * 10) * MS), True),
                    ("block", int((280 + rng.random() * 10) * MS), True),
                ]
            wk.burst(w + (5 + 3 * i) * MS, segs)
        t9_segs = [
            ("run", pattern(k, 3, 0.2)),
            ("sock", socks[0], "recv", pattern(k, 1, 0.1), remotes[0]),
            ("sock", socks[0], "send", pattern(k, 1, 0.1), remotes[0]),
            ("pipe", p1, "read", pattern(k, 1, 0.1)),
            ("pipe", p1, "read", pattern(k, 1, 0.1)),
        ]
        if not degraded:
            t9_segs += [("epoll_wait", e1, pattern(k, 140, 2.0))] * 4
        else:
            t9_segs += [("epoll_wait", e1, int((300 + rng.random() * 5) * MS))] * 3
        t9.burst(w + 40 * MS, t9_segs)
        for j, tn in enumerate((t10, t11), start=1):
            tn.burst(w + (42 + j) * MS, [
                ("sock", socks[j], "recv", pattern(k, 8, 0.5), remotes[j]),
                ("sock", socks[j], "send", pattern(k, 7, 0.4), remotes[j]),
                ("run", pattern(k, 5, 0.3)),
            ])
    events, kpi = _finish(events, _kpi(100.0, 45.0))  # throughput-style KPI
    return ScenarioBundle("pipe_chain", events, kpi, tgids=(tgid,))


def external_socket(seed: int = 41) -> ScenarioBundle:
    rng = random.Random(seed)
    tgid = 300
    events: List[KernelEvent] = []
    web = [Script(events, ThreadRef(300 + i, tgid, f"webui-{i}")) for i in range(1, 5)]
    client = Script(events, ThreadRef(311, 310, "loadgen"))

    client_socks = [canonicalize_socket("inet4", "10.1.0.2:8080", f"10.1.0.9:4{i}000")
                    for i in range(1, 5)]
    persist_socks = [canonicalize_socket("inet4", f"10.1.0.2:4{i}100", "10.1.1.50:5432")
                     for i in range(1, 5)]

    for s in web + [client]:
        s.begin(0)
    for k in range(N_WINDOWS):
        w = k * SEC
        degraded = k >= DEGRADE_AT
        for i, wt in enumerate(web):
            wt.burst(w + (2 + i) * MS, [
                ("sock", client_socks[i], "recv", pattern(k, 8, 0.5), f"10.1.0.9:4{i + 1}000"),
                ("run", pattern(k, 6, 0.4)),
                ("sock", persist_socks[i], "recv",
                 pattern(k, 30, 1.0) if not degraded
                 else int((650 + rng.random() * 40) * MS), "10.1.1.50:5432"),
                ("sock", client_socks[i], "send", pattern(k, 2, 0.2), f"10.1.0.9:4{i + 1}000"),
            ])
        client.burst(w + 1 * MS, [
            ("sock", client_socks[i], "send", pattern(k, 5, 0.3), "10.1.0.2:8080")
            for i in range(4)
        ] + [("run", pattern(k, 2, 0.2))])
    events, kpi = _finish(events, _kpi(45.0, 720.0))
    return ScenarioBundle("external_socket", events, kpi, tgids=(tgid,))


def mysql_like(seed: int = 53) -> ScenarioBundle:
    tgid = 400
    events: List[KernelEvent] = []
    main = Script(events, ThreadRef(401, tgid, "db-main"))
    io = Script(events, ThreadRef(402, tgid, "db-io"))
    h_read = Script(events, ThreadRef(403, tgid, "db-handler-r"))
    h_write = Script(events, ThreadRef(404, tgid, "db-handler-w"))
    purge = Script(events, ThreadRef(405, tgid, "db-purge"))
    h_extra = Script(events, ThreadRef(406, tgid, "db-handler-x"))
    stress = Script(events, ThreadRef(451, 450, "disk-hog"))
    client = Script(events, ThreadRef(411, 410, "bench"))

    f3 = 0x7fc000003100
    f4 = 0x7fc000003140
    dev = BlockDev(259, 1)
    c3 = canonicalize_socket("inet4", "10.3.0.5:3306", "10.3.0.9:51001")
    c4 = canonicalize_socket("inet4", "10.3.0.5:3306", "10.3.0.9:51002")
    c6 = canonicalize_socket("inet4", "10.3.0.5:3306", "10.3.0.9:51003")

    for s in (main, io, h_read, h_write, purge, h_extra, stress, client):
        s.begin(0)
    for k in range(N_WINDOWS):
        w = k * SEC
        main.burst(w + 3 * MS, [("run", pattern(k, 3, 0.3))])
        io.burst(w + 6 * MS, [
            ("futex_wait", f3, pattern(k, 5, 0.5)),
            ("futex_wait", f4, pattern(k, 5, 0.4)),
            ("block_rq", dev, 300),
            ("block", pattern(k, 40, 2.0), True),
            ("run", pattern(k, 4, 0.3)),
        ])
        h_read.burst(w + 9 * MS, [
            ("sock", c3, "recv", pattern(k, 10, 0.8), "10.3.0.9:51001"),
            ("futex_wake", f3, 1),
            ("futex_wake", f3, 1),
            ("run", pattern(k, 8, 0.5)),
            ("sock", c3, "send", pattern(k, 2, 0.2), "10.3.0.9:51001"),
        ])
        h_write.burst(w + 12 * MS, [
            ("sock", c4, "recv", pattern(k, 12, 0.8), "10.3.0.9:51002"),
            ("run", pattern(k, 6, 0.5)),
            ("sock", c4, "send", pattern(k, 2, 0.2), "10.3.0.9:51002"),
        ])
        purge.burst(w + 15 * MS, [
            ("run", pattern(k, 2, 0.2)),
            ("block_rq", dev, 100),
            ("block", pattern(k, 10, 1.0), True),
        ])
        h_extra.burst(w + 18 * MS, [
            ("sock", c6, "recv", pattern(k, 9, 0.7), "10.3.0.9:51003"),
            ("futex_wake", f4, 1),
            ("run", pattern(k, 5, 0.4)),
            ("sock", c6, "send", pattern(k, 2, 0.2), "10.3.0.9:51003"),
        ])
        stress.burst(w + 21 * MS, [
            ("block_rq", dev, 700),
            ("block", pattern(k, 50, 2.0), True),
            ("run", pattern(k, 2, 0.2)),
        ])
        client.burst(w + 1 * MS, [
            ("sock", c3, "send", pattern(k, 2, 0.2), "10.3.0.5:3306"),
            ("sock", c4, "send", pattern(k, 2, 0.2), "10.3.0.5:3306"),
            ("sock", c6, "send", pattern(k, 2, 0.2), "10.3.0.5:3306"),
            ("run", pattern(k, 1, 0.1)),
        ])
    events, kpi = _finish(events, _kpi(8.0, 8.0))
    return ScenarioBundle("mysql_like", events, kpi, tgids=(tgid,))


SCENARIOS = {
    "lock_contention": lock_contention,
    "chain3": chain3,
    "pipe_chain": pipe_chain,
    "external_socket": external_socket,
    "mysql_like": mysql_like,
}


def build(name: str) -> ScenarioBundle:
    try:
        return SCENARIOS[name]()
    except KeyError:
        raise ValueError(f"unknown scenario {name!r}") from None
