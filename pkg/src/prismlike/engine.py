"""Turns an ordered kernel-event stream into per-window metric samples.

Attribution rules
-----------------
Scheduler states are continuous, so their time is split at window boundaries:
each window reports the portion elapsed inside it. Waits measured by paired
enter/exit probes (pipe, socket, futex, poll, epoll) are attributed entirely
to the window in which the wait completes; in-flight waits are never split.

A select/poll call attributes its whole duration to every resource that was
registered with it. An epoll wait does the same for every file in the epoll's
interest list, pro-rated from the moment a file was inserted mid-wait and up
to the moment it was removed mid-wait.

Pairing rules (shared with the brute-force reference in the test suite):
an exit without a matching enter is dropped and counted; an enter arriving
while one is already open replaces it and the stale one is counted; a
switch-in is valid from runnable/sleep/block, a switch-out from running or
first sight, a wakeup from sleep/block or first sight; anything else is
dropped and counted. A switch-out whose next state is "running" means the
thread was preempted and is treated as runnable.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from .model import (
    WINDOW_NS, BlockRq, Bri, EpollCtl, EpollObj, EpollWaitEnter, EpollWaitExit,
    FutexEnter, FutexExit, KernelEvent, MetricKind, MetricSample, PollEnter,
    PollExit, SchedSwitchIn, SchedSwitchOut, SchedWakeup, SockAccess,
    SocketTuple, ThreadRef, ThreadState, TimeWindow, VfsAccess, VfsInode,
    bri_key, futex_bri,
)


class OrderViolation(ValueError):
    pass


_STATE_METRIC = {
    ThreadState.RUNNING: MetricKind.RUNTIME,
    ThreadState.RUNNABLE: MetricKind.RQ_TIME,
    ThreadState.SLEEP: MetricKind.SLEEP_TIME,
    ThreadState.BLOCK: MetricKind.BLOCK_TIME,
}


@dataclass
class EngineDiagnostics:
    orphan_exits: int = 0
    orphan_sched: int = 0
    replaced_enters: int = 0
    spurious_wakeups: int = 0
    inflight_at_end: int = 0

    def total_dropped(self) -> int:
        return (self.orphan_exits + self.orphan_sched + self.replaced_enters
                + self.spurious_wakeups)


@dataclass
class _SchedState:
    state: Optional[ThreadState] = None  # None until the first valid event
    since: int = 0
    in_iowait: bool = False


@dataclass
class _OpenWait:
    bri: Optional[Bri]
    started: int
    op: Optional[str] = None          # futex: "wait"/"wake"; pipe/socket: dir
    bris: Tuple[Bri, ...] = ()        # poll: the registered set
    # epoll: time already owed to files removed while this wait was open
    pending: Dict[Bri, int] = field(default_factory=dict)


# accumulator key: (metric, tid, bri, epoll, dir)
_AccKey = Tuple[MetricKind, Optional[int], Optional[Bri], Optional[EpollObj], Optional[str]]


class MetricEngine:
    """Single-writer state machine over one ordered event stream."""

    def __init__(self, window_ns: int = WINDOW_NS):
        if window_ns <= 0:
            raise ValueError("window_ns must be positive")
        self.window_ns = window_ns
        self.diagnostics = EngineDiagnostics()
        self._win: Optional[int] = None
        self._last_ts: Optional[int] = None
        self._sched: Dict[int, _SchedState] = {}
        self._threads: Dict[int, ThreadRef] = {}
        self._open: Dict[Tuple[int, str], _OpenWait] = {}
        self._interest: Dict[EpollObj, Dict[Bri, int]] = {}
        self._acc: Dict[_AccKey, int] = {}
        self._windows_flushed = 0

    # -- driving ------------------------------------------------------------

    def observe(self, ev: KernelEvent) -> List[MetricSample]:
        """Feed one event; returns samples for any windows that closed."""
        if self._last_ts is not None and ev.ts < self._last_ts:
            raise OrderViolation(
                f"event at {ev.ts} after {self._last_ts}; sort the stream first")
        self._last_ts = ev.ts
        out: List[MetricSample] = []
        if self._win is None:
            self._win = ev.ts // self.window_ns
        while ev.ts >= (self._win + 1) * self.window_ns:
            out.extend(self._flush_current())
        self._threads.setdefault(ev.thread.tid, ev.thread)
        self._dispatch(ev)
        return out

    def advance_to(self, ts: int) -> List[MetricSample]:
        """Flush every window that ends at or before ts (live-tick driver)."""
        if self._win is None:
            return []
        if self._last_ts is not None and ts < self._last_ts:
            raise OrderViolation("cannot advance backwards")
        self._last_ts = ts
        out: List[MetricSample] = []
        while ts >= (self._win + 1) * self.window_ns:
            out.extend(self._flush_current())
        return out

    def end_of_stream(self) -> List[MetricSample]:
        """Close scheduler states at the last timestamp and flush the tail."""
        if self._win is None:
            return []
        assert self._last_ts is not None
        for tid in self._sched:
            self._accrue_sched(tid, self._last_ts)
        self.diagnostics.inflight_at_end = len(self._open)
        out = self._emit_window()
        self._win = None
        return out

    @property
    def windows_flushed(self) -> int:
        return self._windows_flushed

    @property
    def threads_seen(self) -> int:
        return len(self._threads)

    # -- window handling ----------------------------------------------------

    def _flush_current(self) -> List[MetricSample]:
        boundary = (self._win + 1) * self.window_ns
        for tid in self._sched:
            self._accrue_sched(tid, boundary)
        out = self._emit_window()
        self._win += 1
        return out

    def _emit_window(self) -> List[MetricSample]:
        window = TimeWindow(self._win * self.window_ns,
                            (self._win + 1) * self.window_ns)
        samples = []
        for (metric, tid, bri, ep, dir), value in self._acc.items():
            if value == 0:
                continue
            samples.append(MetricSample(
                window=window, metric=metric, value=value,
                thread=self._threads[tid] if tid is not None else None,
                resource=bri, epoll=ep, dir=dir))
        samples.sort(key=lambda s: (
            s.metric.index,
            s.thread.tid if s.thread else -1,
            bri_key(s.resource) if s.resource is not None else "",
            s.epoll.kaddr if s.epoll else -1,
            s.dir or ""))
        self._acc.clear()
        self._windows_flushed += 1
        return samples

    # -- accumulation helpers -----------------------------------------------

    def _add(self, metric: MetricKind, value: int, tid: Optional[int] = None,
             bri: Optional[Bri] = None, ep: Optional[EpollObj] = None,
             dir: Optional[str] = None) -> None:
        if value == 0:
            return
        key = (metric, tid, bri, ep, dir)
        self._acc[key] = self._acc.get(key, 0) + value

    def _accrue_sched(self, tid: int, upto: int) -> None:
        st = self._sched[tid]
        if st.state is None:
            return
        dur = upto - st.since
        if dur > 0:
            self._add(_STATE_METRIC[st.state], dur, tid=tid)
            if st.state is ThreadState.BLOCK and st.in_iowait:
                self._add(MetricKind.IOWAIT_TIME, dur, tid=tid)
        st.since = upto

    # -- event dispatch -----------------------------------------------------

    def _dispatch(self, ev: KernelEvent) -> None:
        b = ev.body
        tid = ev.thread.tid
        if isinstance(b, SchedSwitchIn):
            self._sched_switch_in(tid, ev.ts)
        elif isinstance(b, SchedSwitchOut):
            self._sched_switch_out(tid, ev.ts, b)
        elif isinstance(b, SchedWakeup):
            self._sched_wakeup(tid, ev.ts)
        elif isinstance(b, FutexEnter):
            self._open_wait(tid, "futex", ev.ts,
                            bri=futex_bri(ev.thread, b.uaddr, b.shared), op=b.op)
        elif isinstance(b, FutexExit):
            self._futex_exit(tid, ev.ts, b.result)
        elif isinstance(b, VfsAccess):
            if b.file_kind != "fifo" or not b.blocking:
                return  # only blocking FIFO traffic is pipe-wait accountable
            if b.enter:
                self._open_wait(tid, "pipe", ev.ts, bri=b.bri, op=b.dir)
            else:
                self._close_timed_wait(tid, "pipe", ev.ts,
                                       MetricKind.PIPE_WAIT_TIME,
                                       MetricKind.PIPE_WAIT_COUNT)
        elif isinstance(b, SockAccess):
            if b.enter:
                self._open_wait(tid, "socket", ev.ts, bri=b.bri, op=b.dir)
            else:
                self._close_timed_wait(tid, "socket", ev.ts,
                                       MetricKind.SOCKET_WAIT_TIME,
                                       MetricKind.SOCKET_WAIT_COUNT)
        elif isinstance(b, PollEnter):
            self._open_wait(tid, "poll", ev.ts, bri=None, bris=tuple(b.bris))
        elif isinstance(b, PollExit):
            self._poll_exit(tid, ev.ts)
        elif isinstance(b, EpollCtl):
            self._epoll_ctl(ev.ts, b)
        elif isinstance(b, EpollWaitEnter):
            self._open_wait(tid, "epoll", ev.ts, bri=b.epoll)
        elif isinstance(b, EpollWaitExit):
            self._epoll_wait_exit(tid, ev.ts, b.epoll)
        elif isinstance(b, BlockRq):
            self._add(MetricKind.SECTOR_COUNT, b.sectors, tid=tid, bri=b.dev)

    # -- scheduler ----------------------------------------------------------

    def _sched_switch_in(self, tid: int, ts: int) -> None:
        st = self._sched.setdefault(tid, _SchedState())
        if st.state is None or st.state is ThreadState.RUNNING:
            self.diagnostics.orphan_sched += 1
            return
        self._accrue_sched(tid, ts)
        st.state = ThreadState.RUNNING
        st.in_iowait = False

    def _sched_switch_out(self, tid: int, ts: int, b: SchedSwitchOut) -> None:
        st = self._sched.setdefault(tid, _SchedState())
        if st.state is not None and st.state is not ThreadState.RUNNING:
            self.diagnostics.orphan_sched += 1
            return
        if st.state is not None:
            self._accrue_sched(tid, ts)
        st.state = b.next_state
        st.in_iowait = b.in_iowait if b.next_state is ThreadState.BLOCK else False
        st.since = ts

    def _sched_wakeup(self, tid: int, ts: int) -> None:
        st = self._sched.setdefault(tid, _SchedState())
        if st.state in (ThreadState.RUNNING, ThreadState.RUNNABLE):
            self.diagnostics.spurious_wakeups += 1
            return
        if st.state is not None:
            self._accrue_sched(tid, ts)
        st.state = ThreadState.RUNNABLE
        st.in_iowait = False
        st.since = ts

    # -- waits ----------------------------------------------------------------

    def _open_wait(self, tid: int, kind: str, ts: int, bri: Optional[Bri],
                   op: Optional[str] = None, bris: Tuple[Bri, ...] = ()) -> None:
        key = (tid, kind)
        if key in self._open:
            self.diagnostics.replaced_enters += 1
        self._open[key] = _OpenWait(bri=bri, started=ts, op=op, bris=bris)

    def _take_open(self, tid: int, kind: str) -> Optional[_OpenWait]:
        wait = self._open.pop((tid, kind), None)
        if wait is None:
            self.diagnostics.orphan_exits += 1
        return wait

    def _close_timed_wait(self, tid: int, kind: str, ts: int,
                          time_metric: MetricKind, count_metric: MetricKind) -> None:
        wait = self._take_open(tid, kind)
        if wait is None:
            return
        self._add(time_metric, ts - wait.started, tid=tid, bri=wait.bri, dir=wait.op)
        self._add(count_metric, 1, tid=tid, bri=wait.bri, dir=wait.op)

    def _futex_exit(self, tid: int, ts: int, result: int) -> None:
        wait = self._take_open(tid, "futex")
        if wait is None:
            return
        if wait.op == "wait":
            self._add(MetricKind.FUTEX_WAIT_TIME, ts - wait.started, tid=tid, bri=wait.bri)
            self._add(MetricKind.FUTEX_WAIT_COUNT, 1, tid=tid, bri=wait.bri)
        elif wait.op == "wake" and result > 0:
            self._add(MetricKind.FUTEX_WAKE_COUNT, 1, tid=tid, bri=wait.bri)

    def _poll_exit(self, tid: int, ts: int) -> None:
        wait = self._take_open(tid, "poll")
        if wait is None:
            return
        dur = ts - wait.started
        for bri in wait.bris:
            if isinstance(bri, VfsInode):
                self._add(MetricKind.PIPE_WAIT_TIME, dur, tid=tid, bri=bri, dir="poll")
            elif isinstance(bri, SocketTuple):
                self._add(MetricKind.SOCKET_WAIT_TIME, dur, tid=tid, bri=bri, dir="poll")

    def _epoll_ctl(self, ts: int, b: EpollCtl) -> None:
        interest = self._interest.setdefault(b.epoll, {})
        if b.action == "insert":
            interest.setdefault(b.target, ts)
            return
        inserted = interest.pop(b.target, None)
        if inserted is None:
            return
        # settle the removed file's share of any wait currently open on this epoll
        for (tid, kind), wait in self._open.items():
            if kind != "epoll" or wait.bri != b.epoll:
                continue
            covered_from = max(wait.started, inserted)
            if ts > covered_from:
                wait.pending[b.target] = wait.pending.get(b.target, 0) + (ts - covered_from)

    def _epoll_wait_exit(self, tid: int, ts: int, epoll: EpollObj) -> None:
        wait = self._take_open(tid, "epoll")
        if wait is None:
            return
        ep = wait.bri  # the enter's identity wins if the exit disagrees
        assert isinstance(ep, EpollObj)
        self._add(MetricKind.EPOLL_WAIT_TIME, ts - wait.started, tid=tid, bri=ep)
        self._add(MetricKind.EPOLL_WAIT_COUNT, 1, tid=tid, bri=ep)
        shares: Dict[Bri, int] = dict(wait.pending)
        for target, inserted in self._interest.get(ep, {}).items():
            covered_from = max(wait.started, inserted)
            if ts > covered_from:
                shares[target] = shares.get(target, 0) + (ts - covered_from)
        for target, dur in shares.items():
            self._add(MetricKind.EPOLL_FILE_WAIT, dur, bri=target, ep=ep)
