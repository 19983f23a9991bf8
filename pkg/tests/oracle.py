"""Brute-force reference for the sixteen metrics, computed per definition.

Unlike the incremental engine, this builds complete per-thread timelines and
interval lists first, then intersects them with windows metric by metric.
Scheduler-state time splits at window boundaries; paired waits land entirely
in the window containing their completion. Pairing and validity rules are the
documented stream semantics (orphan exits dropped, re-entered waits replace,
switch-in valid from runnable/sleep/block, switch-out from running or first
sight, wakeup from sleep/block or first sight).
"""

from collections import defaultdict

from prismlike.model import (
    BlockRq, EpollCtl, EpollWaitEnter, EpollWaitExit, FutexEnter, FutexExit,
    KernelEvent, MetricKind, PollEnter, PollExit, SchedSwitchIn,
    SchedSwitchOut, SchedWakeup, SockAccess, SocketTuple, ThreadState,
    VfsAccess, VfsInode, bri_key, futex_bri,
)

STATE_METRIC = {
    ThreadState.RUNNING: MetricKind.RUNTIME,
    ThreadState.RUNNABLE: MetricKind.RQ_TIME,
    ThreadState.SLEEP: MetricKind.SLEEP_TIME,
    ThreadState.BLOCK: MetricKind.BLOCK_TIME,
}


def sched_timeline(events, tid, end_ts):
    """All (state, in_iowait, t0, t1) intervals for one thread."""
    intervals = []
    state, iowait, since = None, False, None
    for ev in events:
        if ev.thread.tid != tid:
            continue
        b = ev.body
        if isinstance(b, SchedSwitchIn):
            if state in (ThreadState.RUNNABLE, ThreadState.SLEEP, ThreadState.BLOCK):
                intervals.append((state, iowait, since, ev.ts))
                state, iowait, since = ThreadState.RUNNING, False, ev.ts
        elif isinstance(b, SchedSwitchOut):
            if state is ThreadState.RUNNING:
                intervals.append((state, iowait, since, ev.ts))
            if state is None or state is ThreadState.RUNNING:
                state = b.next_state
                iowait = b.in_iowait if b.next_state is ThreadState.BLOCK else False
                since = ev.ts
        elif isinstance(b, SchedWakeup):
            if state in (ThreadState.SLEEP, ThreadState.BLOCK):
                intervals.append((state, iowait, since, ev.ts))
                state, iowait, since = ThreadState.RUNNABLE, False, ev.ts
            elif state is None:
                state, iowait, since = ThreadState.RUNNABLE, False, ev.ts
    if state is not None and since is not None and end_ts > since:
        intervals.append((state, iowait, since, end_ts))
    return intervals


def paired_waits(events, tid, match, payload=lambda b: None):
    """(enter_ts, exit_ts, enter_body, exit_body) for one open/close pair kind.

    `match(body)` returns "enter"/"exit"/None. A new enter discards a pending
    one; an exit without a pending enter is ignored.
    """
    pairs = []
    pending = None
    for ev in events:
        if ev.thread.tid != tid:
            continue
        role = match(ev.body)
        if role == "enter":
            pending = (ev.ts, ev.body)
        elif role == "exit" and pending is not None:
            pairs.append((pending[0], ev.ts, pending[1], ev.body))
            pending = None
    return pairs


def window_overlap(t0, t1, win_idx, window_ns):
    lo = max(t0, win_idx * window_ns)
    hi = min(t1, (win_idx + 1) * window_ns)
    return max(0, hi - lo)


def epoll_registration_intervals(events, end_ts):
    """(epoll, target) -> list of [t0, t1) registration spans."""
    spans = defaultdict(list)
    open_since = {}
    for ev in events:
        b = ev.body
        if not isinstance(b, EpollCtl):
            continue
        key = (b.epoll, b.target)
        if b.action == "insert":
            if key not in open_since:
                open_since[key] = ev.ts
        elif b.action == "remove":
            t0 = open_since.pop(key, None)
            if t0 is not None:
                spans[key].append((t0, ev.ts))
    for key, t0 in open_since.items():
        spans[key].append((t0, end_ts))
    return spans


def oracle_metrics(events, window_ns):
    """dict[(win_idx, metric, subject, resource_key)] -> value, zeros omitted.

    subject: tid for thread rows, epoll key text for epoll_file_wait rows.
    """
    events = sorted(events, key=lambda e: e.ts)
    out = defaultdict(int)
    if not events:
        return {}
    end_ts = events[-1].ts
    last_win = end_ts // window_ns
    tids = sorted({ev.thread.tid for ev in events})
    threads = {}
    for ev in events:
        threads.setdefault(ev.thread.tid, ev.thread)

    # scheduler states: boundary-split interval intersection
    for tid in tids:
        for state, iowait, t0, t1 in sched_timeline(events, tid, end_ts):
            for win in range(t0 // window_ns, min(t1 // window_ns, last_win) + 1):
                dur = window_overlap(t0, t1, win, window_ns)
                if dur > 0:
                    out[(win, STATE_METRIC[state], tid, None)] += dur
                    if state is ThreadState.BLOCK and iowait:
                        out[(win, MetricKind.IOWAIT_TIME, tid, None)] += dur

    # pipe (blocking FIFO access), completion-window attribution
    def fifo_match(b):
        if isinstance(b, VfsAccess) and b.file_kind == "fifo" and b.blocking:
            return "enter" if b.enter else "exit"
        return None

    for tid in tids:
        for t0, t1, enter, _ in paired_waits(events, tid, fifo_match):
            win = t1 // window_ns
            key = bri_key(enter.bri)
            out[(win, MetricKind.PIPE_WAIT_TIME, tid, key)] += t1 - t0
            out[(win, MetricKind.PIPE_WAIT_COUNT, tid, key)] += 1

    # sockets
    def sock_match(b):
        if isinstance(b, SockAccess):
            return "enter" if b.enter else "exit"
        return None

    for tid in tids:
        for t0, t1, enter, _ in paired_waits(events, tid, sock_match):
            win = t1 // window_ns
            key = bri_key(enter.bri)
            out[(win, MetricKind.SOCKET_WAIT_TIME, tid, key)] += t1 - t0
            out[(win, MetricKind.SOCKET_WAIT_COUNT, tid, key)] += 1

    # futex wait and wake
    def futex_match(b):
        if isinstance(b, FutexEnter):
            return "enter"
        if isinstance(b, FutexExit):
            return "exit"
        return None

    for tid in tids:
        for t0, t1, enter, exit_ in paired_waits(events, tid, futex_match):
            win = t1 // window_ns
            key = bri_key(futex_bri(threads[tid], enter.uaddr, enter.shared))
            if enter.op == "wait":
                out[(win, MetricKind.FUTEX_WAIT_TIME, tid, key)] += t1 - t0
                out[(win, MetricKind.FUTEX_WAIT_COUNT, tid, key)] += 1
            elif enter.op == "wake" and exit_.result > 0:
                out[(win, MetricKind.FUTEX_WAKE_COUNT, tid, key)] += 1

    # select/poll: whole duration to every registered pipe/socket resource
    def poll_match(b):
        if isinstance(b, PollEnter):
            return "enter"
        if isinstance(b, PollExit):
            return "exit"
        return None

    for tid in tids:
        for t0, t1, enter, _ in paired_waits(events, tid, poll_match):
            win = t1 // window_ns
            for bri in enter.bris:
                if isinstance(bri, VfsInode):
                    out[(win, MetricKind.PIPE_WAIT_TIME, tid, bri_key(bri))] += t1 - t0
                elif isinstance(bri, SocketTuple):
                    out[(win, MetricKind.SOCKET_WAIT_TIME, tid, bri_key(bri))] += t1 - t0

    # epoll waits plus per-registered-file attribution
    def epoll_match(b):
        if isinstance(b, EpollWaitEnter):
            return "enter"
        if isinstance(b, EpollWaitExit):
            return "exit"
        return None

    reg = epoll_registration_intervals(events, end_ts)
    for tid in tids:
        for t0, t1, enter, _ in paired_waits(events, tid, epoll_match):
            win = t1 // window_ns
            ep_key = bri_key(enter.epoll)
            out[(win, MetricKind.EPOLL_WAIT_TIME, tid, ep_key)] += t1 - t0
            out[(win, MetricKind.EPOLL_WAIT_COUNT, tid, ep_key)] += 1
            for (epoll, target), spans in reg.items():
                if epoll != enter.epoll:
                    continue
                covered = sum(max(0, min(t1, s1) - max(t0, s0)) for s0, s1 in spans)
                if covered > 0:
                    out[(win, MetricKind.EPOLL_FILE_WAIT, ep_key, bri_key(target))] += covered

    # block device sector requests, instantaneous
    for ev in events:
        if isinstance(ev.body, BlockRq):
            win = ev.ts // window_ns
            out[(win, MetricKind.SECTOR_COUNT, ev.thread.tid, bri_key(ev.body.dev))] += ev.body.sectors

    return {k: v for k, v in out.items() if v != 0}


def engine_samples_as_dict(samples, window_ns):
    """Normalize engine output into the oracle's key shape."""
    out = defaultdict(int)
    for s in samples:
        win = s.window.start_ns // window_ns
        if s.metric is MetricKind.EPOLL_FILE_WAIT:
            subject = bri_key(s.epoll)
        else:
            subject = s.thread.tid
        res = bri_key(s.resource) if s.resource is not None else None
        out[(win, s.metric, subject, res)] += s.value
    return {k: v for k, v in out.items() if v != 0}
