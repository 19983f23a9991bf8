"""Deterministic synthetic workload simulator.

Simulates threads scheduled over a fixed number of CPUs that block on
futexes, pipes, sockets, poll sets, epolls and disk, emitting the same kernel
event stream a live host would produce. Blocking calls are emitted with zero
slivers (the enter shares its timestamp with the switch-out, the exit with
the switch-in), so wait time and sleep time line up exactly.

Everything is driven by one seeded RNG: the same seed always yields the same
trace.
"""

from __future__ import annotations

import heapq
import random
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Set, Tuple

from .model import (
    BlockDev, BlockRq, Bri, EpollCtl, EpollObj, EpollWaitEnter, EpollWaitExit,
    FutexEnter, FutexExit, KernelEvent, PollEnter, PollExit, SchedSwitchIn,
    SchedSwitchOut, SchedWakeup, SockAccess, ThreadRef, ThreadState,
    VfsAccess, VfsInode, canonicalize_socket,
)

MS = 1_000_000


@dataclass
class SimConfig:
    seed: int = 0
    n_threads: int = 4
    cpu_count: int = 2
    max_events: int = 1000
    duration_ns: int = 3_000_000_000
    n_futexes: int = 3
    n_pipes: int = 3
    n_sockets: int = 3
    n_epolls: int = 1
    n_devices: int = 1
    tgid: int = 100


@dataclass
class _Thread:
    ref: ThreadRef
    status: str = "init"            # init|runnable|running|waiting|stopped
    resume_body: Optional[object] = None  # syscall exit to emit on switch-in
    wake_token: int = 0             # invalidates stale timer wakes


class WorkloadSim:
    def __init__(self, config: SimConfig):
        if not (1 <= config.n_threads <= 64):
            raise ValueError("n_threads out of range")
        self.cfg = config
        self.rng = random.Random(config.seed)
        self.events: List[KernelEvent] = []
        self._heap: List[Tuple[int, int, str, int]] = []
        self._seq = 0
        self._cpus_free = config.cpu_count
        self._runq: List[int] = []
        self.threads: Dict[int, _Thread] = {}
        self._futex_sleepers: Dict[int, List[int]] = {}
        self._epoll_interest: Dict[EpollObj, Set[Bri]] = {}
        tgid = config.tgid
        for i in range(config.n_threads):
            tid = tgid + 1 + i
            self.threads[tid] = _Thread(ThreadRef(tid, tgid, f"worker-{i}"))
        self.futexes = [0x7f0000001000 + 0x40 * i for i in range(config.n_futexes)]
        self.pipes = [VfsInode(41, 9000 + i) for i in range(config.n_pipes)]
        self.sockets = [
            canonicalize_socket("inet4", f"10.0.0.1:{40000 + i}", "10.0.0.2:5000")
            for i in range(config.n_sockets)]
        self.epolls = [EpollObj(0xffff000000200000 + 0x100 * i)
                       for i in range(config.n_epolls)]
        self.devices = [BlockDev(259, i) for i in range(config.n_devices)]

    # -- emission --------------------------------------------------------------

    def _emit(self, ts: int, tid: int, body) -> None:
        self.events.append(KernelEvent(ts, self.threads[tid].ref, body))

    def _push(self, ts: int, kind: str, tid: int) -> None:
        self._seq += 1
        heapq.heappush(self._heap, (ts, self._seq, kind, tid))

    # -- run ---------------------------------------------------------------------

    def run(self) -> List[KernelEvent]:
        for tid, th in self.threads.items():
            if self.rng.random() < 0.7:
                self._emit(0, tid, SchedWakeup())
                th.status = "runnable"
                self._runq.append(tid)
            else:
                self._emit(0, tid, SchedSwitchOut(ThreadState.SLEEP))
                th.status = "waiting"
                th.wake_token += 1
                self._push(self.rng.randint(1, 200) * MS, f"wake:{th.wake_token}", tid)
        self._dispatch(0)
        while self._heap:
            ts, _, kind, tid = heapq.heappop(self._heap)
            if len(self.events) >= self.cfg.max_events or ts >= self.cfg.duration_ns:
                break
            if kind == "slice":
                self._slice_end(ts, tid)
            elif kind.startswith("wake:"):
                th = self.threads[tid]
                if th.status == "waiting" and int(kind[5:]) == th.wake_token:
                    self._wake(ts, tid)
            self._dispatch(ts)
        return self.events

    # -- scheduling --------------------------------------------------------------

    def _dispatch(self, ts: int) -> None:
        while self._cpus_free > 0 and self._runq:
            tid = self._runq.pop(0)
            th = self.threads[tid]
            self._cpus_free -= 1
            th.status = "running"
            self._emit(ts, tid, SchedSwitchIn())
            if th.resume_body is not None:
                self._emit(ts, tid, th.resume_body)
                th.resume_body = None
            self._push(ts + self.rng.randint(1, 60) * MS, "slice", tid)

    def _wake(self, ts: int, tid: int) -> None:
        th = self.threads[tid]
        self._emit(ts, tid, SchedWakeup())
        th.status = "runnable"
        self._runq.append(tid)

    def _block(self, ts: int, tid: int, state: ThreadState, resume_body,
               timeout_ns: int, in_iowait: bool = False) -> None:
        th = self.threads[tid]
        self._emit(ts, tid, SchedSwitchOut(state, in_iowait))
        th.status = "waiting"
        th.resume_body = resume_body
        th.wake_token += 1
        self._cpus_free += 1
        self._push(ts + timeout_ns, f"wake:{th.wake_token}", tid)

    # -- per-slice action choice ---------------------------------------------------

    def _slice_end(self, ts: int, tid: int) -> None:
        rng = self.rng
        action = rng.choices(
            ["preempt", "futex_wait", "futex_wake", "pipe", "socket",
             "poll", "epoll_wait", "epoll_ctl", "disk", "sleep", "quick_recv",
             "plain_file"],
            weights=[18, 14, 12, 12, 12, 6, 8, 4, 6, 4, 2, 2])[0]
        th = self.threads[tid]
        wait_ns = rng.randint(1, 250) * MS

        if action == "preempt":
            self._emit(ts, tid, SchedSwitchOut(ThreadState.RUNNABLE))
            th.status = "runnable"
            self._cpus_free += 1
            self._runq.append(tid)
        elif action == "futex_wait":
            uaddr = rng.choice(self.futexes)
            self._emit(ts, tid, FutexEnter(uaddr, "wait", val=0))
            self._futex_sleepers.setdefault(uaddr, []).append(tid)
            self._block(ts, tid, ThreadState.SLEEP, FutexExit(0), wait_ns)
        elif action == "futex_wake":
            uaddr = rng.choice(self.futexes)
            val = rng.choice([1, 1, 2, 2 ** 31])
            sleepers = self._futex_sleepers.get(uaddr, [])
            woken = []
            while sleepers and len(woken) < val:
                cand = sleepers.pop(0)
                if self.threads[cand].status == "waiting":
                    woken.append(cand)
            self._emit(ts, tid, FutexEnter(uaddr, "wake", val=min(val, 2 ** 31)))
            self._emit(ts, tid, FutexExit(len(woken)))
            for w in woken:
                self._wake(ts, w)
            self._push(ts + rng.randint(1, 40) * MS, "slice", tid)
        elif action == "pipe":
            pipe = rng.choice(self.pipes)
            dir = rng.choice(["read", "write"])
            self._emit(ts, tid, VfsAccess(pipe, dir, "fifo", True, enter=True))
            self._block(ts, tid, ThreadState.SLEEP,
                        VfsAccess(pipe, dir, "fifo", True, enter=False), wait_ns)
        elif action == "socket":
            sock = rng.choice(self.sockets)
            dir = rng.choice(["recv", "recv", "send"])
            self._emit(ts, tid, SockAccess(sock, dir, enter=True, remote=sock.b))
            self._block(ts, tid, ThreadState.SLEEP,
                        SockAccess(sock, dir, enter=False, remote=sock.b), wait_ns)
        elif action == "poll":
            k = rng.randint(1, 4)
            pool = list(self.pipes) + list(self.sockets)
            rng.shuffle(pool)
            bris = tuple(pool[:k])
            api = rng.choice(["select", "poll"])
            self._emit(ts, tid, PollEnter(api, bris))
            self._block(ts, tid, ThreadState.SLEEP, PollExit(api), wait_ns)
        elif action == "epoll_wait":
            ep = rng.choice(self.epolls)
            self._emit(ts, tid, EpollWaitEnter(ep))
            self._block(ts, tid, ThreadState.SLEEP, EpollWaitExit(ep), wait_ns)
        elif action == "epoll_ctl":
            ep = rng.choice(self.epolls)
            interest = self._epoll_interest.setdefault(ep, set())
            pool = list(self.pipes) + list(self.sockets)
            target = rng.choice(pool)
            if target in interest and rng.random() < 0.5:
                interest.discard(target)
                self._emit(ts, tid, EpollCtl(ep, target, "remove"))
            else:
                interest.add(target)
                self._emit(ts, tid, EpollCtl(ep, target, "insert"))
            self._push(ts + rng.randint(1, 30) * MS, "slice", tid)
        elif action == "disk":
            dev = rng.choice(self.devices)
            self._emit(ts, tid, BlockRq(dev, rng.randint(8, 512)))
            self._block(ts, tid, ThreadState.BLOCK, None, wait_ns,
                        in_iowait=rng.random() < 0.7)
        elif action == "sleep":
            self._block(ts, tid, ThreadState.SLEEP, None, wait_ns)
        elif action == "quick_recv":
            sock = rng.choice(self.sockets)
            self._emit(ts, tid, SockAccess(sock, "recv", enter=True, remote=sock.b))
            self._emit(ts, tid, SockAccess(sock, "recv", enter=False, remote=sock.b))
            self._push(ts + rng.randint(1, 30) * MS, "slice", tid)
        elif action == "plain_file":
            # regular-file IO: invisible to pipe metrics by design
            f = VfsInode(8, 777)
            self._emit(ts, tid, VfsAccess(f, "read", "regular", True, enter=True))
            self._emit(ts, tid, VfsAccess(f, "read", "regular", True, enter=False))
            self._push(ts + rng.randint(1, 30) * MS, "slice", tid)


def generate(seed: int, **overrides) -> Tuple[List[KernelEvent], SimConfig]:
    """Random but reproducible workload; sizes drawn from the seed."""
    rng = random.Random(seed ^ 0x5EED)
    cfg = SimConfig(
        seed=seed,
        n_threads=rng.randint(2, 8),
        cpu_count=rng.randint(1, 4),
        max_events=rng.randint(200, 1000),
        duration_ns=rng.randint(2, 5) * 1_000_000_000,
        n_futexes=rng.randint(1, 4),
        n_pipes=rng.randint(1, 4),
        n_sockets=rng.randint(1, 4),
        n_epolls=rng.randint(1, 2),
        n_devices=rng.randint(1, 2),
    )
    for key, value in overrides.items():
        setattr(cfg, key, value)
    events = WorkloadSim(cfg).run()
    return events, cfg


def mutate(events: List[KernelEvent], seed: int) -> List[KernelEvent]:
    """Corrupt a stream the way lossy collection would: drop events, duplicate
    exits, inject stray wakeups. Timestamps stay sorted."""
    rng = random.Random(seed ^ 0xBAD)
    out = list(events)
    for _ in range(rng.randint(1, 4)):
        if not out:
            break
        op = rng.choice(["drop", "dup", "wakeup"])
        idx = rng.randrange(len(out))
        if op == "drop":
            out.pop(idx)
        elif op == "dup":
            out.insert(idx, out[idx])
        else:
            ev = out[idx]
            out.insert(idx, KernelEvent(ev.ts, ev.thread, SchedWakeup()))
    return out
