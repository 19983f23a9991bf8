"""Replay trace format: newline-delimited JSON, one kernel event per line.

Every record carries ts, tid, tgid, comm and kind; the remaining fields depend
on the kind. Unknown fields are ignored, an unknown kind is an error. Socket
records carry raw src/dst endpoints and are canonicalized while parsing, so
two peers of one connection land on the same resource identity.
"""

from __future__ import annotations

import json
from typing import IO, Iterable, List, Union

from .model import (
    BlockDev, BlockRq, Bri, EpollCtl, EpollObj, EpollWaitEnter, EpollWaitExit,
    FutexEnter, FutexExit, KernelEvent, PollEnter, PollExit, SchedSwitchIn,
    SchedSwitchOut, SchedWakeup, SockAccess, ThreadRef, ThreadState, VfsAccess,
    VfsInode, bri_from_json, bri_to_json, canonicalize_socket,
)


class TraceParseError(ValueError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"trace line {line_no}: {message}")
        self.line_no = line_no


_STATE_ALIASES = {
    "running": ThreadState.RUNNABLE,  # switched out while still runnable == preempted
    "runnable": ThreadState.RUNNABLE,
    "sleep": ThreadState.SLEEP,
    "block": ThreadState.BLOCK,
}


def _parse_body(kind: str, rec: dict):
    if kind == "sched_switch_out":
        state = _STATE_ALIASES.get(rec["next_state"])
        if state is None:
            raise ValueError(f"bad next_state {rec.get('next_state')!r}")
        return SchedSwitchOut(state, bool(rec.get("in_iowait", False)))
    if kind == "sched_switch_in":
        return SchedSwitchIn()
    if kind == "sched_wakeup":
        return SchedWakeup()
    if kind == "futex_enter":
        op = rec["op"]
        if op not in ("wait", "wake"):
            raise ValueError(f"bad futex op {op!r}")
        return FutexEnter(int(rec["uaddr"]), op, int(rec.get("val", 0)),
                          bool(rec.get("shared", False)))
    if kind == "futex_exit":
        return FutexExit(int(rec.get("result", 0)))
    if kind == "vfs_access":
        return VfsAccess(
            bri=VfsInode(int(rec["s_dev"]), int(rec["i_ino"])),
            dir=rec["dir"],
            file_kind=rec.get("file_kind", "other"),
            blocking=bool(rec.get("blocking", True)),
            enter=bool(rec["enter"]),
        )
    if kind == "sock_access":
        bri = canonicalize_socket(rec["family"], rec["src"], rec["dst"])
        return SockAccess(bri=bri, dir=rec["dir"], enter=bool(rec["enter"]),
                          remote=str(rec["dst"]))
    if kind == "poll_enter":
        bris = tuple(bri_from_json(b) for b in rec.get("bris", []))
        return PollEnter(api=rec.get("api", "poll"), bris=bris)
    if kind == "poll_exit":
        return PollExit(api=rec.get("api", "poll"))
    if kind == "epoll_ctl":
        action = rec["action"]
        if action not in ("insert", "remove"):
            raise ValueError(f"bad epoll_ctl action {action!r}")
        return EpollCtl(EpollObj(int(rec["epoll_kaddr"])),
                        bri_from_json(rec["target"]), action)
    if kind == "epoll_wait_enter":
        return EpollWaitEnter(EpollObj(int(rec["epoll_kaddr"])))
    if kind == "epoll_wait_exit":
        return EpollWaitExit(EpollObj(int(rec["epoll_kaddr"])))
    if kind == "block_rq":
        return BlockRq(BlockDev(int(rec["dev_major"]), int(rec["dev_minor"])),
                       int(rec["sectors"]))
    raise ValueError(f"unknown event kind {kind!r}")


def parse_line(line: str, line_no: int) -> KernelEvent:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as e:
        raise TraceParseError(line_no, f"invalid JSON ({e.msg})") from None
    if not isinstance(rec, dict):
        raise TraceParseError(line_no, "record must be a JSON object")
    try:
        thread = ThreadRef(int(rec["tid"]), int(rec["tgid"]), str(rec.get("comm", "")))
        body = _parse_body(rec["kind"], rec)
        return KernelEvent(int(rec["ts"]), thread, body)
    except TraceParseError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        detail = e.args[0] if e.args else e
        raise TraceParseError(line_no, f"{detail}") from None


def read_trace(source: Union[str, IO[str]]) -> List[KernelEvent]:
    """Parse a trace and return its events sorted by timestamp.

    The sort is stable, so records sharing a timestamp keep file order; replay
    of the same file is therefore deterministic.
    """
    if isinstance(source, str):
        with open(source, "r", encoding="utf-8") as fh:
            return read_trace(fh)
    events = []
    for line_no, line in enumerate(source, start=1):
        line = line.strip()
        if not line:
            continue
        events.append(parse_line(line, line_no))
    events.sort(key=lambda ev: ev.ts)
    return events


def event_to_record(ev: KernelEvent) -> dict:
    rec = {"ts": ev.ts, "tid": ev.thread.tid, "tgid": ev.thread.tgid,
           "comm": ev.thread.comm}
    b = ev.body
    if isinstance(b, SchedSwitchOut):
        rec.update(kind="sched_switch_out", next_state=b.next_state.value,
                   in_iowait=b.in_iowait)
    elif isinstance(b, SchedSwitchIn):
        rec.update(kind="sched_switch_in")
    elif isinstance(b, SchedWakeup):
        rec.update(kind="sched_wakeup")
    elif isinstance(b, FutexEnter):
        rec.update(kind="futex_enter", uaddr=b.uaddr, op=b.op, val=b.val)
        if b.shared:
            rec["shared"] = True
    elif isinstance(b, FutexExit):
        rec.update(kind="futex_exit", result=b.result)
    elif isinstance(b, VfsAccess):
        rec.update(kind="vfs_access", s_dev=b.bri.s_dev, i_ino=b.bri.i_ino,
                   dir=b.dir, file_kind=b.file_kind, blocking=b.blocking,
                   enter=b.enter)
    elif isinstance(b, SockAccess):
        # emit the canonical pair; parsing canonicalizes again (a no-op)
        rec.update(kind="sock_access", family=b.bri.family.value,
                   src=b.bri.a, dst=b.bri.b if b.remote is None else b.remote,
                   dir=b.dir, enter=b.enter)
        if b.remote is not None:
            rec["src"] = b.bri.a if b.bri.b == b.remote else b.bri.b
    elif isinstance(b, PollEnter):
        rec.update(kind="poll_enter", api=b.api,
                   bris=[bri_to_json(x) for x in b.bris])
    elif isinstance(b, PollExit):
        rec.update(kind="poll_exit", api=b.api)
    elif isinstance(b, EpollCtl):
        rec.update(kind="epoll_ctl", epoll_kaddr=b.epoll.kaddr,
                   target=bri_to_json(b.target), action=b.action)
    elif isinstance(b, EpollWaitEnter):
        rec.update(kind="epoll_wait_enter", epoll_kaddr=b.epoll.kaddr)
    elif isinstance(b, EpollWaitExit):
        rec.update(kind="epoll_wait_exit", epoll_kaddr=b.epoll.kaddr)
    elif isinstance(b, BlockRq):
        rec.update(kind="block_rq", dev_major=b.dev.major, dev_minor=b.dev.minor,
                   sectors=b.sectors)
    else:
        raise TypeError(f"unserializable event body {type(b).__name__}")
    return rec


def write_trace(events: Iterable[KernelEvent], dest: Union[str, IO[str]]) -> None:
    if isinstance(dest, str):
        with open(dest, "w", encoding="utf-8") as fh:
            write_trace(events, fh)
            return
    for ev in events:
        dest.write(json.dumps(event_to_record(ev), sort_keys=True,
                              separators=(",", ":")))
        dest.write("\n")
