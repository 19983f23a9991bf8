"""Shared vocabulary: threads, kernel resources, events, metrics, windows.

Everything here is an immutable value type. Resource identities (BRIs) are
stable across file descriptors: two descriptors backed by the same kernel
object compare equal. Time is integer monotonic nanoseconds throughout.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Union

WINDOW_NS = 1_000_000_000

COMM_MAX_BYTES = 16


class ModelError(ValueError):
    pass


class UnsupportedFamily(ModelError):
    pass


def clamp_comm(comm: str) -> str:
    """Truncate a command name to the kernel's 16-byte limit."""
    raw = comm.encode("utf-8")[:COMM_MAX_BYTES]
    return raw.decode("utf-8", errors="ignore")


@dataclass(frozen=True)
class ThreadRef:
    tid: int
    tgid: int
    comm: str = ""

    def __post_init__(self):
        if self.tid <= 0 or self.tgid <= 0:
            raise ModelError(f"tid and tgid must be positive (tid={self.tid}, tgid={self.tgid})")
        object.__setattr__(self, "comm", clamp_comm(self.comm))


# ---------------------------------------------------------------------------
# Backing resource identifiers
# ---------------------------------------------------------------------------

class SocketFamily(str, Enum):
    INET4 = "inet4"
    INET6 = "inet6"
    UNIX = "unix"


@dataclass(frozen=True)
class VfsInode:
    """Identity of a VFS-backed object: pipes, FIFOs, regular files, unix sockets."""

    s_dev: int
    i_ino: int


@dataclass(frozen=True)
class SocketTuple:
    """Canonical connection identity. `a` and `b` are the endpoint pair in
    lexicographic order so both peers of one connection produce equal values."""

    family: SocketFamily
    a: str
    b: str


@dataclass(frozen=True)
class FutexAddr:
    """A futex word. Private futexes are scoped by owning process; shared ones
    are global (tgid pinned to 0)."""

    tgid: int
    uaddr: int
    shared: bool = False


@dataclass(frozen=True)
class EpollObj:
    """An event-poll instance, identified by its kernel object address (the
    anonymous-inode filesystem reuses inodes, so the inode is useless here)."""

    kaddr: int


@dataclass(frozen=True)
class BlockDev:
    major: int
    minor: int


Bri = Union[VfsInode, SocketTuple, FutexAddr, EpollObj, BlockDev]

_BRI_KIND = {
    VfsInode: "vfs_inode",
    SocketTuple: "socket",
    FutexAddr: "futex",
    EpollObj: "epoll",
    BlockDev: "block_dev",
}


def bri_kind(bri: Bri) -> str:
    return _BRI_KIND[type(bri)]


def bri_of_file(s_dev: int, i_ino: int) -> VfsInode:
    """Identity for any VFS-backed descriptor; injective over (s_dev, i_ino)."""
    return VfsInode(int(s_dev), int(i_ino))


def canonicalize_socket(family, local: str, remote: str) -> SocketTuple:
    """Build the connection identity both peers agree on.

    The endpoint pair is ordered lexicographically, so recv-side and send-side
    observations of one connection collapse to the same value. Unix-domain
    endpoints are whatever stable text the probe produced (a path or an
    inode-pair); the same ordering rule applies.
    """
    try:
        fam = SocketFamily(family)
    except ValueError:
        raise UnsupportedFamily(f"unsupported socket family: {family!r}") from None
    a, b = sorted((str(local), str(remote)))
    return SocketTuple(fam, a, b)


def futex_bri(thread: ThreadRef, uaddr: int, shared: bool = False) -> FutexAddr:
    """Scope a futex word: per-process for private futexes, global otherwise."""
    if shared:
        return FutexAddr(0, int(uaddr), True)
    return FutexAddr(thread.tgid, int(uaddr), False)


def bri_to_json(bri: Bri) -> dict:
    d = {"kind": bri_kind(bri)}
    if isinstance(bri, VfsInode):
        d.update(s_dev=bri.s_dev, i_ino=bri.i_ino)
    elif isinstance(bri, SocketTuple):
        d.update(family=bri.family.value, a=bri.a, b=bri.b)
    elif isinstance(bri, FutexAddr):
        d.update(tgid=bri.tgid, uaddr=bri.uaddr, shared=bri.shared)
    elif isinstance(bri, EpollObj):
        d.update(kaddr=bri.kaddr)
    elif isinstance(bri, BlockDev):
        d.update(major=bri.major, minor=bri.minor)
    return d


def bri_from_json(d: dict) -> Bri:
    kind = d.get("kind")
    if kind == "vfs_inode":
        return VfsInode(int(d["s_dev"]), int(d["i_ino"]))
    if kind == "socket":
        if "a" in d and "b" in d:
            return canonicalize_socket(d["family"], d["a"], d["b"])
        return canonicalize_socket(d["family"], d["src"], d["dst"])
    if kind == "futex":
        return FutexAddr(int(d.get("tgid", 0)), int(d["uaddr"]), bool(d.get("shared", False)))
    if kind == "epoll":
        return EpollObj(int(d["kaddr"]))
    if kind == "block_dev":
        return BlockDev(int(d["major"]), int(d["minor"]))
    raise ModelError(f"unknown BRI kind: {kind!r}")


def bri_key(bri: Bri) -> str:
    """Stable text encoding used as a database key; loses nothing."""
    return json.dumps(bri_to_json(bri), sort_keys=True, separators=(",", ":"))


def bri_from_key(key: str) -> Bri:
    return bri_from_json(json.loads(key))


def is_ipc_bri(bri: Bri) -> bool:
    """Futexes, pipes/FIFOs and sockets mediate inter-thread dependencies."""
    return isinstance(bri, (VfsInode, SocketTuple, FutexAddr))


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

class Granularity(Enum):
    THREAD = "thread"
    THREAD_RESOURCE = "thread_resource"
    EPOLL_RESOURCE = "epoll_resource"


class MetricKind(Enum):
    RUNTIME = "runtime"
    RQ_TIME = "rq_time"
    BLOCK_TIME = "block_time"
    IOWAIT_TIME = "iowait_time"
    SLEEP_TIME = "sleep_time"
    PIPE_WAIT_TIME = "pipe_wait_time"
    PIPE_WAIT_COUNT = "pipe_wait_count"
    SOCKET_WAIT_TIME = "socket_wait_time"
    SOCKET_WAIT_COUNT = "socket_wait_count"
    SECTOR_COUNT = "sector_count"
    EPOLL_WAIT_TIME = "epoll_wait_time"
    EPOLL_WAIT_COUNT = "epoll_wait_count"
    EPOLL_FILE_WAIT = "epoll_file_wait"
    FUTEX_WAIT_TIME = "futex_wait_time"
    FUTEX_WAIT_COUNT = "futex_wait_count"
    FUTEX_WAKE_COUNT = "futex_wake_count"

    @property
    def index(self) -> int:
        return _METRIC_ORDER[self]

    @property
    def granularity(self) -> Granularity:
        if self in _THREAD_SCOPED:
            return Granularity.THREAD
        if self is MetricKind.EPOLL_FILE_WAIT:
            return Granularity.EPOLL_RESOURCE
        return Granularity.THREAD_RESOURCE

    @property
    def is_time(self) -> bool:
        return self.value.endswith("_time") or self in (
            MetricKind.RUNTIME, MetricKind.EPOLL_FILE_WAIT)


_METRIC_ORDER = {m: i for i, m in enumerate(MetricKind)}
_THREAD_SCOPED = {
    MetricKind.RUNTIME, MetricKind.RQ_TIME, MetricKind.BLOCK_TIME,
    MetricKind.IOWAIT_TIME, MetricKind.SLEEP_TIME,
}

SCHED_METRICS = (
    MetricKind.RUNTIME, MetricKind.RQ_TIME, MetricKind.SLEEP_TIME,
    MetricKind.BLOCK_TIME, MetricKind.IOWAIT_TIME,
)


@dataclass(frozen=True)
class TimeWindow:
    start_ns: int
    end_ns: int

    def __post_init__(self):
        if self.end_ns <= self.start_ns:
            raise ModelError("window must be non-empty and forward")

    @property
    def length_ns(self) -> int:
        return self.end_ns - self.start_ns

    def contains(self, ts: int) -> bool:
        return self.start_ns <= ts < self.end_ns


def window_of(ts: int, window_ns: int = WINDOW_NS) -> TimeWindow:
    start = (ts // window_ns) * window_ns
    return TimeWindow(start, start + window_ns)


@dataclass(frozen=True)
class MetricSample:
    """One aggregated value for (window, subject, metric, resource).

    The subject is a thread for everything except epoll_file_wait rows, whose
    subject is the epoll instance (carried in `epoll`) and whose `resource` is
    the awaited file. `dir` qualifies pipe/socket waits (read/write/recv/send,
    or "poll" for select/poll-attributed time).
    """

    window: TimeWindow
    metric: MetricKind
    value: int
    thread: Optional[ThreadRef] = None
    resource: Optional[Bri] = None
    epoll: Optional[EpollObj] = None
    dir: Optional[str] = None

    def __post_init__(self):
        if self.value < 0:
            raise ModelError("metric values are non-negative")
        needs_resource = self.metric.granularity is not Granularity.THREAD
        if needs_resource and self.resource is None:
            raise ModelError(f"{self.metric.value} requires a resource")
        if not needs_resource and self.resource is not None:
            raise ModelError(f"{self.metric.value} is thread-scoped, got a resource")
        if self.metric is MetricKind.EPOLL_FILE_WAIT:
            if self.epoll is None or self.thread is not None:
                raise ModelError("epoll_file_wait rows carry the epoll as subject")
        elif self.thread is None:
            raise ModelError(f"{self.metric.value} requires a thread subject")


# ---------------------------------------------------------------------------
# Kernel events
# ---------------------------------------------------------------------------

class ThreadState(str, Enum):
    RUNNING = "running"
    RUNNABLE = "runnable"
    SLEEP = "sleep"
    BLOCK = "block"


@dataclass(frozen=True)
class SchedSwitchOut:
    next_state: ThreadState
    in_iowait: bool = False


@dataclass(frozen=True)
class SchedSwitchIn:
    pass


@dataclass(frozen=True)
class SchedWakeup:
    pass


@dataclass(frozen=True)
class FutexEnter:
    uaddr: int
    op: str  # "wait" | "wake"
    val: int = 0
    shared: bool = False


@dataclass(frozen=True)
class FutexExit:
    result: int = 0


@dataclass(frozen=True)
class VfsAccess:
    bri: VfsInode
    dir: str  # "read" | "write"
    file_kind: str  # "fifo" | "regular" | "other"
    blocking: bool
    enter: bool


@dataclass(frozen=True)
class SockAccess:
    bri: SocketTuple
    dir: str  # "recv" | "send"
    enter: bool
    remote: Optional[str] = None  # the peer endpoint as seen by this thread


@dataclass(frozen=True)
class PollEnter:
    api: str  # "select" | "poll"
    bris: tuple = ()


@dataclass(frozen=True)
class PollExit:
    api: str


@dataclass(frozen=True)
class EpollCtl:
    epoll: EpollObj
    target: Bri
    action: str  # "insert" | "remove"


@dataclass(frozen=True)
class EpollWaitEnter:
    epoll: EpollObj


@dataclass(frozen=True)
class EpollWaitExit:
    epoll: EpollObj


@dataclass(frozen=True)
class BlockRq:
    dev: BlockDev
    sectors: int


EventBody = Union[
    SchedSwitchOut, SchedSwitchIn, SchedWakeup,
    FutexEnter, FutexExit,
    VfsAccess, SockAccess,
    PollEnter, PollExit,
    EpollCtl, EpollWaitEnter, EpollWaitExit,
    BlockRq,
]


@dataclass(frozen=True)
class KernelEvent:
    ts: int
    thread: ThreadRef
    body: EventBody

    def __post_init__(self):
        if self.ts < 0:
            raise ModelError("timestamps are non-negative nanoseconds")


# ---------------------------------------------------------------------------
# Session-level records shared between collector, store and graphs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DiscoveryEdge:
    from_tgid: int
    to_tgid: int
    via: Bri
    first_seen: int

    def __post_init__(self):
        if self.from_tgid == self.to_tgid:
            raise ModelError("discovery edges connect distinct processes")


@dataclass(frozen=True)
class ProcessMeta:
    tgid: int
    comm: str
    first_seen: int
    parent_tgid: Optional[int] = None
