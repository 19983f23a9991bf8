"""Distribution-shift detection and selective thread tracking.

The tracker seeds on entry-point threads (those with IPv4/IPv6 socket
activity), tests every metric of every not-yet-seen tracked thread between a
baseline and a compare range, and expands the tracked set along the
counterparts of each flagged futex/pipe/socket resource. It repeats until no
new thread joins, so the work grows with the number of threads on the
degradation path instead of the process's full thread count: each thread's
metric set is scanned exactly once.

A metric is flagged when either the Mann-Whitney U or the Kolmogorov-Smirnov
test rejects at `alpha` and the absolute Cohen's d reaches `min_effect`; the
report carries both effect sizes (Cohen's d and the Wasserstein distance).
Per-window values inside each range form the samples: missing windows count
as zeros for thread-scoped metrics and are skipped for resource-scoped ones
(an inactive resource has no row at all). Fewer than five samples on either
side means "not enough data", which is distinct from "no shift".
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np
from scipy import stats

from .graph import resource_aliases, thread_aliases
from .model import (
    Bri, EpollObj, MetricKind, SocketFamily, SocketTuple, ThreadRef,
    bri_from_key, bri_key, is_ipc_bri,
)
from .store import PIPE_KINDS, SOCKET_KINDS, MetricStore

MIN_SAMPLES = 5
DEFAULT_ALPHA = 0.01
DEFAULT_MIN_EFFECT = 0.5


class NotEnoughData(Exception):
    pass


class NotAnIpcResource(ValueError):
    pass


@dataclass(frozen=True)
class Range:
    start_ns: int
    end_ns: int

    def __post_init__(self):
        if self.end_ns <= self.start_ns:
            raise ValueError("range end must follow start")

    def windows(self, window_ns: int) -> List[int]:
        first = -(-self.start_ns // window_ns)  # ceil to the next boundary
        first_start = first * window_ns
        if first_start >= self.end_ns:
            return []
        return list(range(first_start, self.end_ns, window_ns))


@dataclass(frozen=True)
class ShiftReport:
    test: str          # which test produced the reported p: "mwu" or "ks"
    p_value: float
    p_mwu: float
    p_ks: float
    wasserstein: float
    cohens_d: float
    direction: str     # "increase" | "decrease"
    n_baseline: int
    n_compare: int

    def to_json(self) -> dict:
        return {"test": self.test, "p_value": self.p_value, "p_mwu": self.p_mwu,
                "p_ks": self.p_ks, "wasserstein": self.wasserstein,
                "cohens_d": self.cohens_d, "direction": self.direction,
                "n_baseline": self.n_baseline, "n_compare": self.n_compare}


_MAX_EFFECT = 1e9  # complete separation of constant samples, kept JSON-safe


def cohens_d(baseline: Sequence[float], compare: Sequence[float]) -> float:
    a = np.asarray(baseline, dtype=float)
    b = np.asarray(compare, dtype=float)
    na, nb = len(a), len(b)
    var = ((na - 1) * a.var(ddof=1) + (nb - 1) * b.var(ddof=1)) / (na + nb - 2)
    if var <= 0:
        if a.mean() == b.mean():
            return 0.0
        return math.copysign(_MAX_EFFECT, b.mean() - a.mean())
    d = float((b.mean() - a.mean()) / math.sqrt(var))
    return max(-_MAX_EFFECT, min(_MAX_EFFECT, d))


def distribution_shift(baseline: Sequence[float], compare: Sequence[float],
                       alpha: float = DEFAULT_ALPHA,
                       min_effect: float = DEFAULT_MIN_EFFECT,
                       ) -> Optional[ShiftReport]:
    """Test two per-window sample sets; report a shift or nothing.

    Raises NotEnoughData below MIN_SAMPLES per side; that is not a "no shift"
    answer, the metric simply cannot be assessed.
    """
    if len(baseline) < MIN_SAMPLES or len(compare) < MIN_SAMPLES:
        raise NotEnoughData(
            f"need {MIN_SAMPLES} samples per side, got "
            f"{len(baseline)}/{len(compare)}")
    a = np.asarray(baseline, dtype=float)
    b = np.asarray(compare, dtype=float)
    if np.ptp(np.concatenate([a, b])) == 0:
        return None  # one constant value everywhere: nothing shifted
    mwu = stats.mannwhitneyu(a, b, alternative="two-sided")
    ks = stats.ks_2samp(a, b)
    p_mwu = float(mwu.pvalue)
    p_ks = float(ks.pvalue)
    d = cohens_d(a, b)
    if min(p_mwu, p_ks) >= alpha or abs(d) < min_effect:
        return None
    return ShiftReport(
        test="mwu" if p_mwu <= p_ks else "ks",
        p_value=min(p_mwu, p_ks),
        p_mwu=p_mwu,
        p_ks=p_ks,
        wasserstein=float(stats.wasserstein_distance(a, b)),
        cohens_d=d,
        direction="increase" if b.mean() > a.mean() else "decrease",
        n_baseline=len(a),
        n_compare=len(b),
    )


def change_point(series: Sequence[float]) -> Optional[int]:
    """Single mean-shift scan: index that maximizes the between-segment
    t-statistic. Advisory only (window-boundary suggestion), never a flag."""
    x = np.asarray(series, dtype=float)
    n = len(x)
    if n < 2 * MIN_SAMPLES:
        return None
    best, best_t = None, 0.0
    for i in range(MIN_SAMPLES, n - MIN_SAMPLES + 1):
        a, b = x[:i], x[i:]
        pooled = math.sqrt(a.var(ddof=1) / len(a) + b.var(ddof=1) / len(b))
        if pooled == 0:
            continue
        t = abs(b.mean() - a.mean()) / pooled
        if t > best_t:
            best, best_t = i, t
    return best


# ---------------------------------------------------------------------------
# Metric series extraction
# ---------------------------------------------------------------------------

_SCHED_COLS = {
    MetricKind.RUNTIME: "runtime_ns",
    MetricKind.RQ_TIME: "rq_time_ns",
    MetricKind.SLEEP_TIME: "sleep_time_ns",
    MetricKind.BLOCK_TIME: "block_time_ns",
    MetricKind.IOWAIT_TIME: "iowait_time_ns",
}


@dataclass(frozen=True)
class MetricSeries:
    thread: ThreadRef
    metric: MetricKind
    resource: Optional[Bri]           # None for thread-scoped metrics
    epoll: Optional[EpollObj]         # set for epoll_file_wait entries
    baseline: Tuple[float, ...]
    compare: Tuple[float, ...]

    @property
    def sort_key(self):
        return (self.metric.index,
                bri_key(self.resource) if self.resource is not None else "")


def _series_for_thread(store: MetricStore, thread: ThreadRef,
                       baseline: Range, compare: Range) -> List[MetricSeries]:
    window_ns = store.window_ns
    base_windows = baseline.windows(window_ns)
    cmp_windows = compare.windows(window_ns)
    out: List[MetricSeries] = []

    # scheduler metrics: quiet windows contribute zeros
    rows = store.sql(
        "SELECT ts, runtime_ns, rq_time_ns, sleep_time_ns, block_time_ns, "
        "iowait_time_ns FROM task_samples WHERE tid=?", (thread.tid,))
    by_ts = {r[0]: r[1:] for r in rows}
    for idx, metric in enumerate((MetricKind.RUNTIME, MetricKind.RQ_TIME,
                                  MetricKind.SLEEP_TIME, MetricKind.BLOCK_TIME,
                                  MetricKind.IOWAIT_TIME)):
        base = tuple(float(by_ts[ts][idx]) if ts in by_ts else 0.0
                     for ts in base_windows)
        comp = tuple(float(by_ts[ts][idx]) if ts in by_ts else 0.0
                     for ts in cmp_windows)
        out.append(MetricSeries(thread, metric, None, None, base, comp))

    def resource_series(sql: str, params, metric_time, metric_count=None):
        rows = store.sql(sql, params)
        grouped: Dict[str, Dict[int, List[float]]] = {}
        for ts, key, wait_ns, count in rows:
            g = grouped.setdefault(key, {})
            g.setdefault(ts, [0.0, 0.0])
            g[ts][0] += wait_ns
            g[ts][1] += count
        for key in sorted(grouped):
            bri = bri_from_key(key)
            per_ts = grouped[key]
            for slot, metric in ((0, metric_time), (1, metric_count)):
                if metric is None:
                    continue
                base = tuple(per_ts[ts][slot] for ts in base_windows if ts in per_ts)
                comp = tuple(per_ts[ts][slot] for ts in cmp_windows if ts in per_ts)
                out.append(MetricSeries(thread, metric, bri, None, base, comp))

    span = (min(baseline.start_ns, compare.start_ns),
            max(baseline.end_ns, compare.end_ns))
    kinds = lambda ks: ",".join(f"'{k}'" for k in ks)
    resource_series(
        f"SELECT ts, bri_key, wait_ns, wait_count FROM resource_waits "
        f"WHERE tid=? AND res_kind IN ({kinds(PIPE_KINDS)}) AND ts>=? AND ts<?",
        (thread.tid, *span), MetricKind.PIPE_WAIT_TIME, MetricKind.PIPE_WAIT_COUNT)
    resource_series(
        f"SELECT ts, bri_key, wait_ns, wait_count FROM resource_waits "
        f"WHERE tid=? AND res_kind IN ({kinds(SOCKET_KINDS)}) AND ts>=? AND ts<?",
        (thread.tid, *span), MetricKind.SOCKET_WAIT_TIME, MetricKind.SOCKET_WAIT_COUNT)
    resource_series(
        "SELECT ts, bri_key, wait_ns, wait_count FROM resource_waits "
        "WHERE tid=? AND res_kind='futex' AND ts>=? AND ts<?",
        (thread.tid, *span), MetricKind.FUTEX_WAIT_TIME, MetricKind.FUTEX_WAIT_COUNT)
    resource_series(
        "SELECT ts, bri_key, wait_ns, wait_count FROM resource_waits "
        "WHERE tid=? AND res_kind='epoll' AND ts>=? AND ts<?",
        (thread.tid, *span), MetricKind.EPOLL_WAIT_TIME, MetricKind.EPOLL_WAIT_COUNT)
    resource_series(
        "SELECT ts, bri_key, wake_count AS wait_ns, 0 AS wait_count "
        "FROM futex_wakes WHERE tid=? AND ts>=? AND ts<?",
        (thread.tid, *span), MetricKind.FUTEX_WAKE_COUNT)
    resource_series(
        "SELECT ts, printf('{\"kind\":\"block_dev\",\"major\":%d,\"minor\":%d}', "
        "dev_major, dev_minor) AS bri_key, sectors AS wait_ns, 0 AS wait_count "
        "FROM device_io WHERE tid=? AND ts>=? AND ts<?",
        (thread.tid, *span), MetricKind.SECTOR_COUNT)

    # epoll_file_wait participates through the epolls this thread waits on
    ep_keys = [r[0] for r in store.sql(
        "SELECT DISTINCT bri_key FROM resource_waits "
        "WHERE tid=? AND res_kind='epoll' AND ts>=? AND ts<? ORDER BY bri_key",
        (thread.tid, *span))]
    for ep_key in ep_keys:
        rows = store.sql(
            "SELECT ts, bri_key, wait_ns FROM epoll_file_waits "
            "WHERE epoll_key=? AND ts>=? AND ts<?", (ep_key, *span))
        grouped: Dict[str, Dict[int, float]] = {}
        for ts, key, wait_ns in rows:
            grouped.setdefault(key, {})
            grouped[key][ts] = grouped[key].get(ts, 0.0) + wait_ns
        ep = bri_from_key(ep_key)
        for key in sorted(grouped):
            per_ts = grouped[key]
            base = tuple(per_ts[ts] for ts in base_windows if ts in per_ts)
            comp = tuple(per_ts[ts] for ts in cmp_windows if ts in per_ts)
            out.append(MetricSeries(thread, MetricKind.EPOLL_FILE_WAIT,
                                    bri_from_key(key), ep, base, comp))
    out.sort(key=lambda s: s.sort_key)
    return out


# ---------------------------------------------------------------------------
# Entry threads and counterparts
# ---------------------------------------------------------------------------

def _thread_refs(store: MetricStore, tids: Iterable[int]) -> List[ThreadRef]:
    refs = []
    for tid in sorted(set(tids)):
        row = store.sql(
            "SELECT tgid, comm FROM task_samples WHERE tid=? ORDER BY ts LIMIT 1",
            (tid,))
        if not row:
            row = store.sql(
                "SELECT tgid, '' FROM resource_waits WHERE tid=? LIMIT 1", (tid,))
        if not row:
            row = store.sql(
                "SELECT tgid, '' FROM futex_wakes WHERE tid=? LIMIT 1", (tid,))
        if row:
            refs.append(ThreadRef(tid, row[0][0], row[0][1]))
    return refs


def detect_entry_threads(store: MetricStore, range_: Range,
                         tgids: Optional[Sequence[int]] = None) -> List[ThreadRef]:
    """Threads facing incoming requests: any IPv4/IPv6 socket wait activity.
    Threads whose only socket traffic is unix-domain are internal plumbing."""
    kinds = ",".join(f"'{k}'" for k in SOCKET_KINDS)
    tg = "" if not tgids else (
        " AND tgid IN (%s)" % ",".join(str(int(t)) for t in tgids))
    rows = store.sql(
        f"SELECT DISTINCT tid, bri_key FROM resource_waits "
        f"WHERE res_kind IN ({kinds}) AND ts>=? AND ts<?{tg} "
        f"AND (wait_ns > 0 OR wait_count > 0)",
        (range_.start_ns, range_.end_ns))
    tids = set()
    for tid, key in rows:
        bri = bri_from_key(key)
        if isinstance(bri, SocketTuple) and bri.family in (SocketFamily.INET4,
                                                           SocketFamily.INET6):
            tids.add(tid)
    return _thread_refs(store, tids)


def counterparts(store: MetricStore, range_: Range, resource: Bri,
                 excluding: Iterable[int] = ()) -> List[ThreadRef]:
    """Threads that interacted with an IPC resource inside the range: waiters,
    wakers, readers and writers alike."""
    if not is_ipc_bri(resource):
        raise NotAnIpcResource(f"{bri_key(resource)} is not a futex/pipe/socket")
    key = bri_key(resource)
    params = (key, range_.start_ns, range_.end_ns)
    tids = {r[0] for r in store.sql(
        "SELECT DISTINCT tid FROM resource_waits WHERE bri_key=? AND ts>=? AND ts<?",
        params)}
    tids |= {r[0] for r in store.sql(
        "SELECT DISTINCT tid FROM futex_wakes WHERE bri_key=? AND ts>=? AND ts<?",
        params)}
    tids -= set(excluding)
    return _thread_refs(store, tids)


# ---------------------------------------------------------------------------
# Tracking
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Flag:
    iteration: int
    thread: ThreadRef
    metric: MetricKind
    resource: Optional[Bri]
    epoll: Optional[EpollObj]
    shift: ShiftReport

    def to_json(self, taliases=None, raliases=None) -> dict:
        rkey = bri_key(self.resource) if self.resource is not None else None
        d = {"iteration": self.iteration,
             "thread": {"tid": self.thread.tid, "tgid": self.thread.tgid,
                        "comm": self.thread.comm},
             "metric": self.metric.value,
             "resource": rkey,
             "epoll": bri_key(self.epoll) if self.epoll is not None else None,
             "shift": self.shift.to_json()}
        if taliases:
            d["thread"]["alias"] = taliases.get(self.thread.tid)
        if raliases and rkey is not None:
            d["resource_alias"] = raliases.get(rkey)
        return d


@dataclass
class TrackingState:
    t_track: List[ThreadRef] = field(default_factory=list)
    t_seen: List[ThreadRef] = field(default_factory=list)
    t_entry: List[ThreadRef] = field(default_factory=list)
    iterations: int = 0
    metric_scans: Dict[int, int] = field(default_factory=dict)  # tid -> scans

    def to_json(self, taliases=None) -> dict:
        def enc(refs):
            out = []
            for r in refs:
                d = {"tid": r.tid, "tgid": r.tgid, "comm": r.comm}
                if taliases:
                    d["alias"] = taliases.get(r.tid)
                out.append(d)
            return out
        return {"t_track": enc(self.t_track), "t_seen": enc(self.t_seen),
                "t_entry": enc(self.t_entry), "iterations": self.iterations,
                "metric_scans": {str(k): v for k, v in sorted(self.metric_scans.items())}}


@dataclass
class DiagnosisReport:
    tracked: TrackingState
    flagged_chain: List[Flag]
    exhausted: bool
    hint: Optional[str] = None
    baseline: Optional[Range] = None
    compare: Optional[Range] = None

    def to_json(self, store: Optional[MetricStore] = None) -> dict:
        taliases = raliases = None
        if store is not None and self.baseline and self.compare:
            lo = min(self.baseline.start_ns, self.compare.start_ns)
            hi = max(self.baseline.end_ns, self.compare.end_ns)
            taliases = thread_aliases(store, lo, hi)
            raliases = resource_aliases(store, lo, hi)
        return {
            "tracked": self.tracked.to_json(taliases),
            "flagged_chain": [f.to_json(taliases, raliases)
                              for f in self.flagged_chain],
            "exhausted": self.exhausted,
            "hint": self.hint,
            "baseline": [self.baseline.start_ns, self.baseline.end_ns]
                        if self.baseline else None,
            "compare": [self.compare.start_ns, self.compare.end_ns]
                       if self.compare else None,
        }

    def to_json_str(self, store: Optional[MetricStore] = None) -> str:
        return json.dumps(self.to_json(store), sort_keys=True, indent=2)


def _union_range(baseline: Range, compare: Range) -> Range:
    return Range(min(baseline.start_ns, compare.start_ns),
                 max(baseline.end_ns, compare.end_ns))


def selective_thread_tracking(store: MetricStore, baseline: Range,
                              compare: Range,
                              tgids: Optional[Sequence[int]] = None,
                              alpha: float = DEFAULT_ALPHA,
                              min_effect: float = DEFAULT_MIN_EFFECT,
                              ) -> DiagnosisReport:
    span = _union_range(baseline, compare)
    entry = detect_entry_threads(store, span, tgids)
    state = TrackingState(t_entry=list(entry), t_track=list(entry))
    chain: List[Flag] = []
    if not entry:
        return DiagnosisReport(
            tracked=state, flagged_chain=[], exhausted=True,
            hint="no entry-point threads found; run a full search",
            baseline=baseline, compare=compare)
    seen_tids: Set[int] = set()
    allowed = set(int(t) for t in tgids) if tgids else None
    while True:
        state.iterations += 1
        fresh = [t for t in state.t_track if t.tid not in seen_tids]
        iteration_flags: List[Flag] = []
        for thread in sorted(fresh, key=lambda t: t.tid):
            state.metric_scans[thread.tid] = state.metric_scans.get(thread.tid, 0) + 1
            for series in _series_for_thread(store, thread, baseline, compare):
                try:
                    shift = distribution_shift(series.baseline, series.compare,
                                               alpha, min_effect)
                except NotEnoughData:
                    continue
                if shift is not None:
                    iteration_flags.append(Flag(
                        state.iterations, thread, series.metric,
                        series.resource, series.epoll, shift))
            seen_tids.add(thread.tid)
            state.t_seen.append(thread)
        chain.extend(iteration_flags)
        new_threads: Dict[int, ThreadRef] = {}
        for flag in iteration_flags:
            if flag.resource is None or not is_ipc_bri(flag.resource):
                continue
            for ref in counterparts(store, span, flag.resource,
                                    excluding={t.tid for t in state.t_track}):
                if allowed is not None and ref.tgid not in allowed:
                    continue
                new_threads.setdefault(ref.tid, ref)
        if not new_threads:
            break
        state.t_track.extend(new_threads[tid] for tid in sorted(new_threads))
    entry_tids = {t.tid for t in entry}
    exhausted = not any(f.thread.tid not in entry_tids for f in chain)
    hint = "no propagation beyond entry threads; run a full search" if exhausted else None
    return DiagnosisReport(tracked=state, flagged_chain=chain,
                           exhausted=exhausted, hint=hint,
                           baseline=baseline, compare=compare)


def full_search(store: MetricStore, baseline: Range, compare: Range,
                tgids: Optional[Sequence[int]] = None,
                alpha: float = DEFAULT_ALPHA,
                min_effect: float = DEFAULT_MIN_EFFECT) -> List[Flag]:
    """Exhaustive fallback: every metric of every thread, sorted by effect."""
    span = _union_range(baseline, compare)
    tg = "" if not tgids else (
        " AND tgid IN (%s)" % ",".join(str(int(t)) for t in tgids))
    tids = {r[0] for r in store.sql(
        f"SELECT DISTINCT tid FROM task_samples WHERE ts>=? AND ts<?{tg}",
        (span.start_ns, span.end_ns))}
    tids |= {r[0] for r in store.sql(
        f"SELECT DISTINCT tid FROM resource_waits WHERE ts>=? AND ts<?{tg}",
        (span.start_ns, span.end_ns))}
    flags: List[Flag] = []
    for thread in _thread_refs(store, tids):
        for series in _series_for_thread(store, thread, baseline, compare):
            try:
                shift = distribution_shift(series.baseline, series.compare,
                                           alpha, min_effect)
            except NotEnoughData:
                continue
            if shift is not None:
                flags.append(Flag(1, thread, series.metric, series.resource,
                                  series.epoll, shift))
    flags.sort(key=lambda f: (-abs(f.shift.cohens_d), -f.shift.wasserstein,
                              f.thread.tid, f.metric.index))
    return flags
