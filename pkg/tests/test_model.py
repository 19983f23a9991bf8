import pytest
from hypothesis import given
from hypothesis import strategies as st

from prismlike.model import (
    BlockDev, EpollObj, FutexAddr, MetricKind, MetricSample, ModelError,
    SocketTuple, ThreadRef, TimeWindow, UnsupportedFamily, VfsInode,
    bri_from_key, bri_key, bri_of_file, canonicalize_socket, clamp_comm,
    futex_bri, is_ipc_bri, window_of,
)


def test_bri_of_file_deterministic():
    assert bri_of_file(41, 1337) == bri_of_file(41, 1337)
    assert bri_of_file(41, 1337) == VfsInode(41, 1337)


def test_pipe_both_ends_same_bri():
    read_end = bri_of_file(41, 1337)
    write_end = bri_of_file(41, 1337)
    assert read_end == write_end
    assert hash(read_end) == hash(write_end)


def test_bri_of_file_injective():
    assert bri_of_file(41, 1337) != bri_of_file(41, 1338)
    assert bri_of_file(41, 1337) != bri_of_file(42, 1337)


def test_canonicalize_socket_peer_symmetry():
    a = canonicalize_socket("inet4", "10.0.0.1:5000", "10.0.0.2:3306")
    b = canonicalize_socket("inet4", "10.0.0.2:3306", "10.0.0.1:5000")
    assert a == b
    assert hash(a) == hash(b)


def test_canonicalize_socket_unix_inode_pair_identity():
    a = canonicalize_socket("unix", "socket:[9731]", "/tmp/x.sock")
    b = canonicalize_socket("unix", "/tmp/x.sock", "socket:[9731]")
    assert a == b


def test_canonicalize_socket_deterministic():
    args = ("inet6", "[::1]:443", "[::2]:9000")
    assert canonicalize_socket(*args) == canonicalize_socket(*args)


def test_canonicalize_socket_unsupported_family():
    with pytest.raises(UnsupportedFamily):
        canonicalize_socket("ax25", "a", "b")


_endpoints = st.text(
    alphabet=st.characters(min_codepoint=33, max_codepoint=126), min_size=1,
    max_size=24)


@given(family=st.sampled_from(["inet4", "inet6", "unix"]),
       src=_endpoints, dst=_endpoints)
def test_canonicalize_socket_order_free(family, src, dst):
    assert (canonicalize_socket(family, src, dst)
            == canonicalize_socket(family, dst, src))


_bris = st.one_of(
    st.builds(VfsInode, st.integers(0, 2**32), st.integers(0, 2**48)),
    st.builds(lambda f, a, b: canonicalize_socket(f, a, b),
              st.sampled_from(["inet4", "inet6", "unix"]), _endpoints, _endpoints),
    st.builds(FutexAddr, st.integers(0, 2**22), st.integers(0, 2**48),
              st.booleans()),
    st.builds(EpollObj, st.integers(0, 2**64 - 1)),
    st.builds(BlockDev, st.integers(0, 2**12), st.integers(0, 2**20)),
)


@given(bri=_bris)
def test_bri_key_round_trip(bri):
    assert bri_from_key(bri_key(bri)) == bri


@given(bri=_bris, other=_bris)
def test_bri_equality_consistent_with_key_and_hash(bri, other):
    same = bri_key(bri) == bri_key(other)
    assert (bri == other) == same
    if same:
        assert hash(bri) == hash(other)


def test_futex_scoping():
    t = ThreadRef(5, 7)
    private = futex_bri(t, 0xbeef)
    assert private.tgid == 7 and not private.shared
    shared = futex_bri(t, 0xbeef, shared=True)
    assert shared.tgid == 0 and shared.shared
    assert private != shared


def test_is_ipc_bri():
    assert is_ipc_bri(VfsInode(1, 2))
    assert is_ipc_bri(canonicalize_socket("inet4", "a", "b"))
    assert is_ipc_bri(FutexAddr(1, 2, False))
    assert not is_ipc_bri(EpollObj(1))
    assert not is_ipc_bri(BlockDev(259, 0))


def test_thread_ref_validation():
    with pytest.raises(ModelError):
        ThreadRef(0, 1)
    with pytest.raises(ModelError):
        ThreadRef(1, -2)


def test_comm_clamped_to_16_bytes():
    ref = ThreadRef(1, 1, "a-very-long-thread-name-indeed")
    assert len(ref.comm.encode()) <= 16
    assert clamp_comm("short") == "short"


def test_metric_kind_granularities():
    thread_scoped = {m for m in MetricKind if m.granularity.value == "thread"}
    assert {m.value for m in thread_scoped} == {
        "runtime", "rq_time", "block_time", "iowait_time", "sleep_time"}
    assert MetricKind.EPOLL_FILE_WAIT.granularity.value == "epoll_resource"
    assert MetricKind.FUTEX_WAIT_TIME.granularity.value == "thread_resource"
    assert len(list(MetricKind)) == 16


def test_window_of():
    w = window_of(1_500_000_000)
    assert w == TimeWindow(1_000_000_000, 2_000_000_000)
    assert w.contains(1_999_999_999) and not w.contains(2_000_000_000)


def test_metric_sample_validation():
    w = window_of(0)
    t = ThreadRef(1, 1)
    with pytest.raises(ModelError):
        MetricSample(w, MetricKind.RUNTIME, -1, thread=t)
    with pytest.raises(ModelError):
        MetricSample(w, MetricKind.FUTEX_WAIT_TIME, 1, thread=t)  # no resource
    with pytest.raises(ModelError):
        MetricSample(w, MetricKind.RUNTIME, 1, thread=t, resource=VfsInode(1, 2))
    with pytest.raises(ModelError):
        MetricSample(w, MetricKind.EPOLL_FILE_WAIT, 1, thread=t,
                     resource=VfsInode(1, 2))  # epoll subject missing
    MetricSample(w, MetricKind.EPOLL_FILE_WAIT, 1, resource=VfsInode(1, 2),
                 epoll=EpollObj(3))
