import threading

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ipsvm.comm import (
    CommError, CommTimeout, Communicator, ProtocolError, RemoteError, SocketListener, Tag, connect_worker,
    decode_frame, encode_frame, inprocess_group,
)


def run_workers(comms, fn):
    """Run ``fn(comm)`` on every worker communicator in a thread; return their results."""
    out, errors = {}, []

    def body(c):
        try:
            out[c.rank] = fn(c)
        except BaseException as exc:
            errors.append(exc)

    threads = [threading.Thread(target=body, args=(c,), daemon=True) for c in comms]
    for t in threads:
        t.start()
    return out, errors, threads


def join(threads):
    for t in threads:
        t.join(10)


@given(st.sampled_from(list(Tag)), st.binary(max_size=64))
def test_frame_round_trip(tag, payload):
    frame = encode_frame(tag, payload)
    assert len(frame) == 9 + len(payload)
    assert decode_frame(frame) == (tag, payload)


def test_frame_layout_and_errors():
    frame = encode_frame(Tag.SUM, np.array([1.0], dtype="<f8").tobytes())
    assert frame[0] == 3 and int.from_bytes(frame[1:9], "little") == 8
    with pytest.raises(ProtocolError, match="unknown frame tag 99"):
        decode_frame(bytes([99]) + (0).to_bytes(8, "little"))
    with pytest.raises(ProtocolError, match="truncated"):
        decode_frame(b"\x01\x00")
    with pytest.raises(ProtocolError, match="length field"):
        decode_frame(encode_frame(Tag.SUM, b"12345678")[:-1])


def test_tag_numbers():
    assert [t.value for t in Tag] == list(range(1, 12))
    assert Tag.HELLO == 1 and Tag.ABORT == 11


def test_all_reduce_sum_two_workers():
    comms = inprocess_group(2, timeout=5)
    bufs = {1: [1.0, 2.0], 2: [3.0, 4.0]}
    _, errors, threads = run_workers(comms[1:], lambda c: c.all_reduce_sum(bufs[c.rank]))
    assert comms[0].all_reduce_sum().tolist() == [4.0, 6.0]
    join(threads)
    assert not errors


def test_all_reduce_sum_single_worker_is_identity():
    comms = inprocess_group(1, timeout=5)
    _, _, threads = run_workers(comms[1:], lambda c: c.all_reduce_sum([0.1, -2.5, 7.0]))
    assert comms[0].all_reduce_sum().tolist() == [0.1, -2.5, 7.0]
    join(threads)


def test_all_reduce_min_reaches_everyone():
    comms = inprocess_group(3, timeout=5)
    vals = {1: 0.4, 2: 1.0, 3: 0.7}
    out, errors, threads = run_workers(comms[1:], lambda c: c.all_reduce_min([vals[c.rank]]))
    assert comms[0].all_reduce_min().tolist() == [0.4]
    join(threads)
    assert not errors and all(v.tolist() == [0.4] for v in out.values())

    comms = inprocess_group(1, timeout=5)
    out, _, threads = run_workers(comms[1:], lambda c: c.all_reduce_min([1.0]))
    assert comms[0].all_reduce_min().tolist() == [1.0]
    join(threads)
    assert out[1].tolist() == [1.0]


def test_all_reduce_max():
    comms = inprocess_group(2, timeout=5)
    bufs = {1: [1.0, 5.0], 2: [3.0, 4.0]}
    run_workers(comms[1:], lambda c: c.all_reduce_max(bufs[c.rank]))
    assert comms[0].all_reduce_max().tolist() == [3.0, 5.0]


def test_unequal_lengths_name_the_ranks():
    comms = inprocess_group(2, timeout=5)
    bufs = {1: [1.0, 2.0], 2: [3.0]}
    run_workers(comms[1:], lambda c: c.all_reduce_sum(bufs[c.rank]))
    with pytest.raises(ProtocolError, match="rank 1: 2, rank 2: 1"):
        comms[0].all_reduce_sum()


def test_silent_worker_times_out():
    comms = inprocess_group(2, timeout=0.2)
    run_workers(comms[1:2], lambda c: c.all_reduce_min([1.0], reply=False))
    with pytest.raises(CommTimeout, match="rank 2"):
        comms[0].all_reduce_min()


def test_broadcast_and_empty_payload():
    comms = inprocess_group(2, timeout=5)
    out, _, threads = run_workers(comms[1:], lambda c: c.broadcast())
    comms[0].broadcast([1.5, 0.0])
    join(threads)
    assert out[1].tolist() == [1.5, 0.0] and out[2].tolist() == [1.5, 0.0]
    with pytest.raises(ValueError, match="empty broadcast"):
        comms[0].broadcast([])


def test_error_frame_surfaces_as_remote_error():
    comms = inprocess_group(1, timeout=5)
    comms[1].abort("disk on fire")
    with pytest.raises(RemoteError, match="rank 1: disk on fire"):
        comms[0].recv(1)
    comms[0].abort("stop")
    with pytest.raises(CommError, match="aborted"):
        comms[1].recv(0)


def test_unexpected_tag_is_protocol_error():
    comms = inprocess_group(1, timeout=5)
    comms[1].send_values(0, Tag.MAX, [1.0])
    with pytest.raises(ProtocolError, match="expected SUM"):
        comms[0].all_reduce_sum()


def test_counters_count_payload_bytes_only():
    comms = inprocess_group(1, timeout=5)
    comms[1].send_values(0, Tag.SUM, np.zeros(5))
    comms[0].all_reduce_sum()
    assert comms[1].bytes_sent == 40 and comms[0].bytes_received == 40


def test_communicator_validation():
    with pytest.raises(ValueError):
        Communicator(0, None, None)
    with pytest.raises(ValueError):
        Communicator(3, 2, None)


def _socket_group(p, m):
    listener = SocketListener(p, timeout=10)
    comms = {}

    def connect(rank):
        comms[rank] = connect_worker("127.0.0.1", listener.port, rank, [rank, 10, m, 0], timeout=10)

    threads = [threading.Thread(target=connect, args=(r,)) for r in range(1, p + 1)]
    for t in threads:
        t.start()
    coord, hello = listener.accept()
    join(threads)
    return coord, hello, [comms[r] for r in range(1, p + 1)]


def test_socket_broadcast_byte_count():
    m, p = 6, 4
    coord, hello, workers = _socket_group(p, m)
    try:
        assert sorted(hello) == [1, 2, 3, 4] and hello[3].tolist() == [3, 10, m, 0]
        before = coord.bytes_sent
        out, errors, threads = run_workers(workers, lambda c: c.broadcast())
        coord.broadcast(np.arange(m + 2, dtype=float))
        join(threads)
        assert not errors
        assert coord.bytes_sent - before == 4 * 8 * (m + 2)
        assert all(v.tolist() == list(range(m + 2)) for v in out.values())

        bufs = {c.rank: np.full(3, float(c.rank)) for c in workers}
        _, _, threads = run_workers(workers, lambda c: c.all_reduce_sum(bufs[c.rank]))
        assert coord.all_reduce_sum().tolist() == [10.0, 10.0, 10.0]
        join(threads)
    finally:
        coord.close()
        for c in workers:
            c.close()


def test_socket_rejects_duplicate_rank():
    listener = SocketListener(2, timeout=5)
    socks = []

    def connect():
        socks.append(connect_worker("127.0.0.1", listener.port, 1, [1, 1, 1, 0], timeout=5))

    threads = [threading.Thread(target=connect) for _ in range(2)]
    for t in threads:
        t.start()
    with pytest.raises(ProtocolError, match="duplicate worker rank 1"):
        listener.accept()
    join(threads)
    for c in socks:
        c.close()


def test_socket_accept_times_out_naming_missing_workers():
    listener = SocketListener(2, timeout=0.3)
    with pytest.raises(CommTimeout, match=r"workers \[1, 2\]"):
        listener.accept()
