import socket
import threading

import numpy as np
import pytest

from swaplearn import ParameterServer, SwapClient, SwapServer, Theta, TransportError
from swaplearn.transport import (
    ERR_BAD_VALUE,
    ERR_MALFORMED,
    OP_OK,
    OP_PULL,
    OP_PUSH_SWAP,
    OP_SHUTDOWN,
    error_body,
    ok_body,
    parse_reply,
    parse_request,
    pull_round_trip_bytes,
    push_round_trip_bytes,
    read_frame,
    request_body,
    write_frame,
)


def test_request_codec_round_trips():
    v = np.array([1.5, -2.25, 1e-300])
    for opcode in (OP_PULL, OP_SHUTDOWN):
        got = parse_request(request_body(opcode, 7))
        assert got == (opcode, 7, None)
    opcode, node_id, values = parse_request(request_body(OP_PUSH_SWAP, 3, v))
    assert (opcode, node_id) == (OP_PUSH_SWAP, 3)
    assert np.array_equal(values, v)


def test_reply_codec_round_trips():
    v = np.array([0.5, 2.0])
    t, values = parse_reply(ok_body(42, v))
    assert t == 42
    assert np.array_equal(values, v)


def test_reply_error_frames_map_to_exceptions():
    with pytest.raises(ValueError, match="dims differ"):
        parse_reply(error_body(ERR_BAD_VALUE, "dims differ"))
    with pytest.raises(TransportError, match="garbled"):
        parse_reply(error_body(ERR_MALFORMED, "garbled"))


def test_codec_rejects_malformed_bytes():
    with pytest.raises(TransportError):
        parse_request(b"\x00")
    with pytest.raises(TransportError):
        parse_request(request_body(0x7E, 0))  # unknown opcode
    body = request_body(OP_PUSH_SWAP, 0, np.ones(3))
    with pytest.raises(TransportError):
        parse_request(body[:-4])  # length disagrees with dim
    with pytest.raises(TransportError):
        parse_reply(b"")
    with pytest.raises(TransportError):
        parse_reply(bytes([OP_OK]))
    with pytest.raises(TransportError):
        parse_reply(ok_body(1, np.ones(2))[:-1])


def test_round_trip_byte_counts_match_actual_frames():
    dim = 5
    v = np.ones(dim)
    pull = request_body(OP_PULL, 0)
    pull_reply = ok_body(0, v)
    assert pull_round_trip_bytes(dim) == len(pull) + len(pull_reply) + 8  # two length prefixes
    push = request_body(OP_PUSH_SWAP, 0, v)
    push_reply = ok_body(1, v)
    assert push_round_trip_bytes(dim) == len(push) + len(push_reply) + 8


def _served(theta):
    server = SwapServer(ParameterServer(theta))
    address = server.start()
    return server, address


def test_tcp_pull_push_shutdown():
    init = Theta.from_parts([1.0, 2.0], 0.0)
    server, address = _served(init)
    try:
        with SwapClient(address) as client:
            got, t = client.pull(0)
            assert got == init and t == 0

            pushed = Theta.from_parts([3.0, 4.0], 1.0)
            prev, t = client.push_swap(5, pushed)
            assert prev == init and t == 1

            got, t = client.pull(1)
            assert got == pushed and t == 1
            client.shutdown()
        # the wrapped server saw every push
        assert server._inner.t == 1
    finally:
        server.stop()


def test_tcp_dimension_mismatch_maps_to_value_error():
    server, address = _served(Theta.zeros(3))
    try:
        with SwapClient(address) as client:
            with pytest.raises(ValueError, match="dim"):
                client.push_swap(0, Theta.zeros(1))
            # the failed push left the server untouched
            _, t = client.pull(0)
            assert t == 0
    finally:
        server.stop()


def test_tcp_rejects_non_finite_payload():
    # craft the frame by hand: the client would refuse to build such a Theta
    server, address = _served(Theta.zeros(2))
    try:
        with socket.create_connection(address, timeout=5) as sock:
            bad = np.array([np.nan, 0.0, 0.0])
            write_frame(sock, request_body(OP_PUSH_SWAP, 0, bad))
            with pytest.raises(ValueError):
                parse_reply(read_frame(sock))
    finally:
        server.stop()


def test_tcp_answers_malformed_frame_with_error():
    server, address = _served(Theta.zeros(2))
    try:
        with socket.create_connection(address, timeout=5) as sock:
            write_frame(sock, b"\x99\x00")
            with pytest.raises(TransportError):
                parse_reply(read_frame(sock))
    finally:
        server.stop()


def test_tcp_concurrent_clients_serialize_cleanly():
    inner = ParameterServer(Theta.zeros(2))
    server = SwapServer(inner)
    address = server.start()
    per_thread = 25

    def worker(tid):
        with SwapClient(address) as client:
            for i in range(per_thread):
                client.push_swap(tid, Theta.from_parts([tid, i], 0.0))

    try:
        threads = [threading.Thread(target=worker, args=(tid,)) for tid in range(4)]
        for th in threads:
            th.start()
        for th in threads:
            th.join()
        assert inner.t == 4 * per_thread
        assert len(inner.theta_log) == 4 * per_thread + 1
    finally:
        server.stop()
