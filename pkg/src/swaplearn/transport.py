"""Length-prefixed TCP transport for the swap server.

Frame layout (all integers little-endian):

- frame: 4-byte body length, then the body
- request body: opcode (1B) | node_id (4B) | dim (4B) | dim float64 values
  with opcodes 0x01 PULL, 0x02 PUSH_SWAP, 0x03 SHUTDOWN (dim 0 except push)
- ok response: 0x81 | t (8B) | dim (4B) | dim float64 values
- error response: 0xFF | code (2B) | UTF-8 message

Error code 1 flags a rejected value (dimension mismatch, non-finite vector);
code 2 flags a malformed frame. The client surfaces code 1 as ValueError so
callers see the same behavior as the in-process server.
"""

from __future__ import annotations

import socket
import struct
import threading

import numpy as np

from .learners import Theta

OP_PULL = 0x01
OP_PUSH_SWAP = 0x02
OP_SHUTDOWN = 0x03
OP_OK = 0x81
OP_ERROR = 0xFF

ERR_BAD_VALUE = 1
ERR_MALFORMED = 2

_REQ_HEADER = struct.Struct("<BII")
_OK_HEADER = struct.Struct("<BQI")
_ERR_HEADER = struct.Struct("<BH")
_LEN = struct.Struct("<I")

_MAX_FRAME = 1 << 24


class TransportError(RuntimeError):
    """The peer sent something that is not a valid frame."""


def request_body(opcode: int, node_id: int, values: np.ndarray | None = None) -> bytes:
    if values is None:
        return _REQ_HEADER.pack(opcode, node_id, 0)
    v = np.ascontiguousarray(values, dtype="<f8")
    return _REQ_HEADER.pack(opcode, node_id, v.size) + v.tobytes()


def parse_request(body: bytes):
    if len(body) < _REQ_HEADER.size:
        raise TransportError("request body too short")
    opcode, node_id, dim = _REQ_HEADER.unpack_from(body)
    if opcode not in (OP_PULL, OP_PUSH_SWAP, OP_SHUTDOWN):
        raise TransportError(f"unknown opcode 0x{opcode:02x}")
    if len(body) != _REQ_HEADER.size + 8 * dim:
        raise TransportError("request length does not match dim")
    values = None
    if dim:
        values = np.frombuffer(body, dtype="<f8", count=dim, offset=_REQ_HEADER.size)
    return opcode, node_id, values


def ok_body(t: int, values: np.ndarray) -> bytes:
    v = np.ascontiguousarray(values, dtype="<f8")
    return _OK_HEADER.pack(OP_OK, t, v.size) + v.tobytes()


def error_body(code: int, message: str) -> bytes:
    return _ERR_HEADER.pack(OP_ERROR, code) + message.encode("utf-8")


def parse_reply(body: bytes):
    """Decode a server reply into (t, values); raise on error frames."""
    if not body:
        raise TransportError("empty reply")
    if body[0] == OP_ERROR:
        if len(body) < _ERR_HEADER.size:
            raise TransportError("truncated error frame")
        _, code = _ERR_HEADER.unpack_from(body)
        message = body[_ERR_HEADER.size:].decode("utf-8", errors="replace")
        if code == ERR_BAD_VALUE:
            raise ValueError(message)
        raise TransportError(f"server error {code}: {message}")
    if body[0] != OP_OK or len(body) < _OK_HEADER.size:
        raise TransportError("malformed reply")
    _, t, dim = _OK_HEADER.unpack_from(body)
    if len(body) != _OK_HEADER.size + 8 * dim:
        raise TransportError("reply length does not match dim")
    values = np.frombuffer(body, dtype="<f8", count=dim, offset=_OK_HEADER.size)
    return t, values


def pull_round_trip_bytes(dim: int) -> int:
    """Bytes on the wire for one pull, both directions, framing included."""
    return (_LEN.size + _REQ_HEADER.size) + (_LEN.size + _OK_HEADER.size + 8 * dim)


def push_round_trip_bytes(dim: int) -> int:
    return (_LEN.size + _REQ_HEADER.size + 8 * dim) + (
        _LEN.size + _OK_HEADER.size + 8 * dim
    )


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    while n:
        chunk = sock.recv(n)
        if not chunk:
            raise EOFError("connection closed")
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


def read_frame(sock: socket.socket) -> bytes:
    (length,) = _LEN.unpack(_recv_exact(sock, _LEN.size))
    if length > _MAX_FRAME:
        raise TransportError(f"frame of {length} bytes exceeds limit")
    return _recv_exact(sock, length)


def write_frame(sock: socket.socket, body: bytes) -> None:
    sock.sendall(_LEN.pack(len(body)) + body)


class SwapServer:
    """Serve a swap server (anything with pull/push_swap) over TCP.

    One thread per connection; the wrapped server's own locking provides
    linearizability. A SHUTDOWN request answers like a pull and then stops
    the listener.
    """

    def __init__(self, inner, host: str = "127.0.0.1"):
        self._inner = inner
        self._host = host
        self._listener = None
        self._accept_thread = None
        self._conns = set()
        self._lock = threading.Lock()
        self._stopping = threading.Event()
        self.address = None

    def start(self) -> tuple[str, int]:
        self._listener = socket.create_server((self._host, 0))
        self.address = self._listener.getsockname()
        self._accept_thread = threading.Thread(target=self._accept_loop, daemon=True)
        self._accept_thread.start()
        return self.address

    def _accept_loop(self):
        while not self._stopping.is_set():
            try:
                conn, _ = self._listener.accept()
            except OSError:
                break
            with self._lock:
                self._conns.add(conn)
            threading.Thread(target=self._serve, args=(conn,), daemon=True).start()

    def _handle(self, body: bytes) -> bytes:
        try:
            opcode, node_id, values = parse_request(body)
        except TransportError as exc:
            return error_body(ERR_MALFORMED, str(exc))
        try:
            if opcode == OP_PUSH_SWAP:
                if values is None:
                    raise ValueError("push_swap requires a vector")
                prev, t = self._inner.push_swap(node_id, Theta(values))
                return ok_body(t, prev.vector)
            theta, t = self._inner.pull(node_id)
            if opcode == OP_SHUTDOWN:
                self._stopping.set()
            return ok_body(t, theta.vector)
        except ValueError as exc:
            return error_body(ERR_BAD_VALUE, str(exc))

    def _serve(self, conn: socket.socket):
        try:
            while True:
                try:
                    body = read_frame(conn)
                except (EOFError, OSError):
                    break
                except TransportError as exc:
                    write_frame(conn, error_body(ERR_MALFORMED, str(exc)))
                    break
                write_frame(conn, self._handle(body))
                if self._stopping.is_set():
                    self._close_listener()
        finally:
            with self._lock:
                self._conns.discard(conn)
            conn.close()

    def _close_listener(self):
        if self._listener is not None:
            try:
                # close() alone does not wake a blocked accept(); shutdown does
                self._listener.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            try:
                self._listener.close()
            except OSError:
                pass

    def stop(self):
        self._stopping.set()
        self._close_listener()
        with self._lock:
            conns = list(self._conns)
        for conn in conns:
            try:
                conn.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            conn.close()
        if self._accept_thread is not None:
            self._accept_thread.join(timeout=5)

    def __enter__(self):
        self.start()
        return self

    def __exit__(self, *exc):
        self.stop()


class SwapClient:
    """Client with the same pull/push_swap surface as the in-process server."""

    def __init__(self, address: tuple[str, int], timeout: float = 10.0):
        self._sock = socket.create_connection(address, timeout=timeout)

    def _round_trip(self, body: bytes):
        write_frame(self._sock, body)
        return parse_reply(read_frame(self._sock))

    def pull(self, node_id: int) -> tuple[Theta, int]:
        t, values = self._round_trip(request_body(OP_PULL, node_id))
        return Theta(values), t

    def push_swap(self, node_id: int, theta: Theta) -> tuple[Theta, int]:
        if not isinstance(theta, Theta):
            raise ValueError("push_swap expects a Theta")
        t, values = self._round_trip(
            request_body(OP_PUSH_SWAP, node_id, theta.vector)
        )
        return Theta(values), t

    def shutdown(self) -> None:
        """Ask the server to stop accepting; answers like a pull."""
        self._round_trip(request_body(OP_SHUTDOWN, 0))

    def close(self) -> None:
        self._sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
