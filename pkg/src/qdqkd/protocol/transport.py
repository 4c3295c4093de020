"""Reliable ordered byte-stream transports carrying wire frames."""
from __future__ import annotations

import queue
import socket
import threading

from .wire import HEADER, TransportClosed, decode_header, encode_frame, parse_type

_CLOSED = object()


class Transport:
    """Interface: ``send(type, payload)``, ``recv() -> (MsgType, payload)``."""

    def __init__(self):
        self.transcript: list[tuple[str, int, bytes]] = []

    def send(self, mtype: int, payload: bytes = b"") -> None:
        self._send_frame(encode_frame(mtype, payload))
        self.transcript.append(("tx", int(mtype), bytes(payload)))

    def recv(self):
        mtype, payload = self._recv_frame()
        self.transcript.append(("rx", int(mtype), bytes(payload)))
        return parse_type(mtype), payload

    def transcript_bytes(self) -> bytes:
        """Canonical serialisation of the transcript (direction byte + frame)."""
        out = bytearray()
        for direction, mtype, payload in self.transcript:
            out += b"T" if direction == "tx" else b"R"
            out += encode_frame(mtype, payload)
        return bytes(out)

    def close(self) -> None:
        raise NotImplementedError

    def _send_frame(self, frame: bytes) -> None:
        raise NotImplementedError

    def _recv_frame(self) -> tuple[int, bytes]:
        raise NotImplementedError


class PipeEnd(Transport):
    """One end of an in-process duplex pipe; frames travel as bytes."""

    def __init__(self, inbox: queue.Queue, outbox: queue.Queue, timeout: float = 30.0):
        super().__init__()
        self._in = inbox
        self._out = outbox
        self.timeout = timeout
        self.closed = False

    def _send_frame(self, frame: bytes) -> None:
        if self.closed:
            raise TransportClosed("transport closed")
        self._out.put(frame)

    def _recv_frame(self):
        if self.closed:
            raise TransportClosed("transport closed")
        try:
            frame = self._in.get(timeout=self.timeout)
        except queue.Empty:
            raise TransportClosed("receive timed out") from None
        if frame is _CLOSED:
            self.closed = True
            raise TransportClosed("peer closed the transport")
        n, mtype = decode_header(frame[:HEADER.size])
        return mtype, frame[HEADER.size:HEADER.size + n]

    def close(self) -> None:
        if not self.closed:
            self.closed = True
            self._out.put(_CLOSED)
            self._in.put(_CLOSED)


def duplex_pipe(timeout: float = 30.0) -> tuple[PipeEnd, PipeEnd]:
    a_to_b: queue.Queue = queue.Queue()
    b_to_a: queue.Queue = queue.Queue()
    return PipeEnd(b_to_a, a_to_b, timeout), PipeEnd(a_to_b, b_to_a, timeout)


class SocketTransport(Transport):
    def __init__(self, sock: socket.socket, timeout: float = 30.0):
        super().__init__()
        self.sock = sock
        self.sock.settimeout(timeout)
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._lock = threading.Lock()

    def _send_frame(self, frame: bytes) -> None:
        try:
            with self._lock:
                self.sock.sendall(frame)
        except OSError as exc:
            raise TransportClosed(str(exc)) from exc

    def _read_exact(self, n: int) -> bytes:
        buf = bytearray()
        while len(buf) < n:
            try:
                chunk = self.sock.recv(n - len(buf))
            except OSError as exc:
                raise TransportClosed(str(exc)) from exc
            if not chunk:
                raise TransportClosed("peer closed the connection")
            buf += chunk
        return bytes(buf)

    def _recv_frame(self):
        n, mtype = decode_header(self._read_exact(HEADER.size))
        return mtype, self._read_exact(n)

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


def socket_pair_localhost(timeout: float = 30.0) -> tuple[SocketTransport, SocketTransport]:
    """Two connected TCP transports over the loopback interface."""
    srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    srv.bind(("127.0.0.1", 0))
    srv.listen(1)
    cli = socket.create_connection(srv.getsockname())
    conn, _ = srv.accept()
    srv.close()
    return SocketTransport(cli, timeout), SocketTransport(conn, timeout)
