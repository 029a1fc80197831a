"""Shared test fixtures builders and a minimal protocol client."""

from __future__ import annotations

import base64
import json
import os
import socket
import struct
import time
from dataclasses import dataclass

from mobisim.chainsynth import Activity, ActivityChain


@dataclass
class FakeClosure:
    """Duck-typed closure spec (mirrors scenario.ClosureSpec surface)."""

    edges: list | None = None
    region: tuple | None = None
    closure_id: str = "test-closure"
    start: float = 0.0
    end: float | None = None


def make_chain(agent_id="a1", revision=0, acts=None):
    if acts is None:
        acts = [
            (1, 0, 30000, "h1"),
            (5, 30350, 32150, "m1"),   # 30-minute shopping trip
            (1, 32500, 86400, "h1"),
        ]
    return ActivityChain(
        agent_id=agent_id,
        revision=revision,
        activities=[Activity(c, s, e, p) for c, s, e, p in acts],
    )


class NdjsonClient:
    """Line-delimited JSON client for the gateway."""

    def __init__(self, host, port, timeout=5.0):
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self.buf = b""

    def send(self, doc):
        self.sock.sendall(json.dumps(doc).encode() + b"\n")

    def recv(self, timeout=5.0):
        deadline = time.monotonic() + timeout
        while b"\n" not in self.buf:
            self.sock.settimeout(max(0.05, deadline - time.monotonic()))
            chunk = self.sock.recv(65536)
            if not chunk:
                raise ConnectionError("gateway closed the connection")
            self.buf += chunk
        line, self.buf = self.buf.split(b"\n", 1)
        return json.loads(line)

    def recv_until(self, predicate, timeout=5.0, limit=5000):
        deadline = time.monotonic() + timeout
        for _ in range(limit):
            doc = self.recv(timeout=max(0.05, deadline - time.monotonic()))
            if predicate(doc):
                return doc
            if time.monotonic() > deadline:
                break
        raise TimeoutError("no matching message")

    def close(self):
        self.sock.close()


class WsClient:
    """Tiny RFC 6455 client, enough to exercise the gateway upgrade path."""

    def __init__(self, host, port, timeout=5.0):
        self.sock = socket.create_connection((host, port), timeout=timeout)
        key = base64.b64encode(os.urandom(16)).decode()
        req = (f"GET /ws HTTP/1.1\r\nHost: {host}:{port}\r\nUpgrade: websocket\r\n"
               f"Connection: Upgrade\r\nSec-WebSocket-Key: {key}\r\n"
               f"Sec-WebSocket-Version: 13\r\n\r\n")
        self.sock.sendall(req.encode())
        self.buf = b""
        head = self._read_until(b"\r\n\r\n")
        assert b"101" in head.split(b"\r\n", 1)[0], head

    def _read_until(self, marker):
        while marker not in self.buf:
            chunk = self.sock.recv(65536)
            if not chunk:
                raise ConnectionError("closed during handshake")
            self.buf += chunk
        idx = self.buf.index(marker) + len(marker)
        out, self.buf = self.buf[:idx], self.buf[idx:]
        return out

    def _read_exact(self, n):
        while len(self.buf) < n:
            chunk = self.sock.recv(65536)
            if not chunk:
                raise ConnectionError("closed mid-frame")
            self.buf += chunk
        out, self.buf = self.buf[:n], self.buf[n:]
        return out

    def send(self, doc):
        data = json.dumps(doc).encode()
        mask = os.urandom(4)
        if len(data) < 126:
            header = struct.pack("!BB", 0x81, 0x80 | len(data))
        else:
            header = struct.pack("!BBH", 0x81, 0x80 | 126, len(data))
        masked = bytes(b ^ mask[i % 4] for i, b in enumerate(data))
        self.sock.sendall(header + mask + masked)

    def recv(self):
        head = self._read_exact(2)
        length = head[1] & 0x7F
        if length == 126:
            length = struct.unpack("!H", self._read_exact(2))[0]
        elif length == 127:
            length = struct.unpack("!Q", self._read_exact(8))[0]
        payload = self._read_exact(length)
        return json.loads(payload)

    def close(self):
        self.sock.close()
