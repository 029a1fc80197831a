"""Control-plane server: snapshot streaming and intervention commands.

One TCP port, two transports:

- newline-delimited JSON (one document per line) for native clients,
- RFC 6455 WebSocket carrying the same JSON documents as text frames, for
  browser clients (a connection opening with an HTTP Upgrade request is
  switched automatically). A plain ``GET /network.json`` on the same port
  returns the network geometry once and closes.

Client -> server: {"command": ..., "payload": {...}, "request_id": ...}.
Server -> client: {"type": "ack"|"snapshot"|"network", ...}. Every command is
acknowledged exactly once with its request_id; commands take effect at the
next simulation step boundary. Snapshot backlog is decimated drop-oldest per
client so a slow consumer never stalls control traffic.
"""

from __future__ import annotations

import base64
import hashlib
import json
import socket
import struct
import threading
from collections import deque

_WS_GUID = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11"
_SNAPSHOT_BACKLOG = 32


class _Client:
    def __init__(self, sock: socket.socket, server: "GatewayServer"):
        self.sock = sock
        self.server = server
        self.websocket = False
        self.alive = True
        self.queue: deque[dict] = deque()
        self.cond = threading.Condition()

    def send_json(self, doc: dict) -> None:
        """Queue a document; snapshots beyond the backlog drop oldest-first."""
        with self.cond:
            if doc.get("type") == "snapshot":
                backlog = [m for m in self.queue if m.get("type") == "snapshot"]
                if len(backlog) >= _SNAPSHOT_BACKLOG:
                    for m in list(self.queue):
                        if m.get("type") == "snapshot":
                            self.queue.remove(m)
                            break
            self.queue.append(doc)
            self.cond.notify()

    def writer_loop(self) -> None:
        while True:
            with self.cond:
                while not self.queue and self.alive:
                    self.cond.wait(timeout=0.5)
                if not self.alive and not self.queue:
                    return
                doc = self.queue.popleft() if self.queue else None
            if doc is None:
                continue
            try:
                payload = json.dumps(doc, sort_keys=True)
                if self.websocket:
                    self.sock.sendall(_ws_text_frame(payload))
                else:
                    self.sock.sendall(payload.encode("utf-8") + b"\n")
            except OSError:
                self.close()
                return

    def close(self) -> None:
        with self.cond:
            if not self.alive:
                return
            self.alive = False
            self.cond.notify_all()
        try:
            self.sock.close()
        except OSError:
            pass
        self.server._drop_client(self)


def _ws_text_frame(text: str) -> bytes:
    data = text.encode("utf-8")
    n = len(data)
    if n < 126:
        header = struct.pack("!BB", 0x81, n)
    elif n < 65536:
        header = struct.pack("!BBH", 0x81, 126, n)
    else:
        header = struct.pack("!BBQ", 0x81, 127, n)
    return header + data


def _ws_accept_key(key: str) -> str:
    digest = hashlib.sha1((key + _WS_GUID).encode("ascii")).digest()
    return base64.b64encode(digest).decode("ascii")


class _SockReader:
    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.buf = b""

    def read_until(self, marker: bytes, limit: int = 65536) -> bytes | None:
        while marker not in self.buf:
            if len(self.buf) > limit:
                return None
            chunk = self.sock.recv(4096)
            if not chunk:
                return None
            self.buf += chunk
        idx = self.buf.index(marker) + len(marker)
        out, self.buf = self.buf[:idx], self.buf[idx:]
        return out

    def read_exact(self, n: int) -> bytes | None:
        while len(self.buf) < n:
            chunk = self.sock.recv(4096)
            if not chunk:
                return None
            self.buf += chunk
        out, self.buf = self.buf[:n], self.buf[n:]
        return out


class GatewayServer:
    """Socket server bridging clients to a Runtime.

    The runtime consumes queued commands at step boundaries and calls each
    command's `_reply` with the ack; snapshots flow through `broadcast`.
    """

    def __init__(self, runtime, host: str = "127.0.0.1", port: int = 0):
        self.runtime = runtime
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((host, port))
        self._listener.listen(32)
        self.host, self.port = self._listener.getsockname()
        self._clients: set[_Client] = set()
        self._clients_lock = threading.Lock()
        self._accept_thread: threading.Thread | None = None
        self._stopping = False
        runtime.snapshot_sink = self.broadcast

    # ------------------------------------------------------------- lifecycle

    def start(self) -> "GatewayServer":
        self._accept_thread = threading.Thread(target=self._accept_loop, daemon=True)
        self._accept_thread.start()
        return self

    def stop(self) -> None:
        self._stopping = True
        try:
            self._listener.close()
        except OSError:
            pass
        with self._clients_lock:
            clients = list(self._clients)
        for c in clients:
            c.close()

    def __enter__(self) -> "GatewayServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

    def _drop_client(self, client: _Client) -> None:
        with self._clients_lock:
            self._clients.discard(client)

    # ------------------------------------------------------------- broadcast

    def broadcast(self, snapshot: dict) -> None:
        with self._clients_lock:
            clients = list(self._clients)
        for c in clients:
            c.send_json(snapshot)

    # ------------------------------------------------------------- accepting

    def _accept_loop(self) -> None:
        while not self._stopping:
            try:
                sock, _addr = self._listener.accept()
            except OSError:
                return
            threading.Thread(target=self._serve_client, args=(sock,), daemon=True).start()

    def _serve_client(self, sock: socket.socket) -> None:
        client = _Client(sock, self)
        reader = _SockReader(sock)
        # sniff the transport; a silent client is an NDJSON listener (browser
        # WebSocket clients always open with an HTTP Upgrade immediately)
        try:
            sock.settimeout(0.3)
            try:
                first = sock.recv(4, socket.MSG_PEEK)
            except TimeoutError:
                first = b""
            sock.settimeout(None)
        except OSError:
            return
        if first.startswith(b"GET"):
            head = reader.read_until(b"\r\n\r\n")
            if head is None:
                sock.close()
                return
            text = head.decode("latin-1")
            request_line = text.split("\r\n", 1)[0]
            headers = {}
            for line in text.split("\r\n")[1:]:
                if ":" in line:
                    k, v = line.split(":", 1)
                    headers[k.strip().lower()] = v.strip()
            if headers.get("upgrade", "").lower() == "websocket":
                key = headers.get("sec-websocket-key", "")
                resp = (
                    "HTTP/1.1 101 Switching Protocols\r\n"
                    "Upgrade: websocket\r\nConnection: Upgrade\r\n"
                    f"Sec-WebSocket-Accept: {_ws_accept_key(key)}\r\n\r\n"
                )
                sock.sendall(resp.encode("ascii"))
                client.websocket = True
            elif request_line.startswith("GET /network.json"):
                body = json.dumps(self._network_doc(), sort_keys=True).encode("utf-8")
                resp = (
                    "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\n"
                    "Access-Control-Allow-Origin: *\r\n"
                    f"Content-Length: {len(body)}\r\n\r\n"
                ).encode("ascii") + body
                sock.sendall(resp)
                sock.close()
                return
            else:
                sock.sendall(b"HTTP/1.1 404 Not Found\r\nContent-Length: 0\r\n\r\n")
                sock.close()
                return

        with self._clients_lock:
            self._clients.add(client)
        writer = threading.Thread(target=client.writer_loop, daemon=True)
        writer.start()
        try:
            if client.websocket:
                self._ws_read_loop(client, reader)
            else:
                self._ndjson_read_loop(client, reader)
        finally:
            client.close()

    def _network_doc(self) -> dict:
        net = self.runtime.net
        return {
            "type": "network",
            "nodes": [{"id": nid, "x": x, "y": y} for nid, (x, y) in net.nodes.items()],
            "edges": [
                {"id": e.edge_id, "from": e.from_node, "to": e.to_node, "length": e.length,
                 "free_flow_speed": e.free_flow_speed, "lanes": e.lanes, "capacity": e.capacity}
                for e in net.edges.values()
            ],
            "pois": [
                {"poi_id": p.poi_id, "name": p.name, "x": p.position[0], "y": p.position[1],
                 "categories": sorted(p.categories), "attached_edge": p.attached_edge}
                for p in self.runtime.world.pois.values()
            ],
        }

    # ------------------------------------------------------------- transports

    def _ndjson_read_loop(self, client: _Client, reader: _SockReader) -> None:
        while client.alive:
            line = reader.read_until(b"\n", limit=1_048_576)
            if line is None:
                return
            self._handle_text(client, line.decode("utf-8", "replace").strip())

    def _ws_read_loop(self, client: _Client, reader: _SockReader) -> None:
        fragments: list[bytes] = []
        while client.alive:
            head = reader.read_exact(2)
            if head is None:
                return
            fin = bool(head[0] & 0x80)
            opcode = head[0] & 0x0F
            masked = bool(head[1] & 0x80)
            length = head[1] & 0x7F
            if length == 126:
                ext = reader.read_exact(2)
                if ext is None:
                    return
                length = struct.unpack("!H", ext)[0]
            elif length == 127:
                ext = reader.read_exact(8)
                if ext is None:
                    return
                length = struct.unpack("!Q", ext)[0]
            mask = reader.read_exact(4) if masked else b"\x00" * 4
            if mask is None:
                return
            payload = reader.read_exact(length)
            if payload is None:
                return
            if masked:
                payload = bytes(b ^ mask[i % 4] for i, b in enumerate(payload))
            if opcode == 0x8:  # close
                return
            if opcode == 0x9:  # ping -> pong
                try:
                    client.sock.sendall(struct.pack("!BB", 0x8A, len(payload)) + payload)
                except OSError:
                    return
                continue
            if opcode in (0x1, 0x0):
                fragments.append(payload)
                if fin:
                    text = b"".join(fragments).decode("utf-8", "replace")
                    fragments = []
                    self._handle_text(client, text)

    # ------------------------------------------------------------- dispatch

    def _handle_text(self, client: _Client, text: str) -> None:
        if not text:
            return
        try:
            doc = json.loads(text)
            if not isinstance(doc, dict) or "command" not in doc:
                raise ValueError("message must be an object with a 'command' field")
        except (json.JSONDecodeError, ValueError) as exc:
            client.send_json({"type": "ack", "request_id": None, "ok": False,
                              "error": f"malformed message: {exc}"})
            return
        if doc["command"] == "get_network":
            reply = dict(self._network_doc())
            reply["request_id"] = doc.get("request_id")
            client.send_json(reply)
            return
        doc["_reply"] = client.send_json
        self.runtime.enqueue_command(doc)
