"""Socket transport for the oracle: length-prefixed JSON messages.

Each frame is a 4-byte big-endian payload length followed by UTF-8 JSON.

    {"op": "open"}                                          -> {"session": id}
    {"op": "submit", "session": id, "shape": [n, w, h, c],
     "data": "<base64 float32 little-endian>"}              -> {"accepted": n} | {"rejected": [ids]}
    {"op": "finalize", "session": id}                       -> {"labels": [ints]}
    {"op": "describe"}                                      -> {"num_classes": K, "input_shape": [w, h, c]}

Failures come back as ``{"error": message, "kind": category}``.
"""

import base64
import json
import logging
import socket
import socketserver
import struct
import threading
from urllib.parse import urlparse

import numpy as np

from .oracle import ProtocolError

log = logging.getLogger(__name__)

MAX_FRAME = 1 << 30


def send_message(sock, obj):
    payload = json.dumps(obj, separators=(",", ":")).encode()
    sock.sendall(struct.pack(">I", len(payload)) + payload)


def _recv_exact(sock, n):
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None
        buf += chunk
    return bytes(buf)


def recv_message(sock):
    """Next decoded message, or ``None`` on a clean end of stream."""
    head = _recv_exact(sock, 4)
    if head is None:
        return None
    (n,) = struct.unpack(">I", head)
    if n > MAX_FRAME:
        raise ProtocolError(f"frame of {n} bytes exceeds limit")
    body = _recv_exact(sock, n)
    if body is None:
        raise ProtocolError("connection closed mid-frame")
    return json.loads(body.decode())


def encode_images(images):
    images = np.ascontiguousarray(images, dtype="<f4")
    return list(images.shape), base64.b64encode(images.tobytes()).decode("ascii")


def decode_images(shape, data):
    raw = base64.b64decode(data)
    shape = [int(s) for s in shape]
    if len(shape) != 4 or len(raw) != 4 * int(np.prod(shape)):
        raise ProtocolError(f"payload of {len(raw)} bytes does not match shape {shape}")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)


def dispatch(oracle, msg):
    """Apply one request to an in-process oracle and build the reply."""
    try:
        op = msg.get("op")
        if op == "open":
            return oracle.open_session()
        if op == "submit":
            return oracle.submit(msg["session"], decode_images(msg["shape"], msg["data"]))
        if op == "finalize":
            return oracle.finalize(msg["session"])
        if op == "describe":
            return oracle.describe()
        raise ProtocolError(f"unknown op {op!r}")
    except ProtocolError as exc:
        return {"error": str(exc), "kind": "protocol"}
    except (KeyError, ValueError, TypeError) as exc:
        return {"error": str(exc), "kind": "bad-request"}


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        while True:
            try:
                msg = recv_message(self.request)
            except (ProtocolError, ValueError) as exc:
                send_message(self.request, {"error": str(exc), "kind": "protocol"})
                return
            if msg is None:
                return
            send_message(self.request, dispatch(self.server.oracle, msg))


class OracleServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, oracle, host="127.0.0.1", port=0):
        super().__init__((host, port), _Handler)
        self.oracle = oracle

    @property
    def address(self):
        host, port = self.server_address[:2]
        return f"tcp://{host}:{port}"

    def start_background(self):
        thread = threading.Thread(target=self.serve_forever, daemon=True)
        thread.start()
        return thread


class RemoteOracle:
    """Client with the same ``open_session``/``submit``/``finalize`` surface as :class:`Oracle`."""

    def __init__(self, url, timeout=600.0):
        parsed = urlparse(url)
        if parsed.scheme != "tcp" or not parsed.hostname or not parsed.port:
            raise ValueError(f"expected tcp://host:port, got {url!r}")
        self.url = url
        self._sock = socket.create_connection((parsed.hostname, parsed.port), timeout=timeout)
        self._lock = threading.Lock()

    def __deepcopy__(self, memo):
        return self

    def _call(self, msg):
        with self._lock:
            send_message(self._sock, msg)
            reply = recv_message(self._sock)
        if reply is None:
            raise ConnectionError("oracle closed the connection")
        if "error" in reply:
            raise ProtocolError(f"{reply.get('kind', 'error')}: {reply['error']}")
        return reply

    def open_session(self):
        return self._call({"op": "open"})

    def submit(self, sid, images):
        shape, data = encode_images(images)
        return self._call({"op": "submit", "session": sid, "shape": shape, "data": data})

    def finalize(self, sid):
        return self._call({"op": "finalize", "session": sid})

    def describe(self):
        return self._call({"op": "describe"})

    @property
    def num_classes(self):
        return int(self.describe()["num_classes"])

    def close(self):
        self._sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
