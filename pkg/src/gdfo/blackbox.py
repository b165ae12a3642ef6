"""Forward-only, metered access to the frozen teacher.

Clients hold a :class:`BlackBoxHandle`; it answers logits for (prompt,
tokens) batches and nothing else. Every query, whatever its batch size, is
one metered call. The budget lives in :class:`TeacherService`, and a query
that would exceed it is rejected before any evaluation.

Wire protocol (TCP). Each frame is ``u32 length`` followed by ``length``
bytes of body; all integers and floats are little-endian::

    body     = version:u32  type:u8  request_id:u64  payload
    QUERY    payload = B:u32, then B items of
                       D:u32, D x f64 prompt values, L:u32, L x u32 token ids
    RESPONSE payload = B:u32, C:u32, B*C x f64 logits (row-major), calls_remaining:u64
    STATUS   payload = (empty)
    STATUS_REPLY payload = calls_used:u64, budget:u64, n:u32, n bytes ASCII checksum
    ERROR    payload = code:u8, n:u32, n bytes UTF-8 message

No message type has a field that can carry parameters or gradients.
"""

from __future__ import annotations

import itertools
import logging
import os
import socket
import socketserver
import struct
import threading
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from gdfo.errors import BudgetError, ConfigError, GDFOError, ProtocolError, ServiceError
from gdfo.models import ModelParams, pad_tokens, predict_logits

log = logging.getLogger(__name__)

ENDPOINT_ENV = "GDFO_ENDPOINT"
PROTOCOL_VERSION = 1
MAX_FRAME = 64 * 1024 * 1024

QUERY, RESPONSE, STATUS, STATUS_REPLY, ERROR = 1, 2, 3, 4, 5
ERR_BUDGET, ERR_PROTOCOL, ERR_INTERNAL = 1, 2, 3

# Every field each message type carries, in wire order.
MESSAGE_SCHEMAS = {
    QUERY: (("version", "u32"), ("type", "u8"), ("request_id", "u64"),
            ("batch", "u32"), ("prompt", "f64[]"), ("token_ids", "u32[]")),
    RESPONSE: (("version", "u32"), ("type", "u8"), ("request_id", "u64"),
               ("batch", "u32"), ("classes", "u32"), ("logits", "f64[]"), ("calls_remaining", "u64")),
    STATUS: (("version", "u32"), ("type", "u8"), ("request_id", "u64")),
    STATUS_REPLY: (("version", "u32"), ("type", "u8"), ("request_id", "u64"),
                   ("calls_used", "u64"), ("budget", "u64"), ("checksum", "bytes")),
    ERROR: (("version", "u32"), ("type", "u8"), ("request_id", "u64"), ("code", "u8"), ("message", "bytes")),
}

_HEAD = struct.Struct("<IBQ")
_LEN = struct.Struct("<I")


@dataclass
class InferenceRequest:
    prompts: np.ndarray
    token_ids: Sequence[Sequence[int]]
    request_id: int = 0

    def __post_init__(self):
        prompts = np.asarray(self.prompts, dtype=np.float64)
        self.prompts = prompts[None, :] if prompts.ndim == 1 else prompts
        self.token_ids = [tuple(int(t) for t in seq) for seq in self.token_ids]


@dataclass
class InferenceResponse:
    logits: np.ndarray
    calls_remaining: int
    request_id: int = 0


@dataclass(frozen=True)
class Status:
    calls_used: int
    budget: int
    checksum: str


class TeacherService:
    """Owns the teacher, the budget and the only synchronized state (the call counter)."""

    def __init__(self, teacher: ModelParams, budget: int):
        if budget < 0:
            raise ConfigError("budget must be non-negative")
        self._teacher = teacher
        self.budget = int(budget)
        self._calls_used = 0
        self._lock = threading.Lock()
        self.checksum = teacher.checksum()
        self.prompt_dim = teacher.prompt_dim
        self.vocab_size = teacher.vocab_size

    @property
    def calls_used(self) -> int:
        return self._calls_used

    def status(self) -> Status:
        return Status(self._calls_used, self.budget, self.checksum)

    def validate(self, req: InferenceRequest) -> None:
        if req.prompts.ndim != 2 or req.prompts.shape[0] != len(req.token_ids):
            raise ProtocolError(f"prompts {req.prompts.shape} do not pair with {len(req.token_ids)} token sequences")
        if req.prompts.shape[1] != self.prompt_dim:
            raise ProtocolError(f"prompt width {req.prompts.shape[1]} != service width {self.prompt_dim}")
        if not np.all(np.isfinite(req.prompts)):
            raise ProtocolError("prompt values must be finite")
        try:
            pad_tokens(req.token_ids, self.vocab_size)
        except GDFOError as exc:
            raise ProtocolError(str(exc)) from exc

    def evaluate(self, req: InferenceRequest) -> InferenceResponse:
        self.validate(req)
        with self._lock:
            if self._calls_used >= self.budget:
                raise BudgetError(f"budget of {self.budget} calls exhausted")
            self._calls_used += 1
            remaining = self.budget - self._calls_used
        logits = predict_logits(self._teacher, req.prompts, req.token_ids)
        if not np.all(np.isfinite(logits)):
            raise ServiceError("teacher produced non-finite logits")
        return InferenceResponse(logits, remaining, req.request_id)


class BlackBoxHandle:
    """Client view of the teacher: forward logits and metering, nothing else."""

    transport = "abstract"

    def query(self, request: InferenceRequest) -> InferenceResponse:
        raise NotImplementedError

    def status(self) -> Status:
        raise NotImplementedError

    @property
    def calls_used(self) -> int:
        return self.status().calls_used

    @property
    def budget(self) -> int:
        return self.status().budget

    @property
    def checksum(self) -> str:
        return self.status().checksum

    def calls_remaining(self) -> int:
        s = self.status()
        return s.budget - s.calls_used

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class InProcessHandle(BlackBoxHandle):
    transport = "in-process"

    def __init__(self, service: TeacherService):
        self._service = service

    def query(self, request: InferenceRequest) -> InferenceResponse:
        return self._service.evaluate(request)

    def status(self) -> Status:
        return self._service.status()


def query(handle: BlackBoxHandle, request: InferenceRequest) -> InferenceResponse:
    return handle.query(request)


# wire encoding

def _frame(msg_type: int, request_id: int, payload: bytes) -> bytes:
    body = _HEAD.pack(PROTOCOL_VERSION, msg_type, request_id) + payload
    return _LEN.pack(len(body)) + body


def encode_query(req: InferenceRequest) -> bytes:
    parts = [struct.pack("<I", len(req.token_ids))]
    for prompt, ids in zip(req.prompts, req.token_ids):
        parts.append(struct.pack("<I", prompt.size))
        parts.append(np.ascontiguousarray(prompt, dtype="<f8").tobytes())
        parts.append(struct.pack("<I", len(ids)))
        parts.append(np.asarray(ids, dtype="<u4").tobytes())
    return _frame(QUERY, req.request_id, b"".join(parts))


def encode_response(resp: InferenceResponse) -> bytes:
    logits = np.ascontiguousarray(resp.logits, dtype="<f8")
    payload = (struct.pack("<II", *logits.shape) + logits.tobytes() + struct.pack("<Q", resp.calls_remaining))
    return _frame(RESPONSE, resp.request_id, payload)


def encode_status_reply(request_id: int, status: Status) -> bytes:
    digest = status.checksum.encode("ascii")
    payload = struct.pack("<QQI", status.calls_used, status.budget, len(digest)) + digest
    return _frame(STATUS_REPLY, request_id, payload)


def encode_error(request_id: int, code: int, message: str) -> bytes:
    text = message.encode("utf-8")
    return _frame(ERROR, request_id, struct.pack("<BI", code, len(text)) + text)


class _Reader:
    def __init__(self, buf: bytes, offset: int = 0):
        self.buf, self.pos = buf, offset

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise ProtocolError("message truncated")
        vals = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return vals

    def array(self, dtype: str, count: int) -> np.ndarray:
        size = np.dtype(dtype).itemsize * count
        if self.pos + size > len(self.buf):
            raise ProtocolError("array payload truncated")
        out = np.frombuffer(self.buf, dtype=dtype, count=count, offset=self.pos)
        self.pos += size
        return out

    def raw(self, count: int) -> bytes:
        if self.pos + count > len(self.buf):
            raise ProtocolError("byte payload truncated")
        out = self.buf[self.pos:self.pos + count]
        self.pos += count
        return out

    def done(self) -> None:
        if self.pos != len(self.buf):
            raise ProtocolError(f"{len(self.buf) - self.pos} trailing bytes in message")


def decode_body(body: bytes):
    """Decode a frame body into ``(type, request_id, message)``."""
    r = _Reader(body)
    version, msg_type, request_id = r.take("<IBQ")
    if version != PROTOCOL_VERSION:
        raise ProtocolError(f"unsupported protocol version {version}")
    if msg_type == QUERY:
        (batch,) = r.take("<I")
        prompts, ids = [], []
        for _ in range(batch):
            (dim,) = r.take("<I")
            prompts.append(r.array("<f8", dim).astype(np.float64))
            (length,) = r.take("<I")
            ids.append(tuple(int(t) for t in r.array("<u4", length)))
        r.done()
        if batch == 0 or len({p.size for p in prompts}) != 1:
            raise ProtocolError("query needs at least one item and equal prompt widths")
        msg = InferenceRequest(np.stack(prompts), ids, request_id)
    elif msg_type == RESPONSE:
        batch, classes = r.take("<II")
        logits = r.array("<f8", batch * classes).astype(np.float64).reshape(batch, classes)
        (remaining,) = r.take("<Q")
        r.done()
        msg = InferenceResponse(logits, remaining, request_id)
    elif msg_type == STATUS:
        r.done()
        msg = None
    elif msg_type == STATUS_REPLY:
        used, budget, n = r.take("<QQI")
        msg = Status(used, budget, r.raw(n).decode("ascii"))
        r.done()
    elif msg_type == ERROR:
        code, n = r.take("<BI")
        msg = (code, r.raw(n).decode("utf-8", errors="replace"))
        r.done()
    else:
        raise ProtocolError(f"unknown message type {msg_type}")
    return msg_type, request_id, msg


def _recv_exact(sock: socket.socket, count: int) -> bytes:
    chunks, got = [], 0
    while got < count:
        chunk = sock.recv(count - got)
        if not chunk:
            raise ConnectionError("connection closed mid-frame")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def read_frame(sock: socket.socket) -> bytes | None:
    head = sock.recv(_LEN.size, socket.MSG_WAITALL)
    if not head:
        return None
    if len(head) < _LEN.size:
        head += _recv_exact(sock, _LEN.size - len(head))
    (length,) = _LEN.unpack(head)
    if length > MAX_FRAME:
        raise ProtocolError(f"frame of {length} bytes exceeds the {MAX_FRAME} limit")
    return _recv_exact(sock, length)


# server

class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        service: TeacherService = self.server.service
        sock = self.request
        while True:
            try:
                body = read_frame(sock)
            except (ConnectionError, OSError):
                return
            except ProtocolError as exc:
                sock.sendall(encode_error(0, ERR_PROTOCOL, str(exc)))
                return
            if body is None:
                return
            sock.sendall(self._reply(service, body))

    @staticmethod
    def _reply(service: TeacherService, body: bytes) -> bytes:
        request_id = 0
        try:
            msg_type, request_id, msg = decode_body(body)
            if msg_type == QUERY:
                return encode_response(service.evaluate(msg))
            if msg_type == STATUS:
                return encode_status_reply(request_id, service.status())
            raise ProtocolError(f"message type {msg_type} is not a request")
        except BudgetError as exc:
            return encode_error(request_id, ERR_BUDGET, str(exc))
        except ProtocolError as exc:
            return encode_error(request_id, ERR_PROTOCOL, str(exc))
        except Exception as exc:  # keep serving other clients
            log.exception("internal error answering request %d", request_id)
            return encode_error(request_id, ERR_INTERNAL, f"{type(exc).__name__}: {exc}")


class _Server(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


def parse_endpoint(endpoint: str) -> tuple[str, int]:
    host, sep, port = endpoint.rpartition(":")
    if not sep or not port.isdigit():
        raise ConfigError(f"endpoint must look like host:port, got {endpoint!r}")
    return host or "127.0.0.1", int(port)


def resolve_endpoint(endpoint: str | None) -> str:
    endpoint = endpoint or os.environ.get(ENDPOINT_ENV)
    if not endpoint:
        raise ConfigError(f"no endpoint given and {ENDPOINT_ENV} is unset")
    return endpoint


@dataclass
class RunningService:
    service: TeacherService
    server: _Server
    thread: threading.Thread | None = field(default=None)

    @property
    def endpoint(self) -> str:
        host, port = self.server.server_address[:2]
        return f"{host}:{port}"

    def serve_forever(self) -> None:
        self.server.serve_forever()

    def shutdown(self) -> None:
        self.server.shutdown()
        self.server.server_close()
        if self.thread is not None:
            self.thread.join(timeout=5)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.shutdown()


def serve(teacher: ModelParams, bind: str = "127.0.0.1:0", budget: int = 0,
          background: bool = True) -> RunningService:
    """Start a socket service for ``teacher``; port 0 picks a free port."""
    service = TeacherService(teacher, budget)
    try:
        server = _Server(parse_endpoint(bind), _Handler)
    except OSError as exc:
        raise ServiceError(f"cannot bind {bind}: {exc}") from exc
    server.service = service
    running = RunningService(service, server)
    if background:
        running.thread = threading.Thread(target=server.serve_forever, name="gdfo-blackbox", daemon=True)
        running.thread.start()
    log.info("black-box service on %s, budget %d", running.endpoint, budget)
    return running


class SocketHandle(BlackBoxHandle):
    transport = "socket"

    def __init__(self, endpoint: str | None = None, timeout: float = 60.0):
        self.endpoint = resolve_endpoint(endpoint)
        try:
            self._sock = socket.create_connection(parse_endpoint(self.endpoint), timeout=timeout)
        except OSError as exc:
            raise ServiceError(f"cannot reach black-box service at {self.endpoint}: {exc}") from exc
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._lock = threading.Lock()
        self._ids = itertools.count(1)

    def _roundtrip(self, frame: bytes, request_id: int):
        with self._lock:
            try:
                self._sock.sendall(frame)
                body = read_frame(self._sock)
            except OSError as exc:
                raise ServiceError(f"transport failure: {exc}") from exc
        if body is None:
            raise ServiceError("service closed the connection")
        msg_type, rid, msg = decode_body(body)
        if msg_type == ERROR:
            code, text = msg
            if code == ERR_BUDGET:
                raise BudgetError(text)
            if code == ERR_PROTOCOL:
                raise ProtocolError(text)
            raise ServiceError(text)
        if rid != request_id:
            raise ProtocolError(f"response id {rid} does not echo request id {request_id}")
        return msg_type, msg

    def query(self, request: InferenceRequest) -> InferenceResponse:
        rid = next(self._ids)
        req = InferenceRequest(request.prompts, request.token_ids, rid)
        msg_type, msg = self._roundtrip(encode_query(req), rid)
        if msg_type != RESPONSE:
            raise ProtocolError(f"expected RESPONSE, got type {msg_type}")
        msg.request_id = request.request_id
        return msg

    def status(self) -> Status:
        rid = next(self._ids)
        msg_type, msg = self._roundtrip(_frame(STATUS, rid, b""), rid)
        if msg_type != STATUS_REPLY:
            raise ProtocolError(f"expected STATUS_REPLY, got type {msg_type}")
        return msg

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass
