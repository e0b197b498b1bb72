"""Newline-delimited JSON protocol between the trainer and any scorer.

One JSON object per line, UTF-8, newline-terminated. Both directions open with
a hello line carrying the protocol version. Requests carry token-id arrays and
a structured 64-bit id whose low bits hold the candidate slot and whose high
bits hold the query serial; the evaluator derives its noise stream and the
query's scenario class from the id, which is what makes in-process and
protocol-mediated scoring bit-identical under matched seeds.

Canonical encodings (compact separators, fixed key order):

    {"type":"hello","version":1}
    {"id":N,"type":"score","original":[...],"rewritten":[...],"step":N}
    {"id":N,"sa":X,"pc":X}
"""

from __future__ import annotations

import dataclasses
import json
import logging
import socket
import socketserver
import subprocess
import sys
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import BinaryIO, Sequence

from .reward import LIKERT_MAX, LIKERT_MIN, RewardScore
from .seeding import class_for_query, noise_rng, query_serial_of
from .synthenv import EnvConfig, score
from .tokens import Scenario

logger = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
DEFAULT_TIMEOUT_S = 30.0

_MAX_ID = (1 << 64) - 1


class ProtocolError(RuntimeError):
    """Malformed line, unknown type, or version mismatch."""

    def __init__(self, message: str, line: str | None = None):
        super().__init__(message if line is None else f"{message}: {line!r}")
        self.line = line


class ScoreTimeoutError(RuntimeError):
    def __init__(self, request_id: int, timeout: float):
        super().__init__(f"no response for request {request_id} within {timeout}s")
        self.request_id = request_id


class ConnectionLostError(RuntimeError):
    pass


@dataclass(frozen=True)
class Hello:
    version: int


@dataclass(frozen=True)
class ScoreRequest:
    id: int
    original: tuple[int, ...]
    rewritten: tuple[int, ...]
    step: int

    def __post_init__(self) -> None:
        if not (0 <= self.id <= _MAX_ID):
            raise ValueError(f"id {self.id} outside unsigned 64-bit range")
        if self.step < 0:
            raise ValueError("step must be >= 0")
        for name, arr in (("original", self.original), ("rewritten", self.rewritten)):
            if any((not isinstance(t, int)) or t < 0 for t in arr):
                raise ValueError(f"{name} must contain non-negative token ids")


@dataclass(frozen=True)
class ScoreResponse:
    id: int
    sa: float
    pc: float

    def __post_init__(self) -> None:
        if not (0 <= self.id <= _MAX_ID):
            raise ValueError(f"id {self.id} outside unsigned 64-bit range")
        for name, v in (("sa", self.sa), ("pc", self.pc)):
            if not (LIKERT_MIN <= v <= LIKERT_MAX):
                raise ValueError(f"{name}={v} outside Likert bounds")


def encode_hello() -> bytes:
    return json.dumps({"type": "hello", "version": PROTOCOL_VERSION},
                      separators=(",", ":")).encode() + b"\n"


def encode_request(req: ScoreRequest) -> bytes:
    doc = {"id": req.id, "type": "score", "original": list(req.original),
           "rewritten": list(req.rewritten), "step": req.step}
    return json.dumps(doc, separators=(",", ":")).encode() + b"\n"


def encode_response(resp: ScoreResponse) -> bytes:
    doc = {"id": resp.id, "sa": resp.sa, "pc": resp.pc}
    return json.dumps(doc, separators=(",", ":")).encode() + b"\n"


def decode_line(line: bytes | str) -> Hello | ScoreRequest | ScoreResponse:
    """Parse one protocol line into a typed message."""
    text = line.decode() if isinstance(line, bytes) else line
    text = text.strip()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as err:
        raise ProtocolError(f"malformed JSON ({err.msg})", text) from None
    if not isinstance(doc, dict):
        raise ProtocolError("message must be a JSON object", text)
    mtype = doc.get("type")
    try:
        if mtype == "hello":
            return Hello(version=int(doc["version"]))
        if mtype == "score":
            return ScoreRequest(id=int(doc["id"]),
                                original=tuple(int(t) for t in doc["original"]),
                                rewritten=tuple(int(t) for t in doc["rewritten"]),
                                step=int(doc["step"]))
        if mtype is None and {"id", "sa", "pc"} <= doc.keys():
            return ScoreResponse(id=int(doc["id"]), sa=float(doc["sa"]),
                                 pc=float(doc["pc"]))
    except (KeyError, TypeError, ValueError) as err:
        raise ProtocolError(f"invalid message ({err})", text) from None
    raise ProtocolError(f"unknown message type {mtype!r}", text)


def scenario_for_request(config: EnvConfig, req: ScoreRequest) -> Scenario:
    """Reconstruct the query's scenario from the request alone.

    The intent set is the original prompt; the class comes from the query
    serial embedded in the request id, the same rule the trainer uses when it
    builds rollout queries.
    """
    intents = frozenset(req.original)
    class_id = class_for_query(query_serial_of(req.id), config.vocab.n_classes)
    return Scenario(class_id=class_id, intent_tokens=intents,
                    prompt=tuple(sorted(intents)))


def evaluate_request(config: EnvConfig, req: ScoreRequest) -> ScoreResponse:
    """Score one request, with noise seeded by the request id alone."""
    scenario = scenario_for_request(config, req)
    rng = noise_rng(req.id) if config.noise_sigma > 0 else None
    sc, _ = score(config, scenario, req.rewritten, rng)
    return ScoreResponse(id=req.id, sa=sc.sa, pc=sc.pc)


class EvaluatorClient:
    """Protocol client: single writer, single reader, demultiplexed by id.

    Supports concurrent in-flight requests from multiple threads; responses
    are matched by id and handed back in the caller's submission order.
    """

    def __init__(self, reader: BinaryIO, writer: BinaryIO, closer=None):
        self._reader = reader
        self._writer = writer
        self._closer = closer
        self._lock = threading.Lock()
        self._cond = threading.Condition(self._lock)
        self._responses: dict[int, ScoreResponse] = {}
        self._inflight: set[int] = set()
        self._dead: Exception | None = None
        self._handshake()
        self._thread = threading.Thread(target=self._read_loop, daemon=True)
        self._thread.start()

    def _handshake(self) -> None:
        self._writer.write(encode_hello())
        self._writer.flush()
        line = self._reader.readline()
        if not line:
            raise ConnectionLostError("peer closed during handshake")
        msg = decode_line(line)
        if not isinstance(msg, Hello):
            raise ProtocolError("expected hello as first line", line.decode(errors="replace"))
        if msg.version != PROTOCOL_VERSION:
            raise ProtocolError(
                f"peer speaks version {msg.version}, this side speaks {PROTOCOL_VERSION}")

    def _read_loop(self) -> None:
        try:
            while True:
                line = self._reader.readline()
                if not line:
                    raise ConnectionLostError("peer closed the connection")
                msg = decode_line(line)
                if not isinstance(msg, ScoreResponse):
                    raise ProtocolError("expected a score response",
                                        line.decode(errors="replace"))
                with self._cond:
                    self._responses[msg.id] = msg
                    self._cond.notify_all()
        except Exception as err:  # noqa: BLE001 - reader failure fails all waiters
            with self._cond:
                self._dead = err
                self._cond.notify_all()

    def score_batch_outcomes(self, requests: Sequence[ScoreRequest],
                             timeout: float = DEFAULT_TIMEOUT_S,
                             ) -> list[ScoreResponse | Exception]:
        """Send all requests; per-request outcome in input order.

        Each slot is either the matched response or the error that befell that
        request alone (timeout carrying its id, or connection loss). One silent
        peer omission does not disturb the other requests.
        """
        with self._cond:
            if self._dead is not None:
                raise ConnectionLostError(str(self._dead))
            for req in requests:
                if req.id in self._inflight:
                    raise ProtocolError(f"request id {req.id} already in flight")
                self._inflight.add(req.id)
            payload = b"".join(encode_request(r) for r in requests)
            self._writer.write(payload)
            self._writer.flush()
        deadline = time.monotonic() + timeout
        out: list[ScoreResponse | Exception] = []
        try:
            for req in requests:
                with self._cond:
                    while req.id not in self._responses and self._dead is None:
                        remaining = deadline - time.monotonic()
                        if remaining <= 0 or not self._cond.wait(timeout=remaining):
                            break
                    if req.id in self._responses:
                        out.append(self._responses.pop(req.id))
                    elif self._dead is not None:
                        out.append(ConnectionLostError(str(self._dead)))
                    else:
                        out.append(ScoreTimeoutError(req.id, timeout))
        finally:
            with self._cond:
                self._inflight.difference_update(r.id for r in requests)
        return out

    def score_batch(self, requests: Sequence[ScoreRequest],
                    timeout: float = DEFAULT_TIMEOUT_S) -> list[ScoreResponse]:
        """Send all requests, return responses in input order.

        Raises the first per-request error (a timeout error carries the id of
        the offending request); the training loop treats that as fatal.
        """
        outcomes = self.score_batch_outcomes(requests, timeout)
        for oc in outcomes:
            if isinstance(oc, Exception):
                raise oc
        return outcomes  # type: ignore[return-value]

    def close(self) -> None:
        try:
            self._writer.close()
        except Exception:  # noqa: BLE001
            pass
        if self._closer is not None:
            self._closer()


def connect_tcp(host: str, port: int, timeout: float = DEFAULT_TIMEOUT_S) -> EvaluatorClient:
    sock = socket.create_connection((host, port), timeout=timeout)
    sock.settimeout(None)
    reader = sock.makefile("rb")
    writer = sock.makefile("wb")
    return EvaluatorClient(reader, writer, closer=sock.close)


def connect_subprocess(cmd: list[str]) -> tuple[EvaluatorClient, subprocess.Popen]:
    proc = subprocess.Popen(cmd, stdin=subprocess.PIPE, stdout=subprocess.PIPE)
    assert proc.stdin is not None and proc.stdout is not None
    client = EvaluatorClient(proc.stdout, proc.stdin, closer=proc.terminate)
    return client, proc


def serve_stream(config: EnvConfig, reader: BinaryIO, writer: BinaryIO,
                 max_workers: int = 8) -> None:
    """Serve the scoring protocol over one byte-stream pair until EOF.

    Requests may be processed concurrently, but each response is written as a
    single atomic line under a lock, so lines never interleave.
    """
    first = reader.readline()
    if not first:
        return
    msg = decode_line(first)
    if not isinstance(msg, Hello):
        raise ProtocolError("expected hello as first line", first.decode(errors="replace"))
    if msg.version != PROTOCOL_VERSION:
        raise ProtocolError(f"unsupported protocol version {msg.version}")
    writer.write(encode_hello())
    writer.flush()

    write_lock = threading.Lock()

    def handle(req: ScoreRequest) -> None:
        resp = evaluate_request(config, req)
        with write_lock:
            writer.write(encode_response(resp))
            writer.flush()

    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        futures = []
        while True:
            line = reader.readline()
            if not line:
                break
            req = decode_line(line)
            if not isinstance(req, ScoreRequest):
                raise ProtocolError("expected a score request", line.decode(errors="replace"))
            futures.append(pool.submit(handle, req))
        for fut in futures:
            fut.result()


def serve_stdio(config: EnvConfig) -> None:
    serve_stream(config, sys.stdin.buffer, sys.stdout.buffer)


class MockEvaluatorServer:
    """TCP server wrapping the synthetic environment; one thread per connection."""

    def __init__(self, config: EnvConfig, host: str = "127.0.0.1", port: int = 0):
        env_config = config

        class Handler(socketserver.BaseRequestHandler):
            def handle(self) -> None:
                reader = self.request.makefile("rb")
                writer = self.request.makefile("wb")
                try:
                    serve_stream(env_config, reader, writer)
                except (ProtocolError, ConnectionLostError, BrokenPipeError) as err:
                    logger.warning("evaluator connection closed: %s", err)

        class Server(socketserver.ThreadingTCPServer):
            allow_reuse_address = True
            daemon_threads = True

        self._server = Server((host, port), Handler)
        self.host, self.port = self._server.server_address[:2]
        self._thread: threading.Thread | None = None

    def start(self) -> None:
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()

    def serve_forever(self) -> None:
        self._server.serve_forever()

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()


def with_noise_sigma(config: EnvConfig, noise_sigma: float | None) -> EnvConfig:
    """Config with an overridden noise level (used by the evaluator CLI)."""
    if noise_sigma is None:
        return config
    return dataclasses.replace(config, noise_sigma=noise_sigma)
