"""Two-party wire protocol: setup, masked matmul service, transcripts, audit.

Frame format: u32 LE length of (tag + payload), then a 1-byte tag and
the payload.  Matrix payloads reuse the RMX1 encoding.  The provider is
a stateless-by-plaintext request/reply machine: it holds weight
matrices and per-op issue flags, never embeddings, tokens or KV data.

Two interchangeable transports run the identical message flow: direct
in-process calls and framed TCP (default port 7431).  A Transcript
records every provider-visible message and can be audited for schema,
masking uniformity and per-step freshness.
"""

from __future__ import annotations

import socket
import struct
import threading
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import chi2

from . import errors
from .errors import (
    AuditFail,
    BindFailure,
    DecodeError,
    LengthMismatch,
    ProtocolError,
    ShapeMismatch,
    SketchReissue,
    TransportClosed,
    UnknownOp,
)
from .masking import MaskBase, MaskIssuer, StepMasks, derive_step_mask, mask_embedding, recover
from .model import DecoderEngine, EnclaveParams, ModelConfig
from .prg import PrgKey
from .ring import QuantParams, RingMatrix, decode_matrix, encode_matrix, ring_matmul, zeros

DEFAULT_PORT = 7431
MAX_FRAME = 1 << 28  # desk-scale sanity cap


# --- message schema -----------------------------------------------------------


@dataclass(frozen=True)
class SetupBase:
    op_id: str
    base: RingMatrix


@dataclass(frozen=True)
class PoolReply:
    op_id: str
    pool: RingMatrix


@dataclass(frozen=True)
class MatMulRequest:
    session: int
    step: int
    op_id: str
    masked: RingMatrix


@dataclass(frozen=True)
class MatMulReply:
    session: int
    step: int
    op_id: str
    product: RingMatrix


@dataclass(frozen=True)
class OpenSession:
    session: int


@dataclass(frozen=True)
class CloseSession:
    session: int


@dataclass(frozen=True)
class ErrorReply:
    code: str
    detail: str


Message = SetupBase | PoolReply | MatMulRequest | MatMulReply | OpenSession | CloseSession | ErrorReply

_TAGS = {
    SetupBase: 1,
    PoolReply: 2,
    MatMulRequest: 3,
    MatMulReply: 4,
    OpenSession: 5,
    CloseSession: 6,
    ErrorReply: 7,
}
_BY_TAG = {v: k for k, v in _TAGS.items()}


def _pack_str(s: str, width: int = 2) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) >= 1 << (8 * width):
        raise ProtocolError("string field too long")
    return len(raw).to_bytes(width, "little") + raw


def _unpack_str(buf: bytes, offset: int, width: int = 2) -> tuple[str, int]:
    if len(buf) - offset < width:
        raise LengthMismatch("truncated string length")
    n = int.from_bytes(buf[offset : offset + width], "little")
    offset += width
    if len(buf) - offset < n:
        raise LengthMismatch("truncated string body")
    try:
        return buf[offset : offset + n].decode("utf-8"), offset + n
    except UnicodeDecodeError as exc:
        raise DecodeError("invalid utf-8 in string field") from exc


def _encode_payload(msg: Message) -> bytes:
    if isinstance(msg, SetupBase):
        return _pack_str(msg.op_id) + encode_matrix(msg.base)
    if isinstance(msg, PoolReply):
        return _pack_str(msg.op_id) + encode_matrix(msg.pool)
    if isinstance(msg, (MatMulRequest, MatMulReply)):
        mat = msg.masked if isinstance(msg, MatMulRequest) else msg.product
        return (
            struct.pack("<QI", msg.session, msg.step)
            + _pack_str(msg.op_id)
            + encode_matrix(mat)
        )
    if isinstance(msg, (OpenSession, CloseSession)):
        return struct.pack("<Q", msg.session)
    if isinstance(msg, ErrorReply):
        return _pack_str(msg.code) + _pack_str(msg.detail, width=4)
    raise ProtocolError(f"unsupported message {type(msg).__name__}")


def encode_message(msg: Message) -> bytes:
    """Full frame: length prefix, tag byte, payload."""
    body = bytes([_TAGS[type(msg)]]) + _encode_payload(msg)
    return struct.pack("<I", len(body)) + body


def decode_message(frame: bytes) -> Message:
    """Inverse of encode_message for exactly one frame."""
    if len(frame) < 5:
        raise LengthMismatch("frame shorter than header")
    (length,) = struct.unpack_from("<I", frame, 0)
    if length != len(frame) - 4:
        raise LengthMismatch(f"frame length field {length} != body {len(frame) - 4}")
    tag = frame[4]
    cls = _BY_TAG.get(tag)
    if cls is None:
        raise DecodeError(f"unknown message tag {tag}")
    buf, offset = frame, 5

    def done(msg: Message, end: int) -> Message:
        if end != len(buf):
            raise DecodeError("trailing bytes in frame")
        return msg

    if cls in (SetupBase, PoolReply):
        op_id, offset = _unpack_str(buf, offset)
        mat, offset = decode_matrix(buf, offset)
        return done(cls(op_id, mat), offset)
    if cls in (MatMulRequest, MatMulReply):
        if len(buf) - offset < 12:
            raise LengthMismatch("truncated matmul header")
        session, step = struct.unpack_from("<QI", buf, offset)
        offset += 12
        op_id, offset = _unpack_str(buf, offset)
        mat, offset = decode_matrix(buf, offset)
        return done(cls(session, step, op_id, mat), offset)
    if cls in (OpenSession, CloseSession):
        if len(buf) - offset < 8:
            raise LengthMismatch("truncated session id")
        (session,) = struct.unpack_from("<Q", buf, offset)
        return done(cls(session), offset + 8)
    code, offset = _unpack_str(buf, offset)
    detail, offset = _unpack_str(buf, offset, width=4)
    return done(ErrorReply(code, detail), offset)


# --- transcript ---------------------------------------------------------------

TO_PROVIDER = 0
FROM_PROVIDER = 1


@dataclass(frozen=True)
class TranscriptEntry:
    direction: int
    ts_ns: int
    message: Message


@dataclass
class Transcript:
    """Append-only log of everything the provider sees."""

    entries: list[TranscriptEntry] = field(default_factory=list)

    def append(self, direction: int, message: Message) -> None:
        self.entries.append(TranscriptEntry(direction, time.monotonic_ns(), message))

    def frames(self) -> list[tuple[int, bytes]]:
        """(direction, frame bytes) with timestamps stripped."""
        return [(e.direction, encode_message(e.message)) for e in self.entries]

    def dump(self, path) -> None:
        with open(path, "wb") as fh:
            for e in self.entries:
                fh.write(bytes([e.direction]) + struct.pack("<Q", e.ts_ns) + encode_message(e.message))

    @classmethod
    def load(cls, path) -> "Transcript":
        with open(path, "rb") as fh:
            buf = fh.read()
        entries = []
        offset = 0
        while offset < len(buf):
            if len(buf) - offset < 13:
                raise LengthMismatch("truncated transcript entry")
            direction = buf[offset]
            (ts,) = struct.unpack_from("<Q", buf, offset + 1)
            (length,) = struct.unpack_from("<I", buf, offset + 9)
            end = offset + 13 + length
            if end > len(buf):
                raise LengthMismatch("truncated transcript frame")
            msg = decode_message(buf[offset + 9 : end])
            entries.append(TranscriptEntry(direction, ts, msg))
            offset = end
        return cls(entries)


# --- provider -----------------------------------------------------------------


class ProviderState:
    """Weight holder; answers setup and masked-matmul requests.

    Holds only weight matrices and bookkeeping: no embeddings, tokens or
    KV values are constructible from the messages it accepts.
    """

    def __init__(
        self,
        ops: dict[str, RingMatrix],
        params: QuantParams,
        transcript: Transcript | None = None,
    ):
        self.ops = ops
        self.params = params
        self.transcript = transcript
        self.issued: set[str] = set()
        self.session_steps: dict[int, int] = {}
        self._lock = threading.Lock()

    def _record(self, msg: Message, reply: Message) -> None:
        if self.transcript is not None:
            self.transcript.append(TO_PROVIDER, msg)
            self.transcript.append(FROM_PROVIDER, reply)

    def handle(self, msg: Message) -> Message:
        try:
            reply = self._dispatch(msg)
        except errors.RemoError as exc:
            reply = ErrorReply(errors.error_code(exc), str(exc))
        with self._lock:
            self._record(msg, reply)
        return reply

    def _dispatch(self, msg: Message) -> Message:
        if isinstance(msg, SetupBase):
            return self._setup(msg)
        if isinstance(msg, MatMulRequest):
            return self._matmul(msg)
        if isinstance(msg, OpenSession):
            with self._lock:
                self.session_steps.setdefault(msg.session, 0)
            return OpenSession(msg.session)
        if isinstance(msg, CloseSession):
            with self._lock:
                self.session_steps.pop(msg.session, None)
            return CloseSession(msg.session)
        raise ProtocolError(f"provider cannot handle {type(msg).__name__}")

    def _weights_for(self, op_id: str) -> RingMatrix:
        w = self.ops.get(op_id)
        if w is None:
            raise UnknownOp(f"no weight matrix registered for {op_id!r}")
        return w

    def _setup(self, msg: SetupBase) -> PoolReply:
        w = self._weights_for(msg.op_id)
        if msg.base.cols != w.rows:
            raise ShapeMismatch(
                f"base for {msg.op_id!r} has {msg.base.cols} cols, weights expect {w.rows}"
            )
        if msg.base.params != self.params:
            raise ShapeMismatch("base params differ from provider params")
        with self._lock:
            if msg.op_id in self.issued:
                raise SketchReissue(f"base for {msg.op_id!r} already issued")
            self.issued.add(msg.op_id)
        # raw product, scale 2f: the enclave subtracts before rescaling
        return PoolReply(msg.op_id, ring_matmul(msg.base, w))

    def _matmul(self, msg: MatMulRequest) -> MatMulReply:
        w = self._weights_for(msg.op_id)
        if msg.masked.cols != w.rows:
            raise ShapeMismatch(
                f"input for {msg.op_id!r} has {msg.masked.cols} cols, weights expect {w.rows}"
            )
        if msg.masked.params != self.params:
            raise ShapeMismatch("input params differ from provider params")
        with self._lock:
            self.session_steps[msg.session] = msg.step
        return MatMulReply(msg.session, msg.step, msg.op_id, ring_matmul(msg.masked, w))


# --- transports ---------------------------------------------------------------


class InProcTransport:
    """Direct call into a ProviderState; same message flow as TCP."""

    def __init__(self, provider: ProviderState):
        self.provider = provider

    def request(self, msg: Message) -> Message:
        return self.provider.handle(msg)

    def close(self) -> None:
        pass


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    got = 0
    while got < n:
        try:
            chunk = sock.recv(n - got)
        except socket.timeout as exc:
            raise TransportClosed("socket timeout") from exc
        except OSError as exc:
            raise TransportClosed(str(exc)) from exc
        if not chunk:
            raise TransportClosed("peer closed connection")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def read_frame(sock: socket.socket) -> bytes:
    header = _recv_exact(sock, 4)
    (length,) = struct.unpack("<I", header)
    if length > MAX_FRAME:
        raise DecodeError(f"frame of {length} bytes exceeds cap")
    return header + _recv_exact(sock, length)


class TcpTransport:
    """Framed request/reply client over a TCP connection."""

    def __init__(self, host: str, port: int, timeout: float = 30.0):
        try:
            self.sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise TransportClosed(f"cannot connect to {host}:{port}: {exc}") from exc
        self.sock.settimeout(timeout)

    def request(self, msg: Message) -> Message:
        try:
            self.sock.sendall(encode_message(msg))
        except OSError as exc:
            raise TransportClosed(str(exc)) from exc
        return decode_message(read_frame(self.sock))

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


class ProviderServer:
    """One session per connection; concurrent connections share the state."""

    def __init__(self, state: ProviderState, host: str = "127.0.0.1", port: int = DEFAULT_PORT,
                 idle_timeout: float = 30.0):
        self.state = state
        self.idle_timeout = idle_timeout
        try:
            self._listener = socket.create_server((host, port))
        except OSError as exc:
            raise BindFailure(f"cannot bind {host}:{port}: {exc}") from exc
        self._listener.settimeout(0.2)
        self.address = self._listener.getsockname()
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self._accept_thread = threading.Thread(target=self._accept_loop, daemon=True)
        self._accept_thread.start()

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                conn, _ = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            t = threading.Thread(target=self._serve_conn, args=(conn,), daemon=True)
            t.start()
            self._threads.append(t)

    def _serve_conn(self, conn: socket.socket) -> None:
        conn.settimeout(self.idle_timeout)
        with conn:
            while not self._stop.is_set():
                try:
                    frame = read_frame(conn)
                except TransportClosed:
                    return
                except (DecodeError, LengthMismatch) as exc:
                    self._send(conn, ErrorReply(errors.error_code(exc), str(exc)))
                    return
                try:
                    msg = decode_message(frame)
                except (DecodeError, LengthMismatch) as exc:
                    self._send(conn, ErrorReply(errors.error_code(exc), str(exc)))
                    return
                if not self._send(conn, self.state.handle(msg)):
                    return

    @staticmethod
    def _send(conn: socket.socket, msg: Message) -> bool:
        try:
            conn.sendall(encode_message(msg))
            return True
        except OSError:
            return False

    def shutdown(self) -> None:
        self._stop.set()
        try:
            self._listener.close()
        except OSError:
            pass
        self._accept_thread.join(timeout=2.0)
        for t in self._threads:
            t.join(timeout=2.0)


def serve(address: tuple[str, int], ops: dict[str, RingMatrix], params: QuantParams,
          transcript: Transcript | None = None) -> ProviderServer:
    """Bind and start a provider; returns the running server handle."""
    state = ProviderState(ops, params, transcript=transcript)
    return ProviderServer(state, host=address[0], port=address[1])


# --- enclave ------------------------------------------------------------------


@dataclass
class Session:
    """Per-client enclave state: id, PRG key, step counter, token buffer."""

    session_id: int
    prg: PrgKey
    tokens_fed: list[int] = field(default_factory=list)
    response: list[int] = field(default_factory=list)


class Enclave:
    """Client-trusted party: holds prompts, masks, KV cache and tokens.

    Never constructs or receives a weight matrix; all it learns from the
    provider are restoration pools (underdetermined sketches) and masked
    products.
    """

    def __init__(self, params: EnclaveParams, master_seed: int, mask_ratio: float = 0.5,
                 tap_enabled: bool = True):
        if not (0.0 < mask_ratio < 1.0):
            raise ValueError("mask_ratio must be in (0, 1)")
        self.params = params
        self.cfg: ModelConfig = params.config
        self.mask_ratio = mask_ratio
        self.tap_enabled = tap_enabled
        self._master = PrgKey.from_int(master_seed)
        self._issuer = MaskIssuer(self._master.child("setup"), self.cfg.params)
        self.bases: dict[str, MaskBase] = {}
        self._session_counter = 0
        self._lock = threading.Lock()

    def mask_rows(self, d_in: int) -> int:
        return max(1, int(d_in * self.mask_ratio))

    def setup(self, transport) -> None:
        """Phase 1: release one public base per weighted op, store the pools.

        Idempotent per enclave; the provider refuses re-issue anyway.
        """
        for op_id in self.cfg.op_ids():
            if op_id in self.bases:
                continue
            d_in, d_out = self.cfg.op_dims(op_id)
            base = self._issuer.gen_public_base(op_id, self.mask_rows(d_in), d_in)
            reply = transport.request(SetupBase(op_id, base.public_base))
            if isinstance(reply, ErrorReply):
                raise errors.from_code(reply.code, reply.detail)
            if not isinstance(reply, PoolReply) or reply.op_id != op_id:
                raise ProtocolError(f"unexpected setup reply {reply!r}")
            if reply.pool.shape != (base.m, d_out):
                raise ShapeMismatch(
                    f"pool for {op_id!r} has shape {reply.pool.shape}, expected {(base.m, d_out)}"
                )
            self.bases[op_id] = base.install_pool(reply.pool)

    def _new_session(self) -> Session:
        with self._lock:
            self._session_counter += 1
            sid = self._session_counter
        return Session(session_id=sid, prg=self._master.child("session", sid))

    def run_session(self, transport, prompt, max_new: int, tap=None,
                    _disable_masking: bool = False, _first_token_mark: dict | None = None) -> list[int]:
        """Setup if needed, then the full per-token loop for one prompt.

        `_disable_masking` is a test-only hook for negative controls: it
        sends raw embeddings and must make the transcript audit fail.
        `_first_token_mark`, when given, receives the monotonic clock
        reading at which the first response token existed (TTFT probe).
        """
        if tap is not None and not self.tap_enabled:
            raise errors.TapUnavailable("this enclave was built without tap instrumentation")
        self.setup(transport)
        session = self._new_session()
        ack = transport.request(OpenSession(session.session_id))
        if isinstance(ack, ErrorReply):
            raise errors.from_code(ack.code, ack.detail)
        weighted = _MaskedWeightedOps(self, transport, session, tap, _disable_masking)
        engine = DecoderEngine(self.params, weighted)
        on_token = None
        if _first_token_mark is not None:
            def on_token(_tok: int) -> None:
                _first_token_mark.setdefault("first_token", time.monotonic())
        try:
            prompt = [int(t) for t in prompt]
            session.tokens_fed = list(prompt)
            response = engine.generate(prompt, max_new, on_token=on_token)
            session.tokens_fed.extend(response[:-1])
            session.response = response
        finally:
            try:
                transport.request(CloseSession(session.session_id))
            except TransportClosed:
                pass
        return response


class _MaskedWeightedOps:
    """Weighted-op evaluator that masks, outsources and recovers."""

    def __init__(self, enclave: Enclave, transport, session: Session, tap, disable_masking: bool):
        self.enclave = enclave
        self.transport = transport
        self.session = session
        self.tap = tap
        self.disable_masking = disable_masking
        self.masks: StepMasks | None = None

    def __call__(self, op_id: str, x: RingMatrix, step: int) -> RingMatrix:
        base = self.enclave.bases[op_id]
        if self.masks is None or self.masks.step != step:
            self.masks = StepMasks(step=step, per_op={})  # previous step's masks drop here
        if op_id in self.masks.per_op:
            raise ProtocolError(f"{op_id!r} outsourced twice in step {step}")
        if self.disable_masking:
            m_pvt = zeros(x.rows, base.m, x.params)
        else:
            m_pvt = derive_step_mask(self.session.prg, step, op_id, x.rows, base.m, x.params)
        self.masks.per_op[op_id] = m_pvt
        masked = mask_embedding(x, m_pvt, base.public_base)
        if self.tap is not None:
            self.tap.record(step, op_id, x, masked)
        reply = self.transport.request(
            MatMulRequest(self.session.session_id, step, op_id, masked)
        )
        if isinstance(reply, ErrorReply):
            raise errors.from_code(reply.code, reply.detail)
        if not isinstance(reply, MatMulReply) or (reply.session, reply.step, reply.op_id) != (
            self.session.session_id,
            step,
            op_id,
        ):
            raise ProtocolError(f"reply does not echo request: {reply!r}")
        d_out = self.enclave.cfg.op_dims(op_id)[1]
        if reply.product.shape != (x.rows, d_out):
            raise ShapeMismatch(
                f"product for {op_id!r} has shape {reply.product.shape}, expected {(x.rows, d_out)}"
            )
        if base.pool is None:
            raise ProtocolError(f"no pool installed for {op_id!r}")
        return recover(reply.product, m_pvt, base.pool)


# --- transcript audit ----------------------------------------------------------

_TO_PROVIDER_TYPES = (OpenSession, SetupBase, MatMulRequest, CloseSession)
_FROM_PROVIDER_TYPES = (OpenSession, CloseSession, PoolReply, MatMulReply, ErrorReply)
_UNIFORMITY_MIN_SAMPLES = 2560  # 10 expected counts per 8-bit bin


@dataclass
class ClauseResult:
    ok: bool
    detail: str


@dataclass
class AuditReport:
    clauses: dict[str, ClauseResult]

    @property
    def passed(self) -> bool:
        return all(c.ok for c in self.clauses.values())

    def raise_if_failed(self) -> None:
        for name, clause in self.clauses.items():
            if not clause.ok:
                raise AuditFail(f"audit clause {name!r} violated: {clause.detail}")


def audit_transcript(transcript: Transcript, alpha: float = 0.01) -> AuditReport:
    """Check a provider-view log: schema, directions, mask uniformity, freshness."""
    clauses: dict[str, ClauseResult] = {}

    unknown = [
        e for e in transcript.entries if not isinstance(e.message, tuple(_TAGS.keys()))
    ]
    clauses["schema"] = ClauseResult(
        not unknown, f"{len(unknown)} message(s) outside the schema" if unknown else "all messages in schema"
    )

    bad_dir = [
        e
        for e in transcript.entries
        if (e.direction == TO_PROVIDER and not isinstance(e.message, _TO_PROVIDER_TYPES))
        or (e.direction == FROM_PROVIDER and not isinstance(e.message, _FROM_PROVIDER_TYPES))
    ]
    clauses["direction"] = ClauseResult(
        not bad_dir,
        f"{len(bad_dir)} message(s) flowing the wrong way" if bad_dir
        else "all enclave-bound matrices ride setup or matmul requests",
    )

    requests = [
        e.message
        for e in transcript.entries
        if e.direction == TO_PROVIDER and isinstance(e.message, MatMulRequest)
    ]

    residues = np.concatenate(
        [(m.masked.data & np.uint64(0xFF)).ravel() for m in requests]
    ) if requests else np.empty(0, dtype=np.uint64)
    if residues.size < _UNIFORMITY_MIN_SAMPLES:
        clauses["uniformity"] = ClauseResult(
            True, f"skipped: only {residues.size} samples (< {_UNIFORMITY_MIN_SAMPLES})"
        )
    else:
        counts = np.bincount(residues.astype(np.int64), minlength=256)
        expected = residues.size / 256.0
        stat = float(np.sum((counts - expected) ** 2) / expected)
        crit = float(chi2.ppf(1.0 - alpha, 255))
        clauses["uniformity"] = ClauseResult(
            stat <= crit, f"chi-square {stat:.1f} vs critical {crit:.1f} at alpha={alpha}"
        )

    seen: dict[bytes, int] = {}
    dup = None
    for m in requests:
        key = m.masked.data.tobytes()
        prev = seen.get(key)
        if prev is not None and prev != m.step:
            dup = (prev, m.step)
            break
        seen.setdefault(key, m.step)
    clauses["freshness"] = ClauseResult(
        dup is None,
        f"identical payload at steps {dup[0]} and {dup[1]}" if dup else "no payload reused across steps",
    )

    return AuditReport(clauses)
