"""Wire codec, provider state machine, transports, and the transcript audit."""

import socket
import struct
import threading

import numpy as np
import pytest
from conftest import random_message

from remo.errors import LengthMismatch as LengthMismatchError
from remo.errors import ShapeMismatch, SketchReissue, TransportClosed
from remo.model import reference_generate
from remo.protocol import (
    Enclave,
    ErrorReply,
    InProcTransport,
    MatMulReply,
    MatMulRequest,
    OpenSession,
    PoolReply,
    ProviderServer,
    ProviderState,
    SetupBase,
    TcpTransport,
    Transcript,
    audit_transcript,
    decode_message,
    encode_message,
)
from remo.ring import QuantParams, RingMatrix, ring_matmul

import remo.errors as errors

P = QuantParams()


# --- codec ---------------------------------------------------------------------


def test_close_session_round_trip():
    from remo.protocol import CloseSession

    msg = CloseSession(12345)
    assert decode_message(encode_message(msg)) == msg


def test_codec_round_trip_all_kinds():
    rng = np.random.default_rng(0)
    for _ in range(500):
        msg = random_message(rng)
        assert decode_message(encode_message(msg)) == msg


def test_truncated_frame():
    raw = encode_message(OpenSession(7))
    with pytest.raises(LengthMismatchError):
        decode_message(raw[:-2])


def test_unknown_tag():
    raw = bytearray(encode_message(OpenSession(7)))
    raw[4] = 99
    with pytest.raises(errors.DecodeError):
        decode_message(bytes(raw))


def test_trailing_bytes_rejected():
    raw = encode_message(OpenSession(7)) + b"zz"
    with pytest.raises(LengthMismatchError):
        decode_message(raw)


# --- provider state machine --------------------------------------------------------


def test_setup_reply_shape_and_oracle(toy_world):
    weights, provider, enclave, transport, _ = toy_world
    base = enclave._issuer.gen_public_base("l0.wq", 16, 32)
    reply = provider.handle(SetupBase("l0.wq", base.public_base))
    assert isinstance(reply, PoolReply)
    assert reply.pool.shape == (16, 32)
    # local oracle recomputation on the provider's own weight matrix
    assert reply.pool == ring_matmul(base.public_base, weights.op_matrix("l0.wq"))


def test_setup_reissue_refused(toy_world):
    _, provider, enclave, _, _ = toy_world
    base = enclave._issuer.gen_public_base("l0.wq", 16, 32)
    provider.handle(SetupBase("l0.wq", base.public_base))
    second = provider.handle(SetupBase("l0.wq", base.public_base))
    assert isinstance(second, ErrorReply) and second.code == "SketchReissue"


def test_matmul_matches_local_oracle(toy_world):
    weights, provider, _, _, _ = toy_world
    rng = np.random.default_rng(1)
    x = RingMatrix.from_ints(rng.integers(0, 2**63, (1, 32)).tolist(), P)
    reply = provider.handle(MatMulRequest(1, 0, "l0.wq", x))
    assert isinstance(reply, MatMulReply)
    assert (reply.session, reply.step, reply.op_id) == (1, 0, "l0.wq")
    assert reply.product == ring_matmul(x, weights.op_matrix("l0.wq"))


def test_matmul_unknown_op(toy_world):
    _, provider, _, _, _ = toy_world
    x = RingMatrix.from_ints([[1] * 32], P)
    reply = provider.handle(MatMulRequest(1, 0, "nope", x))
    assert isinstance(reply, ErrorReply) and reply.code == "UnknownOp"


def test_matmul_bad_shape(toy_world):
    _, provider, _, _, _ = toy_world
    x = RingMatrix.from_ints([[1, 2, 3]], P)
    reply = provider.handle(MatMulRequest(1, 0, "l0.wq", x))
    assert isinstance(reply, ErrorReply) and reply.code == "ShapeMismatch"


def test_open_close_acks(toy_world):
    from remo.protocol import CloseSession

    _, provider, _, _, _ = toy_world
    assert provider.handle(OpenSession(9)) == OpenSession(9)
    assert 9 in provider.session_steps
    assert provider.handle(CloseSession(9)) == CloseSession(9)
    assert 9 not in provider.session_steps


# --- enclave sessions ----------------------------------------------------------------


def test_session_matches_reference(toy_world):
    weights, _, enclave, transport, _ = toy_world
    prompt = [3, 1, 4, 1, 5, 9]
    assert enclave.run_session(transport, prompt, 8) == reference_generate(weights, prompt, 8)


def test_session_reuses_pools_for_second_prompt(toy_world):
    weights, _, enclave, transport, _ = toy_world
    a = enclave.run_session(transport, [1, 2, 3], 4)
    b = enclave.run_session(transport, [4, 5, 6], 4)
    assert a == reference_generate(weights, [1, 2, 3], 4)
    assert b == reference_generate(weights, [4, 5, 6], 4)


def test_second_enclave_against_same_provider_refused(toy_weights, toy_world):
    _, provider, _, transport, _ = toy_world
    enclave1 = Enclave(toy_weights.enclave_view(), master_seed=99)
    enclave1.setup(transport)
    enclave2 = Enclave(toy_weights.enclave_view(), master_seed=100)
    with pytest.raises(SketchReissue):
        enclave2.setup(transport)


def test_wrong_shape_reply_aborts_session(toy_weights):
    class WrongShapeProvider(ProviderState):
        def _matmul(self, msg):
            good = super()._matmul(msg)
            wide = np.concatenate([good.product.data, good.product.data], axis=1)
            return MatMulReply(msg.session, msg.step, msg.op_id, RingMatrix(wide, self.params))

    provider = WrongShapeProvider(toy_weights.provider_view(), P)
    enclave = Enclave(toy_weights.enclave_view(), master_seed=1)
    with pytest.raises(ShapeMismatch):
        enclave.run_session(InProcTransport(provider), [1, 2, 3], 4)


# --- TCP ----------------------------------------------------------------------------


def test_tcp_matches_inproc_bitwise(toy_weights):
    prompt = [8, 6, 7, 5, 3, 0, 9]
    tr_inproc = Transcript()
    provider = ProviderState(toy_weights.provider_view(), P, transcript=tr_inproc)
    enclave = Enclave(toy_weights.enclave_view(), master_seed=7)
    out_inproc = enclave.run_session(InProcTransport(provider), prompt, 6)

    tr_tcp = Transcript()
    state = ProviderState(toy_weights.provider_view(), P, transcript=tr_tcp)
    server = ProviderServer(state, port=0)
    try:
        transport = TcpTransport(*server.address)
        enclave2 = Enclave(toy_weights.enclave_view(), master_seed=7)
        out_tcp = enclave2.run_session(transport, prompt, 6)
        transport.close()
    finally:
        server.shutdown()
    assert out_tcp == out_inproc
    # transcripts agree bitwise once timestamps are stripped
    assert tr_tcp.frames() == tr_inproc.frames()


def test_tcp_concurrent_sessions_match_reference(toy_weights):
    state = ProviderState(toy_weights.provider_view(), P)
    server = ProviderServer(state, port=0)
    enclave = Enclave(toy_weights.enclave_view(), master_seed=13)
    boot = TcpTransport(*server.address)
    enclave.setup(boot)
    boot.close()
    prompts = [[1, 2, 3, 4], [9, 8, 7, 6], [5, 5, 5, 5]]
    results: dict[int, list[int]] = {}
    failures: list[Exception] = []

    def run(i: int) -> None:
        try:
            t = TcpTransport(*server.address)
            results[i] = enclave.run_session(t, prompts[i], 5)
            t.close()
        except Exception as exc:  # noqa: BLE001
            failures.append(exc)

    threads = [threading.Thread(target=run, args=(i,)) for i in range(len(prompts))]
    try:
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    finally:
        server.shutdown()
    assert not failures
    for i, prompt in enumerate(prompts):
        assert results[i] == reference_generate(toy_weights, prompt, 5)


def test_tcp_connect_close_clean(toy_weights):
    state = ProviderState(toy_weights.provider_view(), P)
    server = ProviderServer(state, port=0)
    try:
        t = TcpTransport(*server.address)
        t.close()
    finally:
        server.shutdown()


def test_tcp_malformed_first_frame_gets_error_reply(toy_weights):
    state = ProviderState(toy_weights.provider_view(), P)
    server = ProviderServer(state, port=0)
    try:
        sock = socket.create_connection(server.address, timeout=5.0)
        sock.sendall(struct.pack("<I", 3) + b"\x63ab")  # unknown tag 0x63
        header = sock.recv(4)
        (length,) = struct.unpack("<I", header)
        body = sock.recv(length)
        reply = decode_message(header + body)
        assert isinstance(reply, ErrorReply)
        assert sock.recv(1) == b""  # provider closed after the error
        sock.close()
    finally:
        server.shutdown()


def test_tcp_unreachable_host():
    with pytest.raises(TransportClosed):
        TcpTransport("127.0.0.1", 1, timeout=0.5)


# --- transcript + audit ----------------------------------------------------------------


def test_honest_transcript_passes_audit(toy_world):
    weights, provider, enclave, transport, transcript = toy_world
    for prompt in ([1, 2, 3, 4, 5, 6], [7, 8, 9, 10, 11, 12]):
        enclave.run_session(transport, prompt, 8)
    report = audit_transcript(transcript)
    assert report.passed, {k: v.detail for k, v in report.clauses.items()}


def test_no_masking_fails_uniformity(toy_world):
    _, provider, enclave, transport, transcript = toy_world
    rng = np.random.default_rng(3)
    for _ in range(16):
        enclave.run_session(transport, rng.integers(0, 64, 5).tolist(), 4, _disable_masking=True)
    report = audit_transcript(transcript)
    assert not report.clauses["uniformity"].ok
    with pytest.raises(errors.AuditFail):
        report.raise_if_failed()


def test_duplicated_payload_fails_freshness(toy_world):
    _, provider, enclave, transport, transcript = toy_world
    enclave.run_session(transport, [1, 2, 3, 4, 5, 6, 7, 8], 8)
    dup_src = next(
        e.message for e in transcript.entries if isinstance(e.message, MatMulRequest)
    )
    forged = MatMulRequest(dup_src.session, dup_src.step + 1000, dup_src.op_id, dup_src.masked)
    transcript.append(0, forged)
    report = audit_transcript(transcript)
    assert not report.clauses["freshness"].ok


def test_transcript_dump_load_round_trip(tmp_path, toy_world):
    _, provider, enclave, transport, transcript = toy_world
    enclave.run_session(transport, [2, 4, 6], 4)
    path = tmp_path / "session.transcript"
    transcript.dump(path)
    loaded = Transcript.load(path)
    assert [(e.direction, e.ts_ns, e.message) for e in loaded.entries] == [
        (e.direction, e.ts_ns, e.message) for e in transcript.entries
    ]


def test_role_separation_is_structural(toy_world):
    # provider state carries weights and bookkeeping only; the enclave side
    # never holds anything equal to a weight matrix
    weights, provider, enclave, transport, _ = toy_world
    assert set(vars(provider)) == {"ops", "params", "transcript", "issued", "session_steps", "_lock"}
    enclave.run_session(transport, [1, 2, 3], 2)
    all_w = list(weights.provider_view().values())
    for base in enclave.bases.values():
        assert all(base.pool != w for w in all_w)
        assert all(base.public_base != w for w in all_w)
    assert not hasattr(enclave, "ops")


def test_per_session_reply_ordering(toy_world):
    _, provider, enclave, transport, transcript = toy_world
    enclave.run_session(transport, [1, 2, 3], 4)
    req_keys = [
        (e.message.step, e.message.op_id)
        for e in transcript.entries
        if isinstance(e.message, MatMulRequest)
    ]
    rep_keys = [
        (e.message.step, e.message.op_id)
        for e in transcript.entries
        if isinstance(e.message, MatMulReply)
    ]
    assert req_keys == rep_keys
