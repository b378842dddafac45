"""Toy decoder-only transformer split into weighted and structural halves.

Linear projections (Q/K/V/O, MLP up/down, output head) are "weighted"
ops: they multiply by provider-held weight matrices and are the only
computations that leave the enclave.  Everything else (RMSNorm,
attention scores/softmax, SiLU, residuals, greedy sampling) is
"structural": computed on dequantized reals inside the enclave and
re-quantized at the boundary.

The same DecoderEngine drives both the partitioned pipeline and the
single-party reference pipeline; they differ only in the callable that
evaluates weighted ops, so any divergence between them is a protocol
bug, not a modelling artifact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CacheInconsistent,
    DecodeError,
    EmptyInput,
    LengthMismatch,
    SessionExhausted,
    ShapeMismatch,
    TokenOutOfRange,
)
from .ring import (
    QuantParams,
    RingMatrix,
    decode_matrix,
    dequantize,
    encode_matrix,
    quantize,
    rescale,
    ring_add,
    ring_matmul,
)

RMS_EPS = 1e-6
WEIGHTS_MAGIC = b"RMW1"
_WEIGHTS_HEADER = struct.Struct("<9I")  # vocab, d, layers, heads, d_ff, max_seq, eos, k, f

_LAYER_OPS = ("wq", "wk", "wv", "wo", "wup", "wdown")
HEAD_OP = "head"


@dataclass(frozen=True)
class ModelConfig:
    vocab: int = 64
    d: int = 32
    layers: int = 2
    heads: int = 4
    d_ff: int = 64
    max_seq: int = 128
    eos_id: int = 0
    params: QuantParams = field(default_factory=QuantParams)

    def __post_init__(self) -> None:
        if self.vocab < 2:
            raise ValueError("vocab must be >= 2")
        if min(self.d, self.layers, self.heads, self.d_ff, self.max_seq) < 1:
            raise ValueError("all dims must be >= 1")
        if self.d % self.heads != 0:
            raise ValueError("d must be divisible by heads")
        if not (0 <= self.eos_id < self.vocab):
            raise ValueError("eos_id must be a valid token id")

    @property
    def d_head(self) -> int:
        return self.d // self.heads

    def op_ids(self) -> list[str]:
        ids = [f"l{i}.{name}" for i in range(self.layers) for name in _LAYER_OPS]
        ids.append(HEAD_OP)
        return ids

    def op_dims(self, op_id: str) -> tuple[int, int]:
        """(input dim, output dim) of a weighted op."""
        if op_id == HEAD_OP:
            return self.d, self.vocab
        name = op_id.split(".", 1)[-1]
        if name == "wup":
            return self.d, self.d_ff
        if name == "wdown":
            return self.d_ff, self.d
        if name in _LAYER_OPS:
            return self.d, self.d
        raise KeyError(op_id)


@dataclass
class LayerWeights:
    wq: RingMatrix
    wk: RingMatrix
    wv: RingMatrix
    wo: RingMatrix
    wup: RingMatrix
    wdown: RingMatrix
    attn_gain: RingMatrix  # 1 x d
    mlp_gain: RingMatrix  # 1 x d


@dataclass
class ModelWeights:
    """Full parameter bundle. Only the provider_view leaves this object
    toward the provider; only the enclave_view reaches the enclave."""

    config: ModelConfig
    embedding: RingMatrix  # vocab x d
    layers: list[LayerWeights]
    final_gain: RingMatrix  # 1 x d
    head: RingMatrix  # d x vocab

    def op_matrix(self, op_id: str) -> RingMatrix:
        if op_id == HEAD_OP:
            return self.head
        layer, name = op_id.split(".", 1)
        return getattr(self.layers[int(layer[1:])], name)

    def provider_view(self) -> dict[str, RingMatrix]:
        """The weight matrices the provider applies to masked inputs."""
        return {op: self.op_matrix(op) for op in self.config.op_ids()}

    def enclave_view(self) -> "EnclaveParams":
        """Structural parameters: embedding table and norm gains."""
        return EnclaveParams(
            config=self.config,
            embedding=self.embedding,
            attn_gains=[dequantize(l.attn_gain)[0] for l in self.layers],
            mlp_gains=[dequantize(l.mlp_gain)[0] for l in self.layers],
            final_gain=dequantize(self.final_gain)[0],
        )


@dataclass
class EnclaveParams:
    config: ModelConfig
    embedding: RingMatrix
    attn_gains: list[np.ndarray]
    mlp_gains: list[np.ndarray]
    final_gain: np.ndarray


def init_weights(config: ModelConfig, seed: int) -> ModelWeights:
    """Seeded uniform init: projections in +-1/sqrt(d_in), embeddings in +-1."""
    rng = np.random.default_rng(seed)
    p = config.params

    def mat(rows: int, cols: int, bound: float) -> RingMatrix:
        return quantize(rng.uniform(-bound, bound, size=(rows, cols)), p)

    unit_gain = quantize(np.ones((1, config.d)), p)
    embedding = mat(config.vocab, config.d, 1.0)
    layers = []
    for _ in range(config.layers):
        b_d = 1.0 / np.sqrt(config.d)
        b_ff = 1.0 / np.sqrt(config.d_ff)
        layers.append(
            LayerWeights(
                wq=mat(config.d, config.d, b_d),
                wk=mat(config.d, config.d, b_d),
                wv=mat(config.d, config.d, b_d),
                wo=mat(config.d, config.d, b_d),
                wup=mat(config.d, config.d_ff, b_d),
                wdown=mat(config.d_ff, config.d, b_ff),
                attn_gain=unit_gain,
                mlp_gain=unit_gain,
            )
        )
    head = mat(config.d, config.vocab, 1.0 / np.sqrt(config.d))
    return ModelWeights(
        config=config, embedding=embedding, layers=layers, final_gain=unit_gain, head=head
    )


def save_weights(weights: ModelWeights, path) -> None:
    c = weights.config
    parts = [
        WEIGHTS_MAGIC,
        _WEIGHTS_HEADER.pack(
            c.vocab, c.d, c.layers, c.heads, c.d_ff, c.max_seq, c.eos_id, c.params.k, c.params.f
        ),
        encode_matrix(weights.embedding),
    ]
    for l in weights.layers:
        for m in (l.wq, l.wk, l.wv, l.wo, l.wup, l.wdown, l.attn_gain, l.mlp_gain):
            parts.append(encode_matrix(m))
    parts.append(encode_matrix(weights.final_gain))
    parts.append(encode_matrix(weights.head))
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_weights(path) -> ModelWeights:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != WEIGHTS_MAGIC:
        raise DecodeError("bad weights magic")
    vocab, d, layers, heads, d_ff, max_seq, eos, k, f = _WEIGHTS_HEADER.unpack_from(buf, 4)
    config = ModelConfig(
        vocab=vocab, d=d, layers=layers, heads=heads, d_ff=d_ff, max_seq=max_seq,
        eos_id=eos, params=QuantParams(k=k, f=f),
    )
    offset = 4 + _WEIGHTS_HEADER.size

    def next_matrix() -> RingMatrix:
        nonlocal offset
        m, offset = decode_matrix(buf, offset)
        return m

    embedding = next_matrix()
    layer_weights = []
    for _ in range(config.layers):
        layer_weights.append(LayerWeights(*(next_matrix() for _ in range(8))))
    final_gain = next_matrix()
    head = next_matrix()
    if offset != len(buf):
        raise LengthMismatch("trailing bytes after weights")
    return ModelWeights(
        config=config, embedding=embedding, layers=layer_weights,
        final_gain=final_gain, head=head,
    )


# --- structural (weight-free) ops -------------------------------------------


def embed(tokens, table: RingMatrix) -> RingMatrix:
    """Row lookup of quantized token embeddings."""
    ids = list(tokens)
    if not ids:
        raise EmptyInput("cannot embed an empty token sequence")
    for t in ids:
        if not (0 <= int(t) < table.rows):
            raise TokenOutOfRange(f"token {t} outside vocab of {table.rows}")
    return RingMatrix(table.data[np.asarray(ids, dtype=np.int64)], table.params)


def rms_norm(x: RingMatrix, gain: np.ndarray) -> RingMatrix:
    """Per-row x / sqrt(mean(x^2) + eps) * gain, re-quantized."""
    if x.rows == 0:
        raise EmptyInput("rms_norm needs at least one row")
    xd = dequantize(x)
    rms = np.sqrt(np.mean(xd * xd, axis=1, keepdims=True) + RMS_EPS)
    return quantize(xd / rms * np.asarray(gain)[None, :], x.params)


def silu(x: RingMatrix) -> RingMatrix:
    xd = dequantize(x)
    # numerically stable logistic; xd magnitudes are small post-projection
    pos = xd >= 0
    z = np.exp(np.where(pos, -xd, xd))
    sig = np.where(pos, 1.0 / (1.0 + z), z / (1.0 + z))
    return quantize(xd * sig, x.params)


class KVCache:
    """Per-layer append-only key/value rows, confined to the enclave."""

    def __init__(self, config: ModelConfig):
        self._k = [np.zeros((config.max_seq, config.d), dtype=np.uint64) for _ in range(config.layers)]
        self._v = [np.zeros((config.max_seq, config.d), dtype=np.uint64) for _ in range(config.layers)]
        self._len = [0] * config.layers
        self._params = config.params

    def append(self, layer: int, k_row: RingMatrix, v_row: RingMatrix) -> None:
        n = self._len[layer]
        if n + k_row.rows > self._k[layer].shape[0]:
            raise SessionExhausted("KV cache full")
        self._k[layer][n : n + k_row.rows] = k_row.data
        self._v[layer][n : n + v_row.rows] = v_row.data
        self._len[layer] = n + k_row.rows

    def length(self, layer: int) -> int:
        return self._len[layer]

    def view(self, layer: int) -> tuple[RingMatrix, RingMatrix]:
        n = self._len[layer]
        return (
            RingMatrix(self._k[layer][:n].copy(), self._params),
            RingMatrix(self._v[layer][:n].copy(), self._params),
        )


def attention_structural(
    q: RingMatrix, keys: RingMatrix, values: RingMatrix, heads: int, position: int
) -> RingMatrix:
    """Causal scaled dot-product attention for the row at `position`.

    Keys/values must already contain that position; scores and softmax
    run on dequantized reals, the context row is re-quantized.
    """
    if keys.rows != values.rows:
        raise ShapeMismatch("key/value cache lengths differ")
    if keys.rows != position + 1:
        raise CacheInconsistent(f"cache has {keys.rows} rows but position is {position}")
    d = q.cols
    d_head = d // heads
    qd = dequantize(q).reshape(heads, d_head)
    kd = dequantize(keys).reshape(-1, heads, d_head)
    vd = dequantize(values).reshape(-1, heads, d_head)
    out = np.empty((1, d))
    for h in range(heads):
        scores = kd[:, h, :] @ qd[h] / np.sqrt(d_head)
        scores -= scores.max()
        w = np.exp(scores)
        w /= w.sum()
        out[0, h * d_head : (h + 1) * d_head] = w @ vd[:, h, :]
    return quantize(out, q.params)


def argmax_token(logits: RingMatrix) -> int:
    """Greedy sample from a 1 x vocab logits row; ties go to the lowest id."""
    return int(np.argmax(logits.signed()[0]))


# --- the shared per-token pipeline -------------------------------------------


class DecoderEngine:
    """Serial per-token decoder; `weighted(op_id, x, step)` supplies every
    weight-matrix product at raw scale 2f and is the single point where
    the partitioned and reference pipelines differ."""

    def __init__(self, params: EnclaveParams, weighted):
        self.p = params
        self.cfg = params.config
        self.weighted = weighted
        self.cache = KVCache(self.cfg)
        self.pos = 0

    def _project(self, op_id: str, x: RingMatrix) -> RingMatrix:
        return rescale(self.weighted(op_id, x, self.pos))

    def decode_step(self, token: int) -> int:
        """Feed one token at the next position, return the greedy next token."""
        if self.pos >= self.cfg.max_seq:
            raise SessionExhausted(f"session already holds {self.cfg.max_seq} tokens")
        h = embed([token], self.p.embedding)
        for i in range(self.cfg.layers):
            xn = rms_norm(h, self.p.attn_gains[i])
            q = self._project(f"l{i}.wq", xn)
            k = self._project(f"l{i}.wk", xn)
            v = self._project(f"l{i}.wv", xn)
            self.cache.append(i, k, v)
            keys, values = self.cache.view(i)
            attn = attention_structural(q, keys, values, self.cfg.heads, self.pos)
            h = ring_add(h, self._project(f"l{i}.wo", attn))
            xn = rms_norm(h, self.p.mlp_gains[i])
            up = silu(self._project(f"l{i}.wup", xn))
            h = ring_add(h, self._project(f"l{i}.wdown", up))
        logits = self._project(HEAD_OP, rms_norm(h, self.p.final_gain))
        self.pos += 1
        return argmax_token(logits)

    def generate(self, prompt, max_new: int, on_token=None) -> list[int]:
        """Run the prompt, then decode until EOS or max_new tokens.

        Returns only the response (EOS included when it terminates
        generation).  Every produced token except the last is fed back,
        so the prompt must leave at least one free position.  `on_token`
        is invoked with each response token as soon as it exists.
        """
        prompt = [int(t) for t in prompt]
        if not prompt:
            raise EmptyInput("prompt must be nonempty")
        if max_new == 0:
            return []
        if len(prompt) >= self.cfg.max_seq:
            raise SessionExhausted(
                f"prompt of {len(prompt)} tokens leaves no room to decode (max_seq={self.cfg.max_seq})"
            )
        nxt = 0
        for t in prompt:
            nxt = self.decode_step(t)
        out = [nxt]
        if on_token is not None:
            on_token(nxt)
        while len(out) < max_new and out[-1] != self.cfg.eos_id:
            out.append(self.decode_step(out[-1]))
            if on_token is not None:
                on_token(out[-1])
        return out


class LocalWeightedOps:
    """Single-party baseline: the identical ring products, no masking."""

    def __init__(self, ops: dict[str, RingMatrix]):
        self.ops = ops

    def __call__(self, op_id: str, x: RingMatrix, step: int) -> RingMatrix:
        return ring_matmul(x, self.ops[op_id])


def reference_generate(weights: ModelWeights, prompt, max_new: int) -> list[int]:
    """Unpartitioned pipeline: same ring arithmetic, same sampler, one party."""
    engine = DecoderEngine(weights.enclave_view(), LocalWeightedOps(weights.provider_view()))
    return engine.generate(prompt, max_new)
