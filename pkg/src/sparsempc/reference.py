"""Plaintext fixed-point forward pass mirroring the two-party pipeline step by step."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import EncodedModel, embed_fixed, layernorm_fixed, linear_fixed, relu_fixed
from .protocols import softmax_plain
from .ring import FixedPointCodec


def attention_fixed(Q, K, V, valid, codec: FixedPointCodec) -> np.ndarray:
    """One head: ``trunc(softmax(trunc(Q K^T)) V)`` with a public validity mask."""
    ring = codec.ring
    S = codec.truncate(ring.matmul(Q, np.ascontiguousarray(K.T)))
    P = codec.encode(softmax_plain(codec.decode(S), valid))
    return codec.truncate(ring.matmul(P, V))


def causal_valid(q_pos, k_len: int) -> np.ndarray:
    q = np.asarray(q_pos, dtype=np.int64)[:, None]
    return np.arange(k_len)[None, :] <= q


def head_outputs_fixed(xn_all: np.ndarray, q_pos, layer, heads: int, head_dim: int, codec: FixedPointCodec) -> np.ndarray:
    """Attention outputs ``(len(q_pos), H, d)`` given every token's layer input up to ``max(q_pos)``."""
    h = heads * head_dim
    q_pos = np.asarray(q_pos, dtype=np.int64)
    T = int(q_pos.max()) + 1
    qkv = linear_fixed(xn_all[:T], layer.Wqkv, layer.bqkv, codec)
    Q, K, V = qkv[q_pos, :h], qkv[:, h : 2 * h], qkv[:, 2 * h :]
    valid = causal_valid(q_pos, T)
    out = np.zeros((q_pos.size, heads, head_dim), dtype=np.uint64)
    for j in range(heads):
        sl = slice(j * head_dim, (j + 1) * head_dim)
        out[:, j] = attention_fixed(Q[:, sl], K[:, sl], V[:, sl], valid, codec)
    return out


@dataclass
class ReferenceTrace:
    logits: list = field(default_factory=list)  # decoded float logits per step (last token)
    tokens: list = field(default_factory=list)  # generated tokens
    ffn_pre: list = field(default_factory=list)  # per step, per layer: FC1 pre-activation (ring)
    head_out: list = field(default_factory=list)  # per step, per layer: head outputs (ring)


class ReferenceDecoder:
    """Greedy fixed-point decoding without any sharing."""

    def __init__(self, model: EncodedModel):
        self.model = model
        cfg = model.weights.config
        self.cfg = cfg
        self.codec = model.codec
        self.inputs = [np.zeros((cfg.max_len, cfg.hidden), dtype=np.uint64) for _ in range(cfg.layers)]

    def step(self, tokens, positions, trace: ReferenceTrace | None = None) -> np.ndarray:
        codec, cfg, ring = self.codec, self.cfg, self.codec.ring
        positions = np.asarray(positions, dtype=np.int64)
        x = embed_fixed(self.model.weights, tokens, positions, codec)
        pre_l, head_l = [], []
        for li, L in enumerate(self.model.layers):
            xn = layernorm_fixed(x, L.ln1_g, L.ln1_b, codec)
            self.inputs[li][positions] = xn
            heads = head_outputs_fixed(self.inputs[li], positions, L, cfg.heads, cfg.head_dim, codec)
            head_l.append(heads)
            att = linear_fixed(heads.reshape(len(positions), cfg.hidden), L.Wo, L.bo, codec)
            x = ring.add(x, att)
            xn2 = layernorm_fixed(x, L.ln2_g, L.ln2_b, codec)
            pre = linear_fixed(xn2, L.W1, L.b1, codec)
            pre_l.append(pre)
            y = linear_fixed(relu_fixed(pre, codec), L.W2, L.b2, codec)
            x = ring.add(x, y)
        w = self.model.weights
        xf = layernorm_fixed(x[-1:], w.lnf_g, w.lnf_b, codec)
        logits = linear_fixed(xf, self.model.W_lm, None, codec)[0]
        if trace is not None:
            trace.ffn_pre.append(pre_l)
            trace.head_out.append(head_l)
        return logits


def reference_decode(model: EncodedModel, prompt, gen_len: int) -> ReferenceTrace:
    """Prefill ``prompt`` then greedily generate ``gen_len`` tokens; logits has ``gen_len + 1`` rows."""
    dec = ReferenceDecoder(model)
    trace = ReferenceTrace()
    prompt = list(prompt)
    logits = dec.step(prompt, range(len(prompt)), trace)
    pos = len(prompt)
    for step in range(gen_len + 1):
        vals = model.codec.decode(logits)
        trace.logits.append(vals)
        if step == gen_len:
            break
        tok = int(np.argmax(vals))
        trace.tokens.append(tok)
        logits = dec.step([tok], [pos], trace)
        pos += 1
    return trace
