"""Toy decoder-only transformer: configuration, seeded weights, fixed-point helpers.

The same helpers are used by the plaintext fixed-point reference and by the
dealer-assisted functionalities inside the two-party engine, which is what
makes dense and sparse runs comparable bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from statistics import NormalDist

import numpy as np

from .dealer import ContractError
from .ring import FixedPointCodec

LN_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    hidden: int = 256
    heads: int = 8
    head_dim: int = 32
    ffn: int = 1024
    layers: int = 2
    vocab: int = 64
    max_len: int = 128
    activation: str = "relu"
    weight_seed: int = 0
    ffn_rank: int = 16  # rank of the toy FC1 (so a low-rank predictor can track it)
    ffn_target_sparsity: float = 0.9
    silent_heads: int = 2  # heads with zero value weights, hence exactly zero output

    def __post_init__(self):
        if self.hidden != self.heads * self.head_dim:
            raise ContractError(f"hidden {self.hidden} != heads {self.heads} x head_dim {self.head_dim}")
        if self.activation != "relu":
            raise ContractError("only relu activation is supported")
        if min(self.hidden, self.heads, self.ffn, self.layers, self.vocab, self.max_len) < 1:
            raise ContractError("model dimensions must be positive")
        if not 0 <= self.silent_heads <= self.heads:
            raise ContractError("silent_heads out of range")


@dataclass
class LayerWeights:
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    Wq: np.ndarray  # h x h, 1/sqrt(d) folded in; column block j is head j
    Wk: np.ndarray
    Wv: np.ndarray
    bq: np.ndarray
    bk: np.ndarray
    bv: np.ndarray
    Wo: np.ndarray  # h x h; row block j is head j
    bo: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    W1: np.ndarray  # h x f
    b1: np.ndarray
    W2: np.ndarray  # f x h
    b2: np.ndarray
    W1_left: np.ndarray  # h x rank factor of W1
    W1_right: np.ndarray  # rank x f


@dataclass
class ModelWeights:
    config: ModelConfig
    tok_emb: np.ndarray
    pos_emb: np.ndarray
    layers: list
    lnf_g: np.ndarray
    lnf_b: np.ndarray
    W_lm: np.ndarray  # h x vocab
    silent: tuple = field(default_factory=tuple)


def make_weights(cfg: ModelConfig) -> ModelWeights:
    """Seeded toy weights.

    FC1 is low rank with a per-neuron negative bias that leaves roughly
    ``ffn_target_sparsity`` of the ReLU outputs at zero; ``silent_heads``
    heads have zero value projections so their outputs are exactly zero.
    """
    rng = np.random.default_rng([cfg.weight_seed, 0x70E])
    h, f, d, H = cfg.hidden, cfg.ffn, cfg.head_dim, cfg.heads
    z = NormalDist().inv_cdf(cfg.ffn_target_sparsity)
    silent = tuple(sorted(rng.choice(H, size=cfg.silent_heads, replace=False).tolist()))
    layers = []
    for _ in range(cfg.layers):
        Wq = rng.normal(0, 1 / math.sqrt(h), (h, h)) / math.sqrt(d)
        Wk = rng.normal(0, 1 / math.sqrt(h), (h, h))
        Wv = rng.normal(0, 1 / math.sqrt(h), (h, h))
        bv = rng.normal(0, 0.02, h)
        for j in silent:
            Wv[:, j * d : (j + 1) * d] = 0.0
            bv[j * d : (j + 1) * d] = 0.0
        A = rng.normal(0, 1 / math.sqrt(h), (h, cfg.ffn_rank))
        B = rng.normal(0, 1 / math.sqrt(cfg.ffn_rank), (cfg.ffn_rank, f))
        W1 = A @ B
        col_std = np.sqrt(np.sum(W1 ** 2, axis=0))
        layers.append(LayerWeights(
            ln1_g=np.ones(h), ln1_b=np.zeros(h),
            Wq=Wq, Wk=Wk, Wv=Wv,
            bq=rng.normal(0, 0.02, h), bk=rng.normal(0, 0.02, h), bv=bv,
            Wo=rng.normal(0, 1 / math.sqrt(h), (h, h)), bo=rng.normal(0, 0.02, h),
            ln2_g=np.ones(h), ln2_b=np.zeros(h),
            W1=W1, b1=-z * col_std,
            W2=rng.normal(0, 1 / math.sqrt(f * (1 - cfg.ffn_target_sparsity) + 1), (f, h)),
            b2=rng.normal(0, 0.02, h),
            W1_left=A, W1_right=B,
        ))
    return ModelWeights(
        cfg,
        tok_emb=rng.normal(0, 1.0, (cfg.vocab, h)),
        pos_emb=rng.normal(0, 0.1, (cfg.max_len, h)),
        layers=layers,
        lnf_g=np.ones(h), lnf_b=np.zeros(h),
        W_lm=rng.normal(0, 1 / math.sqrt(h), (h, cfg.vocab)),
        silent=silent,
    )


# --- fixed-point helpers shared by reference and engine --------------------------------


def layernorm_fixed(x_ring: np.ndarray, g: np.ndarray, b: np.ndarray, codec: FixedPointCodec) -> np.ndarray:
    x = codec.decode(x_ring)
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return codec.encode((x - mu) / np.sqrt(var + LN_EPS) * g + b)


def embed_fixed(weights: ModelWeights, tokens, positions, codec: FixedPointCodec) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    positions = np.asarray(positions, dtype=np.int64)
    if positions.size and positions.max() >= weights.config.max_len:
        raise ContractError(f"position {positions.max()} beyond max_len {weights.config.max_len}")
    return codec.encode(weights.tok_emb[tokens] + weights.pos_emb[positions])


def linear_fixed(x: np.ndarray, W: np.ndarray, b, codec: FixedPointCodec) -> np.ndarray:
    """``trunc(x @ W) + b`` on ring encodings."""
    ring = codec.ring
    y = codec.truncate(ring.matmul(x, W))
    return y if b is None else ring.add(y, b)


def relu_fixed(x: np.ndarray, codec: FixedPointCodec) -> np.ndarray:
    return np.where(codec.ring.to_signed(x) > 0, x, np.uint64(0)).astype(np.uint64)


@dataclass
class EncodedLayer:
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    Wqkv: np.ndarray  # h x 3h: [Wq | Wk | Wv]
    bqkv: np.ndarray
    Wo: np.ndarray
    bo: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray


@dataclass
class EncodedModel:
    weights: ModelWeights
    codec: FixedPointCodec
    layers: list
    W_lm: np.ndarray


def encode_model(weights: ModelWeights, codec: FixedPointCodec) -> EncodedModel:
    enc = codec.encode
    layers = []
    for lw in weights.layers:
        layers.append(EncodedLayer(
            lw.ln1_g, lw.ln1_b,
            enc(np.concatenate([lw.Wq, lw.Wk, lw.Wv], axis=1)),
            enc(np.concatenate([lw.bq, lw.bk, lw.bv])),
            enc(lw.Wo), enc(lw.bo),
            lw.ln2_g, lw.ln2_b,
            enc(lw.W1), enc(lw.b1), enc(lw.W2), enc(lw.b2),
        ))
    return EncodedModel(weights, codec, layers, enc(weights.W_lm))
