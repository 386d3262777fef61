from __future__ import annotations

import numpy as np
import pytest

from sparsempc.dealer import ContractError
from sparsempc.model import ModelConfig, embed_fixed, encode_model, make_weights
from sparsempc.reference import ReferenceDecoder, ReferenceTrace, causal_valid, reference_decode
from sparsempc.ring import FixedPointCodec

SMALL = ModelConfig(hidden=32, heads=4, head_dim=8, ffn=128, layers=2, vocab=16, max_len=24, ffn_rank=4,
                    silent_heads=1)


def test_config_contracts():
    with pytest.raises(ContractError):
        ModelConfig(hidden=100, heads=8, head_dim=32)
    with pytest.raises(ContractError):
        ModelConfig(activation="gelu")
    with pytest.raises(ContractError):
        ModelConfig(silent_heads=9)


def test_weights_are_seeded_and_structured():
    a, b = make_weights(SMALL), make_weights(SMALL)
    assert np.array_equal(a.layers[0].W1, b.layers[0].W1)
    lw = a.layers[0]
    assert np.linalg.matrix_rank(lw.W1) == SMALL.ffn_rank
    (j,) = a.silent
    assert not lw.Wv[:, j * 8 : (j + 1) * 8].any()


def test_embed_bounds():
    w = make_weights(SMALL)
    with pytest.raises(ContractError):
        embed_fixed(w, [1], [SMALL.max_len], FixedPointCodec())


def test_causal_valid():
    assert causal_valid([1], 3).tolist() == [[True, True, False]]


def test_reference_decode_shapes_and_sparsity():
    codec = FixedPointCodec()
    enc = encode_model(make_weights(SMALL), codec)
    tr = reference_decode(enc, [1, 2, 3, 4], 3)
    assert len(tr.logits) == 4 and len(tr.tokens) == 3
    pre = np.concatenate([p[0] for p in tr.ffn_pre])
    density = (codec.ring.to_signed(pre) > 0).mean()
    assert 0.02 < density < 0.3
    (j,) = enc.weights.silent
    heads = tr.head_out[0][0]
    assert not heads[:, j].any()


def test_incremental_decode_matches_full_prefill():
    codec = FixedPointCodec()
    enc = encode_model(make_weights(SMALL), codec)
    toks = [3, 1, 4, 1, 5]
    full = ReferenceDecoder(enc).step(toks, range(5))
    dec = ReferenceDecoder(enc)
    dec.step(toks[:3], range(3))
    dec.step([toks[3]], [3])
    inc = dec.step([toks[4]], [4])
    assert np.array_equal(full, inc)
