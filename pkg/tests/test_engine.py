from __future__ import annotations

import math

import numpy as np
import pytest

from sparsempc.dealer import ContractError
from sparsempc.engine import Engine, RunMode
from sparsempc.kvcache import PrefetchPolicy, markov_trace, simulate_trace
from sparsempc.model import ModelConfig, encode_model, make_weights
from sparsempc.reference import reference_decode
from sparsempc.ring import FixedPointCodec

SMALL = ModelConfig(hidden=32, heads=4, head_dim=8, ffn=128, layers=2, vocab=16, max_len=32, ffn_rank=4,
                    silent_heads=1)
PROMPT = [3, 1, 4, 1, 5, 9, 2, 6]


@pytest.fixture(scope="module")
def weights():
    return make_weights(SMALL)


def _run(weights, gen=3, head_trace=None, **kw):
    return Engine(SMALL, RunMode(**kw), weights=weights).decode_loop(PROMPT, gen, head_trace=head_trace)


def _same(a, b):
    return len(a.logits) == len(b.logits) and all(np.array_equal(x, y) for x, y in zip(a.logits, b.logits))


def test_dense_matches_plaintext_reference(weights):
    res = _run(weights, backend="dense")
    ref = reference_decode(encode_model(weights, FixedPointCodec()), PROMPT, 3)
    assert all(np.array_equal(a, b) for a, b in zip(res.logits, ref.logits))
    assert res.tokens == ref.tokens


def test_oracle_sparse_is_bit_identical_to_dense(weights):
    dense = _run(weights, backend="dense")
    sparse = _run(weights, backend="sparse", source="oracle")
    assert _same(dense, sparse)
    assert sparse.ledger.total() < dense.ledger.total()
    assert sparse.ledger.sent(phase="FC1") < dense.ledger.sent(phase="FC1")


def test_spgemm_backend_computes_the_same(weights):
    a = _run(weights, backend="sparse", source="synthetic", ffn_sparsity=0.8)
    b = _run(weights, backend="spgemm", source="synthetic", ffn_sparsity=0.8)
    assert _same(a, b)


def test_cache_strategies_agree_on_logits(weights):
    trace = markov_trace(len(PROMPT) + 4, SMALL.heads, 0.5, np.random.default_rng(1))
    runs = [_run(weights, gen=4, head_trace=trace, source="synthetic", cache=c, prefetch_w=16)
            for c in ("PR", "MR", "MR+prefetch")]
    assert _same(runs[0], runs[1]) and _same(runs[1], runs[2])


def test_engine_ledger_matches_trace_simulator(weights):
    trace = markov_trace(len(PROMPT) + 5, SMALL.heads, 0.5, np.random.default_rng(2))
    pol = PrefetchPolicy(w=SMALL.hidden * 2 * SMALL.head_dim, x=SMALL.hidden)
    for cache in ("PR", "MR", "MR+prefetch"):
        res = _run(weights, gen=5, head_trace=trace, source="synthetic", cache=cache)
        sim = simulate_trace(trace, len(PROMPT), cache, SMALL.heads, SMALL.hidden, SMALL.head_dim, pol)
        led = res.ledger
        assert led.sent(1, "QKV") == SMALL.layers * sim.qkv
        assert led.sent(1, "CacheRefill") == SMALL.layers * sim.refill


def test_dp_does_not_change_outputs(weights):
    off = _run(weights, source="oracle")
    on = _run(weights, source="oracle", dp_epsilon=0.5)
    assert _same(off, on)
    assert on.ledger.sent(phase="DP") > 0 and on.ledger.sent(phase="FC1") >= off.ledger.sent(phase="FC1")


def test_predictor_mode_reports_quality(weights):
    res = _run(weights, source="predictor")
    p, r = res.precision_recall("ffn")
    assert 0.5 < p <= 1.0 and 0.5 < r <= 1.0
    assert not math.isnan(res.precision_recall("head")[0])
    assert res.ledger.sent(phase="Predictor") > 0


def test_setup_phase_is_offline_and_material_fresh(weights):
    res = _run(weights)
    assert res.ledger.sent(phase="Setup") > 0
    assert res.ledger.total() == res.ledger.total(online_only=False) - res.ledger.sent(phase="Setup")
    assert res.ledger.rounds["Setup"] > 0


def test_trace_rows_per_step(weights):
    res = _run(weights, gen=2)
    assert [r["step"] for r in res.trace_rows] == [0, 1, 2]
    assert sum(r["elements"] for r in res.trace_rows) == res.ledger.total(online_only=False) - res.ledger.sent(phase="Setup")


def test_local_truncation_stays_close(weights):
    exact = _run(weights, backend="dense")
    local = _run(weights, backend="dense", trunc="local")
    assert local.ledger.total() < exact.ledger.total()
    assert max(np.abs(a - b).max() for a, b in zip(exact.logits, local.logits)) < 0.05


def test_same_seed_same_ledger(weights):
    a, b = _run(weights, source="synthetic"), _run(weights, source="synthetic")
    assert a.ledger.snapshot() == b.ledger.snapshot()


def test_mode_and_length_contracts(weights):
    with pytest.raises(ContractError):
        RunMode(backend="fast")
    with pytest.raises(ContractError):
        RunMode(dp_epsilon=0.0)
    with pytest.raises(ContractError):
        Engine(SMALL, RunMode(), weights=weights).decode_loop(list(range(30)), 5)
    with pytest.raises(ContractError):
        Engine(SMALL, RunMode(), weights=weights).decode_loop([], 1)
