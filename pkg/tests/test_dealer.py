from __future__ import annotations

import numpy as np
import pytest

from sparsempc.dealer import (
    ContractError,
    Dealer,
    DealerDesyncError,
    DealerExhaustedError,
    FreshnessError,
    TripleReuseError,
    apply_perm,
    check_freshness,
    compose,
    invert_perm,
    load_triples,
    reconstruct,
    save_triples,
    share,
)
from sparsempc.ring import RING64


def test_share_reconstruct():
    M = np.arange(6, dtype=np.uint64).reshape(2, 3)
    s1, s2 = share(M, 1)
    assert (reconstruct(s1, s2) == M).all()
    assert not (s1.values == M).all()


def test_beaver_triple_is_consistent():
    (t,) = Dealer(0).deal_beaver((2, 3), (3, 4))
    a, b = t.take(1), t.take(2)
    A, B, C = RING64.add(a.A, b.A), RING64.add(a.B, b.B), RING64.add(a.C, b.C)
    assert (RING64.matmul(A, B) == C).all()


def test_triple_half_cannot_be_taken_twice():
    (t,) = Dealer(0).deal_beaver((1, 1), (1, 1))
    t.take(1)
    with pytest.raises(TripleReuseError):
        t.take(1)


def test_triple_shape_contract():
    with pytest.raises(ContractError):
        Dealer(0).deal_beaver((2, 3), (2, 3))


def test_pool_exhaustion():
    d = Dealer(0)
    d.stock_beaver((1, 2), (2, 1), 1)
    d.take_pooled(1, (1, 2), (2, 1))
    with pytest.raises(DealerExhaustedError):
        d.take_pooled(1, (1, 2), (2, 1))


def test_truncation_pair_relation():
    (p,) = Dealer(0).deal_truncation(1, 16, (5,))
    a, b = p.take(1), p.take(2)
    r = RING64.add(a.r, b.r)
    assert (RING64.add(a.r_low, b.r_low) == RING64.shift_right(r, 16)).all()


def test_shuffle_split_composes_to_pi():
    d = Dealer(0)
    c1, c2 = d.deal_shuffle(7, name="x")
    pi = d.hidden_permutation("x")
    x = np.arange(7)
    assert (apply_perm(apply_perm(x, c2.tau), c1.rho) == apply_perm(x, pi)).all()
    assert (apply_perm(apply_perm(x, c1.tau), c2.rho) == apply_perm(x, pi)).all()


def test_named_shuffle_is_reused_and_length_checked():
    d = Dealer(0)
    d.deal_shuffle(4, name="y")
    pi = d.hidden_permutation("y")
    d.deal_shuffle(4, name="y")
    assert (d.hidden_permutation("y") == pi).all()
    with pytest.raises(ContractError):
        d.deal_shuffle(5, name="y")


def test_forced_pi_must_be_permutation():
    with pytest.raises(ContractError):
        Dealer(0).deal_shuffle(3, pi=[0, 0, 1])


def test_perm_helpers():
    p = np.array([2, 0, 1])
    assert (compose(p, invert_perm(p)) == np.arange(3)).all()
    x = np.array([10, 20, 30])
    assert apply_perm(x, p).tolist() == [30, 10, 20]


def test_online_requests_pair_by_sequence():
    d = Dealer(5)
    h1 = d.request(1, "beaver", (2, 2), (2, 2), label="a")
    h2 = d.request(2, "beaver", (2, 2), (2, 2), label="a")
    assert h1.triple_id == h2.triple_id
    A = RING64.add(h1.A, h2.A)
    B = RING64.add(h1.B, h2.B)
    assert (RING64.matmul(A, B) == RING64.add(h1.C, h2.C)).all()


def test_online_request_mismatch():
    d = Dealer(0)
    d.request(1, "beaver", (2, 2), (2, 2))
    with pytest.raises(DealerDesyncError):
        d.request(2, "beaver", (2, 3), (3, 2))


def test_online_budget():
    d = Dealer(0, online_budget=1)
    d.request(1, "trunc", (1,), 16)
    with pytest.raises(DealerExhaustedError):
        d.request(1, "trunc", (1,), 16)


def test_same_seed_same_material():
    a = Dealer(3).request(1, "beaver", (2, 2), (2, 2))
    b = Dealer(3).request(1, "beaver", (2, 2), (2, 2))
    assert (a.A == b.A).all()


def test_freshness_check():
    check_freshness([("m0", 1, "x"), ("m0", 2, "x"), ("corr:s", 1, "a"), ("corr:s", 1, "b")])
    with pytest.raises(FreshnessError):
        check_freshness([("m0", 1, "x"), ("m0", 1, "y")])


def test_triple_cache_roundtrip(tmp_path):
    d = Dealer(0)
    triples = d.deal_beaver((2, 3), (3, 1), 2)
    path = tmp_path / "t.npz"
    save_triples(path, triples, "abc", 0)
    back = load_triples(path, "abc", 0)
    assert len(back) == 2 and (back[1].A[0] == triples[1].A[0]).all()
    assert load_triples(path, "other", 0) is None
    assert load_triples(tmp_path / "missing.npz", "abc", 0) is None
