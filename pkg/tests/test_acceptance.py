"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""

from __future__ import annotations

import time
from collections import Counter
from itertools import combinations

import numpy as np

from conftest import TwoParty
from sparsempc import cli
from sparsempc.dealer import apply_perm
from sparsempc.engine import Engine, RunMode
from sparsempc.kvcache import (
    PrefetchPolicy,
    apply_plan,
    markov_trace,
    plan_step,
    prefetch_select,
    simulate_trace,
)
from sparsempc.model import ModelConfig, make_weights
from sparsempc.predictor import PredictorWeights, predict_mpc, predict_plain, share_predictor
from sparsempc.protocols import pi_matmul, pi_matmul_fixed, pi_shuffle, pi_unshuffle
from sparsempc.ring import RING64, FixedPointCodec
from sparsempc.scenario import bundled_scenarios
from sparsempc.sparse import (
    apply_dp_perturbation,
    classical_index_cost,
    column_somm_cost,
    gemm_cost,
    pi_simm,
    pi_somm,
    shuffle_index_pipeline,
    simm_cost,
    spgemm_input_cost,
    spgemm_output_cost,
)

TOY = ModelConfig()  # h=256, H=8, d=32, f_w=1024, L=2
TOY_PROMPT = [int(t) for t in np.random.default_rng(7).integers(0, TOY.vocab, 32)]
TOY_GEN = 8


def _same_logits(a, b) -> bool:
    return len(a.logits) == len(b.logits) and all(np.array_equal(x, y) for x, y in zip(a.logits, b.logits))


# --- 1: protocol correctness -----------------------------------------------------------


def _dims(rng, lo=1, hi=6):
    return [int(v) for v in rng.integers(lo, hi + 1, 3)]


def _case_matmul(rng, i):
    a, n, b = _dims(rng)
    X, Y = RING64.random(rng, (a, n)), RING64.random(rng, (n, b))
    Z = TwoParty(seed=i).run_shared(lambda s, x, y: pi_matmul(x, y, s), X, Y, rng=rng)
    return (Z == RING64.matmul(X, Y)).all(), 0.0


def _case_fixed_chain(rng, i, codec):
    """1 to 3 composed fixed-point products; column sums of later factors bounded by 1."""
    depth = int(rng.integers(1, 4))
    a, n, _ = _dims(rng)
    mats = [rng.uniform(-1, 1, (a, n))]
    for _ in range(depth):
        b = int(rng.integers(1, 7))
        B = rng.uniform(-1, 1, (mats[-1].shape[1], b))
        mats.append(B / np.maximum(1.0, np.abs(B).sum(axis=0)))
    enc = [codec.encode(M) for M in mats]

    def prog(s, *sh):
        Z = sh[0]
        for B in sh[1:]:
            Z = pi_matmul_fixed(Z, B, s)
        return Z

    Z = TwoParty(seed=i).run_shared(prog, *enc, rng=rng)
    want = codec.decode(enc[0])
    for E in enc[1:]:
        want = want @ codec.decode(E)
    err = float(np.abs(codec.decode(Z) - want).max())
    return err <= depth * 2.0 ** (-codec.f + 2), err / depth


def _case_shuffle(rng, i):
    shape = tuple(int(v) for v in rng.integers(1, 7, int(rng.integers(1, 3))))
    axis = int(rng.integers(0, len(shape)))
    x = RING64.random(rng, shape)
    tp = TwoParty(seed=i)

    def prog(s, a):
        z = pi_shuffle(a, "c1", s, axis=axis)
        return z, pi_unshuffle(z, "c1", s, axis=axis)

    z, back = tp.run_shared(prog, x, rng=rng)
    pi = tp.dealer.hidden_permutation("c1")
    return (back == x).all() and (z == apply_perm(x, pi, axis=axis)).all(), 0.0


def _case_somm(rng, i):
    a, n, b = _dims(rng)
    X, Y = RING64.random(rng, (a, n)), RING64.random(rng, (n, b))
    M = (rng.random((a, b)) < rng.random()).astype(np.uint8)
    Z = TwoParty(seed=i).run_shared(lambda s, x, y: pi_somm(x, y, M, s), X, Y, rng=rng)
    full = RING64.matmul(X, Y)
    return (Z[M == 1] == full[M == 1]).all() and (Z[M == 0] == 0).all(), 0.0


def _case_simm(rng, i):
    a, n, b = _dims(rng)
    M = (rng.random((a, n)) < rng.random()).astype(np.uint8)
    X, Y = RING64.random(rng, (a, n)) * M.astype(np.uint64), RING64.random(rng, (n, b))
    Z = TwoParty(seed=i).run_shared(lambda s, x, y: pi_simm(x, y, M, s), X, Y, rng=rng)
    return (Z == RING64.matmul(X, Y)).all(), 0.0


def _case_predictor(rng, i, codec):
    h, o = (int(v) for v in rng.integers(3, 9, 2))
    r = int(rng.integers(1, min(h, o)))
    w = PredictorWeights(rng.normal(size=(r, h)), rng.normal(size=r) * 0.2, rng.normal(size=(o, r)),
                         rng.normal(size=o) * 0.2, float(rng.normal() * 0.5))
    X = rng.normal(size=(int(rng.integers(1, 4)), h))
    sp1, sp2 = share_predictor(w, codec, rng)
    Xe = codec.encode(X)
    X1 = RING64.random(rng, Xe.shape)
    tp = TwoParty(seed=i)
    r1, r2 = tp.run(lambda s, p, x: predict_mpc(x, sp1 if p == 1 else sp2, s), (X1,), (RING64.sub(Xe, X1),))
    return (RING64.add(r1, r2) == predict_plain(w, X, codec).mask).all(), 0.0


def test_criterion_1_protocol_correctness(criterion):
    codec = FixedPointCodec()
    cases = {
        "matmul": _case_matmul,
        "matmul_fixed": lambda rng, i: _case_fixed_chain(rng, i, codec),
        "shuffle_roundtrip": _case_shuffle,
        "somm": _case_somm,
        "simm": _case_simm,
        "predictor": lambda rng, i: _case_predictor(rng, i, codec),
    }
    t0 = time.perf_counter()
    fails, worst = Counter(), 0.0
    for k, (name, case) in enumerate(cases.items()):
        rng = np.random.default_rng([1, k])
        for i in range(1000):
            ok, err = case(rng, i)
            fails[name] += 0 if ok else 1
            worst = max(worst, err)
    elapsed = time.perf_counter() - t0
    ok = sum(fails.values()) == 0 and elapsed < 120
    detail = ", ".join(f"{n} {1000 - fails[n]}/1000" for n in cases)
    criterion(1, ok, f"{detail}; worst fixed-point error per product {worst:.2e} "
                     f"(bound {2.0 ** (-codec.f + 2):.2e}); {elapsed:.1f}s")
    assert ok


# --- 2: shuffle cost -------------------------------------------------------------------


def test_criterion_2_shuffle_cost(criterion):
    n, m, C = 16384, 1638, 64
    rng = np.random.default_rng(2)
    x = RING64.random(rng, n)
    tp = TwoParty(seed=2)
    z = tp.run_shared(lambda s, a: pi_shuffle(a, "c2", s), x, rng=rng)
    shuffle_ok = (
        tp.ledger.total_rounds() == 1
        and tp.ledger.sent(1) == n
        and tp.ledger.sent(2) == n
        and (z == apply_perm(x, tp.dealer.hidden_permutation("c2"))).all()
    )

    bits = np.zeros(n, dtype=np.uint64)
    bits[rng.choice(n, m, replace=False)] = 1
    s1, x1 = RING64.random(rng, n), RING64.random(rng, n)
    tp2 = TwoParty(seed=3)
    (sel1, mask), (sel2, _) = tp2.run(lambda ses, p, u, v: shuffle_index_pipeline(u, v, "c2ix", ses),
                                      (s1, x1), (RING64.sub(bits, s1), RING64.sub(x, x1)))
    pi = tp2.dealer.hidden_permutation("c2ix")
    selected_ok = (RING64.add(sel1, sel2) == apply_perm(x, pi)[apply_perm(bits, pi) == 1]).all()
    reveal = tp2.ledger.sent(phase="Reveal")
    shuffles = tp2.ledger.total() - reveal
    shuffle_rounds = tp2.ledger.total_rounds() - tp2.ledger.rounds.get("Reveal", 0)
    classical = classical_index_cost(n, m, C)
    ratio = classical / shuffles
    ok = shuffle_ok and selected_ok and shuffles == 4 * n and shuffle_rounds == 2 and mask.nnz == m and ratio > 1e4
    criterion(2, ok, f"pi_shuffle: {tp.ledger.total_rounds()} round, {tp.ledger.sent(1)} elements per party "
                     f"(n={n}); indexing shuffles {shuffles} = 4n, mask opening {reveal} = 2n; "
                     f"classical {classical:,} -> ratio {ratio:,.0f} (with opening {classical / (shuffles + reveal):,.0f})")
    assert ok


# --- 3: SOMM optimality ----------------------------------------------------------------


def _popcount(a: np.ndarray, bits: int) -> np.ndarray:
    return sum((a >> i) & 1 for i in range(bits))


def _brute_force(masks: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Minimum over all edge partitions of (sum |rows|+|cols|, then sum |rows|*|cols|).

    ``masks`` is ``B x r x c`` with the same number of ones in every mask;
    a subset DP over edge sets, vectorized across the batch.
    """
    B, r, c = masks.shape
    k = int(masks[0].sum())
    if k == 0:
        return np.zeros(B, dtype=np.int64), np.zeros(B, dtype=np.int64)
    flat = masks.reshape(B, -1)
    pos = np.stack([np.flatnonzero(f) for f in flat])  # B x k, row-major edge order
    rowbit = np.left_shift(1, pos // c).astype(np.int64)
    colbit = np.left_shift(1, pos % c).astype(np.int64)
    full = 1 << k
    R = np.zeros((B, full), dtype=np.int64)
    Cb = np.zeros((B, full), dtype=np.int64)
    for T in range(1, full):
        low = T & -T
        e = low.bit_length() - 1
        R[:, T] = R[:, T ^ low] | rowbit[:, e]
        Cb[:, T] = Cb[:, T ^ low] | colbit[:, e]
    nr, nc = _popcount(R, r), _popcount(Cb, c)
    scale = 10_000  # dot counts stay far below this
    key = (nr + nc) * scale + nr * nc
    f = np.zeros((B, full), dtype=np.int64)
    for S in range(1, full):
        low = S & -S
        rest = S ^ low
        best = None
        sub = rest
        while True:
            T = sub | low
            cand = key[:, T] + f[:, S ^ T]
            best = cand if best is None else np.minimum(best, cand)
            if sub == 0:
                break
            sub = (sub - 1) & rest
        f[:, S] = best
    return f[:, full - 1] // scale, f[:, full - 1] % scale


def _somm_run(M: np.ndarray, n: int, seed: int, rng) -> tuple[int, int, bool]:
    X, Y = RING64.random(rng, (M.shape[0], n)), RING64.random(rng, (n, M.shape[1]))
    tp = TwoParty(seed=seed)
    Z = tp.run_shared(lambda s, x, y: pi_somm(x, y, M, s), X, Y, rng=rng)
    full = RING64.matmul(X, Y)
    correct = (Z[M == 1] == full[M == 1]).all() and (Z[M == 0] == 0).all()
    return tp.ledger.total(), tp.sessions[1].stats["dot_products"], correct


def test_criterion_3_somm_optimality(criterion):
    t0 = time.perf_counter()
    n = 2
    rng = np.random.default_rng(3)
    groups: dict = {}
    for k in range(9):
        for ones in combinations(range(16), k):
            M = np.zeros(16, dtype=np.uint8)
            M[list(ones)] = 1
            groups.setdefault(("4x4", k), []).append(M.reshape(4, 4))
    for _ in range(1000):
        # capped at 12 ones so the exhaustive partition search stays tractable
        k = int(rng.integers(0, 13))
        M = np.zeros(36, dtype=np.uint8)
        M[rng.choice(36, k, replace=False)] = 1
        groups.setdefault(("6x6", k), []).append(M.reshape(6, 6))
    counts, bad_comm, bad_dots, bad_vals, seed = Counter(), 0, 0, 0, 0
    for (shape, _k), masks in sorted(groups.items()):
        masks = np.stack(masks)
        comm, dots = _brute_force(masks)
        for M, cmin, dmin in zip(masks, comm, dots):
            led, dp, correct = _somm_run(M, n, seed, rng)
            seed += 1
            counts[shape] += 1
            bad_comm += led != 2 * n * cmin
            bad_dots += dp != dmin
            bad_vals += not correct
    elapsed = time.perf_counter() - t0
    ok = bad_comm == bad_dots == bad_vals == 0 and elapsed < 300 and counts["4x4"] == 39203 and counts["6x6"] == 1000
    criterion(3, ok, f"{counts['4x4']} exhaustive 4x4 + {counts['6x6']} random 6x6 masks: ledger mismatches "
                     f"{bad_comm}, dot-count mismatches {bad_dots}, value errors {bad_vals}; {elapsed:.1f}s")
    assert ok


# --- 4: SIMM properties ----------------------------------------------------------------


def test_criterion_4_simm_properties(criterion):
    rng = np.random.default_rng(4)
    bad = Counter()
    for i in range(1000):
        m, n, p = (int(v) for v in rng.integers(1, 9, 3))
        M = (rng.random((m, n)) < rng.random()).astype(np.uint8)
        X, Y = RING64.random(rng, (m, n)) * M.astype(np.uint64), RING64.random(rng, (n, p))
        tp = TwoParty(seed=i)
        Z = tp.run_shared(lambda s, x, y: pi_simm(x, y, M, s), X, Y, rng=rng)
        cols = np.flatnonzero(M.any(axis=0)).tolist()
        for party in (1, 2):
            rows = [j for tag, j in tp.sessions[party].events if tag == "simm_y_row"]
            bad["transcript"] += rows != cols
        bad["ledger"] += tp.ledger.total() != simm_cost(M, p)
        bad["scalar_mults"] += tp.sessions[1].stats["scalar_mults"] != int(M.sum()) * p
        bad["value"] += not (Z == RING64.matmul(X, Y)).all()
    ok = sum(bad.values()) == 0
    criterion(4, ok, "1000 instances: each needed Y row masked once, scalar mults = nnz*p; mismatches "
                     + ", ".join(f"{k} {bad[k]}" for k in ("transcript", "ledger", "scalar_mults", "value")))
    assert ok


# --- 5: FC1 counting -------------------------------------------------------------------


def test_criterion_5_fc1_counting(criterion):
    m, n, p = 512, 4096, 16384
    active = round(0.1 * p)
    ratio = gemm_cost(m, n, p) / column_somm_cost(m, n, active)
    dense_ratio = gemm_cost(m, n, p) / column_somm_cost(m, n, p)

    # ledger check of the counting formula on a scaled-down instance
    rng = np.random.default_rng(5)
    sm, sn, sp = 8, 16, 64
    M = np.zeros((sm, sp), dtype=np.uint8)
    M[:, rng.choice(sp, round(0.1 * sp), replace=False)] = 1
    led, _, correct = _somm_run(M, sn, 0, rng)
    ledger_ok = correct and led == column_somm_cost(sm, sn, int(M.any(axis=0).sum()))

    heights = [2 ** i for i in range(12)]
    monotone, above = True, True
    lows = []
    for sparsity in (0.9, 0.95, 0.99):
        k_out = round((1 - sparsity) * p)
        out_r = [spgemm_output_cost(h * k_out, n) / column_somm_cost(h, n, k_out) for h in heights]
        in_r = []
        for h in heights:
            X = np.zeros((h, p), dtype=np.uint8)
            X[:, :k_out] = 1
            in_r.append(spgemm_input_cost(h * k_out, n) / simm_cost(X, n))
        for seq in (out_r, in_r):
            monotone &= all(b > a for a, b in zip(seq, seq[1:]))
            big = [r for h, r in zip(heights, seq) if h >= 512]
            above &= min(big) > 100
            lows.append(min(big))
    ok = (
        abs(ratio - 7.86) < 0.005
        and abs(ratio / 8.1 - 1) <= 0.15
        and abs(dense_ratio - 1.0) <= 0.01
        and ledger_ok
        and monotone
        and above
    )
    criterion(5, ok, f"SOMM/GEMM at column sparsity 0.9 = {ratio:.3f} ({(ratio / 8.1 - 1) * 100:+.1f}% vs 8.1), "
                     f"at sparsity 0 = {dense_ratio:.3f}; SpGEMM/ours monotone in height: {monotone}, "
                     f"min at height>=512 = {min(lows):.0f}")
    assert ok


# --- 6: KV cache -----------------------------------------------------------------------


def _early_phase_steps(act, prompt_len, H, hidden, head_dim, policy):
    """Decode steps (token index) before any idle head's pending misses exceed ``w/x``."""
    T = act.shape[0]
    present = np.zeros((H, T), dtype=bool)
    apply_plan(present, plan_step(present, list(range(prompt_len)), act[:prompt_len], "MR"))
    early = []
    for t in range(prompt_len, T):
        idle = np.flatnonzero(~act[t])
        worst = max((int((~present[h, : t + 1]).sum()) for h in idle), default=0)
        if worst > policy.threshold:
            break
        early.append(t)
        plan = plan_step(present, [t], act[t : t + 1], "MR+prefetch", policy)
        apply_plan(present, plan)
    return early


def test_criterion_6_kv_cache(criterion):
    H, hidden, d = TOY.heads, TOY.hidden, TOY.head_dim
    results = []

    # (a) same activation trace, three strategies, one toy model
    weights = make_weights(TOY)
    # a jumpy trace and a small w so that refills and prefetches both occur within 40 tokens
    trace = markov_trace(len(TOY_PROMPT) + TOY_GEN, H, 0.5, np.random.default_rng(60), stickiness=0.5)
    runs = {c: Engine(TOY, RunMode(source="synthetic", cache=c, prefetch_w=1024), weights=weights)
            .decode_loop(TOY_PROMPT, TOY_GEN, head_trace=trace) for c in ("PR", "MR", "MR+prefetch")}
    refill = {c: r.ledger.sent(phase="CacheRefill") for c, r in runs.items()}
    a_ok = (
        _same_logits(runs["PR"], runs["MR"])
        and _same_logits(runs["MR"], runs["MR+prefetch"])
        and refill["PR"] > refill["MR"] > 0
        and refill["MR+prefetch"] != refill["MR"]
    )
    results.append(("a", a_ok, f"PR/MR/MR+prefetch logits identical over {TOY_GEN} tokens "
                                f"(refill elements {refill['PR']}/{refill['MR']}/{refill['MR+prefetch']})"))

    # (b, c) 2048-token trace, activation rate 0.5
    pol = PrefetchPolicy(w=hidden * 2 * d, x=hidden)
    act = markov_trace(2048, H, 0.5, np.random.default_rng(0))
    sim = {s: simulate_trace(act, 32, s, H, hidden, d, pol) for s in ("PR", "MR", "MR+prefetch")}
    tot = {s: r.total for s, r in sim.items()}
    b_ok = tot["MR+prefetch"] < tot["MR"] < tot["PR"]
    results.append(("b", b_ok, f"ledger PR {tot['PR']:,} > MR {tot['MR']:,} > MR+prefetch {tot['MR+prefetch']:,}"))
    refill_ratio = sim["PR"].refill / sim["MR"].refill
    c_ok = refill_ratio >= 2.5
    results.append(("c", c_ok, f"cache-refill PR/MR = {refill_ratio:.2f} (whole ledger {tot['PR'] / tot['MR']:.3f})"))

    # (d) threshold rule at x=4096, w=524288
    big = PrefetchPolicy(w=524288, x=4096)
    d_ok = True
    for L2 in range(0, 400):
        for L1 in (L2, L2 + 1, L2 + 50, 1000):
            d_ok &= (prefetch_select({0: L2}, L1, big) == [0]) == (L2 > 128)
    results.append(("d", d_ok, "with L2 <= L1, prefetch iff L2 > 128 for L2 in [0, 400)"))

    # (e) early phase: no idle head above w/x, so prefetch changes nothing
    early = _early_phase_steps(act, 32, H, hidden, d, pol)
    rows_mr = sim["MR"].rows[1 : 1 + len(early)]
    rows_pf = sim["MR+prefetch"].rows[1 : 1 + len(early)]
    e_ok = len(early) > 0 and [r["elements"] for r in rows_mr] == [r["elements"] for r in rows_pf]
    results.append(("e", e_ok, f"MR+prefetch = MR for the first {len(early)} decode steps (all L2 <= {pol.threshold:g})"))

    ok = all(r[1] for r in results)
    criterion(6, ok, "; ".join(f"({k}) {'ok' if v else 'FAILED'}: {t}" for k, v, t in results))
    assert ok


# --- 7: DP -----------------------------------------------------------------------------


def test_criterion_7_dp(criterion):
    rng = np.random.default_rng(7)
    trials = [(RING64.random(rng, 64), (rng.random(64) < rng.random()).astype(np.uint64),
               float(rng.choice([0.01, 0.1, 0.5, 1.0, 5.0]))) for _ in range(10_000)]
    tp = TwoParty(seed=7)

    def prog(s, p):
        out = []
        for r, bits, eps in trials:
            share = r if p == 1 else RING64.sub(bits, r)
            out.append(apply_dp_perturbation(share, eps, s))
        return out

    o1, o2 = tp.run(prog)
    flips_down = sum(int(((RING64.add(a, b) == 0) & (bits == 1)).sum()) for a, b, (_, bits, _) in zip(o1, o2, trials))
    binary = all(np.isin(RING64.add(a, b), (0, 1)).all() for a, b in zip(o1, o2))

    weights = make_weights(TOY)
    off = Engine(TOY, RunMode(source="oracle"), weights=weights).decode_loop(TOY_PROMPT, TOY_GEN)
    on = Engine(TOY, RunMode(source="oracle", dp_epsilon=0.01), weights=weights).decode_loop(TOY_PROMPT, TOY_GEN)
    same = _same_logits(off, on) and off.tokens == on.tokens

    width, rows = 11008, 200
    ones = round((1 - 0.894) * width)
    mask = np.zeros((rows, width), dtype=np.uint64)
    for r in mask:
        r[rng.choice(width, ones, replace=False)] = 1
    tp2 = TwoParty(seed=70)
    noisy = tp2.run_shared(lambda s, a: apply_dp_perturbation(a, 0.01, s), mask, rng=rng)
    eff = 100 * (1 - noisy.sum(axis=1) / width)
    base = 100 * (1 - ones / width)
    mean = float(eff.mean())
    ok = flips_down == 0 and binary and same and abs(mean - 71.7) <= 3
    criterion(7, ok, f"1->0 flips in 10^4 trials: {flips_down}; DP on/off outputs identical: {same}; "
                     f"eps=0.01 on {base:.1f}%-sparse width-{width} mask -> mean effective sparsity "
                     f"{mean:.1f}% (sd {eff.std():.1f}, target 71.7 +/- 3)")
    assert ok


# --- 8: end-to-end fidelity ------------------------------------------------------------


def test_criterion_8_end_to_end(criterion):
    t0 = time.perf_counter()
    weights = make_weights(TOY)

    def run(**kw):
        return Engine(TOY, RunMode(**kw), weights=weights).decode_loop(TOY_PROMPT, TOY_GEN)

    dense = run(backend="dense")
    oracle = run(backend="sparse", source="oracle")
    synth = run(backend="sparse", source="synthetic", head_rate=0.5, ffn_sparsity=0.9)
    elapsed = time.perf_counter() - t0
    identical = _same_logits(dense, oracle) and dense.tokens == oracle.tokens
    reduction = dense.ledger.total() / synth.ledger.total()
    ok = identical and reduction >= 1.5 and elapsed < 600
    criterion(8, ok, f"toy model prompt {len(TOY_PROMPT)} gen {TOY_GEN}: oracle logits bit-identical to dense: "
                     f"{identical}; reduction at synthetic sparsity {reduction:.2f}x "
                     f"(dense {dense.ledger.total():,} vs {synth.ledger.total():,}); "
                     f"oracle {dense.ledger.total() / oracle.ledger.total():.2f}x; {elapsed:.1f}s")
    assert ok


# --- 9: determinism --------------------------------------------------------------------


def test_criterion_9_determinism(criterion, tmp_path, capsys):
    differing = []
    names = sorted(bundled_scenarios())
    for name in names:
        path = str(bundled_scenarios()[name])
        outs = []
        for rep in ("a", "b"):
            out = tmp_path / name / rep
            assert cli.main(["run", path, "--out", str(out)]) == 0
            outs.append((out / "report.csv").read_bytes())
        if outs[0] != outs[1]:
            differing.append(name)
    capsys.readouterr()
    ok = not differing
    criterion(9, ok, f"{len(names)} bundled scenarios run twice, report.csv byte-identical"
                     + (f"; differing: {', '.join(differing)}" if differing else ""))
    assert ok

