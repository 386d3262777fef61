"""Two-party private inference of the toy transformer.

Backends: ``dense`` (plain Beaver matmuls), ``spgemm`` (per-nonzero baseline)
and ``sparse`` (predictor, shuffle, SOMM, ReLU on selected neurons, SIMM).
Sparse backends pre-shuffle the FFN neurons and the attention heads once in
the ``Setup`` phase, so the revealed masks already line up with the weights
and the FC2 / output-projection sums come back in the original hidden order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dealer import ContractError, Dealer, check_freshness, share_arrays
from .kvcache import KINDS, STRATEGIES, KVStore, PrefetchPolicy, group_somm_elements, plan_step
from .model import (
    EncodedModel,
    ModelConfig,
    ModelWeights,
    embed_fixed,
    encode_model,
    layernorm_fixed,
    linear_fixed,
    make_weights,
)
from .predictor import (
    PredictorWeights,
    precision_recall,
    predict_mpc,
    share_predictor,
    synthetic_predictor,
)
from .protocols import (
    IdealCostModel,
    ProtocolSession,
    ideal_nonlinear,
    pi_matmul,
    pi_matmul_many,
    pi_shuffle,
    truncate,
)
from .reference import ReferenceDecoder, ReferenceTrace, causal_valid, head_outputs_fixed
from .ring import FixedPointCodec
from .sparse import apply_dp_perturbation, pi_simm, pi_somm, reveal_shuffled_mask, spgemm_input, spgemm_output
from .transport import CostLedger, Network, ledger_report, run_parties

BACKENDS = ("dense", "spgemm", "sparse")
SOURCES = ("oracle", "predictor", "synthetic")
STRUCTURES = ("column", "elementwise", "head")


@dataclass(frozen=True)
class RunMode:
    backend: str = "sparse"
    source: str = "oracle"
    ffn_sparsity: float = 0.9  # synthetic source only
    head_rate: float = 0.5  # synthetic source only
    structure: str = "column"
    cache: str = "MR"
    dp_epsilon: float = math.inf
    seed: int = 0
    trunc: str = "pair"
    prefetch_w: int | None = None  # defaults to h * 2d (K and V of one head)
    run_predictor: bool = True  # charge the predictor even when masks come from elsewhere
    delta_oracle: float = 0.0

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ContractError(f"backend must be one of {BACKENDS}")
        if self.source not in SOURCES:
            raise ContractError(f"sparsity source must be one of {SOURCES}")
        if self.structure not in STRUCTURES:
            raise ContractError(f"structure must be one of {STRUCTURES}")
        if self.cache not in STRATEGIES:
            raise ContractError(f"cache strategy must be one of {STRATEGIES}")
        if not 0.0 <= self.ffn_sparsity <= 1.0 or not 0.0 <= self.head_rate <= 1.0:
            raise ContractError("rates must lie in [0, 1]")
        if not self.dp_epsilon > 0:
            raise ContractError("dp epsilon must be positive (inf disables DP)")

    @property
    def sparse(self) -> bool:
        return self.backend != "dense"


@dataclass
class Predictors:
    ffn: list  # PredictorWeights per layer (neuron granularity)
    mha: list  # PredictorWeights per layer (head granularity)


def build_predictors(weights: ModelWeights, codec: FixedPointCodec, seed: int = 0, samples: int = 4,
                     mha_rank: int | None = None, target_recall: float = 0.99) -> Predictors:
    """FFN predictors from the low-rank FC1 factors; MHA predictors fit on reference activations."""
    cfg = weights.config
    ffn = [
        PredictorWeights(lw.W1_left.T, np.zeros(cfg.ffn_rank), lw.W1_right.T, lw.b1, 0.0, "neuron")
        for lw in weights.layers
    ]
    enc = encode_model(weights, codec)
    rng = np.random.default_rng([seed, 0x9E])
    xs = [[] for _ in range(cfg.layers)]
    norms = [[] for _ in range(cfg.layers)]
    T = min(64, cfg.max_len)
    for _ in range(samples):
        dec = ReferenceDecoder(enc)
        toks = rng.integers(0, cfg.vocab, T)
        tr = ReferenceTrace()
        dec.step(toks, range(T), tr)
        for li in range(cfg.layers):
            xs[li].append(codec.decode(dec.inputs[li][:T]))
            norms[li].append(np.linalg.norm(codec.decode(tr.head_out[0][li]), axis=-1))
    r = mha_rank if mha_rank is not None else max(1, cfg.heads // 2)
    mha = []
    for li in range(cfg.layers):
        X = np.concatenate(xs[li])
        N = np.concatenate(norms[li])
        truth = N > 0
        mha.append(synthetic_predictor(X, truth.astype(np.float64), truth, r, target_recall, "head"))
    return Predictors(ffn, mha)


@dataclass
class SharedLayer:
    Wqkv: np.ndarray
    bqkv: np.ndarray
    Wo: np.ndarray
    bo: np.ndarray
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    ln1: tuple
    ln2: tuple
    pred_ffn: object = None
    pred_mha: object = None


@dataclass
class SharedModel:
    layers: list
    W_lm: np.ndarray


def share_model(enc: EncodedModel, preds: Predictors | None, rng) -> tuple[SharedModel, SharedModel]:
    """Model owner's offline sharing (not charged to either party)."""
    ring, codec = enc.codec.ring, enc.codec
    out = ([], [])
    for li, L in enumerate(enc.layers):
        parts = {k: share_arrays(getattr(L, k), rng, ring) for k in ("Wqkv", "bqkv", "Wo", "bo", "W1", "b1", "W2", "b2")}
        pf = share_predictor(preds.ffn[li], codec, rng) if preds else (None, None)
        pm = share_predictor(preds.mha[li], codec, rng) if preds else (None, None)
        for i in (0, 1):
            out[i].append(SharedLayer(
                **{k: v[i] for k, v in parts.items()},
                ln1=(L.ln1_g, L.ln1_b), ln2=(L.ln2_g, L.ln2_b),
                pred_ffn=pf[i], pred_mha=pm[i],
            ))
    lm = share_arrays(enc.W_lm, rng, ring)
    return SharedModel(out[0], lm[0]), SharedModel(out[1], lm[1])


@dataclass
class RunResult:
    mode: RunMode
    logits: list
    tokens: list
    ledger: CostLedger
    trace_rows: list
    stats: dict
    eval_rows: list
    dealer: Dealer
    mask_log: list = field(default_factory=list)

    def report_rows(self, bandwidth="5Gbps", rtt_s=0.0005, k=64):
        return ledger_report(self.ledger, k=k, bandwidth=bandwidth, rtt_s=rtt_s)

    def precision_recall(self, kind: str) -> tuple[float, float]:
        rows = [r for r in self.eval_rows if r["kind"] == kind]
        if not rows:
            return (float("nan"), float("nan"))
        return float(np.mean([r["precision"] for r in rows])), float(np.mean([r["recall"] for r in rows]))


class Engine:
    def __init__(self, config: ModelConfig | None = None, mode: RunMode | None = None,
                 codec: FixedPointCodec | None = None, cost_model: IdealCostModel | None = None,
                 weights: ModelWeights | None = None, predictors: Predictors | None = None):
        self.config = config or ModelConfig()
        self.mode = mode or RunMode()
        self.codec = codec or FixedPointCodec()
        self.cost_model = cost_model or IdealCostModel()
        self.weights = weights or make_weights(self.config)
        self.enc = encode_model(self.weights, self.codec)
        self._predictors = predictors

    @property
    def predictors(self) -> Predictors:
        if self._predictors is None:
            self._predictors = build_predictors(self.weights, self.codec, seed=self.config.weight_seed)
        return self._predictors

    def decode_loop(self, prompt, gen_len: int, head_trace: np.ndarray | None = None) -> RunResult:
        """Prefill ``prompt`` as one batch, then ``gen_len`` greedy decode steps.

        ``head_trace`` (tokens x heads, original order) overrides the synthetic
        head activations. Logits are recorded for ``gen_len + 1`` positions.
        """
        cfg, mode = self.config, self.mode
        prompt = [int(t) for t in prompt]
        if not prompt:
            raise ContractError("prompt must contain at least one token")
        if len(prompt) + gen_len > cfg.max_len:
            raise ContractError(f"prompt + generation exceeds max_len {cfg.max_len}")
        need_pred = mode.sparse and (mode.run_predictor or mode.source == "predictor")
        preds = self.predictors if need_pred else None
        ledger = CostLedger()
        net = Network(ledger, seed=mode.seed)
        dealer = Dealer(mode.seed, self.codec.ring)
        rng = np.random.default_rng([mode.seed, 0x5A])
        sm1, sm2 = share_model(self.enc, preds, rng)
        shared_log = _RunLog()
        runner = _PartyRun(self, prompt, gen_len, head_trace, dealer, shared_log)
        s1, s2 = run_parties(net, runner.program, (sm1,), (sm2,))
        check_freshness(dealer.usage)
        return RunResult(mode, shared_log.logits, shared_log.tokens, ledger, shared_log.trace,
                         dict(s1), shared_log.evals, dealer, shared_log.masks)


@dataclass
class _RunLog:
    logits: list = field(default_factory=list)
    tokens: list = field(default_factory=list)
    trace: list = field(default_factory=list)
    evals: list = field(default_factory=list)
    masks: list = field(default_factory=list)


class _PartyRun:
    """The per-party program; both parties execute :meth:`program` in lockstep."""

    def __init__(self, engine: Engine, prompt, gen_len, head_trace, dealer, log: _RunLog):
        self.e = engine
        self.cfg = engine.config
        self.mode = engine.mode
        self.codec = engine.codec
        self.prompt = prompt
        self.gen_len = gen_len
        self.head_trace = None if head_trace is None else np.asarray(head_trace, dtype=bool)
        self.dealer = dealer
        self.log = log
        cfg = self.cfg
        w = self.mode.prefetch_w if self.mode.prefetch_w is not None else cfg.hidden * 2 * cfg.head_dim
        self.policy = PrefetchPolicy(w=w, x=cfg.hidden)

    # --- helpers -------------------------------------------------------------------

    def _session(self, ep) -> ProtocolSession:
        return ProtocolSession(ep, self.dealer, self.codec, self.e.cost_model, trunc_method=self.mode.trunc)

    def _zeros(self, shape):
        return np.zeros(shape, dtype=np.uint64)

    def _layernorm(self, s, x, gb):
        codec = self.codec
        with s.phase_scope("Others"):
            return s.ideal("layernorm", x, lambda v: layernorm_fixed(v, gb[0], gb[1], codec),
                           n_elements=x.size, n_rows=x.shape[0])

    def _mm_trunc_bias(self, s, X, W, b):
        Z = truncate(pi_matmul(X, W, s), s)
        return Z if b is None else s.ring.add(Z, b)

    # --- setup ---------------------------------------------------------------------

    def _setup(self, s, sm):
        """Shuffle head blocks and FFN neurons of the shared weights once."""
        cfg = self.cfg
        h, H, d, f = cfg.hidden, cfg.heads, cfg.head_dim, cfg.ffn
        with s.phase_scope("Setup"):
            for li, L in enumerate(sm.layers):
                hn, fn = f"heads{li}", f"ffn{li}"
                L.Wqkv = pi_shuffle(L.Wqkv.reshape(h, 3, H, d), hn, s, axis=2).reshape(h, 3 * h)
                L.bqkv = pi_shuffle(L.bqkv.reshape(3, H, d), hn, s, axis=1).reshape(3 * h)
                L.Wo = pi_shuffle(L.Wo.reshape(H, d, h), hn, s, axis=0).reshape(h, h)
                L.W1 = pi_shuffle(L.W1, fn, s, axis=1)
                L.b1 = pi_shuffle(L.b1, fn, s, axis=0)
                L.W2 = pi_shuffle(L.W2, fn, s, axis=0)

    # --- mask sources --------------------------------------------------------------------

    def _synthetic_bits(self, kind: str, li: int, step: int, positions) -> np.ndarray:
        cfg, mode = self.cfg, self.mode
        T = len(positions)
        if kind == "head":
            if self.head_trace is not None:
                return self.head_trace[np.asarray(positions)].astype(np.uint64)
            r = np.random.default_rng([mode.seed, li, step, 0])
            return (r.random((T, cfg.heads)) < mode.head_rate).astype(np.uint64)
        r = np.random.default_rng([mode.seed, li, step, 1])
        keep = 1.0 - mode.ffn_sparsity
        if mode.structure == "column":
            row = r.random(cfg.ffn) < keep
            return np.repeat(row[None, :], T, axis=0).astype(np.uint64)
        if mode.structure == "head":
            blocks = r.random((T, max(1, cfg.ffn // 32))) < keep
            return np.repeat(blocks, 32, axis=1)[:, : cfg.ffn].astype(np.uint64)
        return (r.random((T, cfg.ffn)) < keep).astype(np.uint64)

    def _truth_heads(self, li, positions, xn_all):
        cfg, codec = self.cfg, self.codec
        out = head_outputs_fixed(xn_all, positions, self.e.enc.layers[li], cfg.heads, cfg.head_dim, codec)
        return (np.linalg.norm(codec.decode(out), axis=-1) > self.mode.delta_oracle).astype(np.uint64)

    def _truth_ffn(self, li, xn2):
        L = self.e.enc.layers[li]
        pre = linear_fixed(xn2, L.W1, L.b1, self.codec)
        return (self.codec.ring.to_signed(pre) > 0).astype(np.uint64)

    def _mask_bits(self, s, kind, li, step, positions, xn, xn_all, pred_shares):
        """Shares of the (original-order) 0/1 mask for this step."""
        mode = self.mode
        predicted = None
        if pred_shares is not None:
            with s.phase_scope("Predictor"):
                predicted = predict_mpc(xn, pred_shares, s, phase=None)
        log = self.log

        def truth_of(vals):
            if kind == "head":
                return self._truth_heads(li, positions, vals[1])
            return self._truth_ffn(li, vals[1])

        if mode.source == "predictor":
            payload = [predicted, xn_all if kind == "head" else xn]

            def fn(vals):
                truth = truth_of(vals)
                p, r = precision_recall(vals[0], truth)
                log.evals.append({"kind": kind, "layer": li, "step": step, "precision": p, "recall": r,
                                  "pred_density": float(np.mean(vals[0])), "truth_density": float(np.mean(truth))})
                return vals[0]

            with s.phase_scope("Predictor"):
                return s.ideal("oracle", payload, fn)
        if mode.source == "oracle":
            payload = [self._zeros((1,)), xn_all if kind == "head" else xn]
            with s.phase_scope("Predictor"):
                return s.ideal("oracle", payload, truth_of)
        bits = self._synthetic_bits(kind, li, step, positions)
        with s.phase_scope("Predictor"):
            return s.ideal("oracle", self._zeros((1,)), lambda _v: bits)

    # --- MHA -----------------------------------------------------------------------

    def _mha_dense(self, s, L, li, xn, positions, store):
        cfg, ring = self.cfg, s.ring
        h, H, d = cfg.hidden, cfg.heads, cfg.head_dim
        T = len(positions)
        with s.phase_scope("QKV"):
            qkv = self._mm_trunc_bias(s, xn, L.Wqkv, L.bqkv)
        for i, t in enumerate(positions):
            for j in range(H):
                store.put(li, j, t, qkv[i, h + j * d : h + (j + 1) * d], qkv[i, 2 * h + j * d : 2 * h + (j + 1) * d])
        active = np.ones((T, H), dtype=bool)
        Q = qkv[:, :h].reshape(T, H, d)
        O = self._attention(s, li, Q, active, positions, store)
        with s.phase_scope("Output"):
            return self._mm_trunc_bias(s, O.reshape(T, h), L.Wo, L.bo)

    def _attention(self, s, li, Q, active, positions, store):
        """Per activated (token, head): softmax(q K^T) V over the causal prefix."""
        cfg, ring = self.cfg, s.ring
        H, d = cfg.heads, cfg.head_dim
        T = len(positions)
        pos = np.asarray(positions)
        heads = [j for j in range(H) if active[:, j].any()]
        O = self._zeros((T, H, d))
        if not heads:
            return O
        rows = {j: np.flatnonzero(active[:, j]) for j in heads}
        klen = {j: int(pos[rows[j]].max()) + 1 for j in heads}
        for j in heads:
            if not store.present[li][j, : klen[j]].all():
                raise ContractError(f"layer {li} head {j}: cache hole before attention")
        with s.phase_scope("MatMul"):
            S = pi_matmul_many(
                [(Q[rows[j], j], np.ascontiguousarray(store.K[li][j, : klen[j]].T)) for j in heads], s)
            S = _truncate_many(S, s)
        nmax = max(len(rows[j]) for j in heads)
        kmax = max(klen.values())
        pad = self._zeros((len(heads), nmax, kmax))
        valid = np.zeros((len(heads), nmax, kmax), dtype=bool)
        for a, j in enumerate(heads):
            pad[a, : len(rows[j]), : klen[j]] = S[a]
            valid[a, : len(rows[j]), : klen[j]] = causal_valid(pos[rows[j]], klen[j])
        with s.phase_scope("Softmax"):
            P = ideal_nonlinear(pad, "softmax", s, valid=valid)
        with s.phase_scope("MatMul"):
            out = pi_matmul_many([(P[a, : len(rows[j]), : klen[j]], store.V[li][j, : klen[j]]) for a, j in enumerate(heads)], s)
            out = _truncate_many(out, s)
        for a, j in enumerate(heads):
            O[rows[j], j] = out[a]
        s.stats["softmax_heads"] += len(heads)
        return O

    def _mha_sparse(self, s, L, li, xn, positions, store, step, trace_row):
        cfg, mode, ring = self.cfg, self.mode, s.ring
        h, H, d = cfg.hidden, cfg.heads, cfg.head_dim
        T = len(positions)
        store.inputs[li][positions] = xn
        xn_all = store.inputs[li][: max(positions) + 1]
        bits = self._mask_bits(s, "head", li, step, positions, xn, xn_all, L.pred_mha)
        with s.phase_scope("Shuffle"):
            mask = reveal_shuffled_mask(bits, f"heads{li}", s, axis=1)
        active = mask.bits.astype(bool)
        if s.party == 1:
            self.log.masks.append(("head", li, step, float(active.mean())))
        plan = plan_step(store.present[li], list(positions), active, mode.cache, self.policy, layer=li)
        Q = self._zeros((T, H, d))
        cur = {t: i for i, t in enumerate(positions)}
        for g in plan.groups:
            if not g.entries:
                continue
            rows = g.rows(list(positions))
            bm = g.block_mask(rows, H)
            M = np.repeat(bm, d, axis=1)
            X = store.inputs[li][rows]
            with s.phase_scope(g.phase):
                if mode.backend == "sparse":
                    Z = pi_somm(X, L.Wqkv, M, s)
                else:
                    Z = spgemm_output(X, L.Wqkv, M, s)
                idx = np.nonzero(M)
                vals = ring.add(truncate(Z[idx], s), L.bqkv[idx[1]])
            R = self._zeros(M.shape)
            R[idx] = vals
            if g.phase == "QKV" and len(g.entries) > len(plan.main_entries):
                self._move_refill(s, plan, g, bm, rows)
            for t, j, k in g.entries:
                r = rows.index(t)
                kk = KINDS.index(k)
                blk = R[r, (kk * H + j) * d : (kk * H + j + 1) * d]
                if k == "q":
                    Q[cur[t], j] = blk
                elif k == "k":
                    store.K[li][j, t] = blk
                else:
                    store.V[li][j, t] = blk
            for t, j, k in g.entries:
                if k == "v":
                    store.present[li][j, t] = True
        O = self._attention(s, li, Q, active, positions, store)
        xmask = np.repeat(active.astype(np.uint8), d, axis=1)
        with s.phase_scope("Output"):
            if mode.backend == "sparse":
                Y = pi_simm(O.reshape(T, h), L.Wo, xmask, s)
            else:
                Y = spgemm_input(O.reshape(T, h), L.Wo, xmask, s)
            Y = ring.add(truncate(Y, s), L.bo)
        trace_row["active_heads"] += int(active[-1].sum())
        trace_row["misses"] += sum(len(m.tokens) for m in plan.misses)
        trace_row["batch_rows"] += len(plan.groups[0].rows(list(positions))) if plan.groups[0].entries else 0
        trace_row["prefetched"] += len(plan.prefetched)
        return Y

    def _move_refill(self, s, plan, g, bm, rows):
        """Book the merged batch's extra traffic (beyond the current-only batch) as cache refill."""
        cfg = self.cfg
        H, d, h = cfg.heads, cfg.head_dim, cfg.hidden
        from .kvcache import QKVGroup

        main = QKVGroup("QKV", plan.main_entries)
        extra_entries = len(g.entries) - len(plan.main_entries)
        if self.mode.backend == "sparse":
            merged_cost = group_somm_elements(bm, h, d)
            main_cost = group_somm_elements(main.block_mask(main.rows(plan.current), H), h, d) if plan.main_entries else 0
            moved = merged_cost - main_cost
        else:
            moved = extra_entries * d * 2 * h
        moved += extra_entries * d  # truncation openings
        s.endpoint.reattribute("QKV", "CacheRefill", moved)

    # --- FFN ------------------------------------------------------------------------------

    def _ffn_dense(self, s, L, xn):
        with s.phase_scope("FC1"):
            pre = self._mm_trunc_bias(s, xn, L.W1, L.b1)
        with s.phase_scope("ReLU"):
            act = ideal_nonlinear(pre, "relu", s)
        with s.phase_scope("FC2"):
            return self._mm_trunc_bias(s, act, L.W2, L.b2)

    def _ffn_sparse(self, s, L, li, xn, positions, step):
        mode, ring = self.mode, s.ring
        bits = self._mask_bits(s, "ffn", li, step, positions, xn, None, L.pred_ffn)
        if not math.isinf(mode.dp_epsilon):
            with s.phase_scope("DP"):
                bits = apply_dp_perturbation(bits, mode.dp_epsilon, s)
        with s.phase_scope("Shuffle"):
            mask = reveal_shuffled_mask(bits, f"ffn{li}", s, axis=1)
        M = mask.matrix
        if s.party == 1:
            self.log.masks.append(("ffn", li, step, float(M.mean())))
        with s.phase_scope("FC1"):
            Z = pi_somm(xn, L.W1, M, s) if mode.backend == "sparse" else spgemm_output(xn, L.W1, M, s)
            idx = np.nonzero(M)
            vals = ring.add(truncate(Z[idx], s), L.b1[idx[1]])
        with s.phase_scope("ReLU"):
            act = ideal_nonlinear(vals, "relu", s)
        Hm = self._zeros(M.shape)
        Hm[idx] = act
        with s.phase_scope("FC2"):
            Y = pi_simm(Hm, L.W2, M, s) if mode.backend == "sparse" else spgemm_input(Hm, L.W2, M, s)
            return ring.add(truncate(Y, s), L.b2)

    # --- main loop -------------------------------------------------------------------------

    def program(self, ep, sm: SharedModel):
        s = self._session(ep)
        cfg, mode, codec, ring = self.cfg, self.mode, self.codec, s.ring
        weights = self.e.weights
        log = self.log
        if mode.sparse:
            self._setup(s, sm)
        store = KVStore(cfg.layers, cfg.heads, cfg.head_dim, cfg.hidden, cfg.max_len)
        positions = list(range(len(self.prompt)))
        prompt = self.prompt
        with s.phase_scope("Others"):
            x = s.ideal("embed", self._zeros((len(prompt), 1)),
                        lambda _v: embed_fixed(weights, prompt, positions, codec), n_elements=len(prompt))
        for step in range(self.gen_len + 1):
            before = ep.ledger.total()
            row = {"step": step, "token": positions[-1], "active_heads": 0, "misses": 0,
                   "batch_rows": 0, "prefetched": 0}
            for li, L in enumerate(sm.layers):
                xn = self._layernorm(s, x, L.ln1)
                if mode.sparse:
                    att = self._mha_sparse(s, L, li, xn, positions, store, step, row)
                else:
                    att = self._mha_dense(s, L, li, xn, positions, store)
                x = ring.add(x, att)
                xn2 = self._layernorm(s, x, L.ln2)
                y = self._ffn_sparse(s, L, li, xn2, positions, step) if mode.sparse else self._ffn_dense(s, L, xn2)
                x = ring.add(x, y)
            xf = self._layernorm(s, x[-1:], (weights.lnf_g, weights.lnf_b))
            with s.phase_scope("Others"):
                logits = truncate(pi_matmul(xf, sm.W_lm, s), s)
            nxt = positions[-1] + 1
            last = step == self.gen_len

            def user(v, nxt=nxt, last=last):
                vals = codec.decode(v[0])
                log.logits.append(vals)
                if last:
                    return np.zeros((1, cfg.hidden), dtype=np.uint64)
                tok = int(np.argmax(vals))
                log.tokens.append(tok)
                return embed_fixed(weights, [tok], [nxt], codec)

            with s.phase_scope("Others"):
                x = s.ideal("user_step", logits, user, n_elements=1)
            if s.party == 1:
                row["elements"] = ep.ledger.total() - before
                log.trace.append(row)
            positions = [nxt]
        return s.stats


def _truncate_many(arrs, s):
    """Truncate several shared arrays with one opening."""
    if not arrs:
        return arrs
    flat = np.concatenate([a.reshape(-1) for a in arrs])
    t = truncate(flat, s)
    out, i = [], 0
    for a in arrs:
        out.append(t[i : i + a.size].reshape(a.shape))
        i += a.size
    return out
