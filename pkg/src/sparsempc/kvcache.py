"""KV cache with (head, token) holes, miss merging and cost-benefit prefetch.

Sparse QKV only produces K/V for activated heads, so a head that wakes up
later finds missing past entries. :func:`plan_step` decides which
(token, head, projection) entries one decode or prefill step computes and how
they are grouped into SOMM batches; the engine executes the plan and
:func:`simulate_trace` prices it without running any protocol.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dealer import ContractError
from .sparse import partition_components

STRATEGIES = ("PR", "MR", "MR+prefetch")
KINDS = ("q", "k", "v")


@dataclass
class MissRequest:
    layer: int
    head: int
    tokens: tuple

    def __post_init__(self):
        self.tokens = tuple(sorted(set(int(t) for t in self.tokens)))
        if not self.tokens:
            raise ContractError("a miss request needs at least one token")


@dataclass
class PrefetchPolicy:
    """``w``: elements of one head's K and V weights; ``x``: elements of one token vector."""

    w: int
    x: int

    def __post_init__(self):
        if self.w <= 0 or self.x <= 0:
            raise ContractError("w and x must be positive")

    @property
    def threshold(self) -> float:
        return self.w / self.x


def prefetch_gain(L2: int, L1: int, policy: PrefetchPolicy) -> int:
    """Saved minus extra elements: ``2 L2 x - 2 (w + x max(0, L2 - L1))``."""
    return 2 * L2 * policy.x - 2 * (policy.w + policy.x * max(0, L2 - L1))


def prefetch_select(miss_counts: dict, L1: int, policy: PrefetchPolicy) -> list[int]:
    """Inactive heads whose refill is worth doing now: ``L2 > w/x + max(0, L2 - L1)``."""
    if L1 < 0 or any(v < 0 for v in miss_counts.values()):
        raise ContractError("miss counts must be nonnegative")
    return sorted(h for h, L2 in miss_counts.items() if prefetch_gain(L2, L1, policy) > 0)


class KVStore:
    """One party's shares of K, V (shuffled head order) and of each token's layer input.

    ``present[layer][head, t]`` is True iff K and V of ``(head, t)`` are stored.
    """

    def __init__(self, layers: int, heads: int, head_dim: int, hidden: int, max_len: int):
        self.layers, self.heads, self.head_dim, self.max_len = layers, heads, head_dim, max_len
        self.K = [np.zeros((heads, max_len, head_dim), dtype=np.uint64) for _ in range(layers)]
        self.V = [np.zeros((heads, max_len, head_dim), dtype=np.uint64) for _ in range(layers)]
        self.present = [np.zeros((heads, max_len), dtype=bool) for _ in range(layers)]
        self.inputs = [np.zeros((max_len, hidden), dtype=np.uint64) for _ in range(layers)]

    def put(self, layer: int, head: int, token: int, k: np.ndarray, v: np.ndarray) -> None:
        self.K[layer][head, token] = k
        self.V[layer][head, token] = v
        self.present[layer][head, token] = True


def lookup(store_or_present, layer: int, heads, token_range) -> tuple[dict, list[MissRequest]]:
    """Split requested ``(head, token)`` entries into hits and per-head miss requests."""
    present = store_or_present.present[layer] if isinstance(store_or_present, KVStore) else store_or_present
    toks = np.asarray(list(token_range), dtype=np.int64)
    hits, misses = {}, []
    for h in heads:
        have = present[h, toks] if toks.size else np.zeros(0, dtype=bool)
        hits[int(h)] = tuple(toks[have].tolist())
        if (~have).any():
            misses.append(MissRequest(layer, int(h), tuple(toks[~have].tolist())))
    return hits, misses


def merge_requests(misses: list[MissRequest]) -> tuple[dict, tuple]:
    """Per-head deduplicated token sets and their union."""
    if len({m.layer for m in misses}) > 1:
        raise ContractError("cannot merge misses from different layers")
    per_head: dict[int, set] = {}
    for m in misses:
        per_head.setdefault(m.head, set()).update(m.tokens)
    union = sorted(set().union(*per_head.values())) if per_head else []
    return {h: tuple(sorted(t)) for h, t in sorted(per_head.items())}, tuple(union)


# --- step planning ------------------------------------------------------------------


@dataclass
class QKVGroup:
    """One SOMM invocation: ``entries`` is a set of ``(token, head, kind)``."""

    phase: str
    entries: set = field(default_factory=set)

    def rows(self, first: list[int]) -> list[int]:
        toks = {t for t, _, _ in self.entries}
        head = [t for t in first if t in toks]
        return head + sorted(toks - set(head))

    def block_mask(self, rows: list[int], heads: int) -> np.ndarray:
        """Rows x (3 * heads) 0/1 mask; block ``kind * heads + head``."""
        pos = {t: i for i, t in enumerate(rows)}
        M = np.zeros((len(rows), 3 * heads), dtype=np.uint8)
        for t, h, k in self.entries:
            M[pos[t], KINDS.index(k) * heads + h] = 1
        return M


@dataclass
class StepPlan:
    current: list
    groups: list
    main_entries: set
    misses: list
    prefetched: list
    L1: int = 0


def plan_step(present: np.ndarray, current: list[int], active: np.ndarray, strategy: str,
              policy: PrefetchPolicy | None = None, layer: int = 0) -> StepPlan:
    """Entries and batches for one step.

    ``active`` is ``len(current) x H`` (shuffled head order). With several
    current tokens (prefill) each head activated anywhere in the batch gets
    K/V for every batch token up to its last activated query; past tokens
    are only touched through miss requests.
    """
    if strategy not in STRATEGIES:
        raise ContractError(f"unknown cache strategy {strategy!r}")
    active = np.atleast_2d(np.asarray(active, dtype=bool))
    H = active.shape[1]
    first = min(current)
    main: set = set()
    for i, t in enumerate(current):
        for h in np.flatnonzero(active[i]):
            main.add((t, int(h), "q"))
    for h in range(H):
        idx = np.flatnonzero(active[:, h])
        if idx.size == 0:
            continue
        last = current[idx[-1]]
        for t in current:
            if t <= last:
                main.add((t, h, "k"))
                main.add((t, h, "v"))
    act_heads = sorted({int(h) for h in np.flatnonzero(active.any(axis=0))})
    _, misses = lookup(present, layer, act_heads, range(first))
    L1 = max((len(m.tokens) for m in misses), default=0)
    prefetched = []
    pf_entries: set = set()
    if strategy == "MR+prefetch" and policy is not None and len(current) == 1:
        t = current[0]
        idle = [h for h in range(H) if h not in act_heads]
        counts, want = {}, {}
        for h in idle:
            toks = [s for s in range(t + 1) if not present[h, s]]
            counts[h] = len(toks)
            want[h] = toks
        prefetched = prefetch_select(counts, L1, policy)
        for h in prefetched:
            for s in want[h]:
                pf_entries.add((s, h, "k"))
                pf_entries.add((s, h, "v"))
    refill: list[set] = [{(s, m.head, k) for s in m.tokens for k in ("k", "v")} for m in misses]
    if strategy == "PR":
        groups = [QKVGroup("QKV", main)] + [QKVGroup("CacheRefill", r) for r in refill]
    else:
        merged = set(main).union(*refill, pf_entries) if (refill or pf_entries) else set(main)
        groups = [QKVGroup("QKV", merged)]
    return StepPlan(list(current), groups, main, misses, prefetched, L1)


# --- counting ------------------------------------------------------------------------


def group_somm_elements(block_mask: np.ndarray, hidden: int, head_dim: int) -> int:
    """Per-party SOMM elements for a block mask: ``h * sum(|rows| + d |blocks|)``."""
    part = partition_components(block_mask)
    return hidden * sum(len(c.rows) + head_dim * len(c.cols) for c in part.components)


@dataclass
class StepCost:
    """Per-party elements and rounds of one planned step, by phase."""

    qkv: int = 0
    refill: int = 0
    qkv_rounds: int = 0
    refill_rounds: int = 0

    @property
    def total(self) -> int:
        return self.qkv + self.refill


def price_plan(plan: StepPlan, heads: int, hidden: int, head_dim: int) -> StepCost:
    """Elements the engine sends per party for this plan (SOMM plus truncation openings).

    For merged batches the part beyond the current-only batch is booked as
    cache refill, matching what the engine moves in its ledger.
    """
    cost = StepCost()
    for g in plan.groups:
        if not g.entries:
            continue
        rows = g.rows(plan.current)
        bm = g.block_mask(rows, heads)
        somm = group_somm_elements(bm, hidden, head_dim)
        trunc = head_dim * len(g.entries)
        if g.phase == "CacheRefill":
            cost.refill += somm + trunc
            cost.refill_rounds += 2
            continue
        cost.qkv += somm + trunc
        cost.qkv_rounds += 2
        extra = len(g.entries) - len(plan.main_entries)
        if extra:
            mrows = QKVGroup("QKV", plan.main_entries).rows(plan.current)
            main_somm = group_somm_elements(QKVGroup("QKV", plan.main_entries).block_mask(mrows, heads), hidden, head_dim) if plan.main_entries else 0
            moved = (somm - main_somm) + head_dim * extra
            cost.qkv -= moved
            cost.refill += moved
            if not plan.main_entries:
                cost.refill_rounds += 2
                cost.qkv_rounds -= 2
    return cost


def apply_plan(present: np.ndarray, plan: StepPlan) -> None:
    for g in plan.groups:
        for t, h, k in g.entries:
            if k != "q":
                present[h, t] = True


def markov_trace(steps: int, heads: int, rate: float, rng, stickiness: float = 0.93,
                 spread: float = 0.9) -> np.ndarray:
    """Per-head two-state on/off activation with mean rate ``rate``.

    Head ``j`` has its own stationary rate drawn around ``rate`` (heterogeneity
    ``spread``) and stays in its state with probability about ``stickiness``,
    producing the long miss runs seen in real decode traces.
    """
    lo, hi = max(0.02, rate * (1 - spread)), min(0.98, rate * (1 + spread))
    rates = np.linspace(lo, hi, heads)
    rates = rates * (rate / rates.mean())
    rates = np.clip(rates, 0.01, 0.99)
    out = np.zeros((steps, heads), dtype=bool)
    state = rng.random(heads) < rates
    for s in range(steps):
        out[s] = state
        for h in range(heads):
            # switching probabilities preserving the stationary rate
            leave = 1.0 - stickiness
            p_on_off = leave * (1 - rates[h]) * 2
            p_off_on = leave * rates[h] * 2
            u = rng.random()
            state[h] = (u >= p_on_off) if state[h] else (u < p_off_on)
    return out


@dataclass
class TraceResult:
    strategy: str
    qkv: int
    refill: int
    rounds: int
    rows: list
    qkv_rounds: int = 0
    refill_rounds: int = 0

    @property
    def total(self) -> int:
        return self.qkv + self.refill


def simulate_trace(activation: np.ndarray, prompt_len: int, strategy: str, heads: int, hidden: int,
                   head_dim: int, policy: PrefetchPolicy | None = None) -> TraceResult:
    """Counting-mode run of one layer's QKV and refill traffic (per party).

    ``activation`` has one row per token: the first ``prompt_len`` rows form
    the prefill batch, each later row is one decode step.
    """
    T = activation.shape[0]
    present = np.zeros((heads, T), dtype=bool)
    qkv = refill = qr = rr = 0
    rows = []
    steps = [list(range(prompt_len))] + [[t] for t in range(prompt_len, T)]
    for cur in steps:
        plan = plan_step(present, cur, activation[cur[0] : cur[-1] + 1], strategy, policy)
        c = price_plan(plan, heads, hidden, head_dim)
        apply_plan(present, plan)
        qkv += c.qkv
        refill += c.refill
        qr += c.qkv_rounds
        rr += c.refill_rounds
        rows.append({
            "token": cur[-1],
            "active": int(np.asarray(activation[cur[-1]]).sum()),
            "misses": sum(len(m.tokens) for m in plan.misses),
            "prefetched": len(plan.prefetched),
            "elements": c.total,
        })
    return TraceResult(strategy, qkv, refill, qr + rr, rows, qr, rr)
