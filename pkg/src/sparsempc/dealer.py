"""Additive sharing and the trusted dealer that emits correlated randomness.

The dealer is an in-process emulator. Offline helpers (``deal_*``) hand back
complete objects holding both parties' halves, which is what tests and the
material cache use. During a two-party run each party asks for its half with
:meth:`Dealer.request`; the k-th request of party 1 and the k-th request of
party 2 receive the two halves of the same object, and the object's randomness
depends only on ``(seed, k)``.
"""

from __future__ import annotations

import io
import json
import threading
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ring import RING64, Ring
from .transport import ProtocolDesyncError


class ContractError(ValueError):
    """Shares or shapes that cannot belong together."""


class TripleReuseError(RuntimeError):
    """A Beaver triple half was consumed twice."""


class FreshnessError(RuntimeError):
    """Shuffle masks (or other single-use material) were used a second time."""


class DealerExhaustedError(RuntimeError):
    """No pre-dealt material is left for the requested operation."""


class DealerDesyncError(ProtocolDesyncError):
    """The two parties asked the dealer for different things at the same step."""


# --- additive sharing -------------------------------------------------------


@dataclass
class ShareMatrix:
    party_id: int
    values: np.ndarray

    @property
    def shape(self):
        return self.values.shape


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def share(M, rng_seed=None, ring: Ring = RING64) -> tuple[ShareMatrix, ShareMatrix]:
    """Split ``M`` into two additive shares; share 1 is uniform."""
    M = ring.reduce(np.asarray(M) if not isinstance(M, np.ndarray) else M)
    s1 = ring.random(_rng(rng_seed), M.shape)
    return ShareMatrix(1, s1), ShareMatrix(2, ring.sub(M, s1))


def reconstruct(s1: ShareMatrix, s2: ShareMatrix, ring: Ring = RING64) -> np.ndarray:
    if {s1.party_id, s2.party_id} != {1, 2}:
        raise ContractError(f"need one share from each party, got {s1.party_id} and {s2.party_id}")
    if s1.values.shape != s2.values.shape:
        raise ContractError(f"share shapes differ: {s1.values.shape} vs {s2.values.shape}")
    return ring.add(s1.values, s2.values)


def share_arrays(M, rng, ring: Ring = RING64) -> tuple[np.ndarray, np.ndarray]:
    a, b = share(M, rng, ring)
    return a.values, b.values


# --- permutations -----------------------------------------------------------


def apply_perm(x: np.ndarray, perm: np.ndarray, axis: int = -1) -> np.ndarray:
    """``out[..., j, ...] = x[..., perm[j], ...]``; so ``[1,0,2]`` maps (x0,x1,x2) to (x1,x0,x2)."""
    return np.take(x, perm, axis=axis)


def invert_perm(perm: np.ndarray) -> np.ndarray:
    inv = np.empty_like(perm)
    inv[perm] = np.arange(len(perm), dtype=perm.dtype)
    return inv


def compose(outer: np.ndarray, inner: np.ndarray) -> np.ndarray:
    """Permutation applying ``inner`` first, then ``outer``."""
    return inner[outer]


# --- dealt material ---------------------------------------------------------


@dataclass
class TripleShare:
    triple_id: str
    party: int
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray


@dataclass
class BeaverTriple:
    """Matrix triple ``C = A @ B`` split between two parties."""

    triple_id: str
    a_shape: tuple
    b_shape: tuple
    A: tuple  # (share1, share2)
    B: tuple
    C: tuple
    consumed: dict = field(default_factory=lambda: {1: False, 2: False})

    def take(self, party: int) -> TripleShare:
        if self.consumed[party]:
            raise TripleReuseError(f"triple {self.triple_id} already consumed by party {party}")
        self.consumed[party] = True
        i = party - 1
        return TripleShare(self.triple_id, party, self.A[i], self.B[i], self.C[i])

    @property
    def fully_consumed(self) -> bool:
        return all(self.consumed.values())


@dataclass
class ShuffleCorrelation:
    """One party's reusable sub-permutations ``(rho_i, tau_i)``."""

    name: str
    party: int
    n: int
    rho: np.ndarray
    tau: np.ndarray


@dataclass
class ShuffleMasks:
    """Single-use masks for one shuffle (or unshuffle) invocation."""

    mask_id: str
    party: int
    corr_name: str
    inverse: bool
    axis: int
    a: np.ndarray
    b: np.ndarray
    used: bool = False

    def consume(self) -> tuple[np.ndarray, np.ndarray]:
        if self.used:
            raise FreshnessError(f"shuffle masks {self.mask_id} reused")
        self.used = True
        return self.a, self.b


@dataclass
class TruncShare:
    pair_id: str
    party: int
    r: np.ndarray
    r_low: np.ndarray


@dataclass
class TruncationPair:
    """Shares of a random ``r`` and of ``r`` arithmetically shifted by ``f``."""

    pair_id: str
    f: int
    r: tuple
    r_low: tuple
    consumed: dict = field(default_factory=lambda: {1: False, 2: False})

    def take(self, party: int) -> TruncShare:
        if self.consumed[party]:
            raise TripleReuseError(f"truncation pair {self.pair_id} already consumed by party {party}")
        self.consumed[party] = True
        i = party - 1
        return TruncShare(self.pair_id, party, self.r[i], self.r_low[i])


@dataclass
class _HiddenShuffle:
    n: int
    pi: np.ndarray
    rho: tuple
    tau: tuple


class Dealer:
    """Seeded trusted third party.

    ``usage`` records every online hand-out as ``(material_id, party, label)``
    for the freshness check in :func:`check_freshness`.
    """

    def __init__(self, seed: int = 0, ring: Ring = RING64, online_budget: int | None = None):
        self.seed = int(seed)
        self.online_budget = online_budget
        self.ring = ring
        self._lock = threading.RLock()
        self._offline_counter = 0
        self._pseq = {1: 0, 2: 0}
        self._pending: dict[int, tuple] = {}
        self._shuffles: dict[str, _HiddenShuffle] = {}
        self.offline_elements = {1: 0, 2: 0}
        self.usage: list[tuple[str, int, str]] = []
        self.pool: dict[tuple, list[BeaverTriple]] = {}

    # offline API -----------------------------------------------------------

    def _offline_rng(self) -> tuple[np.random.Generator, str]:
        with self._lock:
            c = self._offline_counter
            self._offline_counter += 1
        return np.random.default_rng([self.seed, 0, c]), f"off{c}"

    def _make_triple(self, rng, tid, a_shape, b_shape) -> BeaverTriple:
        a_shape, b_shape = tuple(a_shape), tuple(b_shape)
        if len(a_shape) != 2 or len(b_shape) != 2 or a_shape[1] != b_shape[0]:
            raise ContractError(f"incompatible triple shapes {a_shape} x {b_shape}")
        ring = self.ring
        A = ring.random(rng, a_shape)
        B = ring.random(rng, b_shape)
        C = ring.matmul(A, B)
        A1, B1, C1 = ring.random(rng, a_shape), ring.random(rng, b_shape), ring.random(rng, C.shape)
        return BeaverTriple(
            tid, a_shape, b_shape,
            (A1, ring.sub(A, A1)), (B1, ring.sub(B, B1)), (C1, ring.sub(C, C1)),
        )

    def deal_beaver(self, a_shape, b_shape, count: int = 1) -> list[BeaverTriple]:
        out = []
        for _ in range(count):
            rng, tid = self._offline_rng()
            out.append(self._make_triple(rng, tid, a_shape, b_shape))
        return out

    def stock_beaver(self, a_shape, b_shape, count: int) -> None:
        """Pre-deal triples into the pool that :meth:`take_pooled` draws from."""
        key = (tuple(a_shape), tuple(b_shape))
        self.pool.setdefault(key, []).extend(self.deal_beaver(a_shape, b_shape, count))

    def take_pooled(self, party: int, a_shape, b_shape) -> TripleShare:
        key = (tuple(a_shape), tuple(b_shape))
        with self._lock:
            for t in self.pool.get(key, []):
                if not t.consumed[party]:
                    return t.take(party)
        raise DealerExhaustedError(f"no fresh triple for {a_shape} x {b_shape}")

    def _make_trunc(self, rng, pid, shape, f) -> TruncationPair:
        ring = self.ring
        r = ring.random(rng, shape)
        r_low = ring.shift_right(r, f)
        r1, l1 = ring.random(rng, shape), ring.random(rng, shape)
        return TruncationPair(pid, f, (r1, ring.sub(r, r1)), (l1, ring.sub(r_low, l1)))

    def deal_truncation(self, count: int, f: int, shape=(1,)) -> list[TruncationPair]:
        out = []
        for _ in range(count):
            rng, pid = self._offline_rng()
            out.append(self._make_trunc(rng, pid, tuple(shape), f))
        return out

    def deal_shuffle(self, n: int, name: str | None = None, pi=None) -> tuple[ShuffleCorrelation, ShuffleCorrelation]:
        """New hidden permutation ``pi`` and its split ``pi = rho1∘tau2 = rho2∘tau1``.

        ``pi`` may be forced (0-based) by a test harness.
        """
        if n < 1:
            raise ContractError("shuffle length must be >= 1")
        if name is None:
            rng, name = self._offline_rng()
        else:
            rng = np.random.default_rng([self.seed, 2, zlib.crc32(name.encode()), n])
        with self._lock:
            if name in self._shuffles and pi is None:
                h = self._shuffles[name]
                if h.n != n:
                    raise ContractError(f"shuffle {name!r} has length {h.n}, not {n}")
            else:
                p = rng.permutation(n) if pi is None else np.asarray(pi, dtype=np.int64)
                if sorted(p.tolist()) != list(range(n)):
                    raise ContractError("pi is not a permutation")
                tau1, tau2 = rng.permutation(n), rng.permutation(n)
                # rho1(tau2(x)) = pi(x)  <=>  tau2[rho1] = pi
                rho1 = invert_perm(tau2)[p]
                rho2 = invert_perm(tau1)[p]
                h = _HiddenShuffle(n, p, (rho1, rho2), (tau1, tau2))
                self._shuffles[name] = h
        return (
            ShuffleCorrelation(name, 1, n, h.rho[0], h.tau[0]),
            ShuffleCorrelation(name, 2, n, h.rho[1], h.tau[1]),
        )

    def hidden_permutation(self, name: str) -> np.ndarray:
        """The dealer's ``pi`` (test harness only)."""
        return self._shuffles[name].pi.copy()

    def _make_masks(self, rng, mid, name, shape, axis, inverse) -> tuple[ShuffleMasks, ShuffleMasks]:
        h = self._shuffles[name]
        ring = self.ring
        shape = tuple(shape)
        if shape[axis] != h.n:
            raise ContractError(f"payload axis {axis} has length {shape[axis]}, shuffle {name!r} has {h.n}")
        a1, a2, c = ring.random(rng, shape), ring.random(rng, shape), ring.random(rng, shape)
        if inverse:
            second1, second2 = invert_perm(h.tau[0]), invert_perm(h.tau[1])
        else:
            second1, second2 = h.rho[0], h.rho[1]
        b1 = ring.add(apply_perm(a2, second1, axis), c)
        b2 = ring.sub(apply_perm(a1, second2, axis), c)
        return (
            ShuffleMasks(mid, 1, name, inverse, axis, a1, b1),
            ShuffleMasks(mid, 2, name, inverse, axis, a2, b2),
        )

    def deal_shuffle_masks(self, name: str, shape, axis: int = -1, inverse: bool = False):
        rng, mid = self._offline_rng()
        return self._make_masks(rng, mid, name, shape, axis, inverse)

    # online API ------------------------------------------------------------

    def request(self, party: int, kind: str, *params, label: str = ""):
        """This party's half of the next piece of material."""
        with self._lock:
            seq = self._pseq[party]
            if self.online_budget is not None and seq >= self.online_budget:
                raise DealerExhaustedError(f"party {party} exceeded the budget of {self.online_budget} dealt items")
            self._pseq[party] += 1
            entry = self._pending.get(seq)
            if entry is None:
                rng = np.random.default_rng([self.seed, 1, seq])
                halves = self._generate(rng, f"m{seq}", kind, params)
                entry = [kind, params, halves, 0]
                self._pending[seq] = entry
            elif entry[0] != kind or not _params_equal(entry[1], params):
                raise DealerDesyncError(
                    f"dealer step {seq}: party {party} asked for {kind}{params}, peer asked for {entry[0]}{entry[1]}"
                )
            half = entry[2][party - 1]
            entry[3] += 1
            if entry[3] == 2:
                del self._pending[seq]
            mid = _material_id(half)
            self.usage.append((mid, party, label))
            self.offline_elements[party] += _material_size(half)
        return half

    def _generate(self, rng, mid, kind, params):
        if kind == "beaver":
            t = self._make_triple(rng, mid, *params)
            return (t.take(1), t.take(2))
        if kind == "trunc":
            shape, f = params
            t = self._make_trunc(rng, mid, tuple(shape), f)
            return (t.take(1), t.take(2))
        if kind == "shuffle_corr":
            name, n = params
            return self.deal_shuffle(n, name=name)
        if kind == "shuffle_masks":
            name, shape, axis, inverse = params
            return self._make_masks(rng, mid, name, shape, axis, inverse)
        raise ContractError(f"unknown material kind {kind!r}")


def _params_equal(a, b) -> bool:
    return json.dumps(_jsonable(a), sort_keys=True) == json.dumps(_jsonable(b), sort_keys=True)


def _jsonable(x):
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.integer):
        return int(x)
    return x


def _material_id(half) -> str:
    for attr in ("triple_id", "pair_id", "mask_id"):
        if hasattr(half, attr):
            return getattr(half, attr)
    return f"corr:{half.name}"


def _material_size(half) -> int:
    if isinstance(half, TripleShare):
        return half.A.size + half.B.size + half.C.size
    if isinstance(half, TruncShare):
        return half.r.size + half.r_low.size
    if isinstance(half, ShuffleMasks):
        return half.a.size + half.b.size
    if isinstance(half, ShuffleCorrelation):
        return 2 * half.n
    return 0


def check_freshness(usage) -> None:
    """Raise if any single-use material id was handed to the same party twice.

    Shuffle correlations are exempt: their sub-permutations are reusable by design.
    """
    seen: dict[tuple[str, int], str] = {}
    for mid, party, label in usage:
        if mid.startswith("corr:"):
            continue
        key = (mid, party)
        if key in seen:
            raise FreshnessError(f"material {mid} used by party {party} in {seen[key]!r} and {label!r}")
        seen[key] = label


# --- material cache -----------------------------------------------------------

CACHE_VERSION = 1


def save_triples(path, triples: list[BeaverTriple], scenario_hash: str, seed: int) -> None:
    """Versioned ``.npz`` blob keyed by ``(scenario_hash, seed)``."""
    arrays = {}
    meta = {"version": CACHE_VERSION, "scenario": scenario_hash, "seed": int(seed), "triples": []}
    for i, t in enumerate(triples):
        meta["triples"].append({"id": t.triple_id, "a": list(t.a_shape), "b": list(t.b_shape)})
        for name in ("A", "B", "C"):
            for p in (0, 1):
                arrays[f"{i}_{name}{p}"] = getattr(t, name)[p]
    buf = io.BytesIO()
    np.savez(buf, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_triples(path, scenario_hash: str, seed: int) -> list[BeaverTriple] | None:
    """Cached triples, or ``None`` when the blob is missing, stale or from another version."""
    p = Path(path)
    if not p.exists():
        return None
    with np.load(p) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        if meta.get("version") != CACHE_VERSION or meta.get("scenario") != scenario_hash or meta.get("seed") != seed:
            return None
        out = []
        for i, m in enumerate(meta["triples"]):
            parts = {name: (z[f"{i}_{name}0"], z[f"{i}_{name}1"]) for name in ("A", "B", "C")}
            out.append(BeaverTriple(m["id"], tuple(m["a"]), tuple(m["b"]), parts["A"], parts["B"], parts["C"]))
    return out
