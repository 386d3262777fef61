"""Two-party building blocks: linear ops, Beaver matmul, truncation, shuffle.

Every function here runs inside one party's program and takes that party's
:class:`ProtocolSession`. Both parties must make the same sequence of calls.
"""

from __future__ import annotations

import configparser
import contextlib
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dealer import ContractError, Dealer, ShuffleCorrelation, apply_perm, invert_perm
from .ring import FixedPointCodec
from .transport import PartyEndpoint


class UnknownKindError(KeyError):
    """No cost-model entry for the requested ideal functionality."""


# --- cost model ---------------------------------------------------------------


@dataclass(frozen=True)
class CostEntry:
    per_element: float = 0.0  # in units of C
    per_row: float = 0.0  # in units of C
    fixed: int = 0  # plain elements, not scaled by C
    rounds: int = 0


_DEFAULT_ENTRIES = {
    "compare": CostEntry(per_element=1, rounds=6),
    "relu": CostEntry(per_element=1, rounds=6),
    "softmax": CostEntry(per_element=1, per_row=1, rounds=12),
    "layernorm": CostEntry(per_element=0.25, per_row=1, rounds=8),
    "dp": CostEntry(per_element=1, rounds=6),
    "embed": CostEntry(rounds=1),
    "user_step": CostEntry(rounds=1),
    "oracle": CostEntry(),
    "trunc_fix": CostEntry(),
}


@dataclass
class IdealCostModel:
    """Elements charged per party for each dealer-assisted functionality.

    ``C`` is the cost of one secure comparison; entries are expressed as
    multiples of it, plus an optional fixed element count and a round count.
    """

    C: int = 64
    entries: dict = field(default_factory=lambda: dict(_DEFAULT_ENTRIES))

    def __post_init__(self):
        if self.C < 0:
            raise ValueError("C must be nonnegative")
        for k, e in self.entries.items():
            if min(e.per_element, e.per_row, e.fixed, e.rounds) < 0:
                raise ValueError(f"negative cost for {k!r}")

    def cost(self, kind: str, n_elements: int, n_rows: int = 0) -> tuple[int, int]:
        """``(elements per party, rounds)`` for one invocation."""
        try:
            e = self.entries[kind]
        except KeyError:
            raise UnknownKindError(kind) from None
        elems = math.ceil(self.C * (e.per_element * n_elements + e.per_row * n_rows)) + e.fixed
        if n_elements == 0 and n_rows == 0:
            return 0, 0
        return int(elems), int(e.rounds)

    @classmethod
    def from_file(cls, path) -> "IdealCostModel":
        """INI file: ``[model] C = 64`` plus one section per kind.

        Section keys: ``per_element``, ``per_row`` (multiples of C),
        ``fixed`` (elements) and ``rounds``.
        """
        cp = configparser.ConfigParser()
        text = Path(path).read_text()
        cp.read_string(text, source=str(path))
        C = cp.getint("model", "C", fallback=64)
        entries = dict(_DEFAULT_ENTRIES)
        allowed = {"per_element", "per_row", "fixed", "rounds"}
        for sec in cp.sections():
            if sec == "model":
                continue
            extra = set(cp[sec]) - allowed
            if extra:
                raise ValueError(f"{path}: unknown keys {sorted(extra)} in [{sec}]")
            base = entries.get(sec, CostEntry())
            entries[sec] = CostEntry(
                per_element=cp.getfloat(sec, "per_element", fallback=base.per_element),
                per_row=cp.getfloat(sec, "per_row", fallback=base.per_row),
                fixed=cp.getint(sec, "fixed", fallback=base.fixed),
                rounds=cp.getint(sec, "rounds", fallback=base.rounds),
            )
        return cls(C=C, entries=entries)


# --- session ------------------------------------------------------------------


class ProtocolSession:
    """One party's view: endpoint, dealer access, codec and current phase label."""

    def __init__(
        self,
        endpoint: PartyEndpoint,
        dealer: Dealer,
        codec: FixedPointCodec | None = None,
        cost_model: IdealCostModel | None = None,
        phase: str = "Online",
        trunc_method: str = "pair",
    ):
        if trunc_method not in ("pair", "local"):
            raise ValueError(f"unknown truncation method {trunc_method!r}")
        self.endpoint = endpoint
        self.dealer = dealer
        self.codec = codec or FixedPointCodec()
        self.ring = self.codec.ring
        self.cost_model = cost_model or IdealCostModel()
        self.phase = phase
        self.trunc_method = trunc_method
        self.stats: Counter = Counter()
        self.events: list = []
        self._corrs: dict[str, ShuffleCorrelation] = {}
        self._calls = 0

    @property
    def party(self) -> int:
        return self.endpoint.party_id

    @property
    def ledger(self):
        return self.endpoint.ledger

    @contextlib.contextmanager
    def phase_scope(self, phase: str):
        prev = self.phase
        self.phase = phase
        try:
            yield self
        finally:
            self.phase = prev

    def _label(self, what: str) -> str:
        self._calls += 1
        return f"{what}#{self._calls}@{self.phase}"

    def request(self, kind: str, *params, label: str = ""):
        return self.dealer.request(self.party, kind, *params, label=label)

    def exchange(self, payload):
        return self.endpoint.exchange(payload, self.phase)

    def ideal(self, kind: str, payload, fn, n_elements: int = 0, n_rows: int = 0):
        """Dealer-assisted evaluation of ``fn`` on the reconstructed ring value(s)."""
        elems, rounds = self.cost_model.cost(kind, n_elements, n_rows)
        self.stats[f"ideal:{kind}"] += 1
        return self.endpoint.ideal(kind, payload, self.phase, fn, charge=elems, rounds=rounds)

    def public_ideal(self, kind: str, payload, fn, n_elements: int = 0, n_rows: int = 0):
        elems, rounds = self.cost_model.cost(kind, n_elements, n_rows)
        self.stats[f"ideal:{kind}"] += 1
        return self.endpoint.public_ideal(kind, payload, self.phase, fn, charge=elems, rounds=rounds)

    def correlation(self, name: str, n: int) -> ShuffleCorrelation:
        """Fetch (once) this party's sub-permutations for the named shuffle."""
        corr = self._corrs.get(name)
        if corr is None:
            corr = self.request("shuffle_corr", name, int(n), label=self._label(f"corr:{name}"))
            self._corrs[name] = corr
        if corr.n != n:
            raise ContractError(f"shuffle {name!r} has length {corr.n}, payload has {n}")
        return corr


def open_shares(x: np.ndarray, session: ProtocolSession) -> np.ndarray:
    """Reveal a shared value to both parties (each sends its share)."""
    peer = session.exchange(x)
    return session.ring.add(x, peer)


# --- linear -------------------------------------------------------------------


def pi_linear(x, y, a, b, c, session: ProtocolSession) -> np.ndarray:
    """Local ``a*x + b*y + c``; only party 2 adds the public constant."""
    ring = session.ring
    x = ring.reduce(x)
    if y is None:
        y = np.zeros_like(x)
    y = ring.reduce(y)
    if x.shape != y.shape:
        raise ContractError(f"shape mismatch {x.shape} vs {y.shape}")
    z = ring.add(ring.mul(ring.reduce(a), x), ring.mul(ring.reduce(b), y))
    if session.party == 2:
        z = ring.add(z, ring.reduce(c))
    return z


def add_public(x, c, session: ProtocolSession) -> np.ndarray:
    return session.ring.add(x, c) if session.party == 2 else session.ring.reduce(x)


# --- multiplication -------------------------------------------------------------


def pi_matmul_many(pairs, session: ProtocolSession) -> list[np.ndarray]:
    """Independent Beaver matmuls sharing a single exchange round.

    Empty products (a zero dimension) consume no triple and send nothing; if
    every product is empty no round is spent either.
    """
    ring = session.ring
    pending, out = [], [None] * len(pairs)
    for idx, (X, Y) in enumerate(pairs):
        if X.ndim != 2 or Y.ndim != 2 or X.shape[1] != Y.shape[0]:
            raise ContractError(f"matmul shapes {X.shape} x {Y.shape}")
        if 0 in X.shape or 0 in Y.shape:
            out[idx] = ring.zeros((X.shape[0], Y.shape[1]))
            continue
        pending.append(idx)
    if not pending:
        return out
    triples, payload = [], []
    for idx in pending:
        X, Y = pairs[idx]
        t = session.request("beaver", X.shape, Y.shape, label=session._label("matmul"))
        triples.append(t)
        payload.append(ring.sub(X, t.A))
        payload.append(ring.sub(Y, t.B))
    peer = session.exchange(payload)
    for j, idx in enumerate(pending):
        X, Y = pairs[idx]
        t = triples[j]
        E = ring.add(payload[2 * j], peer[2 * j])
        F = ring.add(payload[2 * j + 1], peer[2 * j + 1])
        Z = ring.add(t.C, ring.add(ring.matmul(E, t.B), ring.matmul(t.A, F)))
        if session.party == 2:
            Z = ring.add(Z, ring.matmul(E, F))
        out[idx] = Z
        a, n = X.shape
        b = Y.shape[1]
        session.stats["matmuls"] += 1
        session.stats["dot_products"] += a * b
        session.stats["scalar_mults"] += a * n * b
    return out


def pi_matmul(X, Y, session: ProtocolSession) -> np.ndarray:
    """Shares of ``X @ Y``; per-party cost ``an + nb`` elements in one round."""
    return pi_matmul_many([(X, Y)], session)[0]


# --- truncation -----------------------------------------------------------------


def truncate(Z, session: ProtocolSession, f: int | None = None) -> np.ndarray:
    """Divide a shared fixed-point value by ``2^f`` (floor).

    ``pair`` method: open ``Z + r`` against a dealt pair ``(r, r >> f)``
    (one round, ``|Z|`` elements per party) and let the dealer patch the
    wrap-around carry so the result is exact. ``local`` method: no
    communication, off by at most one unit in the last place with
    overwhelming probability.
    """
    ring = session.ring
    f = session.codec.f if f is None else f
    Z = ring.reduce(Z)
    if f == 0 or Z.size == 0:
        return Z
    if session.trunc_method == "local":
        if session.party == 1:
            return ring.shift_right(Z, f)
        return ring.neg(ring.shift_right(ring.neg(Z), f))
    pair = session.request("trunc", Z.shape, f, label=session._label("trunc"))
    c_mine = ring.add(Z, pair.r)
    c = open_shares(c_mine, session)
    t = ring.neg(pair.r_low)
    if session.party == 1:
        t = ring.add(t, ring.logical_shift_right(c, f))

    def fix(vals):
        z, tt = vals
        return ring.sub(ring.shift_right(z, f), tt)

    delta = session.ideal("trunc_fix", [Z, t], fix)
    return ring.add(t, delta)


def pi_matmul_fixed(X, Y, session: ProtocolSession) -> np.ndarray:
    return truncate(pi_matmul(X, Y, session), session)


# --- oblivious shuffle --------------------------------------------------------------


def _shuffle_step(x, name: str, session: ProtocolSession, axis: int, inverse: bool) -> np.ndarray:
    ring = session.ring
    x = ring.reduce(x)
    n = x.shape[axis]
    corr = session.correlation(name, n)
    masks = session.request(
        "shuffle_masks", name, tuple(x.shape), axis, inverse,
        label=session._label("unshuffle" if inverse else "shuffle"),
    )
    a, b = masks.consume()
    if inverse:
        first, second = invert_perm(corr.rho), invert_perm(corr.tau)
    else:
        first, second = corr.tau, corr.rho
    y = ring.add(apply_perm(x, first, axis), a)
    y_peer = session.exchange(y)
    session.stats["shuffles"] += 1
    return ring.sub(apply_perm(y_peer, second, axis), b)


def pi_shuffle(x, name: str, session: ProtocolSession, axis: int = -1) -> np.ndarray:
    """Apply the dealer's hidden permutation ``name`` along ``axis``.

    One round; each party sends as many elements as ``x`` has.
    """
    return _shuffle_step(x, name, session, axis, inverse=False)


def pi_unshuffle(z, name: str, session: ProtocolSession, axis: int = -1) -> np.ndarray:
    """Inverse of :func:`pi_shuffle` for the same named correlation."""
    return _shuffle_step(z, name, session, axis, inverse=True)


# --- ideal non-linear functions ---------------------------------------------------------


def ideal_nonlinear(v, kind: str, session: ProtocolSession, delta: float = 0.0, valid=None) -> np.ndarray:
    """Dealer-assisted ``compare`` (strict ``> delta``, ring 0/1 output), ``relu`` or ``softmax``.

    ``softmax`` is taken over the last axis; ``valid`` is an optional public
    boolean mask of the same shape whose False entries get probability 0.
    """
    ring, codec = session.ring, session.codec
    v = ring.reduce(v)
    if kind == "compare":
        thr = int(codec.encode(delta))
        thr = np.int64(np.uint64(thr).view(np.int64))

        def fn(s):
            return (ring.to_signed(s) > thr).astype(np.uint64)

        return session.ideal("compare", v, fn, n_elements=v.size)
    if kind == "relu":

        def fn(s):
            return np.where(ring.to_signed(s) > 0, s, np.uint64(0)).astype(np.uint64)

        return session.ideal("relu", v, fn, n_elements=v.size)
    if kind == "softmax":
        mask = None if valid is None else np.broadcast_to(np.asarray(valid, dtype=bool), v.shape)
        n_elem = v.size if mask is None else int(mask.sum())
        rows = v.reshape(-1, v.shape[-1]) if mask is None else mask.reshape(-1, v.shape[-1])
        n_rows = rows.shape[0] if mask is None else int(rows.any(axis=-1).sum())

        def fn(s):
            return codec.encode(softmax_plain(codec.decode(s), mask))

        session.stats["softmax_rows"] += n_rows
        return session.ideal("softmax", v, fn, n_elements=n_elem, n_rows=n_rows)
    raise UnknownKindError(kind)


def softmax_plain(x: np.ndarray, valid=None) -> np.ndarray:
    """Row softmax over the last axis; entries with ``valid`` False get 0.

    Row sums use ``math.fsum`` so padding a row with invalid entries never
    changes the result.
    """
    x = np.asarray(x, dtype=np.float64)
    if valid is None:
        valid = np.ones(x.shape, dtype=bool)
    valid = np.broadcast_to(np.asarray(valid, dtype=bool), x.shape)
    xm = np.where(valid, x, -np.inf)
    m = np.max(xm, axis=-1, keepdims=True) if x.shape[-1] else np.zeros(x.shape[:-1] + (1,))
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.where(valid, np.exp(np.where(valid, x - m, 0.0)), 0.0)
    flat = e.reshape(-1, e.shape[-1]) if e.shape[-1] else e.reshape(-1, 0)
    sums = np.array([math.fsum(r) for r in flat], dtype=np.float64).reshape(e.shape[:-1] + (1,))
    return e / np.where(sums == 0, 1.0, sums)
