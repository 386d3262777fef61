"""Lockstep two-party network with an exact communication ledger.

Both parties run as threads. Every synchronized event (an exchange of ring
elements, or a call into a dealer-assisted ideal functionality) is paired by
its per-party sequence number, so the k-th event of party 1 always meets the
k-th event of party 2 no matter how the threads are scheduled.
"""

from __future__ import annotations

import threading
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

PARTIES = (1, 2)

# Phases that happen before any input is known; excluded from online totals.
OFFLINE_PHASES = frozenset({"Setup"})

BANDWIDTH_PRESETS = {
    "100Mbps": 100e6,
    "500Mbps": 500e6,
    "1Gbps": 1e9,
    "5Gbps": 5e9,
}


class ProtocolDesyncError(RuntimeError):
    """The two parties disagreed on what the current round is."""


class NetworkAborted(RuntimeError):
    """The peer failed; this party's pending exchange will never complete."""


Payload = "np.ndarray | Sequence[np.ndarray]"


def payload_size(payload) -> int:
    if payload is None:
        return 0
    if isinstance(payload, np.ndarray):
        return int(payload.size)
    return sum(payload_size(p) for p in payload)


def _structure(payload):
    if payload is None:
        return None
    if isinstance(payload, np.ndarray):
        return ("array", payload.shape)
    return tuple(_structure(p) for p in payload)


@dataclass
class CostLedger:
    """Per-party, per-phase element counts and per-phase round counts."""

    elements_sent: dict = field(default_factory=lambda: defaultdict(int))
    elements_received: dict = field(default_factory=lambda: defaultdict(int))
    rounds: dict = field(default_factory=lambda: defaultdict(int))
    phase_order: list = field(default_factory=list)

    def _touch(self, phase: str) -> None:
        if phase not in self.phase_order:
            self.phase_order.append(phase)

    def add_sent(self, party: int, phase: str, n: int) -> None:
        if n < 0:
            raise ValueError("element counts only increase")
        self._touch(phase)
        self.elements_sent[(party, phase)] += n

    def add_received(self, party: int, phase: str, n: int) -> None:
        self._touch(phase)
        self.elements_received[(party, phase)] += n

    def add_round(self, phase: str, n: int = 1) -> None:
        self._touch(phase)
        self.rounds[phase] += n

    def reattribute(self, party: int, src: str, dst: str, n: int) -> None:
        """Move ``n`` already-sent elements of ``party`` from one phase label to another.

        Used when one exchange carries traffic belonging to two logical phases
        (a merged cache-refill batch riding on the current token's QKV matmul).
        """
        if n == 0:
            return
        if self.elements_sent[(party, src)] < n:
            raise ValueError(f"cannot move {n} elements out of {src!r}")
        self._touch(dst)
        self.elements_sent[(party, src)] -= n
        self.elements_sent[(party, dst)] += n
        peer = 3 - party
        self.elements_received[(peer, src)] -= n
        self.elements_received[(peer, dst)] += n

    def phases(self) -> list[str]:
        return list(self.phase_order)

    def sent(self, party: int | None = None, phase: str | None = None, online_only: bool = True) -> int:
        total = 0
        for (p, ph), n in self.elements_sent.items():
            if party is not None and p != party:
                continue
            if phase is not None and ph != phase:
                continue
            if phase is None and online_only and ph in OFFLINE_PHASES:
                continue
            total += n
        return total

    def total(self, online_only: bool = True) -> int:
        """Elements sent by both parties."""
        return self.sent(online_only=online_only)

    def total_rounds(self, online_only: bool = True) -> int:
        return sum(r for ph, r in self.rounds.items() if not (online_only and ph in OFFLINE_PHASES))

    def snapshot(self) -> dict:
        return {
            "sent": dict(self.elements_sent),
            "received": dict(self.elements_received),
            "rounds": dict(self.rounds),
        }

    def by_phase(self, online_only: bool = True) -> dict[str, int]:
        out: dict[str, int] = {}
        for ph in self.phase_order:
            if online_only and ph in OFFLINE_PHASES:
                continue
            out[ph] = self.sent(phase=ph)
        return out


@dataclass(frozen=True)
class LedgerRow:
    phase: str
    party: int
    elements: int
    bytes: int
    rounds: int
    wall_time_s: float


def wall_time(rounds: int, n_bytes: int, bandwidth_bps: float, rtt_s: float) -> float:
    """``rounds * RTT + bits / bandwidth``."""
    return rounds * rtt_s + 8.0 * n_bytes / bandwidth_bps


def ledger_report(
    ledger: CostLedger,
    k: int = 64,
    bandwidth: str | float = "5Gbps",
    rtt_s: float = 0.0005,
    online_only: bool = False,
) -> list[LedgerRow]:
    """One row per (phase, party) plus ``TOTAL`` rows over online phases."""
    bw = BANDWIDTH_PRESETS[bandwidth] if isinstance(bandwidth, str) else float(bandwidth)
    elem_bytes = k // 8 if k % 8 == 0 else k / 8
    rows = []
    for ph in ledger.phase_order:
        if online_only and ph in OFFLINE_PHASES:
            continue
        for party in PARTIES:
            n = ledger.elements_sent[(party, ph)]
            b = int(n * elem_bytes)
            r = ledger.rounds[ph]
            rows.append(LedgerRow(ph, party, n, b, r, wall_time(r, b, bw, rtt_s)))
    for party in PARTIES:
        n = ledger.sent(party=party)
        b = int(n * elem_bytes)
        r = ledger.total_rounds()
        rows.append(LedgerRow("TOTAL", party, n, b, r, wall_time(r, b, bw, rtt_s)))
    return rows


@dataclass
class _Slot:
    arrivals: dict = field(default_factory=dict)
    results: dict = field(default_factory=dict)
    done: bool = False


class Network:
    """In-process two-party transport.

    ``ideal_rng(seq)`` supplies the randomness used when an ideal
    functionality re-shares its output; by default it is derived from
    ``seed`` and the event sequence number, so replays are bit-identical.
    """

    def __init__(self, ledger: CostLedger | None = None, seed: int = 0, timeout: float = 300.0, ring=None):
        from .ring import RING64

        self.ledger = ledger if ledger is not None else CostLedger()
        self.seed = seed
        self.timeout = timeout
        self.ring = ring if ring is not None else RING64
        self._cv = threading.Condition()
        self._seq = {1: 0, 2: 0}
        self._slots: dict[int, _Slot] = {}
        self._aborted: BaseException | None = None
        self.events = 0

    def endpoint(self, party: int) -> "PartyEndpoint":
        if party not in PARTIES:
            raise ValueError(f"party must be 1 or 2, got {party}")
        return PartyEndpoint(self, party)

    def abort(self, exc: BaseException) -> None:
        with self._cv:
            if self._aborted is None:
                self._aborted = exc
            self._cv.notify_all()

    def reset_abort(self) -> None:
        with self._cv:
            self._aborted = None
            self._seq = {1: 0, 2: 0}
            self._slots.clear()

    def ideal_rng(self, seq: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, 0x1DEA1, seq])

    def _rendezvous(self, party: int, arrival: tuple, complete: Callable[[int, dict], dict]):
        with self._cv:
            if self._aborted is not None:
                raise NetworkAborted("network aborted") from self._aborted
            seq = self._seq[party]
            self._seq[party] += 1
            slot = self._slots.setdefault(seq, _Slot())
            slot.arrivals[party] = arrival
            if len(slot.arrivals) == 2:
                try:
                    slot.results = complete(seq, slot.arrivals)
                except BaseException as exc:  # noqa: BLE001 - both sides must see it
                    slot.results = {1: exc, 2: exc}
                slot.done = True
                self.events += 1
                self._cv.notify_all()
            else:
                ok = self._cv.wait_for(lambda: slot.done or self._aborted is not None, timeout=self.timeout)
                if not slot.done:
                    if self._aborted is not None:
                        raise NetworkAborted("peer failed") from self._aborted
                    raise TimeoutError(f"party {party} waited {self.timeout}s at event {seq}")
                del ok
            out = slot.results.pop(party)
            if not slot.results:
                del self._slots[seq]
        if isinstance(out, BaseException):
            raise out
        return out

    def _exchange(self, party: int, payload, phase: str):
        def complete(seq, arrivals):
            (k1, ph1, p1), (k2, ph2, p2) = arrivals[1], arrivals[2]
            if (k1, ph1) != (k2, ph2):
                raise ProtocolDesyncError(
                    f"event {seq}: party 1 at {k1}/{ph1!r}, party 2 at {k2}/{ph2!r}"
                )
            if _structure(p1) != _structure(p2):
                raise ProtocolDesyncError(f"event {seq}: payload structures differ in phase {ph1!r}")
            n1, n2 = payload_size(p1), payload_size(p2)
            self.ledger.add_sent(1, ph1, n1)
            self.ledger.add_sent(2, ph1, n2)
            self.ledger.add_received(1, ph1, n2)
            self.ledger.add_received(2, ph1, n1)
            self.ledger.add_round(ph1)
            return {1: p2, 2: p1}

        return self._rendezvous(party, ("exchange", phase, payload), complete)

    def _ideal(self, party: int, kind: str, payload, phase: str, fn, charge: int, rounds: int):
        def complete(seq, arrivals):
            (k1, ph1, p1, f1, c1, r1), (k2, ph2, p2, _f2, c2, r2) = arrivals[1], arrivals[2]
            if (k1, ph1, c1, r1) != (k2, ph2, c2, r2):
                raise ProtocolDesyncError(
                    f"event {seq}: ideal call mismatch {(k1, ph1, c1, r1)} vs {(k2, ph2, c2, r2)}"
                )
            secret = _reconstruct_tree(self.ring, p1, p2)
            value = f1(secret)
            rng = self.ideal_rng(seq)
            s1, s2 = _reshare_tree(self.ring, value, rng)
            if charge:
                self.ledger.add_sent(1, ph1, charge)
                self.ledger.add_sent(2, ph1, charge)
                self.ledger.add_received(1, ph1, charge)
                self.ledger.add_received(2, ph1, charge)
            if rounds:
                self.ledger.add_round(ph1, rounds)
            return {1: s1, 2: s2}

        return self._rendezvous(party, (f"ideal:{kind}", phase, payload, fn, charge, rounds), complete)

    def _public_ideal(self, party: int, kind: str, payload, phase: str, fn, charge: int, rounds: int):
        """Ideal call whose output is public (given identically to both parties)."""

        def complete(seq, arrivals):
            (k1, ph1, p1, f1, c1, r1), (k2, ph2, p2, _f2, c2, r2) = arrivals[1], arrivals[2]
            if (k1, ph1, c1, r1) != (k2, ph2, c2, r2):
                raise ProtocolDesyncError(f"event {seq}: public ideal call mismatch")
            secret = _reconstruct_tree(self.ring, p1, p2)
            value = f1(secret)
            if charge:
                for p in PARTIES:
                    self.ledger.add_sent(p, ph1, charge)
                    self.ledger.add_received(p, ph1, charge)
            if rounds:
                self.ledger.add_round(ph1, rounds)
            return {1: value, 2: value}

        return self._rendezvous(party, (f"public:{kind}", phase, payload, fn, charge, rounds), complete)


def _reconstruct_tree(ring, a, b):
    if a is None:
        return None
    if isinstance(a, np.ndarray):
        return ring.add(a, b)
    return [_reconstruct_tree(ring, x, y) for x, y in zip(a, b)]


def _reshare_tree(ring, value, rng):
    if value is None:
        return None, None
    if isinstance(value, np.ndarray):
        s1 = ring.random(rng, value.shape)
        return s1, ring.sub(value, s1)
    pairs = [_reshare_tree(ring, v, rng) for v in value]
    return [p[0] for p in pairs], [p[1] for p in pairs]


class PartyEndpoint:
    """One party's handle on the network."""

    def __init__(self, network: Network, party_id: int):
        self.network = network
        self.party_id = party_id

    @property
    def ledger(self) -> CostLedger:
        return self.network.ledger

    @property
    def peer_id(self) -> int:
        return 3 - self.party_id

    def exchange(self, payload, phase: str):
        """Send ``payload`` to the peer and return the peer's payload.

        Both parties must call this for the same phase at the same point in
        their programs; anything else raises :class:`ProtocolDesyncError`.
        """
        return self.network._exchange(self.party_id, payload, phase)

    def ideal(self, kind: str, payload, phase: str, fn, charge: int = 0, rounds: int = 0):
        """Hand shares to a dealer-assisted functionality; receive fresh shares of ``fn(secret)``.

        ``charge`` elements per party and ``rounds`` rounds are booked to the
        ledger as the modeled cost of a real protocol for ``kind``.
        """
        return self.network._ideal(self.party_id, kind, payload, phase, fn, charge, rounds)

    def public_ideal(self, kind: str, payload, phase: str, fn, charge: int = 0, rounds: int = 0):
        return self.network._public_ideal(self.party_id, kind, payload, phase, fn, charge, rounds)

    def reattribute(self, src: str, dst: str, n: int) -> None:
        """Move ``n`` of this party's sent elements between phase labels."""
        with self.network._cv:
            self.network.ledger.reattribute(self.party_id, src, dst, n)


def run_parties(network: Network, program: Callable[..., Any], args1: tuple = (), args2: tuple = (), kwargs1=None, kwargs2=None):
    """Run ``program(endpoint, *args)`` for both parties; return ``(result1, result2)``."""
    results: dict[int, Any] = {}
    errors: dict[int, BaseException] = {}

    def worker(party, args, kwargs):
        try:
            results[party] = program(network.endpoint(party), *args, **(kwargs or {}))
        except BaseException as exc:  # noqa: BLE001
            errors[party] = exc
            network.abort(exc)

    threads = [
        threading.Thread(target=worker, args=(1, args1, kwargs1), name="party-1", daemon=True),
        threading.Thread(target=worker, args=(2, args2, kwargs2), name="party-2", daemon=True),
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        network.reset_abort()
        primary = [e for e in errors.values() if not isinstance(e, NetworkAborted)]
        raise (primary[0] if primary else next(iter(errors.values())))
    return results[1], results[2]
