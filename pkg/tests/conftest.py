from __future__ import annotations

import numpy as np
import pytest

from sparsempc.dealer import Dealer, share_arrays
from sparsempc.protocols import ProtocolSession
from sparsempc.ring import RING64, FixedPointCodec
from sparsempc.transport import CostLedger, Network, run_parties


class TwoParty:
    """Runs ``program(session, party, *args)`` on both parties over a fresh network and dealer."""

    def __init__(self, seed=0, codec=None, trunc="pair", cost_model=None):
        self.ledger = CostLedger()
        self.network = Network(self.ledger, seed=seed)
        self.dealer = Dealer(seed)
        self.codec = codec or FixedPointCodec()
        self.trunc = trunc
        self.cost_model = cost_model
        self.sessions = {}

    def run(self, program, args1=(), args2=()):
        def prog(ep, *args):
            s = ProtocolSession(ep, self.dealer, self.codec, self.cost_model, trunc_method=self.trunc)
            self.sessions[ep.party_id] = s
            return program(s, ep.party_id, *args)

        return run_parties(self.network, prog, tuple(args1), tuple(args2))

    def run_shared(self, program, *secrets, rng=None):
        """Share each secret, run ``program(session, *shares)``, return reconstructed output."""
        rng = rng if rng is not None else np.random.default_rng(1)
        pairs = [share_arrays(s, rng, RING64) for s in secrets]
        r1, r2 = self.run(lambda s, p, *sh: program(s, *sh), [a for a, _ in pairs], [b for _, b in pairs])
        return reconstruct_tree(r1, r2)


def reconstruct_tree(a, b):
    if isinstance(a, (list, tuple)):
        return type(a)(reconstruct_tree(x, y) for x, y in zip(a, b))
    return RING64.add(a, b)


@pytest.fixture
def mpc():
    return TwoParty


@pytest.fixture
def codec():
    return FixedPointCodec()


_ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """``criterion(n, ok, detail)`` records and prints one PASS/FAIL line."""
    lines = request.config.stash.setdefault(_ACCEPTANCE_KEY, [])

    def record(n: int, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
