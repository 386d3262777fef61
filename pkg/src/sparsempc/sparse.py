"""Sparsity-aware protocols: shuffle-based indexing, SOMM, SIMM and DP masking.

Masks are public plaintext once revealed (in shuffled order). Component
discovery and index selection therefore run locally and identically on both
parties; only the block matmuls touch the network.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dealer import ContractError
from .protocols import ProtocolSession, open_shares, pi_matmul_many, pi_shuffle


class PredictorContractError(ValueError):
    """A revealed mask was not 0/1."""


class OrderTagError(ValueError):
    """A mask and the data it indexes are in different permutation states."""


# --- masks ----------------------------------------------------------------------


@dataclass
class SparsityMask:
    bits: np.ndarray
    order_tag: str = "original"

    def __post_init__(self):
        b = np.asarray(self.bits)
        if b.ndim not in (1, 2):
            raise ContractError("masks are vectors or matrices")
        if b.size and not np.isin(b, (0, 1)).all():
            raise PredictorContractError("mask entries must be 0 or 1")
        self.bits = b.astype(np.uint8)

    @property
    def matrix(self) -> np.ndarray:
        return self.bits if self.bits.ndim == 2 else self.bits[None, :]

    @property
    def rows(self) -> int:
        return self.matrix.shape[0]

    @property
    def cols(self) -> int:
        return self.matrix.shape[1]

    @property
    def nnz(self) -> int:
        return int(self.bits.sum())

    @property
    def sparsity(self) -> float:
        return 1.0 - self.nnz / self.bits.size if self.bits.size else 0.0

    def to_text(self) -> str:
        """Row-major 0/1 dump, one line per row."""
        return "\n".join("".join(str(int(v)) for v in row) for row in self.matrix) + "\n"

    @classmethod
    def from_text(cls, text: str, order_tag: str = "original") -> "SparsityMask":
        rows = [ln.strip() for ln in text.splitlines() if ln.strip()]
        if rows and len({len(r) for r in rows}) != 1:
            raise ContractError("ragged mask dump")
        bits = np.array([[int(c) for c in r] for r in rows], dtype=np.uint8)
        return cls(bits, order_tag)


@dataclass
class Component:
    rows: np.ndarray
    cols: np.ndarray
    edges: list = field(default_factory=list)


@dataclass
class BipartitePartition:
    shape: tuple
    components: list

    def __len__(self) -> int:
        return len(self.components)


def partition_components(mask) -> BipartitePartition:
    """Connected components of the row/column bipartite graph of ``mask``.

    Iterative DFS; components are ordered by their lowest row index and carry
    sorted row and column index arrays.
    """
    M = mask.matrix if isinstance(mask, SparsityMask) else np.atleast_2d(np.asarray(mask))
    m, p = M.shape
    row_adj = [np.flatnonzero(M[i]) for i in range(m)]
    colT = np.ascontiguousarray(M.T)
    col_adj = [np.flatnonzero(colT[j]) for j in range(p)]
    row_seen = np.zeros(m, dtype=bool)
    col_seen = np.zeros(p, dtype=bool)
    comps = []
    for start in range(m):
        if row_seen[start] or row_adj[start].size == 0:
            continue
        row_seen[start] = True
        stack = [(0, start)]
        rows, cols = [start], []
        while stack:
            side, node = stack.pop()
            if side == 0:
                nxt = row_adj[node][~col_seen[row_adj[node]]]
                col_seen[nxt] = True
                cols.extend(nxt.tolist())
                stack.extend((1, int(c)) for c in nxt)
            else:
                nxt = col_adj[node][~row_seen[col_adj[node]]]
                row_seen[nxt] = True
                rows.extend(nxt.tolist())
                stack.extend((0, int(r)) for r in nxt)
        r = np.array(sorted(rows), dtype=np.int64)
        c = np.array(sorted(cols), dtype=np.int64)
        sub = M[np.ix_(r, c)]
        ei, ej = np.nonzero(sub)
        comps.append(Component(r, c, list(zip(r[ei].tolist(), c[ej].tolist()))))
    return BipartitePartition((m, p), comps)


# --- closed-form costs (total elements over both parties) -------------------------


def gemm_cost(m: int, n: int, p: int) -> int:
    return 2 * (m * n + n * p)


def somm_cost(partition: BipartitePartition, n: int) -> int:
    return 2 * n * sum(len(c.rows) + len(c.cols) for c in partition.components)


def somm_dot_products(partition: BipartitePartition) -> int:
    return sum(len(c.rows) * len(c.cols) for c in partition.components)


def column_somm_cost(m: int, n: int, active_cols: int) -> int:
    """SOMM cost for a mask whose active columns are fully dense (one component)."""
    return 0 if active_cols == 0 or m == 0 else 2 * n * (m + active_cols)


def simm_cost(x_mask, p: int) -> int:
    M = x_mask.matrix if isinstance(x_mask, SparsityMask) else np.atleast_2d(np.asarray(x_mask))
    nnz = int(M.sum())
    k = int(np.count_nonzero(M.any(axis=0)))
    return 2 * (nnz + k * p)


def spgemm_output_cost(nnz_out: int, n: int) -> int:
    """One independent dot product (row and column both masked) per output nonzero."""
    return nnz_out * 2 * (n + n)


def spgemm_input_cost(nnz_in: int, p: int) -> int:
    """One independent (1x1)(1xp) product per input nonzero."""
    return nnz_in * 2 * (1 + p)


def classical_index_cost(n: int, m: int, C: int) -> int:
    """``(m log n + 2mn) C + 2mn`` with ``log`` rounded up to whole bits."""
    if not 0 <= m <= n:
        raise ValueError(f"need 0 <= m <= n, got m={m}, n={n}")
    if m == 0:
        return 0
    logn = math.ceil(math.log2(n)) if n > 1 else 0
    return (m * logn + 2 * m * n) * C + 2 * m * n


# --- SOMM / SIMM ----------------------------------------------------------------------


def pi_somm(X, Y, mask, session: ProtocolSession, partition: BipartitePartition | None = None) -> np.ndarray:
    """Shares of ``X @ Y`` at the mask's 1-positions and literal zero shares elsewhere.

    All component matmuls share one exchange round.
    """
    M = mask.matrix if isinstance(mask, SparsityMask) else np.atleast_2d(np.asarray(mask))
    m, n = X.shape
    if Y.shape[0] != n or M.shape != (m, Y.shape[1]):
        raise ContractError(f"SOMM shapes X{X.shape} Y{Y.shape} mask{M.shape}")
    part = partition if partition is not None else partition_components(M)
    pairs = [(X[c.rows, :], Y[:, c.cols]) for c in part.components]
    results = pi_matmul_many(pairs, session)
    Z = session.ring.zeros((m, Y.shape[1]))
    for c, R in zip(part.components, results):
        Z[np.ix_(c.rows, c.cols)] = R
    Z[M == 0] = 0
    session.stats["somm_calls"] += 1
    return Z


def simm_gather(x_mask) -> list[tuple[int, np.ndarray]]:
    """``(j, R_j)`` for every nonzero column ``j`` of the input mask."""
    M = x_mask.matrix if isinstance(x_mask, SparsityMask) else np.atleast_2d(np.asarray(x_mask))
    return [(int(j), np.flatnonzero(M[:, j])) for j in np.flatnonzero(M.any(axis=0))]


def pi_simm(X, Y, x_mask, session: ProtocolSession) -> np.ndarray:
    """Column-by-row product for sparse ``X`` (zero shares outside ``x_mask``).

    Each needed row of ``Y`` is masked and sent exactly once; its index is
    logged to ``session.events`` for transcript checks.
    """
    M = x_mask.matrix if isinstance(x_mask, SparsityMask) else np.atleast_2d(np.asarray(x_mask))
    m, n = X.shape
    if Y.shape[0] != n or M.shape != (m, n):
        raise ContractError(f"SIMM shapes X{X.shape} Y{Y.shape} mask{M.shape}")
    gather = simm_gather(M)
    pairs = [(X[R, j : j + 1], Y[j : j + 1, :]) for j, R in gather]
    session.events.extend(("simm_y_row", j) for j, _ in gather)
    results = pi_matmul_many(pairs, session)
    ring = session.ring
    Z = ring.zeros((m, Y.shape[1]))
    for (j, R), P in zip(gather, results):
        Z[R] = ring.add(Z[R], P)
    session.stats["simm_calls"] += 1
    return Z


def spgemm_output(X, Y, mask, session: ProtocolSession) -> np.ndarray:
    """Baseline: an independent Beaver dot product per output nonzero."""
    M = np.atleast_2d(mask.matrix if isinstance(mask, SparsityMask) else np.asarray(mask))
    idx = np.argwhere(M)
    pairs = [(X[i : i + 1, :], Y[:, j : j + 1]) for i, j in idx]
    res = pi_matmul_many(pairs, session)
    Z = session.ring.zeros(M.shape)
    for (i, j), r in zip(idx, res):
        Z[i, j] = r[0, 0]
    return Z


def spgemm_input(X, Y, x_mask, session: ProtocolSession) -> np.ndarray:
    """Baseline: an independent ``(1x1)(1xp)`` product per input nonzero."""
    M = np.atleast_2d(x_mask.matrix if isinstance(x_mask, SparsityMask) else np.asarray(x_mask))
    idx = np.argwhere(M)
    pairs = [(X[i : i + 1, j : j + 1], Y[j : j + 1, :]) for i, j in idx]
    res = pi_matmul_many(pairs, session)
    ring = session.ring
    Z = ring.zeros((M.shape[0], Y.shape[1]))
    for (i, _j), r in zip(idx, res):
        Z[i] = ring.add(Z[i], r[0])
    return Z


# --- shuffle-based indexing ------------------------------------------------------------


def reveal_shuffled_mask(s, name: str, session: ProtocolSession, axis: int = -1, reveal_phase: str | None = None) -> SparsityMask:
    """Shuffle the shared 0/1 vector(s) ``s`` with correlation ``name`` and open them."""
    z = pi_shuffle(s, name, session, axis=axis)
    if reveal_phase is None:
        bits = open_shares(z, session)
    else:
        with session.phase_scope(reveal_phase):
            bits = open_shares(z, session)
    if bits.size and not np.isin(bits, (0, 1)).all():
        raise PredictorContractError("revealed sparsity distribution is not 0/1")
    return SparsityMask(bits.astype(np.uint8), order_tag=f"shuffled:{name}")


def shuffle_index(X, mask: SparsityMask, x_order_tag: str, axis: int = -1) -> np.ndarray:
    """Local selection of the entries of ``X`` (along ``axis``) where the 1-D mask is 1."""
    if x_order_tag != mask.order_tag:
        raise OrderTagError(f"data is {x_order_tag!r}, mask is {mask.order_tag!r}")
    bits = mask.bits
    if bits.ndim != 1 or X.shape[axis] != bits.size:
        raise ContractError("shuffle_index needs a 1-D mask matching the indexed axis")
    return np.take(X, np.flatnonzero(bits), axis=axis)


def shuffle_index_pipeline(s, x, name: str, session: ProtocolSession, reveal_phase: str = "Reveal"):
    """Shuffle ``s`` and ``x`` under the same hidden permutation, reveal ``s``, select from ``x``.

    Returns ``(selected shares, revealed mask)``.
    """
    mask = reveal_shuffled_mask(s, name, session, reveal_phase=reveal_phase)
    xs = pi_shuffle(x, name, session)
    return shuffle_index(xs, mask, f"shuffled:{name}"), mask


# --- DP perturbation ---------------------------------------------------------------------


DP_DELTA = 2.0 ** -30


def dp_offset(epsilon: float, sensitivity: float = 1.0, delta: float = DP_DELTA) -> int:
    """Shift that keeps the truncated discrete Laplace nonnegative except with probability ``delta``."""
    return int(math.ceil((sensitivity / epsilon) * math.log(1.0 / (2.0 * delta))))


def dp_flip_count(epsilon: float, zeros: int, rng: np.random.Generator, sensitivity: float = 1.0) -> int:
    """Shifted, truncated discrete Laplace draw clamped to ``[0, min(2*offset, zeros)]``."""
    off = dp_offset(epsilon, sensitivity)
    p = 1.0 - math.exp(-epsilon / sensitivity)
    noise = int(rng.geometric(p)) - int(rng.geometric(p))
    return int(min(max(off + noise, 0), 2 * off, zeros))


def dp_flip_plain(bits: np.ndarray, epsilon: float, rng: np.random.Generator, sensitivity: float = 1.0) -> np.ndarray:
    """Turn a DP-sized random subset of the zeros of a 0/1 vector into ones."""
    out = np.asarray(bits).copy()
    zeros = np.flatnonzero(out == 0)
    k = dp_flip_count(epsilon, zeros.size, rng, sensitivity)
    if k:
        out[rng.choice(zeros, size=k, replace=False)] = 1
    return out


def apply_dp_perturbation(s, epsilon: float, session: ProtocolSession, sensitivity: float = 1.0) -> np.ndarray:
    """Shares of ``s OR p`` where ``p`` flips a noisy number of zeros; never clears a one.

    ``epsilon = inf`` disables the mechanism (no communication).
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    s = session.ring.reduce(s)
    if math.isinf(epsilon):
        return s
    session._label("dp")
    rng = np.random.default_rng([session.dealer.seed, 0xD9, session._calls])

    def fn(v):
        # one independent draw per mask row (per token)
        rows = np.atleast_2d(v)
        out = np.stack([dp_flip_plain(r, epsilon, rng, sensitivity) for r in rows])
        return out.astype(np.uint64).reshape(v.shape)

    return session.ideal("dp", s, fn, n_elements=s.size)
