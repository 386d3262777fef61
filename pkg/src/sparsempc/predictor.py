"""Low-rank activation-sparsity predictor: ``bit_j = [W2 (W1 x + b1) + b2]_j > delta``."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dealer import ContractError, share_arrays
from .protocols import ProtocolSession, ideal_nonlinear, pi_matmul, truncate
from .ring import FixedPointCodec


@dataclass
class PredictorWeights:
    W1: np.ndarray  # r x h
    b1: np.ndarray  # r
    W2: np.ndarray  # o x r
    b2: np.ndarray  # o
    delta: float = 0.0
    granularity: str = "neuron"

    def __post_init__(self):
        self.W1 = np.asarray(self.W1, dtype=np.float64)
        self.W2 = np.asarray(self.W2, dtype=np.float64)
        self.b1 = np.asarray(self.b1, dtype=np.float64).reshape(-1)
        self.b2 = np.asarray(self.b2, dtype=np.float64).reshape(-1)
        r, h = self.W1.shape
        o, r2 = self.W2.shape
        if r2 != r or self.b1.size != r or self.b2.size != o:
            raise ContractError(f"inconsistent predictor shapes W1{self.W1.shape} W2{self.W2.shape}")
        if not r < min(h, o):
            raise ContractError(f"rank r={r} must be below min(h={h}, o={o})")
        if not all(np.all(np.isfinite(a)) for a in (self.W1, self.W2, self.b1, self.b2)):
            raise ContractError("predictor weights must be finite")
        if self.granularity not in ("neuron", "head"):
            raise ContractError(f"unknown granularity {self.granularity!r}")

    @property
    def dims(self) -> tuple[int, int, int]:
        """``(h, r, o)``."""
        return self.W1.shape[1], self.W1.shape[0], self.W2.shape[0]

    def save(self, path, f: int = 16) -> None:
        h, r, o = self.dims
        vals = np.concatenate([self.W1.ravel(), self.b1, self.W2.ravel(), self.b2])
        lines = [f"{h} {r} {o} {self.delta!r} {f}"]
        lines += [" ".join(repr(float(v)) for v in vals[i : i + 8]) for i in range(0, vals.size, 8)]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path, granularity: str = "neuron") -> "PredictorWeights":
        text = Path(path).read_text().split("\n", 1)
        head = text[0].split()
        if len(head) != 5:
            raise ContractError(f"{path}: header must be 'h r o delta f'")
        h, r, o = (int(v) for v in head[:3])
        delta = float(head[3])
        vals = np.array(text[1].split() if len(text) > 1 else [], dtype=np.float64)
        need = r * h + r + o * r + o
        if vals.size != need:
            raise ContractError(f"{path}: expected {need} values for h={h} r={r} o={o}, found {vals.size}")
        i = 0
        W1 = vals[i : i + r * h].reshape(r, h); i += r * h
        b1 = vals[i : i + r]; i += r
        W2 = vals[i : i + o * r].reshape(o, r); i += o * r
        b2 = vals[i : i + o]
        return cls(W1, b1, W2, b2, delta, granularity)


@dataclass
class PredictionResult:
    mask: np.ndarray
    granularity: str = "neuron"

    def __post_init__(self):
        self.mask = np.asarray(self.mask).astype(np.uint8)
        if self.mask.size and not np.isin(self.mask, (0, 1)).all():
            raise ContractError("prediction bits must be 0/1")


def _as_batch(x, h: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    if x2.shape[1] != h:
        raise ContractError(f"input width {x2.shape[1]} != predictor width {h}")
    return x2, single


def predictor_scores_fixed(w: PredictorWeights, x_enc: np.ndarray, codec: FixedPointCodec) -> np.ndarray:
    """Pre-threshold scores in the ring, mirroring the MPC pipeline step by step."""
    ring = codec.ring
    W1t, W2t = codec.encode(w.W1.T), codec.encode(w.W2.T)
    hmid = ring.add(codec.truncate(ring.matmul(x_enc, W1t)), codec.encode(w.b1))
    return ring.add(codec.truncate(ring.matmul(hmid, W2t)), codec.encode(w.b2))


def predict_plain(w: PredictorWeights, x, codec: FixedPointCodec | None = None) -> PredictionResult:
    """Strict threshold ``score > delta``; in fixed point when ``codec`` is given."""
    h = w.dims[0]
    x2, single = _as_batch(x, h)
    if codec is None:
        scores = (x2 @ w.W1.T + w.b1) @ w.W2.T + w.b2
        bits = scores > w.delta
    else:
        x_enc = x2 if x2.dtype == np.uint64 else codec.encode(x2)
        s = codec.ring.to_signed(predictor_scores_fixed(w, x_enc, codec))
        bits = s > np.int64(codec.ring.to_signed(codec.encode(w.delta)))
    bits = bits.astype(np.uint8)
    return PredictionResult(bits[0] if single else bits, w.granularity)


@dataclass
class SharedPredictor:
    """One party's shares of the encoded predictor (transposed for ``X @ W``)."""

    W1t: np.ndarray  # h x r
    b1: np.ndarray
    W2t: np.ndarray  # r x o
    b2: np.ndarray
    delta: float
    granularity: str


def share_predictor(w: PredictorWeights, codec: FixedPointCodec, rng) -> tuple[SharedPredictor, SharedPredictor]:
    parts = [share_arrays(codec.encode(a), rng, codec.ring) for a in (w.W1.T, w.b1, w.W2.T, w.b2)]
    return tuple(
        SharedPredictor(*(p[i] for p in parts), w.delta, w.granularity) for i in (0, 1)
    )


def predict_mpc(X, sp: SharedPredictor, session: ProtocolSession, phase: str | None = "Predictor") -> np.ndarray:
    """Shares of the 0/1 mask for the batch ``X`` (T x h shares, or a length-h vector).

    matmul, truncate, add bias, matmul, truncate, add bias, compare.
    """
    ring = session.ring
    single = X.ndim == 1
    X2 = X[None, :] if single else X

    def body():
        Hm = truncate(pi_matmul(X2, sp.W1t, session), session)
        Hm = ring.add(Hm, sp.b1[None, :])
        S = truncate(pi_matmul(Hm, sp.W2t, session), session)
        S = ring.add(S, sp.b2[None, :])
        return ideal_nonlinear(S, "compare", session, delta=sp.delta)

    if phase is None:
        bits = body()
    else:
        with session.phase_scope(phase):
            bits = body()
    return bits[0] if single else bits


def predictor_cost(h: int, r: int, o: int, C: int, batch: int = 1, truncation: bool = True) -> int:
    """Total elements (both parties) of :func:`predict_mpc` with pair truncation."""
    t = batch
    first = t * h + h * r + (t * r if truncation else 0)
    second = t * r + r * o + (t * o if truncation else 0)
    return 2 * (first + second) + 2 * t * o * C


# --- ground truth ----------------------------------------------------------------


def oracle_sparsity(layer, x, kind: str, delta_oracle: float = 0.0) -> PredictionResult:
    """Ground-truth mask from an exact plaintext layer evaluation.

    ``ffn_relu``: ``layer`` has ``W1`` (h x f_w) and ``b1``; bit = ReLU output > 0.
    ``mha_headnorm``: ``layer`` is a callable ``x -> head outputs (T, H, d)``;
    bit = L2 norm of the head output > ``delta_oracle``.
    """
    x2 = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if kind == "ffn_relu":
        pre = x2 @ np.asarray(layer["W1"]) + np.asarray(layer.get("b1", 0.0))
        bits = np.maximum(pre, 0.0) > 0
        gran = "neuron"
    elif kind == "mha_headnorm":
        heads = np.asarray(layer(x2), dtype=np.float64)
        bits = np.linalg.norm(heads, axis=-1) > delta_oracle
        gran = "head"
    else:
        raise ContractError(f"unknown oracle kind {kind!r}")
    bits = bits.astype(np.uint8)
    return PredictionResult(bits[0] if np.ndim(x) == 1 else bits, gran)


def precision_recall(pred, truth) -> tuple[float, float]:
    """Precision and recall over bits; a vacuous ratio (0/0) counts as 1."""
    p = np.asarray(pred.mask if isinstance(pred, PredictionResult) else pred).astype(bool).ravel()
    t = np.asarray(truth.mask if isinstance(truth, PredictionResult) else truth).astype(bool).ravel()
    if p.size != t.size:
        raise ContractError(f"length mismatch {p.size} vs {t.size}")
    tp = int(np.sum(p & t))
    npred, ntrue = int(p.sum()), int(t.sum())
    precision = tp / npred if npred else 1.0
    recall = tp / ntrue if ntrue else 1.0
    return precision, recall


# --- synthetic predictors -------------------------------------------------------------


def fit_lowrank(X: np.ndarray, T: np.ndarray, r: int, ridge: float = 1e-6) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Rank-``r`` affine map ``X -> T``: returns ``(W1 r x h, W2 o x r, b2)``.

    Ridge least squares on centered data, then truncated SVD of the map.
    """
    xm, tm = X.mean(axis=0), T.mean(axis=0)
    Xc, Tc = X - xm, T - tm
    h = X.shape[1]
    B = np.linalg.solve(Xc.T @ Xc + ridge * np.eye(h), Xc.T @ Tc)  # h x o
    U, S, Vt = np.linalg.svd(B, full_matrices=False)
    W1 = U[:, :r].T  # r x h
    W2 = (Vt[:r].T * S[:r])  # o x r
    b2 = tm - W2 @ (W1 @ xm)
    return W1, W2, b2


def calibrate_delta(scores: np.ndarray, truth: np.ndarray, target_recall: float) -> float:
    """Threshold whose recall on ``(scores, truth)`` is at least ``target_recall``.

    It sits halfway between the k-th lowest positive score and the next lower
    score, so a fixed-point evaluation of the same scores keeps the margin.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    truth = np.asarray(truth).astype(bool).ravel()
    pos = np.sort(scores[truth])
    if pos.size == 0:
        return float(np.max(scores))
    k = int(np.floor((1.0 - target_recall) * pos.size))
    edge = pos[min(k, pos.size - 1)]
    below = scores[scores < edge]
    if below.size == 0:
        return float(edge - max(1.0, abs(edge)))
    return float((edge + below.max()) / 2)


def synthetic_predictor(
    X: np.ndarray,
    targets: np.ndarray,
    truth: np.ndarray,
    r: int,
    target_recall: float = 0.95,
    granularity: str = "neuron",
) -> PredictorWeights:
    """Fit a rank-``r`` predictor of ``targets`` and set ``delta`` for the requested recall."""
    W1, W2, b2 = fit_lowrank(X, targets, r)
    scores = (X @ W1.T) @ W2.T + b2
    delta = calibrate_delta(scores, truth, target_recall)
    return PredictorWeights(W1, np.zeros(r), W2, b2, delta, granularity)
