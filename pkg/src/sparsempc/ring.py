"""Wrapping arithmetic over Z_{2^k} and fixed-point encoding.

Ring elements live in ``numpy.uint64`` arrays. For ``k < 64`` every result is
masked back into ``[0, 2^k)``; for ``k = 64`` numpy's own unsigned overflow
already is the ring reduction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class RangeError(ValueError):
    """A real value is outside the representable fixed-point range."""


class Ring:
    """The ring Z_{2^k} over uint64 storage."""

    def __init__(self, k: int = 64):
        if not 1 <= k <= 64:
            raise ValueError(f"ring bit width must be in [1, 64], got {k}")
        self.k = k
        self.modulus = 1 << k
        self._mask = np.uint64(self.modulus - 1)

    def __repr__(self) -> str:
        return f"Ring(k={self.k})"

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Ring) and other.k == self.k

    def __hash__(self) -> int:
        return hash(("Ring", self.k))

    def reduce(self, x) -> np.ndarray:
        if isinstance(x, np.ndarray) and x.dtype == np.uint64:
            a = x
        elif isinstance(x, np.ndarray) and x.dtype.kind in "iub":
            a = x.astype(np.int64).astype(np.uint64) if x.dtype.kind == "i" else x.astype(np.uint64)
        else:
            a = np.asarray(_to_uint64_obj(x, self.modulus), dtype=np.uint64)
        if self.k < 64:
            a = a & self._mask
        return a

    def _wrap(self, a: np.ndarray) -> np.ndarray:
        return a & self._mask if self.k < 64 else a

    def add(self, a, b) -> np.ndarray:
        return self._wrap(np.add(self.reduce(a), self.reduce(b)))

    def sub(self, a, b) -> np.ndarray:
        return self._wrap(np.subtract(self.reduce(a), self.reduce(b)))

    def mul(self, a, b) -> np.ndarray:
        return self._wrap(np.multiply(self.reduce(a), self.reduce(b)))

    def neg(self, a) -> np.ndarray:
        return self._wrap(np.subtract(np.uint64(0), self.reduce(a)))

    def matmul(self, a, b) -> np.ndarray:
        return self._wrap(np.matmul(self.reduce(a), self.reduce(b)))

    def zeros(self, shape) -> np.ndarray:
        return np.zeros(shape, dtype=np.uint64)

    def random(self, rng: np.random.Generator, shape) -> np.ndarray:
        """Uniform ring elements."""
        a = rng.integers(0, 1 << 64, size=shape, dtype=np.uint64, endpoint=False)
        return self._wrap(a)

    def to_signed(self, a) -> np.ndarray:
        """Two's-complement interpretation as int64."""
        a = self.reduce(a)
        if self.k == 64:
            return a.view(np.int64)
        v = a.astype(np.int64)
        half = np.int64(1 << (self.k - 1))
        return np.where(v >= half, v - np.int64(self.modulus), v)

    def from_signed(self, v) -> np.ndarray:
        v = np.asarray(v)
        if v.dtype.kind == "f":
            raise TypeError("from_signed expects integers")
        return self._wrap(v.astype(np.int64).astype(np.uint64))

    def shift_right(self, a, f: int) -> np.ndarray:
        """Arithmetic (floor) shift of the signed interpretation."""
        if f == 0:
            return self.reduce(a)
        return self.from_signed(np.right_shift(np.asarray(self.to_signed(a)), f))

    def logical_shift_right(self, a, f: int) -> np.ndarray:
        return self.reduce(a) >> np.uint64(f)


def _to_uint64_obj(x, modulus: int):
    # Python ints (possibly negative or > 2^63) reduced exactly before numpy sees them.
    if isinstance(x, (int, np.integer)):
        return int(x) % modulus
    if isinstance(x, (list, tuple)):
        return [_to_uint64_obj(v, modulus) for v in x]
    arr = np.asarray(x)
    if arr.dtype.kind == "f":
        raise TypeError("ring values must be integers; encode reals with FixedPointCodec")
    if arr.dtype == object:
        return [_to_uint64_obj(v, modulus) for v in arr.tolist()]
    return arr


RING64 = Ring(64)


def ring_arith(a, b, op: str, ring: Ring = RING64) -> np.ndarray:
    """Exact modular ``add``/``sub``/``mul``/``neg`` (``b`` ignored for neg)."""
    if op == "add":
        return ring.add(a, b)
    if op == "sub":
        return ring.sub(a, b)
    if op == "mul":
        return ring.mul(a, b)
    if op == "neg":
        return ring.neg(a)
    raise ValueError(f"unknown ring op {op!r}")


@dataclass(frozen=True)
class FixedPointCodec:
    """Reals as ``round(r * 2^f) mod 2^k``, signed two's-complement."""

    k: int = 64
    f: int = 16

    def __post_init__(self):
        if not 0 <= self.f < self.k:
            raise ValueError(f"need 0 <= f < k, got f={self.f}, k={self.k}")

    @property
    def ring(self) -> Ring:
        return RING64 if self.k == 64 else Ring(self.k)

    @property
    def scale(self) -> int:
        return 1 << self.f

    @property
    def bound(self) -> float:
        """Encodable reals satisfy ``|r| < bound``."""
        return float(1 << (self.k - self.f - 1))

    def encode(self, r) -> np.ndarray:
        r = np.asarray(r, dtype=np.float64)
        if not np.all(np.isfinite(r)):
            raise RangeError("cannot encode non-finite value")
        if np.any(np.abs(r) >= self.bound):
            worst = float(np.max(np.abs(r)))
            raise RangeError(f"|{worst}| outside representable range (-{self.bound}, {self.bound})")
        # |scaled| < 2^63 here, so the int64 cast is exact
        scaled = np.rint(r * self.scale)
        return self.ring.from_signed(scaled.astype(np.int64))

    def decode(self, v) -> np.ndarray:
        return np.asarray(self.ring.to_signed(v), dtype=np.float64) / self.scale

    def truncate(self, v) -> np.ndarray:
        """Plaintext rescale after a product of two encodings."""
        return self.ring.shift_right(v, self.f)


def encode_fixed(r, codec: FixedPointCodec = FixedPointCodec()) -> np.ndarray:
    return codec.encode(r)


def decode_fixed(v, codec: FixedPointCodec = FixedPointCodec()) -> np.ndarray:
    return codec.decode(v)
