"""Sound interval arithmetic on numpy arrays.

Every primitive rounds its result outward: one ulp on each side for the
rational operations (IEEE arithmetic is correctly rounded, so half an ulp
would suffice), two ulps for library functions (exp, tanh, ...) whose
implementations are only faithfully rounded.  Enclosures therefore never
shrink below the exact real-number result, which is what the certifier
and the reach engines rely on.

All operations act elementwise on pairs of equally-shaped float64 arrays
``(lo, hi)`` and are inclusion monotone: tightening the inputs never
widens the output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_NEG_INF = np.float64(-np.inf)
_POS_INF = np.float64(np.inf)


class DomainError(ValueError):
    """An evaluation left the mathematical domain (sqrt of negative, x/0)."""


def _down(x, steps: int = 1):
    for _ in range(steps):
        x = np.nextafter(x, _NEG_INF)
    return x


def _up(x, steps: int = 1):
    for _ in range(steps):
        x = np.nextafter(x, _POS_INF)
    return x


def _outward(lo, hi, steps: int = 1):
    return _down(lo, steps), _up(hi, steps)


def iadd(alo, ahi, blo, bhi):
    return _outward(alo + blo, ahi + bhi)


def isub(alo, ahi, blo, bhi):
    return _outward(alo - bhi, ahi - blo)


def ineg(lo, hi):
    return -hi, -lo


def imul(alo, ahi, blo, bhi):
    p1, p2, p3, p4 = alo * blo, alo * bhi, ahi * blo, ahi * bhi
    lo = np.minimum(np.minimum(p1, p2), np.minimum(p3, p4))
    hi = np.maximum(np.maximum(p1, p2), np.maximum(p3, p4))
    return _outward(lo, hi)


def iscale(lo, hi, c: float):
    """Multiply by an exact scalar."""
    if c >= 0.0:
        return _outward(lo * c, hi * c)
    return _outward(hi * c, lo * c)


def idiv(alo, ahi, blo, bhi):
    if np.any((blo <= 0.0) & (bhi >= 0.0)):
        raise DomainError("interval division by an interval containing zero")
    q1, q2, q3, q4 = alo / blo, alo / bhi, ahi / blo, ahi / bhi
    lo = np.minimum(np.minimum(q1, q2), np.minimum(q3, q4))
    hi = np.maximum(np.maximum(q1, q2), np.maximum(q3, q4))
    return _outward(lo, hi)


def isquare(lo, hi):
    # dedicated rule: [-1,1]^2 = [0,1], not [-1,1]
    mag = np.maximum(np.abs(lo), np.abs(hi))
    straddles = (lo <= 0.0) & (hi >= 0.0)
    mn = np.where(straddles, 0.0, np.minimum(np.abs(lo), np.abs(hi)))
    return _outward(mn * mn, mag * mag)


def ipow_nat(lo, hi, n: int):
    if n < 0:
        raise DomainError("only natural-number exponents are supported")
    if n == 0:
        return np.ones_like(lo), np.ones_like(hi)
    if n == 1:
        return lo, hi
    if n % 2 == 0:
        mag = np.maximum(np.abs(lo), np.abs(hi))
        straddles = (lo <= 0.0) & (hi >= 0.0)
        mn = np.where(straddles, 0.0, np.minimum(np.abs(lo), np.abs(hi)))
        return _outward(mn**n, mag**n)
    return _outward(lo**n, hi**n)


# Outward-rounding artifacts can push a mathematically nonnegative bound a
# hair below zero; sqrt tolerates that much and no more.
_SQRT_SLACK = 1e-12


def isqrt(lo, hi):
    if np.any(hi < -_SQRT_SLACK) or np.any(lo < -_SQRT_SLACK):
        raise DomainError("sqrt of an interval extending below zero")
    lo = np.maximum(lo, 0.0)
    hi = np.maximum(hi, 0.0)
    return np.maximum(_down(np.sqrt(lo), 2), 0.0), _up(np.sqrt(hi), 2)


def icbrt(lo, hi):
    return _down(np.cbrt(lo), 2), _up(np.cbrt(hi), 2)


def icbrt_sq(lo, hi):
    """Fused cbrt(x^2): even, decreasing then increasing, exact at 0."""
    mag = np.maximum(np.abs(lo), np.abs(hi))
    straddles = (lo <= 0.0) & (hi >= 0.0)
    mn = np.where(straddles, 0.0, np.minimum(np.abs(lo), np.abs(hi)))
    out_lo = np.maximum(_down(np.cbrt(mn * mn), 2), 0.0)
    return out_lo, _up(np.cbrt(mag * mag), 2)


def iexp(lo, hi):
    return np.maximum(_down(np.exp(lo), 2), 0.0), _up(np.exp(hi), 2)


def itanh(lo, hi):
    return np.maximum(_down(np.tanh(lo), 2), -1.0), np.minimum(_up(np.tanh(hi), 2), 1.0)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def isigmoid(lo, hi):
    s_lo = _sigmoid(np.asarray(lo, dtype=np.float64))
    s_hi = _sigmoid(np.asarray(hi, dtype=np.float64))
    return np.maximum(_down(s_lo, 2), 0.0), np.minimum(_up(s_hi, 2), 1.0)


def irelu(lo, hi):
    return np.maximum(lo, 0.0), np.maximum(hi, 0.0)


def istep(lo, hi):
    # step(x) = 1 if x > 0 else 0; monotone, so endpoints suffice
    return np.where(lo > 0.0, 1.0, 0.0), np.where(hi > 0.0, 1.0, 0.0)


def isigmoid_prime(lo, hi):
    """Enclosure of sigmoid'(x) = s(x)(1-s(x)); unimodal with max 1/4 at 0."""
    s_lo, s_hi = _sigmoid(np.asarray(lo, dtype=np.float64)), _sigmoid(np.asarray(hi, dtype=np.float64))
    d_lo, d_hi = s_lo * (1.0 - s_lo), s_hi * (1.0 - s_hi)
    straddles = (lo <= 0.0) & (hi >= 0.0)
    out_hi = np.where(straddles, 0.25, np.maximum(d_lo, d_hi))
    out_lo = np.minimum(d_lo, d_hi)
    return np.maximum(_down(out_lo, 2), 0.0), np.minimum(_up(out_hi, 2), 0.25)


def itanh_prime(lo, hi):
    """Enclosure of tanh'(x) = 1 - tanh(x)^2; unimodal with max 1 at 0."""
    t_lo, t_hi = np.tanh(lo), np.tanh(hi)
    d_lo, d_hi = 1.0 - t_lo * t_lo, 1.0 - t_hi * t_hi
    straddles = (lo <= 0.0) & (hi >= 0.0)
    out_hi = np.where(straddles, 1.0, np.maximum(d_lo, d_hi))
    out_lo = np.minimum(d_lo, d_hi)
    return np.maximum(_down(out_lo, 2), 0.0), np.minimum(_up(out_hi, 2), 1.0)


def imatvec(w: np.ndarray, lo: np.ndarray, hi: np.ndarray):
    """Enclosure of {W x : x in box}, batched over the leading axes of lo/hi.

    ``w`` is an exact (p, q) matrix, lo/hi have shape (..., q).
    """
    wp = np.maximum(w, 0.0)
    wn = np.minimum(w, 0.0)
    out_lo = lo @ wp.T + hi @ wn.T
    out_hi = hi @ wp.T + lo @ wn.T
    return _outward(out_lo, out_hi)


def imatmat(alo, ahi, blo, bhi):
    """Interval matrix product [A] @ [B] for (p,q) x (q,r) interval matrices."""
    p1 = np.einsum("ik,kj->ikj", alo, blo)
    p2 = np.einsum("ik,kj->ikj", alo, bhi)
    p3 = np.einsum("ik,kj->ikj", ahi, blo)
    p4 = np.einsum("ik,kj->ikj", ahi, bhi)
    lo = np.minimum(np.minimum(p1, p2), np.minimum(p3, p4)).sum(axis=1)
    hi = np.maximum(np.maximum(p1, p2), np.maximum(p3, p4)).sum(axis=1)
    return _outward(lo, hi, 2)


def iivec_matvec(mlo, mhi, lo, hi):
    """Interval matrix times interval vector: ([M] x)_i for a box x."""
    p1 = mlo * lo[None, :]
    p2 = mlo * hi[None, :]
    p3 = mhi * lo[None, :]
    p4 = mhi * hi[None, :]
    out_lo = np.minimum(np.minimum(p1, p2), np.minimum(p3, p4)).sum(axis=1)
    out_hi = np.maximum(np.maximum(p1, p2), np.maximum(p3, p4)).sum(axis=1)
    return _outward(out_lo, out_hi, 2)


@dataclass(frozen=True)
class IntervalBox:
    """Axis-aligned box: per-dimension closed intervals [lo_i, hi_i]."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.array(self.lo, dtype=np.float64).reshape(-1)
        hi = np.array(self.hi, dtype=np.float64).reshape(-1)
        if lo.shape != hi.shape:
            raise ValueError("lo/hi dimension mismatch")
        if np.any(lo > hi):
            raise ValueError(f"empty interval: lo={lo} > hi={hi}")
        lo.flags.writeable = False
        hi.flags.writeable = False
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def from_bounds(cls, bounds) -> "IntervalBox":
        arr = np.asarray(bounds, dtype=np.float64)
        return cls(arr[:, 0], arr[:, 1])

    @property
    def dim(self) -> int:
        return self.lo.shape[0]

    @property
    def width(self) -> np.ndarray:
        return self.hi - self.lo

    @property
    def midpoint(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    def contains(self, x: np.ndarray, atol: float = 0.0) -> bool:
        x = np.asarray(x, dtype=np.float64)
        return bool(np.all(x >= self.lo - atol) and np.all(x <= self.hi + atol))

    def contains_box(self, other: "IntervalBox", atol: float = 0.0) -> bool:
        return bool(np.all(other.lo >= self.lo - atol) and np.all(other.hi <= self.hi + atol))

    def intersect(self, other: "IntervalBox"):
        lo = np.maximum(self.lo, other.lo)
        hi = np.minimum(self.hi, other.hi)
        if np.any(lo > hi):
            return None
        return IntervalBox(lo, hi)

    def hull(self, other: "IntervalBox") -> "IntervalBox":
        return IntervalBox(np.minimum(self.lo, other.lo), np.maximum(self.hi, other.hi))

    def sample(self, m: int, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(self.lo, self.hi, size=(m, self.dim))

    def __repr__(self) -> str:
        parts = ", ".join(f"[{a:g}, {b:g}]" for a, b in zip(self.lo, self.hi))
        return f"IntervalBox({parts})"
