"""Batched distributions on integer lattices.

A :class:`Lattice` holds one probability vector per time node, all on
the common support ``lo, lo+1, ..., lo+n-1``. Sums and differences of
independent counts become FFT convolutions along the last axis.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from scipy import fft as sfft


def n_workers() -> int:
    """Worker cap for FFTs, from ``QNET_THREADS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("QNET_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class Lattice:
    lo: int
    p: np.ndarray  # (S, n)

    @property
    def n(self) -> int:
        return self.p.shape[1]

    @property
    def hi(self) -> int:
        return self.lo + self.n - 1

    @property
    def support(self) -> np.ndarray:
        return np.arange(self.lo, self.lo + self.n)

    @classmethod
    def point(cls, rows: int, value: int = 0) -> "Lattice":
        return cls(int(value), np.ones((rows, 1)))

    def negated(self) -> "Lattice":
        return Lattice(-self.hi, self.p[:, ::-1])

    def rows(self, idx) -> "Lattice":
        return Lattice(self.lo, self.p[idx])

    def mean(self) -> np.ndarray:
        return self.p @ self.support

    def positive_part(self) -> "Lattice":
        """Law of ``max(X, 0)``."""
        if self.lo >= 0:
            return self
        if self.hi <= 0:
            return Lattice(0, self.p.sum(axis=1, keepdims=True))
        cut = -self.lo
        out = self.p[:, cut:].copy()
        out[:, 0] += self.p[:, :cut].sum(axis=1)
        return Lattice(0, out)

    def mass_below(self, value: int) -> np.ndarray:
        k = min(max(value - self.lo, 0), self.n)
        return self.p[:, :k].sum(axis=1)

    def prob_of(self, values) -> np.ndarray:
        """``P(X_s = values[s])`` per row; zero outside the support."""
        values = np.asarray(values)
        k = values - self.lo
        ok = (k >= 0) & (k < self.n)
        out = np.zeros(len(self.p))
        rows = np.nonzero(ok)[0]
        out[rows] = self.p[rows, k[rows]]
        return out


def convolve(a: Lattice, b: Lattice) -> Lattice:
    """Law of ``A + B`` for independent ``A``, ``B`` (row by row)."""
    if a.n == 1:
        return Lattice(a.lo + b.lo, b.p * a.p)
    if b.n == 1:
        return Lattice(a.lo + b.lo, a.p * b.p)
    m = a.n + b.n - 1
    nf = sfft.next_fast_len(m, real=True)
    w = n_workers()
    out = sfft.irfft(sfft.rfft(a.p, nf, axis=1, workers=w) * sfft.rfft(b.p, nf, axis=1, workers=w),
                     nf, axis=1, workers=w)[:, :m]
    np.maximum(out, 0.0, out=out)
    return Lattice(a.lo + b.lo, out)


def convolve_all(parts, rows: int) -> Lattice:
    out = Lattice.point(rows, 0)
    for part in parts:
        out = convolve(out, part)
    return out


def shifted_expectations(z: Lattice, hs: np.ndarray, hlo: int, coef: int, ny: int) -> np.ndarray:
    """``E[h(Z + coef*y)]`` for ``y = 0..ny-1`` and every row.

    ``hs`` stacks functions tabulated on ``hlo, hlo+1, ...`` with shape
    (m, S, nh) and must cover every value ``Z + coef*y`` can take.
    Returns shape (m, S, ny).
    """
    hs = np.asarray(hs, dtype=float)
    m, S, nh = hs.shape
    off = z.lo - hlo
    lo_needed = off + min(0, coef * (ny - 1))
    hi_needed = off + z.n - 1 + max(0, coef * (ny - 1))
    if lo_needed < 0 or hi_needed > nh - 1:
        raise ValueError("tabulated function does not cover the shifted support")
    if coef == 0:
        vals = np.einsum("sk,msk->ms", z.p, hs[:, :, off:off + z.n])
        return np.repeat(vals[:, :, None], ny, axis=2)
    if z.n == 1:
        idx = off + coef * np.arange(ny)
        return hs[:, :, idx] * z.p[None, :, :1]
    L = z.n + nh - 1
    nf = sfft.next_fast_len(L, real=True)
    w = n_workers()
    fz = sfft.rfft(z.p[:, ::-1], nf, axis=1, workers=w)
    full = sfft.irfft(fz[None] * sfft.rfft(hs, nf, axis=2, workers=w), nf, axis=2, workers=w)
    idx = off + coef * np.arange(ny) + z.n - 1
    return full[:, :, idx]


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())
