"""Seeded, counter-based pseudo-randomness.

Every random draw in the simulator comes from an :class:`RngStream`, a
SplitMix64 generator keyed by ``(seed, label, client_index, round_index)``.
The output for counter ``i`` is ``mix64(key + (i+1) * GOLDEN)`` where
``mix64`` is the SplitMix64 finalizer (Steele, Lea & Flood 2014), so the
sequence is a pure function of the key and is byte-identical across
platforms and Python/numpy versions. The host RNG is never used.

Derived distributions are fixed constructions on top of the raw 64-bit
stream: floats take the top 53 bits, normals use Box-Muller pairs, gamma
uses the Marsaglia-Tsang squeeze method (with the alpha<1 boost), and
integer draws use rejection sampling to stay unbiased.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericError

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3

_U_GOLDEN = np.uint64(_GOLDEN)
_U_MIX1 = np.uint64(_MIX1)
_U_MIX2 = np.uint64(_MIX2)
_TWO_NEG53 = 2.0 ** -53


def _mix64_int(x: int) -> int:
    """SplitMix64 finalizer on a Python int (exact 64-bit wraparound)."""
    x &= _MASK
    x = ((x ^ (x >> 30)) * _MIX1) & _MASK
    x = ((x ^ (x >> 27)) * _MIX2) & _MASK
    return x ^ (x >> 31)


def _fnv1a(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _MASK
    return h


def _mix64_array(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        x = (x ^ (x >> np.uint64(30))) * _U_MIX1
        x = (x ^ (x >> np.uint64(27))) * _U_MIX2
        return x ^ (x >> np.uint64(31))


class RngStream:
    """One independently addressable random stream.

    Streams are single-owner: the protocol derives a fresh stream per
    (purpose, client, round) and never shares it across threads.
    """

    def __init__(self, seed: int, label: str, client: int = 0, round_index: int = 0):
        ident = f"{label}|{int(client)}|{int(round_index)}".encode()
        self.seed = int(seed) & _MASK
        self.stream_id = (label, int(client), int(round_index))
        self._key = np.uint64(_mix64_int(self.seed ^ _fnv1a(ident)))
        self._counter = 0

    def child(self, label: str, client: int = 0, round_index: int = 0) -> "RngStream":
        """Derive a sub-stream; the parent's draw position is unaffected."""
        base = f"{self.stream_id[0]}/{label}"
        return RngStream(self.seed, base, client, round_index)

    # raw draws ---------------------------------------------------------

    def raw(self, n: int) -> np.ndarray:
        """Next ``n`` raw uint64 words of the counter sequence."""
        counters = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
        self._counter += n
        with np.errstate(over="ignore"):
            x = self._key + counters * _U_GOLDEN
        return _mix64_array(x)

    # real-valued draws -------------------------------------------------

    def uniform(self, n: int) -> np.ndarray:
        """n floats in [0, 1)."""
        return (self.raw(n) >> np.uint64(11)).astype(np.float64) * _TWO_NEG53

    def _uniform_open(self, n: int) -> np.ndarray:
        """n floats in (0, 1]; safe as a log argument."""
        return ((self.raw(n) >> np.uint64(11)) + np.uint64(1)).astype(np.float64) * _TWO_NEG53

    def normal(self, n: int) -> np.ndarray:
        """n standard normals via Box-Muller pairs."""
        pairs = (n + 1) // 2
        u1 = self._uniform_open(pairs)
        u2 = self.uniform(pairs)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        out = np.empty(2 * pairs)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:n]

    def matrix(self, rows: int, cols: int, scale: float = 1.0) -> np.ndarray:
        """rows x cols matrix of N(0, scale^2) entries."""
        return (self.normal(rows * cols) * scale).reshape(rows, cols)

    def gamma(self, alpha: float) -> float:
        """One Gamma(alpha, 1) draw (Marsaglia-Tsang; boost trick for alpha < 1)."""
        if alpha <= 0.0:
            raise NumericError(f"gamma shape must be positive, got {alpha}")
        if alpha < 1.0:
            g = self.gamma(alpha + 1.0)
            u = float(self._uniform_open(1)[0])
            return g * u ** (1.0 / alpha)
        d = alpha - 1.0 / 3.0
        c = 1.0 / np.sqrt(9.0 * d)
        while True:
            x = float(self.normal(1)[0])
            v = (1.0 + c * x) ** 3
            if v <= 0.0:
                continue
            u = float(self._uniform_open(1)[0])
            if u < 1.0 - 0.0331 * x ** 4:
                return d * v
            if np.log(u) < 0.5 * x * x + d * (1.0 - v + np.log(v)):
                return d * v

    def dirichlet(self, alpha: float, n: int) -> np.ndarray:
        """One proportion vector from Dir(alpha * ones(n)), via normalized gammas."""
        for _ in range(10):
            draws = np.array([self.gamma(alpha) for _ in range(n)])
            total = draws.sum()
            if total > 0.0:
                return draws / total
        raise NumericError("dirichlet draw underflowed to zero 10 times")

    # integer draws -----------------------------------------------------

    def integer(self, bound: int) -> int:
        """One unbiased integer in [0, bound)."""
        if bound <= 0:
            raise NumericError(f"integer bound must be positive, got {bound}")
        threshold = (1 << 64) - ((1 << 64) % bound)
        while True:
            word = int(self.raw(1)[0])
            if word < threshold:
                return word % bound

    def shuffle(self, items: np.ndarray) -> np.ndarray:
        """Fisher-Yates shuffled copy."""
        out = np.array(items)
        for i in range(len(out) - 1, 0, -1):
            j = self.integer(i + 1)
            out[i], out[j] = out[j], out[i]
        return out

    def choice_without_replacement(self, n: int, size: int) -> np.ndarray:
        """``size`` distinct indices from range(n), in draw order."""
        if size > n:
            raise NumericError(f"cannot draw {size} distinct values from {n}")
        pool = np.arange(n)
        for i in range(size):
            j = i + self.integer(n - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:size].copy()
