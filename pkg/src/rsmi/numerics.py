"""Special functions, seeded randomness, the vote gate and certification formulas."""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np
from scipy.special import erfc

logger = logging.getLogger(__name__)

PROB_CLAMP = 1e-9
MAX_EXACT_K0 = 64

_MASK64 = (1 << 64) - 1

# Acklam's rational approximation for the normal quantile.
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


def _mix64(*parts: int) -> int:
    """SplitMix64-style fold of integers into one 64-bit word."""
    z = 0x9E3779B97F4A7C15
    for p in parts:
        z = (z ^ (p & _MASK64)) & _MASK64
        z = (z + 0x9E3779B97F4A7C15) & _MASK64
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        z ^= z >> 31
    return z


class RngStream:
    """Counter-based random stream keyed by ``(seed, stream_id)``.

    Backed by the Philox-4x64 generator with the 128-bit key
    ``seed | stream_id << 64`` and a zero starting counter, so a given pair
    always replays the same sequence. Normal variates come from the inverse
    normal CDF applied to 53-bit uniforms on the open interval (0, 1).
    """

    def __init__(self, seed: int, stream_id: int = 0):
        if not (0 <= seed <= _MASK64 and 0 <= stream_id <= _MASK64):
            raise ValueError("seed and stream_id must be unsigned 64-bit integers")
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        bitgen = np.random.Philox(key=self.seed | (self.stream_id << 64))
        self._gen = np.random.Generator(bitgen)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"

    def substream(self, *path: int | str) -> "RngStream":
        """Independent child stream; ``path`` elements are ints or short labels."""
        ints = [p if isinstance(p, int) else _label_to_int(p) for p in path]
        return RngStream(self.seed, _mix64(self.stream_id, *ints))

    def uniform(self, n: int) -> np.ndarray:
        bits = self._gen.integers(0, 1 << 53, size=n, dtype=np.uint64)
        return (bits.astype(np.float64) + 0.5) * (1.0 / (1 << 53))

    def normal(self, n: int, sigma: float = 1.0) -> np.ndarray:
        return gaussian_vector(self, n, sigma)

    def integers(self, high: int, size: int | None = None):
        return self._gen.integers(0, high, size=size)

    def choice(self, n: int, k: int) -> np.ndarray:
        """``k`` distinct indices from ``range(n)``, uniformly."""
        return self._gen.choice(n, size=k, replace=False)


def _label_to_int(label: str) -> int:
    out = 0
    for b in label.encode("utf-8"):
        out = _mix64(out, b)
    return out


def gaussian_vector(rng: RngStream, n: int, sigma: float) -> np.ndarray:
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    if n < 0:
        raise ValueError("n must be non-negative")
    u = rng.uniform(n)
    if sigma == 0:
        return np.zeros(n)
    return sigma * _ppf(u, refine=False)


def gaussian_rows(rngs, counts, sigma: float) -> np.ndarray:
    """Concatenated ``gaussian_vector(rngs[i], counts[i], sigma)`` with one quantile call."""
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    u = np.concatenate([r.uniform(int(n)) for r, n in zip(rngs, counts)])
    if sigma == 0:
        return np.zeros(len(u))
    return sigma * _ppf(u, refine=False)


def norm_cdf(x):
    """Standard normal CDF, vectorised."""
    return 0.5 * erfc(-np.asarray(x, dtype=np.float64) / math.sqrt(2.0))


def _ppf(p: np.ndarray, refine: bool = True) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    x = np.empty_like(p)
    lo = p < _P_LOW
    hi = p > 1 - _P_LOW
    mid = ~(lo | hi)

    q = p[mid] - 0.5
    r = q * q
    num = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q
    den = ((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1
    x[mid] = num / den

    for sel, sign, tail in ((lo, 1.0, p[lo]), (hi, -1.0, 1 - p[hi])):
        q = np.sqrt(-2 * np.log(tail))
        num = ((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]
        den = (((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1
        x[sel] = sign * num / den

    if not refine:
        return x
    # one Halley step brings the ~1e-9 relative error down to rounding level
    e = norm_cdf(x) - p
    u = e * math.sqrt(2 * math.pi) * np.exp(0.5 * x * x)
    return x - u / (1 + 0.5 * x * u)


def inv_norm_cdf(p):
    """Quantile function of the standard normal distribution.

    Accepts a scalar or array; raises ``ValueError`` outside the open unit
    interval.
    """
    arr = np.asarray(p, dtype=np.float64)
    if np.any(~((arr > 0) & (arr < 1))):
        raise ValueError(f"inv_norm_cdf is defined on (0, 1), got {p!r}")
    out = _ppf(np.atleast_1d(arr)).reshape(arr.shape)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class VoteGate:
    k0: int = 5
    alpha: float = 0.98

    def __post_init__(self):
        if self.k0 < 1:
            raise ValueError("k0 must be >= 1")
        if self.k0 > MAX_EXACT_K0:
            raise ValueError(f"k0 > {MAX_EXACT_K0} is not supported by the exact binomial CDF")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")


class Decision(str, enum.Enum):
    ACCEPT = "accept"
    ESCALATE = "escalate"


def binom_cdf_half(n_a: int, k0: int) -> Fraction:
    """Exact P(X <= n_a) for X ~ Binomial(k0, 1/2)."""
    if not 0 <= n_a <= k0:
        raise ValueError(f"need 0 <= n_a <= k0, got n_a={n_a}, k0={k0}")
    return Fraction(sum(math.comb(k0, i) for i in range(n_a + 1)), 1 << k0)


def binom_consensus(n_a: int, gate: VoteGate) -> Decision:
    """Accept the first vote when the lower-tail binomial CDF exceeds alpha.

    With ``k0=5, alpha=0.98`` only a unanimous vote is accepted.
    """
    cdf = binom_cdf_half(n_a, gate.k0)
    return Decision.ACCEPT if cdf > Fraction(gate.alpha) else Decision.ESCALATE


@dataclass(frozen=True)
class RadiusInput:
    sigma_embed: float
    p_a: float
    p_b: float
    sigma_layers: Sequence[float] = field(default_factory=tuple)


def clamp_probability(p: float) -> float:
    return min(max(p, PROB_CLAMP), 1 - PROB_CLAMP)


def layer_factors(sigma_layers: Sequence[float]) -> list[float]:
    return [1.0 + s * s for s in sigma_layers]


def certified_radius(inp: RadiusInput) -> float:
    """L2 radius for a smoothed classifier with noise at several layers.

    ``prod(1 + s_l**2) / (2 * sigma_embed) * (ppf(p_a) - ppf(p_b))``.
    """
    if inp.sigma_embed <= 0:
        raise ValueError("sigma_embed must be > 0 for a finite radius")
    if any(s < 0 for s in inp.sigma_layers):
        raise ValueError("layer sigmas must be non-negative")
    for name, p in (("p_a", inp.p_a), ("p_b", inp.p_b)):
        if not 0 <= p <= 1:
            raise ValueError(f"{name}={p} is not a probability")
    if inp.p_a < inp.p_b:
        raise ValueError("p_a must be >= p_b")
    if inp.p_a + inp.p_b > 1 + 1e-12:
        raise ValueError("p_a + p_b must not exceed 1")
    p_a, p_b = clamp_probability(inp.p_a), clamp_probability(inp.p_b)
    if (p_a, p_b) != (inp.p_a, inp.p_b):
        logger.warning("probabilities clamped to [%g, %g]", PROB_CLAMP, 1 - PROB_CLAMP)
    if p_a == p_b:
        return 0.0
    scale = math.prod(layer_factors(inp.sigma_layers)) / (2.0 * inp.sigma_embed)
    return scale * (inv_norm_cdf(p_a) - inv_norm_cdf(p_b))


def lipschitz_scan(f: Callable[[float], float], lo: float, hi: float, steps: int,
                   vectorized: bool = False) -> float:
    """Largest finite-difference slope of ``f`` on a uniform grid (a lower bound).

    With ``vectorized=True`` the whole grid is passed to ``f`` in one call.
    """
    if not lo < hi:
        raise ValueError("need lo < hi")
    if steps < 2:
        raise ValueError("need steps >= 2")
    xs = np.linspace(lo, hi, steps + 1)
    if vectorized:
        ys = np.asarray(f(xs), dtype=np.float64)
        if ys.shape != xs.shape:
            raise ValueError("vectorized f must return one value per grid point")
    else:
        ys = np.array([f(x) for x in xs], dtype=np.float64)
    return float(np.max(np.abs(np.diff(ys)) / np.diff(xs)))


def smoothed_step(sigma: float, threshold: float = 0.0) -> Callable[[float], float]:
    """Unit step at ``threshold`` convolved with N(0, sigma^2), i.e. ``Phi((x-t)/sigma)``."""
    def h(x):
        out = norm_cdf((np.asarray(x, dtype=np.float64) - threshold) / sigma)
        return float(out) if out.ndim == 0 else out
    return h


def smoothing_lipschitz_bound(sigma: float) -> float:
    """sqrt(2 / (pi sigma^2)), the bound for a [0,1]-valued map smoothed at scale sigma."""
    return math.sqrt(2.0 / (math.pi * sigma * sigma))
