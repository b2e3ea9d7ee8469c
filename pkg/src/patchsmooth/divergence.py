"""Codebook score distributions and the KL/JS divergence kernels.

Conventions (fixed for the whole library):
  * natural logarithm everywhere, so JS is bounded by ln 2;
  * 0 * log 0 = 0;
  * KL(a || b) = +inf when some a_i > 0 has b_i = 0 (never clamped --
    a softmax weight of exp(-inf) is defined as 0 downstream);
  * distributions are renormalized on construction, never inside kernels;
  * accumulation is float64 regardless of storage precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, ValidationError

#: |sum(probs) - 1| tolerated when constructing a distribution directly.
SUM_TOLERANCE = 1e-6

#: Drift beyond which construction renormalizes. Below it values pass
#: through untouched, so reconstruction is bitwise stable and alpha = 0
#: smoothing is an exact identity; the residual keeps JS within its
#: ln 2 + 1e-12 bound.
RENORM_THRESHOLD = 1e-12

LN2 = float(np.log(2.0))


@dataclass(frozen=True)
class CodebookSpec:
    """The discrete token vocabulary a distribution ranges over."""

    size: int
    labels: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.size < 2:
            raise ValidationError(f"codebook size must be >= 2, got {self.size}")
        if self.labels is not None and len(self.labels) != self.size:
            raise ValidationError(
                f"{len(self.labels)} labels for codebook of size {self.size}"
            )


@dataclass(frozen=True)
class CodebookDistribution:
    """A probability vector over the codebook tokens.

    Entries are nonnegative and sum to 1; the stored array is float64 and
    write-protected so instances are safe to share across threads.
    """

    probs: np.ndarray = field(repr=False)

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.ndim != 1 or probs.size < 2:
            raise ValidationError(f"expected a 1-d vector of length >= 2, got shape {probs.shape}")
        if not np.all(np.isfinite(probs)):
            raise ValidationError("distribution contains non-finite entries")
        if np.any(probs < 0.0):
            raise ValidationError("distribution contains negative entries")
        total = float(probs.sum())
        if abs(total - 1.0) > SUM_TOLERANCE:
            raise ValidationError(f"probabilities sum to {total!r}, expected 1 within {SUM_TOLERANCE}")
        if abs(total - 1.0) > RENORM_THRESHOLD:
            probs = probs / total
        elif probs is self.probs:
            probs = probs.copy()  # don't freeze the caller's array
        probs.flags.writeable = False
        object.__setattr__(self, "probs", probs)

    @classmethod
    def from_scores(cls, values) -> "CodebookDistribution":
        """Normalize raw nonnegative scores of any positive total mass."""
        values = np.asarray(values, dtype=np.float64)
        if not np.all(np.isfinite(values)):
            raise ValidationError("scores contain non-finite entries")
        if np.any(values < 0.0):
            raise ValidationError("scores contain negative entries")
        total = float(values.sum())
        if total <= 0.0:
            raise ValidationError("scores have zero total mass")
        return cls(values / total)

    def __len__(self) -> int:
        return self.probs.size

    def argmax(self) -> int:
        """Index of the largest entry; ties resolve to the lowest token id."""
        return int(np.argmax(self.probs))


def _check_pair(a: CodebookDistribution, b: CodebookDistribution):
    if len(a) != len(b):
        raise DimensionError(f"distribution lengths differ: {len(a)} vs {len(b)}")


def kl_divergence(a: CodebookDistribution, b: CodebookDistribution) -> float:
    """KL(a || b) = sum a_i * ln(a_i / b_i), in nats.

    Returns +inf when b lacks support somewhere a has mass.
    """
    _check_pair(a, b)
    p, q = a.probs, b.probs
    support = p > 0.0
    if np.any(q[support] == 0.0):
        return float("inf")
    ps = p[support]
    # Log difference rather than log of the ratio: immune to ratio overflow
    # when q carries subnormal mass.
    value = float(np.sum(ps * (np.log(ps) - np.log(q[support]))))
    # Gibbs: true value is >= 0; rounding may leave a tiny negative residue.
    return max(value, 0.0)


def js_divergence(a: CodebookDistribution, b: CodebookDistribution) -> float:
    """Symmetric Jensen-Shannon divergence, in nats; bounded by ln 2.

    JS(a, b) = (KL(a || z) + KL(b || z)) / 2 with z = (a + b) / 2.
    """
    _check_pair(a, b)
    p, q = a.probs, b.probs
    z = (p + q) / 2.0
    total = _kl_against_midpoint(p, z) + _kl_against_midpoint(q, z)
    return max(0.5 * total, 0.0)


def _kl_against_midpoint(p: np.ndarray, z: np.ndarray) -> float:
    # Mathematically z_i >= p_i / 2, so z_i = 0 implies p_i = 0 -- except
    # when (p_i + q_i) / 2 underflows for subnormal p_i. That term's true
    # value is at most p_i * ln 2 ~ 1e-324, so dropping it is exact in
    # float64 and keeps JS finite, as it must be.
    support = (p > 0.0) & (z > 0.0)
    ps = p[support]
    return float(np.sum(ps * (np.log(ps) - np.log(z[support]))))


def pairwise_divergence(
    query: CodebookDistribution,
    pool: list[CodebookDistribution],
    kind: str = "js",
) -> np.ndarray:
    """Divergence of each pool entry against the query, order preserved.

    ``kind="kl"`` computes KL(pool_i || query); ``kind="js"`` the symmetric JS.
    An empty pool yields an empty vector. Results agree exactly with the
    corresponding scalar calls.
    """
    if kind not in ("js", "kl"):
        raise ValidationError(f"unknown divergence kind {kind!r}")
    fn = js_divergence if kind == "js" else kl_divergence
    return np.array([fn(entry, query) for entry in pool], dtype=np.float64)
