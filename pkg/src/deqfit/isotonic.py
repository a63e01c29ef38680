"""Weight update by order-constrained estimation of Gamma scale parameters.

Squared residuals r_k^2 of one observed component follow, under the error
model, a Gamma distribution whose scale 1/w_k is nondecreasing in k. The
maximum-likelihood weights under that order constraint come from the greatest
convex minorant of the cumulative sum of r_k^2: its slopes are the pooled
block means, computed in O(K) by the pool-adjacent-violators sweep, and the
weights are the capped reciprocals of those slopes. The cap 1/gamma_j^2
implements the truncation of the order-constrained solution at the bound, and
zero-residual blocks (slope 0) saturate at the cap.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError


@dataclass(frozen=True)
class IsotonicResult:
    """Greatest-convex-minorant slopes of cumulative squared residuals.

    ``slopes`` is the nondecreasing isotonic fit (block means of r^2),
    ``mu`` the corresponding natural parameters -1/slope (-inf on zero-slope
    blocks), and ``blocks`` the pooled level sets as (start, stop) pairs.
    """

    slopes: np.ndarray
    mu: np.ndarray
    blocks: tuple[tuple[int, int], ...]


@dataclass(frozen=True)
class WeightMatrix:
    """Per-observation weights w[k, j], nonincreasing in k and capped.

    caps[j] = 1 / gamma_j^2 (or the lower-bound surrogate when the noise
    variance is unknown). The implied discretization-error variance is
    sigma_sq = 1/w - 1/caps, nonnegative and nondecreasing in k. Weights from
    the randomized-solver route carry no order constraint and are built with
    ``require_monotone=False``.
    """

    w: np.ndarray
    caps: np.ndarray
    require_monotone: bool = True

    def __post_init__(self):
        w = np.asarray(self.w, dtype=float)
        caps = np.asarray(self.caps, dtype=float)
        if w.ndim != 2 or caps.shape != (w.shape[1],):
            raise ConfigurationError(f"weight matrix {w.shape} / caps {caps.shape} mismatch")
        if np.any(caps <= 0.0) or np.any(w <= 0.0):
            raise ConfigurationError("weights and caps must be positive")
        if np.any(w > caps):
            raise ConfigurationError("weights exceed caps")
        if self.require_monotone and np.any(w[1:] > w[:-1]):
            raise ConfigurationError("weight columns must be nonincreasing")
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "caps", caps)

    @property
    def sigma_sq(self) -> np.ndarray:
        """Implied error variances 1/w - 1/caps (exactly zero where capped)."""
        return 1.0 / self.w - 1.0 / self.caps

    @staticmethod
    def constant(caps, n_obs: int) -> "WeightMatrix":
        """Weights pinned at the caps everywhere (numerics trusted fully)."""
        caps = np.asarray(caps, dtype=float)
        return WeightMatrix(w=np.tile(caps, (n_obs, 1)), caps=caps)


def gcm_slopes(sq_residuals) -> IsotonicResult:
    """Isotonic (nondecreasing) fit of squared residuals via stack PAVA.

    Equivalent to the slopes of the greatest convex minorant of the line
    graph through the cumulative sums (0, S_0), ..., (K, S_K). Adjacent
    blocks merge while the left mean exceeds the right mean; ties merge too,
    left to right, so the block structure is deterministic. Zeros are allowed
    and produce -inf entries in ``mu``.
    """
    r2 = np.asarray(sq_residuals, dtype=float)
    if r2.ndim != 1 or len(r2) == 0:
        raise ConfigurationError("need a non-empty 1-d array of squared residuals")
    if np.any(r2 < 0.0) or not np.isfinite(r2).all():
        raise ConfigurationError("squared residuals must be finite and nonnegative")

    sums: list[float] = []
    counts: list[int] = []
    for v in r2:
        s, c = float(v), 1
        # pool while the previous block mean >= the incoming mean
        while sums and sums[-1] * c >= s * counts[-1]:
            s += sums.pop()
            c += counts.pop()
        sums.append(s)
        counts.append(c)

    slopes = np.empty(len(r2))
    blocks = []
    pos = 0
    for s, c in zip(sums, counts):
        slopes[pos:pos + c] = s / c
        blocks.append((pos, pos + c))
        pos += c
    with np.errstate(divide="ignore"):
        mu = -1.0 / slopes
    return IsotonicResult(slopes=slopes, mu=mu, blocks=tuple(blocks))


def update_weights(sq_residuals, caps) -> WeightMatrix:
    """Optimal order-constrained weights for given squared residuals.

    Columns are independent: for each observed component j the isotonic
    slopes of r^2[:, j] are inverted and clipped at caps[j]. The result is
    the exact minimizer of the weight sub-problem of the joint objective,
    with columns nonincreasing and bounded by the caps.
    """
    r2 = np.asarray(sq_residuals, dtype=float)
    if r2.ndim == 1:
        r2 = r2[:, None]
    caps = np.atleast_1d(np.asarray(caps, dtype=float))
    if caps.shape != (r2.shape[1],):
        raise ConfigurationError(f"caps shape {caps.shape} does not match {r2.shape[1]} columns")
    if np.any(caps <= 0.0):
        raise ConfigurationError("caps must be positive")
    w = np.empty_like(r2)
    for j in range(r2.shape[1]):
        slopes = gcm_slopes(r2[:, j]).slopes
        with np.errstate(divide="ignore"):
            w[:, j] = np.minimum(1.0 / slopes, caps[j])
    return WeightMatrix(w=w, caps=caps)
