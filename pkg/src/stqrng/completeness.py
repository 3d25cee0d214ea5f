"""Completeness error from binomial tail bounds, and tolerance calibration.

An honest device aborts when some category count exceeds
floor(n gamma (omega_c + delta_c)).  The upper tail of Bin(n, gamma omega_c)
beyond that count is bounded through the lower bound on the binomial CDF
F(n, p, k) = Phi(sign(k/n - p) sqrt(2 n D(k/n, p))).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .core import ScoreDistribution, ScoreLabel


def kl_bernoulli(q: float, p: float) -> float:
    """D(q, p) in nats, with 0 ln 0 = 0.

    Written with log1p around the difference q - p so that the O((q-p)^2)
    value survives cancellation when q is close to p.
    """
    if not 0.0 < p < 1.0:
        raise ValueError(f"p must lie in (0, 1), got {p}")
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"q must lie in [0, 1], got {q}")
    d = q - p
    return max(_xlog_ratio(q, p, d / p) + _xlog_ratio(1.0 - q, 1.0 - p, -d / (1.0 - p)), 0.0)


def _xlog_ratio(a: float, b: float, rel: float) -> float:
    """a ln(a/b) given rel = a/b - 1; log1p only where it helps, i.e. a close to b."""
    if a == 0.0:
        return 0.0
    if abs(rel) < 0.5:
        return a * math.log1p(rel)
    return a * math.log(a / b)


def normal_cdf(a):
    return ndtr(a)


def binomial_cdf_bound(n: int, p: float, k: int) -> float:
    """Lower bound on P[Bin(n, p) <= k], used only for k above the mean."""
    if not 0 <= k <= n:
        raise ValueError(f"need 0 <= k <= n, got k={k}, n={n}")
    q = k / n
    s = float(np.sign(q - p))
    if s == 0.0:
        return 0.5
    return float(ndtr(s * math.sqrt(2.0 * n * kl_bernoulli(q, p))))


def threshold_count(n: float, gamma: float, omega_c: float, delta_c: float) -> int:
    """Largest accepted count for a category: floor(n gamma (omega_c + delta_c)), capped at n."""
    return int(min(math.floor(n * gamma * (omega_c + delta_c)), n))


def epsilon_com_category(n: float, gamma: float, omega_c: float, delta_c: float) -> float:
    p = gamma * omega_c
    if not 0.0 < p < 1.0:
        raise ValueError(f"gamma * omega_c must lie in (0, 1), got {p}")
    if delta_c < 0:
        raise ValueError("delta_c must be nonnegative")
    k = threshold_count(n, gamma, omega_c, delta_c)
    return min(max(1.0 - binomial_cdf_bound(int(n), p, k), 0.0), 1.0)


@dataclass
class CompletenessReport:
    per_category: dict[ScoreLabel, float]
    total: float

    def to_json(self) -> dict:
        return {"per_category": {str(c): v for c, v in self.per_category.items()}, "total": self.total}


def completeness_report(n: float, gamma: float, dist: ScoreDistribution) -> CompletenessReport:
    per = {c: epsilon_com_category(n, gamma, w, dist.delta.get(c, 0.0)) for c, w in dist.omega.items()}
    return CompletenessReport(per, math.fsum(per.values()))


def _allocation(omega: dict[ScoreLabel, float], target: float, allocation: str) -> dict[ScoreLabel, float]:
    if allocation == "equal":
        return {c: target / len(omega) for c in omega}
    if allocation == "proportional":
        w = {c: math.sqrt(v * (1.0 - v)) for c, v in omega.items()}
        tot = math.fsum(w.values())
        return {c: target * v / tot for c, v in w.items()}
    raise ValueError(f"unknown allocation {allocation!r}")


def _smallest_delta(n: float, gamma: float, omega_c: float, share: float, tol: float) -> float:
    def ok(d):
        return epsilon_com_category(n, gamma, omega_c, d) <= share

    if ok(0.0):
        return 0.0
    lo, hi = 0.0, 1e-9
    d_max = 1.0 / gamma - omega_c  # threshold reaches n
    while not ok(hi):
        lo = hi
        if hi >= d_max:
            raise ValueError(f"no tolerance reaches completeness share {share:g} for omega_c = {omega_c}")
        hi = min(2.0 * hi, d_max)
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return hi


def calibrate_delta(n: float, gamma: float, omega: ScoreDistribution, target_eps_com: float,
                    allocation: str = "equal", tol: float = 1e-12) -> dict[ScoreLabel, float]:
    """Smallest per-category delta meeting its share of the completeness budget."""
    if not 0.0 < target_eps_com < 1.0:
        raise ValueError("target completeness error must lie in (0, 1)")
    for c, v in omega.omega.items():
        if v <= 0.0:
            raise ValueError(f"category {c} has omega = 0 and cannot be monitored")
    shares = _allocation(omega.omega, target_eps_com, allocation)
    return {c: _smallest_delta(n, gamma, omega.omega[c], shares[c], tol) for c in omega.omega}


def with_calibrated_delta(n: float, gamma: float, omega: ScoreDistribution, target_eps_com: float,
                          allocation: str = "equal") -> ScoreDistribution:
    delta = calibrate_delta(n, gamma, omega, target_eps_com, allocation)
    return ScoreDistribution(dict(omega.omega), delta)
