"""Finite-size output length and net expansion rate from a dual certificate.

The smooth min-entropy of the raw string is bounded by

    k = n [h + h2(gamma) + 2 gamma] - n (beta V + beta^2 K)
        - (1/beta) [1 - 2 log2(eps_EA eps_1)] - xi sqrt(n)
        - log2(2 / (eps_s - eps_2 - 2 eps_1)),

the extractor keeps l = floor(k - 2 log2(1/eps_ext) + 2) bits, and the input
randomness consumed is l_in = n [h2(gamma) + 2 gamma] + 3.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import ProtocolParams, ScoreDistribution, ScoreLabel
from .sdp.guessing import DualCertificate

LN2 = math.log(2.0)


@dataclass(frozen=True)
class ErrorBudget:
    """Security parameters.  eps_1 and eps_2 default to eps_s / 4 each."""

    eps_s: float = 4.99e-7
    eps_1: float | None = None
    eps_2: float | None = None
    eps_EA: float = 1e-6
    eps_ext: float = 1e-6
    eps_com_target: float = 1e-3

    def __post_init__(self):
        if self.eps_1 is None:
            object.__setattr__(self, "eps_1", self.eps_s / 4)
        if self.eps_2 is None:
            object.__setattr__(self, "eps_2", self.eps_s / 4)
        for name in ("eps_s", "eps_1", "eps_2", "eps_EA", "eps_ext", "eps_com_target"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        if self.chain_slack <= 0:
            raise ValueError("need eps_s - eps_2 - 2 eps_1 > 0")
        if not self.eps_2 < self.eps_EA:
            raise ValueError("need eps_2 < eps_EA")

    @property
    def chain_slack(self) -> float:
        return self.eps_s - self.eps_2 - 2 * self.eps_1

    @property
    def eps_sou(self) -> float:
        return max(self.eps_EA, 2 * self.eps_s + self.eps_ext)

    def to_json(self) -> dict:
        return {
            "eps_s": self.eps_s,
            "eps_1": self.eps_1,
            "eps_2": self.eps_2,
            "eps_EA": self.eps_EA,
            "eps_ext": self.eps_ext,
            "eps_com_target": self.eps_com_target,
            "eps_sou": self.eps_sou,
        }

    @classmethod
    def from_json(cls, obj) -> "ErrorBudget":
        obj = {k: v for k, v in obj.items() if k != "eps_sou"}
        return cls(**obj)


def tilde_omega(dist: ScoreDistribution, lam: dict[ScoreLabel, float],
                categories: tuple[ScoreLabel, ...] | None = None) -> ScoreDistribution:
    """Shift omega by delta towards lower certified entropy, keeping the sum at one.

    Every category moves up by its delta except c_min = argmin lambda, which
    absorbs the total.  Ties go to the earliest category.
    """
    cats = list(categories) if categories is not None else list(dist.omega)
    missing = [c for c in cats if c not in lam]
    if missing:
        raise ValueError(f"lambda missing categories {[str(c) for c in missing]}")
    c_min = min(cats, key=lambda c: (lam[c], cats.index(c)))
    out = {}
    for c in cats:
        if c == c_min:
            out[c] = dist.omega.get(c, 0.0) - math.fsum(dist.delta.get(d, 0.0) for d in cats if d != c_min)
        else:
            out[c] = dist.omega.get(c, 0.0) + dist.delta.get(c, 0.0)
    if out[c_min] < 0:
        raise ValueError(f"tolerances exceed omega[{c_min}]; shifted distribution is negative")
    total = math.fsum(out.values())
    # absorb float residue so the sum is exactly representable as one
    out[c_min] += 1.0 - total
    return ScoreDistribution(out)


def single_round_h_raw(cert: DualCertificate, omega_t, gamma: float) -> float:
    return 2.0 * (1.0 - gamma) * (1.0 - cert.bound(omega_t))


def single_round_h(cert: DualCertificate, omega_t, gamma: float) -> float:
    """h = 2 (1 - gamma) (1 - alpha - lambda . omega~), clamped at zero."""
    return max(single_round_h_raw(cert, omega_t, gamma), 0.0)


def _span(lam) -> float:
    vals = list(lam.values()) if isinstance(lam, dict) else list(lam)
    return max(vals) - min(vals) if vals else 0.0


def variance_term_V(gamma: float, m: int, lam) -> float:
    dl = _span(lam)
    return 0.5 * LN2 * (math.log2(4 * m + 1) + math.sqrt(2 + 4 * (1 - gamma) ** 2 * dl**2 / gamma)) ** 2


def correction_term_K(beta: float, gamma: float, m: int, lam) -> float:
    if not 0.0 < beta < 1.0:
        raise ValueError(f"beta must lie in (0, 1), got {beta}")
    e = math.log2(2 * m) + 2 * (1 - gamma) * _span(lam)
    log_num = beta * e * LN2
    log_cube = 3 * math.log(math.log(2.0**e + math.e**2))
    return math.exp(log_num + log_cube - math.log(6 * LN2) - 3 * math.log1p(-beta))


def qaep_xi(eps_2: float, m: int) -> float:
    if not 0.0 < eps_2 < 1.0:
        raise ValueError("eps_2 must lie in (0, 1)")
    return 2 * math.log2(1 + 4 * m) * math.sqrt(1 - 2 * math.log2(eps_2))


def binary_entropy(p: float) -> float:
    if p in (0.0, 1.0):
        return 0.0
    return -p * math.log2(p) - (1 - p) * math.log2(1 - p)


def input_entropy(gamma: float) -> float:
    """Bits per round needed for (T, X, Y): h2(gamma) + 2 gamma."""
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must lie in (0, 1)")
    return binary_entropy(gamma) + 2 * gamma


def input_length(n: float, gamma: float) -> float:
    return n * input_entropy(gamma) + 3


def smooth_minentropy_bound_k(n: float, h: float, gamma: float, V: float, K: float, xi: float,
                              beta: float, budget: ErrorBudget) -> float:
    return (
        n * (h + input_entropy(gamma))
        - n * (beta * V + beta**2 * K)
        - (1 - 2 * math.log2(budget.eps_EA * budget.eps_1)) / beta
        - xi * math.sqrt(n)
        - math.log2(2 / budget.chain_slack)
    )


def output_length(k: float, eps_ext: float) -> int:
    return math.floor(k - 2 * math.log2(1 / eps_ext) + 2)


def net_rate(n: float, ell_out: float, ell_in: float) -> float:
    return (ell_out - ell_in) / n


def rate_m(params: ProtocolParams) -> int:
    """Bin parameter used in V, K and xi: the X-basis m."""
    return params.m_x


@dataclass
class RateReport:
    h: float
    V: float
    K: float
    xi: float
    beta: float
    k_bound: float
    ell_out: int
    ell_in: float
    r_net: float
    n: float
    gamma: float
    epsilon_budget: ErrorBudget
    tilde_omega: ScoreDistribution | None = None
    h_raw: float = 0.0
    flags: list[str] = field(default_factory=list)
    weight: float = 1.0  # certificate mixed toward the trivial bound; see optimize_rate

    @property
    def positive(self) -> bool:
        return self.r_net > 0 and self.ell_out > 0

    def to_json(self) -> dict:
        return {
            "h": self.h,
            "h_raw": self.h_raw,
            "V": self.V,
            "K": self.K,
            "xi": self.xi,
            "beta": self.beta,
            "k_bound": self.k_bound,
            "ell_out": self.ell_out,
            "ell_in": self.ell_in,
            "r_net": self.r_net,
            "n": self.n,
            "gamma": self.gamma,
            "epsilon_budget": self.epsilon_budget.to_json(),
            "tilde_omega": None if self.tilde_omega is None else self.tilde_omega.to_json(),
            "flags": list(self.flags),
            "weight": self.weight,
        }


def _smooth_rate(beta, n, h, gamma, V, m, lam, xi, budget) -> float:
    """r_net(beta) without the floor on l; the objective of the beta search."""
    K = correction_term_K(beta, gamma, m, lam)
    k = smooth_minentropy_bound_k(n, h, gamma, V, K, xi, beta, budget)
    return (k - 2 * math.log2(1 / budget.eps_ext) + 2 - (input_length(n, gamma))) / n


def golden_max(f, lo: float, hi: float, iters: int = 200, tol: float = 1e-13) -> float:
    """Golden-section search for the maximum of a unimodal f on [lo, hi]."""
    g = (math.sqrt(5) - 1) / 2
    a, b = lo, hi
    c, d = b - g * (b - a), a + g * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(iters):
        if b - a <= tol * max(1.0, abs(a) + abs(b)):
            break
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - g * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + g * (b - a)
            fd = f(d)
    return c if fc >= fd else d


BETA_MIN, BETA_MAX = 1e-9, 1 - 1e-6


def rate_at_beta(n: float, beta: float, cert: DualCertificate, omega_t, params: ProtocolParams,
                 budget: ErrorBudget, m: int | None = None) -> RateReport:
    m = rate_m(params) if m is None else m
    gamma = params.gamma
    h_raw = single_round_h_raw(cert, omega_t, gamma)
    h = max(h_raw, 0.0)
    V = variance_term_V(gamma, m, cert.lam)
    K = correction_term_K(beta, gamma, m, cert.lam)
    xi = qaep_xi(budget.eps_2, m)
    k = smooth_minentropy_bound_k(n, h, gamma, V, K, xi, beta, budget)
    ell = output_length(k, budget.eps_ext)
    ell_in = input_length(n, gamma)
    flags = []
    if h_raw <= 0:
        flags.append("nonpositive_h")
    if ell <= 0:
        flags.append("nonpositive_output")
    r = net_rate(n, ell, ell_in)
    if r <= 0:
        flags.append("nonpositive_rate")
    tw = omega_t if isinstance(omega_t, ScoreDistribution) else None
    return RateReport(h, V, K, xi, beta, k, ell, ell_in, r, n, gamma, budget, tw, h_raw, flags)


def optimize_beta(n: float, cert: DualCertificate, omega_t, params: ProtocolParams, budget: ErrorBudget,
                  m: int | None = None) -> tuple[float, RateReport]:
    """Maximize the smooth rate over beta by golden-section search in log beta."""
    m = rate_m(params) if m is None else m
    gamma = params.gamma
    h = single_round_h(cert, omega_t, gamma)
    V = variance_term_V(gamma, m, cert.lam)
    xi = qaep_xi(budget.eps_2, m)

    def obj(t):
        return _smooth_rate(math.exp(t), n, h, gamma, V, m, cert.lam, xi, budget)

    t = golden_max(obj, math.log(BETA_MIN), math.log(BETA_MAX))
    beta = float(np.clip(math.exp(t), BETA_MIN, BETA_MAX))
    return beta, rate_at_beta(n, beta, cert, omega_t, params, budget, m)


def optimize_rate(n: float, cert: DualCertificate, omega_t, params: ProtocolParams, budget: ErrorBudget,
                  m: int | None = None) -> tuple[float, RateReport]:
    """Maximize over beta and over the weight t of cert.toward_trivial(t).

    Shrinking the certificate trades single-round entropy for smaller V and K, which
    wins when h is small; t = 0 is the trivial bound and caps how negative r_net gets.
    """
    def best(t):
        return optimize_beta(n, cert.toward_trivial(t), omega_t, params, budget, m)

    t = golden_max(lambda t: best(t)[1].r_net, 0.0, 1.0, tol=1e-9)
    cand = max((best(w) + (w,) for w in (1.0, 0.0, t)), key=lambda c: c[1].r_net)
    beta, report, w = cand
    report.weight = w
    return beta, report


def asymptotic_rate(cert: DualCertificate, omega_t, gamma: float) -> float:
    """n -> infinity limit of r_net: the single-round entropy h."""
    return single_round_h(cert, omega_t, gamma)
