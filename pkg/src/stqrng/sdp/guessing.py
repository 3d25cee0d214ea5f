"""Guessing-probability bounds and affine dual certificates.

Weak duality for the relaxation (notation of ``MomentProblem``): for a PSD
matrix X and multipliers u on the monitored score rows, every feasible
moment vector y' satisfies

    c0 + g.y' <= c0 + <F0, X> - u.s0 + u.omega' + sum_i |r_i| |y'_i|,
    r = g + F(X) - S^T u,

and |y'_i| <= 1 because every free moment is an entry of a PSD matrix with
unit-bounded diagonal.  So (alpha, lambda) = (c0 + <F0,X> - u.s0 + sum|r|, u)
is an affine upper bound whatever the solver's accuracy, provided X is PSD.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import mpmath
import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from ..core import ProtocolParams, ScoreDistribution, ScoreLabel, gram_matrix, signed_bins
from .moments import MomentProblem, build_kappa, canonical, state_frame
from .solver import InteriorPointSolver, SdpError, SdpInfeasible, SdpProblem, SdpSolver

CERT_PRECISION = 50


class ConstraintInconsistency(SdpError):
    """The score distribution lies outside the relaxation's feasible set."""


class IrreparableCertificate(SdpError):
    pass


def params_hash(params: ProtocolParams) -> str:
    """Hash of the fields that determine the relaxation and the honest statistics.

    gamma and n_rounds do not enter the single-round problem and are left out so
    certificates can be shared across sweeps over them.
    """
    d = params.to_json()
    key = {k: d[k] for k in ("amp", "eta", "bins_x", "bins_p", "bin_half_range", "score_layout")}
    blob = json.dumps(key, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class DualCertificate:
    """P_guess(omega') <= alpha + sum_c lam[c] omega'_c over the relaxation's feasible set."""

    alpha: float
    lam: dict[ScoreLabel, float]
    level: int
    params_hash: str
    validity_margin: float = 0.0
    # dual matrix and score multipliers behind the bound; not exported
    dual: tuple[np.ndarray, np.ndarray, np.ndarray] | None = field(default=None, repr=False, compare=False)

    def bound(self, omega) -> float:
        if isinstance(omega, ScoreDistribution):
            omega = omega.omega
        return self.alpha + sum(v * omega.get(c, 0.0) for c, v in self.lam.items())

    def toward_trivial(self, t: float) -> "DualCertificate":
        """t * (alpha, lam) + (1 - t) * (1, 0); valid for t in [0, 1] since P_guess <= 1 always holds."""
        if not 0.0 <= t <= 1.0:
            raise ValueError(f"mixing weight must lie in [0, 1], got {t}")
        return DualCertificate(t * self.alpha + (1.0 - t), {c: t * v for c, v in self.lam.items()},
                               self.level, self.params_hash, t * self.validity_margin)

    def lam_vector(self, categories) -> np.ndarray:
        return np.array([self.lam.get(c, 0.0) for c in categories])

    def to_json(self) -> dict:
        return {
            "alpha": self.alpha,
            "lambda": {str(c): v for c, v in self.lam.items()},
            "level": self.level,
            "params_hash": self.params_hash,
            "validity_margin": self.validity_margin,
        }

    @classmethod
    def from_json(cls, obj) -> "DualCertificate":
        return cls(
            alpha=float(obj["alpha"]),
            lam={ScoreLabel.parse(k): float(v) for k, v in obj["lambda"].items()},
            level=int(obj["level"]),
            params_hash=str(obj["params_hash"]),
            validity_margin=float(obj.get("validity_margin", 0.0)),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2)

    @classmethod
    def loads(cls, text: str) -> "DualCertificate":
        return cls.from_json(json.loads(text))


def _psd_factor(X: np.ndarray) -> np.ndarray:
    """L with L L^H the PSD part of the Hermitian matrix X."""
    w, V = np.linalg.eigh(0.5 * (X + X.conj().T))
    w = np.clip(w, 0.0, None)
    return V * np.sqrt(w)


def dual_residual(problem: MomentProblem, X: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """r = g + F(X) - S^T lam in floating point."""
    return problem.g + (problem.F @ X.T.ravel()).real - problem.S.T @ lam


def polish_dual(problem: MomentProblem, X: np.ndarray, lam: np.ndarray, rounds: int = 3) -> np.ndarray:
    """Shrink the dual residual while keeping X PSD.

    Alternates the least-norm correction sum_j z_j F_j that zeroes r with a
    projection onto the PSD cone.  Each round lowers sum |r|, which is what the
    certificate pays for.
    """
    n = problem.size
    lu = spla.splu(sp.csc_matrix((problem.F @ problem.F.conj().T).real))
    best, best_r = X, np.abs(dual_residual(problem, X, lam)).sum()
    for _ in range(rounds):
        z = lu.solve(-dual_residual(problem, X, lam))
        dX = (problem.F.T @ z).reshape(n, n)
        L = _psd_factor(X + 0.5 * (dX + dX.conj().T))
        X = L @ L.conj().T
        r = np.abs(dual_residual(problem, X, lam)).sum()
        if r < best_r:
            best, best_r = X, r
    return best


def certified_bound(problem: MomentProblem, X: np.ndarray, lam: np.ndarray) -> mpmath.mpf:
    """Rigorous alpha for multipliers ``lam`` (all categories) from a dual matrix X.

    X is replaced by the PSD matrix L L^H built from its clipped eigendecomposition;
    all following arithmetic runs at ``CERT_PRECISION`` digits with the floats
    taken as exact.
    """
    L = _psd_factor(X)
    n = problem.size
    with mpmath.workdps(CERT_PRECISION):
        Lm = mpmath.matrix(n, L.shape[1])
        for i in range(n):
            for j in range(L.shape[1]):
                v = L[i, j]
                Lm[i, j] = mpmath.mpc(float(v.real), float(v.imag))
        Xm = Lm * Lm.H
        lam_m = [mpmath.mpf(float(v)) for v in lam]
        # residual r_i = g_i + <F_i, X> - (S^T lam)_i, with <A, B> = Re tr(A B)
        coo = problem.F.tocoo()
        resid = [mpmath.mpf(float(v)) for v in problem.g]
        for i, (r, c, a) in enumerate(zip(coo.row, coo.col, coo.data)):
            p, q = divmod(int(c), n)
            resid[r] += mpmath.re(mpmath.mpc(float(a.real), float(a.imag)) * Xm[q, p])
        for j, lj in enumerate(lam_m):
            if lj == 0:
                continue
            for i in np.nonzero(problem.S[j])[0]:
                resid[i] -= lj * mpmath.mpf(float(problem.S[j, i]))
        f0x = mpmath.mpf(0)
        r0, c0 = np.nonzero(problem.F0)
        for p, q in zip(r0, c0):
            a = problem.F0[p, q]
            f0x += mpmath.re(mpmath.mpc(float(a.real), float(a.imag)) * Xm[q, p])
        slack = mpmath.fsum(abs(v) for v in resid)
        ls0 = mpmath.fsum(lj * mpmath.mpf(float(s)) for lj, s in zip(lam_m, problem.s0))
        alpha = mpmath.mpf(float(problem.c0)) + f0x - ls0 + slack
        return alpha, slack


def validate_certificate(cert: DualCertificate, problem: MomentProblem, trials: int = 0,
                         cap: float = 1e-6, solver: SdpSolver | None = None,
                         rng: np.random.Generator | None = None) -> DualCertificate:
    """Recompute the certified alpha at high precision and fold any excess into it.

    Certificates that carry their dual matrix are checked directly.  Imported ones
    (alpha and lambda only) are checked by solving for the best dual matrix at
    fixed lambda.  ``trials`` random explicit strategies are additionally
    compared against the bound as a sanity check.
    """
    if cert.level != problem.level or cert.params_hash != params_hash(problem.params):
        raise IrreparableCertificate("certificate was produced for a different problem")
    lam = cert.lam_vector(problem.categories)
    if cert.dual is not None:
        X = cert.dual[0]
    else:
        X = _dual_at_fixed_lambda(problem, lam, solver)
    alpha_cert, slack = certified_bound(problem, X, lam)
    excess = float(alpha_cert - mpmath.mpf(cert.alpha))
    if float(slack) > cap or excess > cap:
        raise IrreparableCertificate(f"certificate residual {max(float(slack), excess):.3e} exceeds cap {cap:.1e}")
    out = cert
    if excess > 0:
        # round up so the stored float never undercuts the certified value
        alpha = float(alpha_cert)
        if alpha < alpha_cert:
            alpha = float(np.nextafter(alpha, np.inf))
        out = DualCertificate(alpha, dict(cert.lam), cert.level, cert.params_hash,
                              cert.validity_margin + (alpha - cert.alpha), cert.dual)
    if trials:
        rng = rng or np.random.default_rng(0)
        for _ in range(trials):
            omega, pg = random_strategy(problem.params, rng)
            b = out.bound(dict(zip(problem.categories, omega)))
            if pg > b + 1e-12:
                raise IrreparableCertificate(f"explicit strategy reaches {pg} above the bound {b}")
    return out


def _dual_at_fixed_lambda(problem: MomentProblem, lam: np.ndarray, solver: SdpSolver | None) -> np.ndarray:
    """Dual matrix for max_y c0 - lam.s0 + (g - S^T lam).y over Gamma(y) >= 0."""
    sdp = SdpProblem(problem.F0, -problem.F, problem.g - problem.S.T @ lam, None, None)
    sol = (solver or InteriorPointSolver()).solve(sdp)
    return sol.X


@dataclass
class PguessResult:
    value: float
    certificate: DualCertificate
    status: str
    moments: np.ndarray = field(repr=False)


def solve_pguess(omega: ScoreDistribution | None, problem: MomentProblem, solver: SdpSolver | None = None,
                 drop: int = -1, cap: float = 1e-6) -> PguessResult:
    """Relaxation value of P_guess at ``omega`` with a validated certificate.

    ``omega=None`` drops every score constraint.  One score row (``drop``) is left
    out because the rows sum to one identically; its multiplier is zero.
    """
    solver = solver or InteriorPointSolver()
    cats = problem.categories
    if omega is not None:
        missing = set(omega.omega) - set(cats)
        if missing:
            raise ValueError(f"omega has categories outside the layout: {sorted(map(str, missing))}")
        vec = omega.vector(problem.params.score_layout)
    else:
        vec = None
    sdp, rows = problem.sdp(vec, drop=drop)
    try:
        sol = solver.solve(sdp)
    except SdpInfeasible as exc:
        raise ConstraintInconsistency(f"score distribution not reachable by the relaxation: {exc}") from exc
    lam = np.zeros(len(cats))
    lam[rows] = sol.u
    value = float(np.clip(problem.c0 + problem.g @ sol.y, 0.0, 1.0))
    X = polish_dual(problem, sol.X, lam)
    # start from the residual-free part of the bound; validation adds the residual back
    alpha_cert, slack = certified_bound(problem, X, lam)
    alpha0 = float(alpha_cert - slack)
    cert = DualCertificate(alpha0, dict(zip(cats, lam.tolist())), problem.level, params_hash(problem.params),
                           0.0, (X, sol.u, rows))
    cert = validate_certificate(cert, problem, cap=cap)
    return PguessResult(value, cert, sol.status, sol.y)


def solve_pguess_interval(omega: ScoreDistribution, problem: MomentProblem, scale: float = 1.0,
                          solver: SdpSolver | None = None) -> float:
    """Relaxation value with scores boxed to omega +/- scale * delta instead of pinned."""
    lo = omega.vector(problem.params.score_layout) - scale * omega.vector(problem.params.score_layout, "delta")
    hi = omega.vector(problem.params.score_layout) + scale * omega.vector(problem.params.score_layout, "delta")
    sdp, _ = problem.sdp(None, intervals=(lo, hi))
    try:
        sol = (solver or InteriorPointSolver()).solve(sdp)
    except SdpInfeasible as exc:
        raise ConstraintInconsistency(str(exc)) from exc
    return float(np.clip(problem.c0 + problem.g @ sol.y, 0.0, 1.0))


def entropy_from_certificate(cert: DualCertificate, omega_tilde, gamma: float) -> float:
    """Single-round entropy h = 2 (1 - gamma) (1 - alpha - lambda . omega_tilde)."""
    return 2.0 * (1.0 - gamma) * (1.0 - cert.bound(omega_tilde))


# -- explicit strategies ------------------------------------------------------


def _random_projective(d: int, k: int, rng: np.random.Generator) -> list[np.ndarray]:
    """k orthogonal projectors summing to the identity on C^d (some may be zero)."""
    Z = rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
    Q, _ = np.linalg.qr(Z)
    labels = rng.integers(0, k, size=d)
    return [Q[:, labels == j] @ Q[:, labels == j].conj().T for j in range(k)]


def strategy_statistics(params: ProtocolParams, V: np.ndarray, M: dict[int, list[np.ndarray]],
                        E: list[np.ndarray]) -> tuple[np.ndarray, float]:
    """Score distribution and guessing probability of an explicit strategy.

    V maps the orthonormal state frame into C^{d_B} (x) C^{d_E}; M[y][k] are
    Bob's projectors in signed-bin order and E[e] the adversary's.
    """
    R = state_frame(gram_matrix(params).entries)
    phis = V @ R.T  # columns are the states
    d_b = M[0][0].shape[0]
    d_e = E[0].shape[0]
    cats = params.score_layout.categories
    omega = np.zeros(len(cats))
    for (c, b, x, y), w in build_kappa(params).items():
        k = signed_bins(params.m_of_y(y)).index(b)
        op = np.kron(M[y][k], np.eye(d_e))
        v = phis[:, x]
        omega[cats.index(c)] += w * float(np.real(v.conj() @ op @ v))
    v0 = phis[:, 0]
    pg = sum(float(np.real(v0.conj() @ np.kron(M[1][e], E[e]) @ v0)) for e in range(2))
    return omega, pg


def random_strategy(params: ProtocolParams, rng: np.random.Generator, d_b: int = 4,
                    d_e: int = 2) -> tuple[np.ndarray, float]:
    """Random explicit strategy with the exact state Gram matrix; returns (omega, P_guess)."""
    r = state_frame(gram_matrix(params).entries).shape[1]
    d = d_b * d_e
    Z = rng.normal(size=(d, r)) + 1j * rng.normal(size=(d, r))
    V, _ = np.linalg.qr(Z)
    M = {y: _random_projective(d_b, 2 * params.m_of_y(y), rng) for y in (0, 1)}
    E = _random_projective(d_e, 2, rng)
    return strategy_statistics(params, V, M, E)


__all__ = [
    "ConstraintInconsistency",
    "DualCertificate",
    "IrreparableCertificate",
    "PguessResult",
    "canonical",
    "certified_bound",
    "entropy_from_certificate",
    "params_hash",
    "random_strategy",
    "solve_pguess",
    "solve_pguess_interval",
    "strategy_statistics",
    "validate_certificate",
]
