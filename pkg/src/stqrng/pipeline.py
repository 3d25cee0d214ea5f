"""Honest statistics -> tolerances -> certificate -> finite-size rate."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path

from .completeness import calibrate_delta
from .core import ProtocolParams, ScoreDistribution, honest_score_distribution
from .eat import ErrorBudget, RateReport, optimize_rate, tilde_omega
from .sdp.guessing import DualCertificate, params_hash, solve_pguess, validate_certificate
from .sdp.moments import build_moment_problem
from .sdp.solver import SdpSolver

log = logging.getLogger(__name__)


@dataclass
class CertifiedRate:
    params: ProtocolParams
    dist: ScoreDistribution  # honest omega with calibrated delta
    certificate: DualCertificate
    omega_tilde: ScoreDistribution
    report: RateReport
    pguess: float


class CertificateCache:
    """On-disk store of certificates keyed by (params hash, level)."""

    def __init__(self, directory: str | Path):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)

    def _path(self, params: ProtocolParams, level: int) -> Path:
        return self.dir / f"cert-{params_hash(params)}-L{level}.json"

    def get(self, params: ProtocolParams, level: int) -> tuple[DualCertificate, float] | None:
        p = self._path(params, level)
        if not p.exists():
            return None
        obj = json.loads(p.read_text())
        return DualCertificate.from_json(obj["certificate"]), float(obj["pguess"])

    def put(self, params: ProtocolParams, level: int, cert: DualCertificate, pguess: float) -> None:
        p = self._path(params, level)
        tmp = p.with_suffix(f".{os.getpid()}.tmp")
        tmp.write_text(json.dumps({"certificate": cert.to_json(), "pguess": pguess}, indent=2))
        tmp.replace(p)


def honest_certificate(params: ProtocolParams, level: int = 2, solver: SdpSolver | None = None,
                       cache: CertificateCache | None = None, revalidate: bool = False) -> tuple[DualCertificate, float]:
    """Certificate at the honest score distribution (cached if a cache is given)."""
    if cache is not None:
        hit = cache.get(params, level)
        if hit is not None:
            cert, pg = hit
            if revalidate:
                cert = validate_certificate(cert, build_moment_problem(params, level), solver=solver)
            return cert, pg
    problem = build_moment_problem(params, level)
    res = solve_pguess(honest_score_distribution(params), problem, solver)
    if cache is not None:
        cache.put(params, level, res.certificate, res.value)
    return res.certificate, res.value


def certify_rate(params: ProtocolParams, budget: ErrorBudget | None = None, level: int = 2,
                 allocation: str = "equal", solver: SdpSolver | None = None,
                 cache: CertificateCache | None = None, delta: dict | None = None) -> CertifiedRate:
    budget = budget or ErrorBudget()
    honest = honest_score_distribution(params)
    if delta is None:
        delta = calibrate_delta(params.n_rounds, params.gamma, honest, budget.eps_com_target, allocation)
    dist = ScoreDistribution(dict(honest.omega), dict(delta))
    cert, pg = honest_certificate(params, level, solver, cache)
    tw = tilde_omega(dist, cert.lam, params.score_layout.categories)
    _, report = optimize_rate(params.n_rounds, cert, tw, params, budget)
    log.info("eta=%.4f amp=%.4f gamma=%.3f n=%.3g: pguess=%.8f h=%.4e r_net=%.4e",
             params.eta, params.amp, params.gamma, params.n_rounds, pg, report.h, report.r_net)
    return CertifiedRate(params, dist, cert, tw, report, pg)
