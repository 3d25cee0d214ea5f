"""Dense primal-dual interior-point solver for small complex Hermitian SDPs.

Problem pair (all matrices Hermitian, n x n, block diagonal)::

    (P)  min  <C, X> + f.u      s.t.  <A_i, X> + (E^T u)_i = b_i,  X >= 0
    (D)  max  b.y               s.t.  Z = C - sum_i y_i A_i >= 0,  E y = f

with <A, B> = Re tr(A B).  The moment relaxations live naturally in (D); the
primal (X, u) is what becomes the affine certificate.

Infeasible-start path following with the Nesterov-Todd search direction and Mehrotra
predictor-corrector steps.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

log = logging.getLogger(__name__)


class SdpError(RuntimeError):
    pass


class SdpInfeasible(SdpError):
    """Primal or dual infeasible (the other side unbounded)."""


class SdpMaxIterations(SdpError):
    pass


class SdpIllConditioned(SdpError):
    pass


@dataclass
class SdpProblem:
    C: np.ndarray
    A: sp.csr_matrix  # m x n^2, row i = A_i flattened row-major
    b: np.ndarray
    E: np.ndarray | None = None  # p x m
    f: np.ndarray | None = None
    blocks: tuple[int, ...] = ()

    def __post_init__(self):
        self.C = np.asarray(self.C, dtype=complex)
        n = self.C.shape[0]
        self.A = sp.csr_matrix(self.A, dtype=complex)
        self.b = np.asarray(self.b, dtype=float)
        if self.A.shape != (len(self.b), n * n):
            raise ValueError(f"A has shape {self.A.shape}, expected {(len(self.b), n * n)}")
        if self.E is None:
            self.E = np.zeros((0, len(self.b)))
            self.f = np.zeros(0)
        self.E = np.asarray(self.E, dtype=float)
        self.f = np.asarray(self.f, dtype=float)
        if not self.blocks:
            self.blocks = (n,)
        if sum(self.blocks) != n:
            raise ValueError("block sizes do not add up to the matrix size")

    @property
    def n(self) -> int:
        return self.C.shape[0]

    @property
    def m(self) -> int:
        return len(self.b)

    @classmethod
    def from_matrices(cls, C, As, b, E=None, f=None, blocks=()) -> "SdpProblem":
        C = np.asarray(C, dtype=complex)
        rows = [sp.csr_matrix(np.asarray(a, dtype=complex).reshape(1, -1)) for a in As]
        A = sp.vstack(rows, format="csr") if rows else sp.csr_matrix((0, C.size), dtype=complex)
        return cls(C, A, b, E, f, blocks)

    def A_op(self, X: np.ndarray) -> np.ndarray:
        """<A_i, X> for all i."""
        return (self.A @ X.T.ravel()).real

    def At_op(self, y: np.ndarray) -> np.ndarray:
        """sum_i y_i A_i."""
        n = self.n
        return (self.A.T @ y).reshape(n, n)


@dataclass
class SdpSolution:
    status: str
    primal_obj: float
    dual_obj: float
    X: np.ndarray
    u: np.ndarray
    y: np.ndarray
    Z: np.ndarray
    iterations: int
    gap: float
    pinf: float
    dinf: float
    history: list = field(default_factory=list, repr=False)

    @property
    def value(self) -> float:
        return 0.5 * (self.primal_obj + self.dual_obj)


class SdpSolver(Protocol):
    def solve(self, problem: SdpProblem) -> SdpSolution: ...


def _herm(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + M.conj().T)


def _max_step(L: np.ndarray, dM: np.ndarray) -> float:
    """Largest a with L L^H + a dM >= 0."""
    Li = sla.solve_triangular(L, np.eye(L.shape[0]), lower=True)
    S = _herm(Li @ dM @ Li.conj().T)
    lam = np.linalg.eigvalsh(S)[0]
    return np.inf if lam >= 0 else -1.0 / lam


def _nt_scaling(Lx: np.ndarray, Z: np.ndarray) -> np.ndarray:
    """W with W Z W = X, for X = Lx Lx^H."""
    G = _herm(Lx.conj().T @ Z @ Lx)
    d, Q = np.linalg.eigh(G)
    F = Lx @ (Q * d ** -0.25)
    return _herm(F @ F.conj().T)


def _chol(M: np.ndarray, what: str) -> np.ndarray:
    try:
        return np.linalg.cholesky(M)
    except np.linalg.LinAlgError as exc:
        raise SdpIllConditioned(f"{what} lost positive definiteness") from exc


@dataclass
class InteriorPointSolver:
    """Reference solver; ``max_size`` caps the matrix dimension."""

    tol_gap: float = 1e-10
    tol_feas: float = 1e-10
    # fallback acceptance when progress stalls near the end
    loose_gap: float = 1e-7
    loose_feas: float = 1e-7
    max_iter: int = 100
    step_fraction: float = 0.85
    direction: str = "nt"  # "nt" or "hkm"
    max_size: int = 200
    blowup: float = 1e10

    def solve(self, problem: SdpProblem) -> SdpSolution:
        p = problem.E.shape[0]
        if p == 0:
            return self._solve(problem)
        # drop linearly dependent rows of E y = f; inconsistent ones mean infeasible
        _, R, piv = sla.qr(problem.E.T, mode="economic", pivoting=True)
        d = np.abs(np.diag(R))
        k = int(np.sum(d > 1e-10 * max(d[0], 1e-300))) if len(d) else 0
        if k == p:
            return self._solve(problem)
        keep = np.sort(piv[:k])
        yls, *_ = np.linalg.lstsq(problem.E, problem.f, rcond=None)
        if np.linalg.norm(problem.E @ yls - problem.f) > 1e-9 * (1 + np.linalg.norm(problem.f)):
            raise SdpInfeasible("linear constraints E y = f are inconsistent")
        reduced = SdpProblem(problem.C, problem.A, problem.b, problem.E[keep], problem.f[keep], problem.blocks)
        sol = self._solve(reduced)
        u = np.zeros(p)
        u[keep] = sol.u
        sol.u = u
        return sol

    def _solve(self, problem: SdpProblem) -> SdpSolution:
        n, m = problem.n, problem.m
        if n > self.max_size:
            raise ValueError(f"matrix dimension {n} exceeds cap {self.max_size}")
        self._check_linear_consistency(problem)

        C, b, E, f = problem.C, problem.b, problem.E, problem.f
        p = E.shape[0]
        Anorms = np.sqrt(np.asarray(abs(problem.A).power(2).sum(axis=1)).ravel()) if m else np.zeros(0)
        normC = np.linalg.norm(C)
        normb = np.linalg.norm(b)
        xi = max(10.0, np.sqrt(n), n * max(((1 + abs(b)) / (1 + Anorms)).max(initial=1.0), 1.0))
        zeta = max(10.0, np.sqrt(n), Anorms.max(initial=0.0), normC)
        X = xi * np.eye(n, dtype=complex)
        Z = zeta * np.eye(n, dtype=complex)
        y = np.zeros(m)
        u = np.zeros(p)

        history = []
        rows = [problem.A.getrow(i) for i in range(m)]
        entries = [(r.indices // n, r.indices % n, r.data) for r in rows]

        status = "max_iter"
        best = None
        stall = 0
        for it in range(self.max_iter + 1):
            Rp = b - problem.A_op(X) - E.T @ u
            Rd = C - problem.At_op(y) - Z
            Re = f - E @ y
            pobj = float(np.real(np.sum(C * X.T))) + float(f @ u)
            dobj = float(b @ y)
            mu = float(np.real(np.sum(X * Z.T))) / n
            gap = abs(pobj - dobj) / (1 + abs(pobj) + abs(dobj))
            pinf = np.linalg.norm(Rp) / (1 + normb)
            dinf = (np.linalg.norm(Rd) + np.linalg.norm(Re)) / (1 + normC + np.linalg.norm(f))
            history.append((it, pobj, dobj, gap, pinf, dinf, mu))
            log.debug("it %d pobj %.12g dobj %.12g gap %.2e pinf %.2e dinf %.2e", it, pobj, dobj, gap, pinf, dinf)
            if gap < self.tol_gap and pinf < self.tol_feas and dinf < self.tol_feas:
                status = "optimal"
                break
            score = max(gap / self.tol_gap, pinf / self.tol_feas, dinf / self.tol_feas)
            if best is None or score < best[0]:
                best = (score, it, pobj, dobj, X, u, y, Z, gap, pinf, dinf)
                stall = 0
            else:
                stall += 1
                if stall >= 4:
                    break
            big = max(np.abs(X).max(), np.abs(Z).max(), np.abs(y).max(initial=0), np.abs(u).max(initial=0))
            if big > self.blowup:
                if dinf < 1e-6 and dobj > self.blowup ** 0.5:
                    raise SdpInfeasible("primal infeasible: dual objective unbounded")
                if pinf < 1e-6 and pobj < -self.blowup ** 0.5:
                    raise SdpInfeasible("dual infeasible: primal objective unbounded")
                raise SdpInfeasible("iterates diverged; problem infeasible or unbounded")
            if it == self.max_iter:
                break

            Lz = _chol(Z, "Z")
            Zi = sla.cho_solve((Lz, True), np.eye(n))
            Zi = _herm(Zi)
            try:
                Lx = _chol(X, "X")
            except SdpIllConditioned:
                if best is None:
                    raise
                break
            if self.direction == "nt":
                Wl, Wr = (W := _nt_scaling(Lx, Z)), W
            else:
                Wl, Wr = X, Zi
            M = self._schur(Wl, Wr, entries, problem)
            K = np.zeros((m + p, m + p))
            K[:m, :m] = M
            K[:m, m:] = E.T
            K[m:, :m] = E
            try:
                lu = sla.lu_factor(K, check_finite=True)
            except (ValueError, sla.LinAlgError) as exc:
                raise SdpIllConditioned("singular Newton system") from exc
            if not np.all(np.isfinite(lu[0])) or np.min(np.abs(np.diag(lu[0]))) == 0:
                raise SdpIllConditioned("singular Newton system")
            WRdW = _herm(Wl @ Rd @ Wr)

            def direction(Rc):
                # dX + Wl dZ Wr = Rc: Wl = Wr = W for Nesterov-Todd, (X, Z^-1) for HKM
                rhs = np.concatenate([Rp - problem.A_op(Rc - WRdW), Re])
                sol = sla.lu_solve(lu, rhs)
                sol += sla.lu_solve(lu, rhs - K @ sol)
                dy, du = sol[:m], sol[m:]
                dZ = Rd - problem.At_op(dy)
                dZ = _herm(dZ)
                dX = _herm(Rc - Wl @ dZ @ Wr)
                return dX, dy, du, dZ

            # predictor
            dX, dy, du, dZ = direction(-X)
            ap = min(1.0, _max_step(Lx, dX))
            ad = min(1.0, _max_step(Lz, dZ))
            mu_aff = float(np.real(np.sum((X + ap * dX) * (Z + ad * dZ).T))) / n
            sigma = min(1.0, max(0.0, mu_aff / mu)) ** 3
            # corrector
            Rc = sigma * mu * Zi - X - _herm(dX @ dZ @ Zi)
            dX, dy, du, dZ = direction(Rc)
            ap = min(1.0, self.step_fraction * _max_step(Lx, dX))
            ad = min(1.0, self.step_fraction * _max_step(Lz, dZ))
            X = _herm(X + ap * dX)
            u = u + ap * du
            Z = _herm(Z + ad * dZ)
            y = y + ad * dy
            if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Z))):
                raise SdpIllConditioned("non-finite iterate")

        if status != "optimal":
            # fall back on the best iterate seen if it meets the loose tolerances
            _, it, pobj, dobj, X, u, y, Z, gap, pinf, dinf = best
            if gap < self.loose_gap and pinf < self.loose_feas and dinf < self.loose_feas:
                status = "near_optimal"
            else:
                raise SdpMaxIterations(
                    f"no convergence after {self.max_iter} iterations (gap {gap:.2e}, pinf {pinf:.2e}, dinf {dinf:.2e})"
                )
        return SdpSolution(status, pobj, dobj, X, u, y, Z, it, gap, pinf, dinf, history)

    @staticmethod
    def _schur(X, Zi, entries, problem) -> np.ndarray:
        """M_ij = Re tr(A_i X A_j Z^-1); called with X = Z^-1 = W for the scaled system."""
        n, m = problem.n, problem.m
        M = np.empty((m, m))
        chunk = max(1, min(m, 4_000_000 // (n * n)))
        AT = problem.A
        for start in range(0, m, chunk):
            stop = min(m, start + chunk)
            cols = np.empty((n * n, stop - start), dtype=complex)
            for k, j in enumerate(range(start, stop)):
                ps, qs, vs = entries[j]
                B = (X[:, ps] * vs) @ Zi[qs, :]
                cols[:, k] = B.T.ravel()
            M[:, start:stop] = (AT @ cols).real
        return 0.5 * (M + M.T)

    @staticmethod
    def _check_linear_consistency(problem: SdpProblem) -> None:
        m, p = problem.m, problem.E.shape[0]
        if m:
            # b must lie in the range of (X, u) -> A(X) + E^T u; X Hermitian so
            # <A_i, X> = Re(A_i) . Re(X) - Im(A_i) . Im(X) on flattened entries
            A = problem.A.toarray()
            K = np.hstack([A.real, -A.imag, problem.E.T])
            z, *_ = np.linalg.lstsq(K, problem.b, rcond=1e-11)
            res = np.linalg.norm(K @ z - problem.b)
            if res > 1e-8 * (1 + np.linalg.norm(problem.b)):
                raise SdpInfeasible("equality constraints <A_i, X> = b_i are inconsistent")
        if p:
            z, *_ = np.linalg.lstsq(problem.E, problem.f, rcond=1e-12)
            res = np.linalg.norm(problem.E @ z - problem.f)
            if res > 1e-8 * (1 + np.linalg.norm(problem.f)):
                raise SdpInfeasible("dual equality constraints E y = f are inconsistent")


def solve(problem: SdpProblem, solver: SdpSolver | None = None) -> SdpSolution:
    return (solver or InteriorPointSolver()).solve(problem)
