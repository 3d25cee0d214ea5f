"""Moment-matrix relaxation of the single-round guessing probability.

Operators: Bob's projectors M_{b|y} (y = 0 for the X quadrature, 1 for P) and
the adversary's projectors E_e, e in {0, 1}, where E_0 guesses B = -1 and E_1
guesses B = +1 of the generation measurement.  [M, E] = 0 stands in for the
tensor product.  The moment matrix is the Gram matrix of the vectors
w|phi_x> for x in 0..3 and words w in the monomial set; its state block is
pinned to the coherent-state Gram matrix.

The near-parallel weak coherent states make that Gram matrix badly
conditioned (eigenvalues down to ~mu^3), so moments are taken in an
orthonormal frame psi_a of the state span, phi_x = sum_a R[x, a] psi_a.  The
state block becomes the identity and R enters only the score rows and the
objective.

The last outcome of every measurement is eliminated through completeness
(M_{+m|y} = 1 - sum of the others, E_1 = 1 - E_0).  The full moment matrix
over all outcomes is a congruence of the reduced one, so nothing is lost, and
the reduced matrix can be strictly feasible where the full one cannot.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from ..core import ProtocolParams, ScoreLabel, assign_score, gram_matrix, signed_bins, y_of_x
from .solver import SdpProblem

Letter = tuple  # ("M", y, k) with k an index into signed_bins(m_y), or ("E", e)
Word = tuple  # tuple of letters


def build_kappa(params: ProtocolParams) -> dict[tuple[ScoreLabel, int, int, int], float]:
    """kappa[(c, b, x, y)] = 1/4 when y = y(x) and the test-round score of (x, b) is c.

    Zero entries are omitted.
    """
    kappa = {}
    for x in range(4):
        y = y_of_x(x)
        for b in signed_bins(params.m_of_y(y)):
            c = assign_score(1, x, y, b, params.score_layout)
            kappa[(c, b, x, y)] = 0.25
    return kappa


def kappa_value(kappa, c, b, x, y) -> float:
    return kappa.get((c, b, x, y), 0.0)


def full_monomials(params: ProtocolParams, level: int, adversary_outcomes: int = 2) -> list[Word]:
    """Monomials over all outcomes (identity, every M_{b|y}, every E_e, and products at level 2)."""
    bob = [("M", y, k) for y in (0, 1) for k in range(2 * params.m_of_y(y))]
    eve = [("E", e) for e in range(adversary_outcomes)]
    return _words(bob, eve, level)


def reduced_letters(params: ProtocolParams) -> tuple[list[Letter], list[Letter]]:
    bob = [("M", y, k) for y in (0, 1) for k in range(2 * params.m_of_y(y) - 1)]
    eve = [("E", 0)]
    return bob, eve


def _words(bob, eve, level) -> list[Word]:
    words: list[Word] = [()]
    words += [(b,) for b in bob]
    words += [(e,) for e in eve]
    if level >= 2:
        words += [(b, e) for b in bob for e in eve]
    return words


def canonical(word: Word):
    """Reduce a word with the projector algebra; None if it vanishes.

    Returns (bob_part, eve_part), both tuples of letters.
    """
    bob = [w for w in word if w[0] == "M"]
    eve = [w for w in word if w[0] == "E"]
    out = []
    for part in (bob, eve):
        red: list = []
        for letter in part:
            if red and _same_measurement(red[-1], letter):
                if red[-1] != letter:
                    return None
                continue
            red.append(letter)
        out.append(tuple(red))
    return tuple(out)


def _same_measurement(a, b) -> bool:
    if a[0] != b[0]:
        return False
    return a[0] == "E" or a[1] == b[1]


def _adjoint_key(key):
    x, xp, (bob, eve) = key
    return (xp, x, (tuple(reversed(bob)), tuple(reversed(eve))))


@dataclass
class MomentProblem:
    """Relaxation data in LMI form.

    Gamma(y) = F0 + sum_i y_i F_i >= 0,   scores: S y + s0 = omega (monitored rows),
    objective: c0 + g.y.

    Real variables ``y`` are the real and imaginary parts of the free moments.
    """

    params: ProtocolParams
    level: int
    words: list[Word]
    full_words: list[Word]
    size: int
    F0: np.ndarray
    F: sp.csr_matrix  # n_vars x size^2, row-major flattening
    g: np.ndarray
    c0: float
    S: np.ndarray  # n_categories x n_vars, all categories of the layout
    s0: np.ndarray
    var_keys: list = field(repr=False)
    key_index: dict = field(repr=False)
    gram: np.ndarray = field(repr=False)
    frame: np.ndarray = field(repr=False)

    @property
    def n_vars(self) -> int:
        return self.F.shape[0]

    @property
    def n_monomials(self) -> int:
        """Monomials per state row over all outcomes."""
        return len(self.full_words)

    @property
    def categories(self) -> tuple[ScoreLabel, ...]:
        return self.params.score_layout.categories

    def moment_matrix(self, y: np.ndarray) -> np.ndarray:
        n = self.size
        return self.F0 + (self.F.T @ y).reshape(n, n)

    def frame_moment(self, y: np.ndarray, a: int, b: int, can) -> complex:
        if can is None:
            return 0.0
        if can == ((), ()):
            return 1.0 if a == b else 0.0
        key = (a, b, can)
        if key in self.key_index:
            i, sign = self.key_index[key]
        else:
            i, sign = self.key_index[_adjoint_key(key)]
            sign = -sign if sign else sign
        if sign == 0:
            return y[i]
        return y[i] + 1j * sign * y[i + 1]

    def moment(self, y: np.ndarray, x: int, xp: int, word: Word) -> complex:
        """Value of <phi_x| word |phi_xp> under the variables y."""
        can = canonical(word)
        R = self.frame
        r = R.shape[1]
        return sum(np.conj(R[x, a]) * R[xp, b] * self.frame_moment(y, a, b, can)
                   for a in range(r) for b in range(r))

    def sdp(self, omega: np.ndarray | None, drop: int | None = -1,
            intervals: tuple[np.ndarray, np.ndarray] | None = None) -> tuple[SdpProblem, np.ndarray]:
        """Solver data.  Score rows are equalities S y = omega - s0 except ``drop``.

        With ``intervals=(lo, hi)`` the scores are instead boxed,
        lo <= S y + s0 <= hi, through 1x1 blocks.  Returns the problem and the
        indices of the score rows used as equalities.
        """
        n = self.size
        rows = np.arange(len(self.categories))
        C = self.F0
        A = -self.F
        blocks = [n]
        E = np.zeros((0, self.n_vars))
        f = np.zeros(0)
        if intervals is None and omega is None:
            rows = np.zeros(0, dtype=int)
        elif intervals is None:
            if drop is not None:
                rows = np.delete(rows, drop % len(rows))
            E = self.S[rows]
            f = np.asarray(omega)[rows] - self.s0[rows]
        elif intervals is not None:
            lo, hi = (np.asarray(v, dtype=float) for v in intervals)
            k = len(self.categories)
            tot = n + 2 * k
            Cb = np.zeros((tot, tot), dtype=complex)
            Cb[:n, :n] = self.F0
            diag = np.concatenate([self.s0 - lo, hi - self.s0])
            Cb[np.arange(n, tot), np.arange(n, tot)] = diag
            coo = self.F.tocoo()
            r, c = np.divmod(coo.col, n)
            cols = [r * tot + c]
            data = [coo.data]
            rws = [coo.row]
            for j in range(k):
                for side, sgn in ((0, 1.0), (1, -1.0)):
                    pos = n + side * k + j
                    nz = np.nonzero(self.S[j])[0]
                    rws.append(nz)
                    cols.append(np.full(len(nz), pos * tot + pos))
                    data.append(sgn * self.S[j, nz])
            Fb = sp.csr_matrix((np.concatenate(data), (np.concatenate(rws), np.concatenate(cols))),
                               shape=(self.n_vars, tot * tot))
            C, A = Cb, -Fb
            blocks += [1] * (2 * k)
            rows = np.zeros(0, dtype=int)
        return SdpProblem(C, A, self.g, E, f, tuple(blocks)), rows


def state_frame(gram: np.ndarray, rtol: float = 1e-13) -> np.ndarray:
    """R (4 x r) with conj(R) @ R.T = G, so phi_x = sum_a R[x, a] psi_a, psi orthonormal.

    r is the numerical rank of G; identical states (amp = 0) give r = 1.
    """
    w, V = np.linalg.eigh(gram)
    keep = w > rtol * w[-1]
    if keep.all():
        return ((V * np.sqrt(w)) @ V.conj().T).conj()
    return (V[:, keep] * np.sqrt(w[keep])).conj()


def build_moment_problem(params: ProtocolParams, level: int = 2, adversary_outcomes: int = 2) -> MomentProblem:
    if level not in (1, 2):
        raise ValueError(f"unsupported relaxation level {level}")
    if adversary_outcomes != 2:
        raise ValueError("the adversary guesses a binary generation outcome; adversary_outcomes must be 2")
    if params.bins_p != 2:
        raise ValueError("generation rounds use a two-outcome P measurement")
    bob, eve = reduced_letters(params)
    words = _words(bob, eve, level)
    nw = len(words)
    G = gram_matrix(params).entries
    R = state_frame(G)
    rank = R.shape[1]
    n = rank * nw

    # variables are moments <psi_a| w |psi_b> in the orthonormal frame
    key_index: dict = {}
    var_keys: list = []
    n_vars = 0
    F0 = np.zeros((n, n), dtype=complex)
    rows_i, cols_i, vals = [], [], []

    def var_for(key):
        nonlocal n_vars
        if key in key_index:
            return key_index[key]
        adj = _adjoint_key(key)
        if adj in key_index:
            i, sign = key_index[adj]
            return (i, -sign if sign else 0)
        if adj == key:
            key_index[key] = (n_vars, 0)
            var_keys.append(key)
            n_vars += 1
        else:
            key_index[key] = (n_vars, 1)
            var_keys.append(key)
            var_keys.append(key)
            n_vars += 2
        return key_index[key]

    for a in range(rank):
        for wi, w in enumerate(words):
            r = a * nw + wi
            for b in range(rank):
                for vi, v in enumerate(words):
                    c = b * nw + vi
                    can = canonical(tuple(reversed(w)) + v)
                    if can is None:
                        continue
                    if can == ((), ()):
                        F0[r, c] = 1.0 if a == b else 0.0
                        continue
                    i, sign = var_for((a, b, can))
                    pos = r * n + c
                    rows_i.append(i)
                    cols_i.append(pos)
                    vals.append(1.0)
                    if sign:
                        rows_i.append(i + 1)
                        cols_i.append(pos)
                        vals.append(1j * sign)
    F = sp.csr_matrix((np.array(vals, dtype=complex), (rows_i, cols_i)), shape=(n_vars, n * n))

    def lin(x, xp, word):
        """Real part of <phi_x|word|phi_xp> as (coefficient vector, constant)."""
        vec = np.zeros(n_vars)
        can = canonical(word)
        if can is None:
            return vec, 0.0
        coef = np.outer(R[x].conj(), R[xp])
        if can == ((), ()):
            return vec, float(np.trace(coef).real)
        for a in range(rank):
            for b in range(rank):
                i, sign = var_for((a, b, can))
                vec[i] += coef[a, b].real
                if sign:
                    vec[i + 1] -= sign * coef[a, b].imag
        return vec, 0.0

    # <phi_x| M_{b|y} |phi_x>, with the last outcome expressed by completeness
    def bob_prob(x, y, b):
        m = params.m_of_y(y)
        k = signed_bins(m).index(b)
        if k < 2 * m - 1:
            return lin(x, x, (("M", y, k),))
        vec = np.zeros(n_vars)
        const = lin(x, x, ())[1]
        for kk in range(2 * m - 1):
            v, c = lin(x, x, (("M", y, kk),))
            vec -= v
            const -= c
        return vec, const

    kappa = build_kappa(params)
    cats = params.score_layout.categories
    S = np.zeros((len(cats), n_vars))
    s0 = np.zeros(len(cats))
    for (c, b, x, y), w in kappa.items():
        vec, const = bob_prob(x, y, b)
        j = cats.index(c)
        S[j] += w * vec
        s0[j] += w * const

    # objective: <M_{-1|1} E_0> + <M_{+1|1} E_1> on phi_0
    m_gen = ("M", 1, 0)
    e0 = ("E", 0)
    v_m, _ = lin(0, 0, (m_gen,))
    v_e, _ = lin(0, 0, (e0,))
    v_me, _ = lin(0, 0, (m_gen, e0))
    g = -v_m - v_e + 2 * v_me
    c0 = lin(0, 0, ())[1]

    if n_vars != F.shape[0] or n_vars != len(var_keys):
        raise AssertionError("variable bookkeeping mismatch")
    return MomentProblem(
        params=params,
        level=level,
        words=words,
        full_words=full_monomials(params, level, adversary_outcomes),
        size=n,
        F0=F0,
        F=F,
        g=g,
        c0=c0,
        S=S,
        s0=s0,
        var_keys=var_keys,
        key_index=key_index,
        gram=G,
        frame=R,
    )
