"""Protocol parameters, honest homodyne statistics, scoring and the accept test.

Quadrature convention: vacuum variance 1, so a coherent state |a> measured at
local-oscillator phase theta with efficiency eta gives a Gaussian outcome with
mean 2*sqrt(eta)*Re(a*exp(-i*theta)) and unit variance.  Bin edges are in units
of that standard deviation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
from scipy.special import ndtr

X_BASIS = "X"
P_BASIS = "P"
THETA = {0: 0.0, 1: math.pi / 2}  # Bob's setting y -> LO phase
BASIS_OF_Y = {0: X_BASIS, 1: P_BASIS}


def y_of_x(x: int) -> int:
    """Bob's basis choice induced by Alice's state on test rounds."""
    return 0 if x in (0, 1) else 1


@dataclass(frozen=True, order=True)
class ScoreLabel:
    """A score category: a signed bin of one basis, a named aggregate, or bot."""

    kind: str  # "bin" | "agg" | "bot"
    basis: str = ""
    index: int = 0
    name: str = ""

    @classmethod
    def bin(cls, basis: str, index: int) -> "ScoreLabel":
        if index == 0:
            raise ValueError("signed bin index must be nonzero")
        if basis not in (X_BASIS, P_BASIS):
            raise ValueError(f"unknown basis {basis!r}")
        return cls("bin", basis, int(index))

    @classmethod
    def agg(cls, name: str) -> "ScoreLabel":
        return cls("agg", name=name)

    @classmethod
    def bot(cls) -> "ScoreLabel":
        return cls("bot")

    def __str__(self) -> str:
        if self.kind == "bin":
            return f"{self.index:+d}_{self.basis}"
        if self.kind == "agg":
            return self.name
        return "bot"

    @classmethod
    def parse(cls, text: str) -> "ScoreLabel":
        if text == "bot":
            return cls.bot()
        if text.endswith(("_X", "_P")) and text[0] in "+-":
            return cls.bin(text[-1], int(text[:-2]))
        return cls.agg(text)


BOT = ScoreLabel.bot()


@dataclass(frozen=True)
class ScoreLayout:
    """Ordered monitored categories plus the raw-score -> category map."""

    categories: tuple[ScoreLabel, ...]
    aggregation: Mapping[ScoreLabel, ScoreLabel]

    def category_of(self, raw: ScoreLabel) -> ScoreLabel:
        return self.aggregation[raw]

    def index(self, label: ScoreLabel) -> int:
        return self.categories.index(label)

    def check(self, m_x: int, m_p: int) -> None:
        raw = set(raw_scores(m_x, m_p))
        if set(self.aggregation) != raw:
            missing = raw - set(self.aggregation)
            extra = set(self.aggregation) - raw
            raise ValueError(f"layout does not cover raw scores (missing {missing}, extra {extra})")
        if set(self.aggregation.values()) != set(self.categories):
            raise ValueError("layout categories do not match aggregation targets")
        if len(set(self.categories)) != len(self.categories):
            raise ValueError("duplicate categories")

    def to_json(self) -> dict:
        return {
            "categories": [str(c) for c in self.categories],
            "aggregation": {str(k): str(v) for k, v in sorted(self.aggregation.items())},
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "ScoreLayout":
        cats = tuple(ScoreLabel.parse(c) for c in obj["categories"])
        agg = {ScoreLabel.parse(k): ScoreLabel.parse(v) for k, v in obj["aggregation"].items()}
        return cls(cats, agg)


def raw_scores(m_x: int, m_p: int) -> list[ScoreLabel]:
    out = []
    for basis, m in ((X_BASIS, m_x), (P_BASIS, m_p)):
        for b in range(-m, m + 1):
            if b:
                out.append(ScoreLabel.bin(basis, b))
    return out


def identity_layout(m_x: int, m_p: int) -> ScoreLayout:
    """Every raw signed score is its own category."""
    raw = raw_scores(m_x, m_p)
    return ScoreLayout(tuple(raw), {r: r for r in raw})


def default_layout(m_x: int = 3, m_p: int = 1) -> ScoreLayout:
    """Monitor all raw scores except +1_X and +1_P, which share one residual category.

    For 6/2 bins this gives the seven categories -3_X, -2_X, -1_X, -1_P, +3_X,
    +2_X and "1-all".
    """
    residual = ScoreLabel.agg("1-all")
    plus_one = {ScoreLabel.bin(X_BASIS, 1), ScoreLabel.bin(P_BASIS, 1)}
    cats: list[ScoreLabel] = []
    agg: dict[ScoreLabel, ScoreLabel] = {}
    neg_x = [ScoreLabel.bin(X_BASIS, -b) for b in range(m_x, 0, -1)]
    neg_p = [ScoreLabel.bin(P_BASIS, -b) for b in range(m_p, 0, -1)]
    pos_x = [ScoreLabel.bin(X_BASIS, b) for b in range(m_x, 1, -1)]
    pos_p = [ScoreLabel.bin(P_BASIS, b) for b in range(m_p, 1, -1)]
    for lab in neg_x + neg_p + pos_x + pos_p:
        cats.append(lab)
        agg[lab] = lab
    cats.append(residual)
    for lab in plus_one:
        agg[lab] = residual
    return ScoreLayout(tuple(cats), agg)


@dataclass(frozen=True)
class ProtocolParams:
    gamma: float = 0.12
    amp: float = 0.0672
    eta: float = 0.691
    bins_x: int = 6
    bins_p: int = 2
    bin_half_range: float = 1.0064  # least-squares fit to the reference omega values
    n_rounds: float = 3e10
    score_layout: ScoreLayout | None = None

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.amp < 0:
            raise ValueError("amp must be nonnegative")
        if not 0 <= self.eta <= 1:
            raise ValueError(f"eta must lie in [0, 1], got {self.eta}")
        for nb in (self.bins_x, self.bins_p):
            if nb < 2 or nb % 2:
                raise ValueError(f"bin counts must be even and >= 2, got {nb}")
        if self.bin_half_range <= 0:
            raise ValueError("bin_half_range must be positive")
        if self.n_rounds < 1:
            raise ValueError("n_rounds must be >= 1")
        if self.score_layout is None:
            object.__setattr__(self, "score_layout", default_layout(self.m_x, self.m_p))
        self.score_layout.check(self.m_x, self.m_p)

    @property
    def m_x(self) -> int:
        return self.bins_x // 2

    @property
    def m_p(self) -> int:
        return self.bins_p // 2

    def m_of_y(self, y: int) -> int:
        return self.m_x if y == 0 else self.m_p

    @property
    def mu(self) -> float:
        return self.amp**2

    def replace(self, **changes) -> "ProtocolParams":
        d = {f: getattr(self, f) for f in self.__dataclass_fields__}
        if ("bins_x" in changes or "bins_p" in changes) and "score_layout" not in changes:
            d["score_layout"] = None
        d.update(changes)
        return ProtocolParams(**d)

    def to_json(self) -> dict:
        return {
            "gamma": self.gamma,
            "amp": self.amp,
            "eta": self.eta,
            "bins_x": self.bins_x,
            "bins_p": self.bins_p,
            "bin_half_range": self.bin_half_range,
            "n_rounds": self.n_rounds,
            "score_layout": self.score_layout.to_json(),
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "ProtocolParams":
        obj = dict(obj)
        layout = obj.pop("score_layout", None)
        if layout is not None:
            layout = ScoreLayout.from_json(layout)
        return cls(score_layout=layout, **obj)


@dataclass
class ScoreDistribution:
    """Per-category probabilities conditional on a test round.

    ``freq`` holds observed f(c)/gamma values when a run has been recorded.
    """

    omega: dict[ScoreLabel, float]
    delta: dict[ScoreLabel, float] = field(default_factory=dict)
    freq: dict[ScoreLabel, float] | None = None

    def __post_init__(self):
        for c, v in self.omega.items():
            if not -1e-15 <= v <= 1 + 1e-15:
                raise ValueError(f"omega[{c}] = {v} outside [0, 1]")
        total = sum(self.omega.values())
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"omega sums to {total!r}, not 1")
        for c, v in self.delta.items():
            if v < 0:
                raise ValueError(f"delta[{c}] negative")

    @property
    def labels(self) -> list[ScoreLabel]:
        return list(self.omega)

    def vector(self, layout: ScoreLayout, which: str = "omega") -> np.ndarray:
        src = getattr(self, which)
        return np.array([src.get(c, 0.0) for c in layout.categories])

    def to_json(self) -> dict:
        out = {
            "omega": {str(k): v for k, v in self.omega.items()},
            "delta": {str(k): v for k, v in self.delta.items()},
        }
        if self.freq is not None:
            out["freq"] = {str(k): v for k, v in self.freq.items()}
        return out

    @classmethod
    def from_json(cls, obj: Mapping) -> "ScoreDistribution":
        def conv(d):
            return {ScoreLabel.parse(k): float(v) for k, v in d.items()}

        freq = obj.get("freq")
        return cls(conv(obj["omega"]), conv(obj.get("delta", {})), conv(freq) if freq is not None else None)


@dataclass(frozen=True)
class GramMatrix:
    entries: np.ndarray

    def __post_init__(self):
        g = self.entries
        if not np.allclose(g, g.conj().T, atol=1e-14):
            raise ValueError("Gram matrix must be Hermitian")
        if not np.allclose(np.diag(g), 1.0, atol=1e-14):
            raise ValueError("Gram matrix must have unit diagonal")
        if np.linalg.eigvalsh(g).min() < -1e-12:
            raise ValueError("Gram matrix is not positive semidefinite")

    def __getitem__(self, idx):
        return self.entries[idx]


def coherent_overlap(alpha: complex, beta: complex) -> complex:
    """<alpha|beta> for coherent states."""
    return complex(np.exp(-abs(alpha) ** 2 / 2 - abs(beta) ** 2 / 2 + np.conj(alpha) * beta))


# x = 0, 1 are the X-quadrature pair and x = 2, 3 the P-quadrature pair, as
# the scoring rule and basis choice y(x) require.
QPSK_PHASES = np.array([0.0, np.pi, np.pi / 2, 3 * np.pi / 2])


def qpsk_amplitudes(amp: float) -> np.ndarray:
    out = amp * np.exp(1j * QPSK_PHASES)
    # exact zeros for the vanishing quadrature
    return np.round(out.real, 15) + 1j * np.round(out.imag, 15)


def gram_matrix(params: ProtocolParams) -> GramMatrix:
    a = qpsk_amplitudes(params.amp)
    g = np.array([[coherent_overlap(ai, aj) for aj in a] for ai in a])
    g[np.diag_indices(4)] = 1.0
    return GramMatrix(g)


def quadrature_mean(x_index: int, theta: float, params: ProtocolParams) -> float:
    alpha = qpsk_amplitudes(params.amp)[x_index]
    return float(2 * math.sqrt(params.eta) * (alpha * np.exp(-1j * theta)).real)


def quadrature_pdf(x_index: int, theta: float, q, params: ProtocolParams):
    mean = quadrature_mean(x_index, theta, params)
    q = np.asarray(q, dtype=float)
    return np.exp(-0.5 * (q - mean) ** 2) / math.sqrt(2 * math.pi)


def bin_edges(n_bins: int, half_range: float) -> np.ndarray:
    """Interior bin boundaries, ascending; length n_bins - 1."""
    if n_bins == 2:
        return np.array([0.0])
    return np.linspace(-half_range, half_range, n_bins - 1)


def signed_bins(m: int) -> list[int]:
    """Signed bin labels in ascending quadrature order: -m..-1, +1..+m."""
    return list(range(-m, 0)) + list(range(1, m + 1))


def bin_probabilities(x_index: int, theta: float, params: ProtocolParams, n_bins: int | None = None) -> np.ndarray:
    """Probabilities of the signed bins, ordered as :func:`signed_bins`.

    The bin count follows the basis (theta = 0 is X) unless ``n_bins`` is given,
    e.g. for a misaligned local-oscillator phase.
    """
    if n_bins is None:
        n_bins = params.bins_x if theta == THETA[0] else params.bins_p
    mean = quadrature_mean(x_index, theta, params)
    edges = bin_edges(n_bins, params.bin_half_range)
    # upper tails, differenced, keep precision in both tails
    lower = ndtr(edges - mean)
    upper = ndtr(mean - edges)
    probs = np.empty(n_bins)
    probs[0] = lower[0]
    probs[-1] = upper[-1]
    for k in range(1, n_bins - 1):
        if edges[k] - mean <= 0:
            probs[k] = lower[k] - lower[k - 1]
        else:
            probs[k] = upper[k - 1] - upper[k]
    return probs


def bin_probabilities_for_y(x_index: int, y: int, params: ProtocolParams) -> dict[int, float]:
    m = params.m_of_y(y)
    probs = bin_probabilities(x_index, THETA[y], params)
    return dict(zip(signed_bins(m), probs))


def raw_score(x: int, b: int) -> ScoreLabel:
    """Signed score before aggregation: +b for (X=0, B=+b) or (X=1, B=-b) etc."""
    if x in (0, 2):
        sign = 1
    else:
        sign = -1
    return ScoreLabel.bin(X_BASIS if x in (0, 1) else P_BASIS, sign * b)


def assign_score(t: int, x: int, y: int, b: int, layout: ScoreLayout) -> ScoreLabel:
    if t == 0:
        return BOT
    if t != 1:
        raise ValueError(f"t must be a bit, got {t}")
    if x not in range(4):
        raise ValueError(f"x must lie in 0..3, got {x}")
    if y != y_of_x(x):
        raise ValueError(f"test round with inconsistent inputs x={x}, y={y}")
    return layout.category_of(raw_score(x, b))


def honest_score_distribution(params: ProtocolParams) -> ScoreDistribution:
    layout = params.score_layout
    omega = {c: 0.0 for c in layout.categories}
    for x in range(4):
        y = y_of_x(x)
        for b, p in bin_probabilities_for_y(x, y, params).items():
            omega[assign_score(1, x, y, b, layout)] += 0.25 * p
    # absorb float residue in the largest entry so the sum is exactly 1
    total = math.fsum(omega.values())
    big = max(omega, key=omega.get)
    omega[big] += 1.0 - total
    return ScoreDistribution(omega)


@dataclass(frozen=True)
class Verdict:
    accepted: bool
    violated: tuple[ScoreLabel, ...] = ()

    def __bool__(self) -> bool:
        return self.accepted


def accept_test(dist: ScoreDistribution, gamma: float, n_rounds: int | None = None,
                counts: Mapping[ScoreLabel, int] | None = None) -> Verdict:
    """Accept iff f(c) <= gamma*(omega_c + delta_c) for every monitored category.

    With ``counts`` and ``n_rounds`` the comparison is done in integer counts,
    count(c) <= floor(n*gamma*(omega_c + delta_c)), which avoids rounding at
    the boundary.  Otherwise ``dist.freq`` (f(c)/gamma) is compared directly.
    """
    violated = []
    for c, w in dist.omega.items():
        d = dist.delta.get(c, 0.0)
        if counts is not None:
            if n_rounds is None:
                raise ValueError("integer comparison needs n_rounds")
            if counts.get(c, 0) > math.floor(n_rounds * gamma * (w + d)):
                violated.append(c)
        else:
            if dist.freq is None:
                raise ValueError("no observed frequencies to test")
            if gamma * dist.freq.get(c, 0.0) > gamma * (w + d):
                violated.append(c)
    return Verdict(not violated, tuple(violated))


# fixtures ------------------------------------------------------------------

FIXTURE_DIR = Path(__file__).resolve().parents[2] / "fixtures"


def load_fixture(name: str, directory: Path | None = None) -> dict:
    path = Path(directory or FIXTURE_DIR) / name
    with open(path) as fh:
        return json.load(fh)


def table1_params(directory: Path | None = None) -> ProtocolParams:
    fx = load_fixture("table1.json", directory)
    return ProtocolParams.from_json(fx["params"])


def table2_distribution(directory: Path | None = None) -> tuple[ScoreDistribution, dict[ScoreLabel, float]]:
    """Reference omega/delta, plus the reported f(c)/gamma - omega deviations."""
    fx = load_fixture("table2.json", directory)
    omega, delta, dev = {}, {}, {}
    for row in fx["rows"]:
        lab = ScoreLabel.parse(row["score"])
        omega[lab] = row["omega"]
        delta[lab] = row["delta"]
        dev[lab] = row["deviation"]
    # table values are rounded to 4 digits; they happen to sum to 1.0000
    dist = ScoreDistribution(omega, delta)
    return dist, dev


def ordered(labels: Iterable[ScoreLabel], layout: ScoreLayout) -> list[ScoreLabel]:
    return sorted(labels, key=layout.index)
