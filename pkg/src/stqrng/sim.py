"""Monte Carlo protocol runs: input sampling, device outcomes, scoring, accept/abort.

Randomness here is simulation randomness from a counter-based generator
(Philox keyed by (seed, block)); it is never used as extractor seed material.
Blocks are independent, so serial and parallel execution agree bit for bit.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .core import (
    THETA,
    ProtocolParams,
    ScoreDistribution,
    ScoreLabel,
    Verdict,
    accept_test,
    assign_score,
    bin_probabilities,
    signed_bins,
    y_of_x,
)

CHUNK = 1 << 20  # rounds drawn per generator call inside a block; fixed for reproducibility
DEFAULT_BLOCK = 25_000_000
INTERVAL_RESTART = 1024


def block_rng(seed: int, block: int, stream: int = 0) -> np.random.Generator:
    """Independent generator for (seed, block, stream)."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(block), int(stream)))
    return np.random.Generator(np.random.Philox(ss))


# -- input sampling by the interval algorithm ---------------------------------


class StreamExhausted(RuntimeError):
    pass


class BitStream:
    """Uniform bits from an iterable of 0/1 values or a callable chunk source."""

    def __init__(self, bits: Iterable[int] | None = None, source=None, chunk: int = 1 << 16):
        self._it: Iterator[int] | None = iter(bits) if bits is not None else None
        self._source = source
        self._buf = np.zeros(0, dtype=np.uint8)
        self._pos = 0
        self._chunk = chunk
        self.consumed = 0

    @classmethod
    def from_rng(cls, rng: np.random.Generator) -> "BitStream":
        return cls(source=lambda k: np.unpackbits(rng.integers(0, 256, size=k // 8 + 1, dtype=np.uint8)))

    def read(self) -> int:
        if self._it is not None:
            try:
                b = next(self._it)
            except StopIteration:
                raise StreamExhausted("uniform bit stream exhausted") from None
            self.consumed += 1
            return int(b)
        if self._pos >= len(self._buf):
            if self._source is None:
                raise StreamExhausted("uniform bit stream exhausted")
            self._buf = self._source(self._chunk)
            self._pos = 0
        b = int(self._buf[self._pos])
        self._pos += 1
        self.consumed += 1
        return b


def input_symbols(gamma: float) -> tuple[list[tuple[int, int, int]], list[Fraction]]:
    """Round input symbols (t, x, y) and their exact probabilities."""
    g = Fraction(repr(gamma))
    syms = [(0, 0, 1)] + [(1, x, y_of_x(x)) for x in range(4)]
    probs = [1 - g] + [g / 4] * 4
    return syms, probs


class IntervalSampler:
    """Han-Hoshi interval algorithm, restarted every ``restart`` symbols.

    The coin interval [u, u + v) is kept relative to the current target
    interval as integers, u = U/Q and v = V/Q, so every step is exact.
    """

    def __init__(self, probs: list[Fraction], restart: int = INTERVAL_RESTART):
        D = math.lcm(*(p.denominator for p in probs))
        self.D = D
        self.a = [int(p * D) for p in probs]
        self.C = [0]
        for a in self.a:
            self.C.append(self.C[-1] + a)
        if self.C[-1] != D:
            raise ValueError("probabilities must sum to one")
        self.restart = restart

    def sample(self, n: int, bits: BitStream) -> np.ndarray:
        out = np.empty(n, dtype=np.int8)
        D, a, C = self.D, self.a, self.C
        k = len(a)
        done = 0
        while done < n:
            U, V, Q = 0, 1, 1
            block_end = min(n, done + self.restart)
            steps = 0
            while done < block_end:
                UD = U * D
                j = 0
                while j < k - 1 and UD >= C[j + 1] * Q:
                    j += 1
                if (U + V) * D <= C[j + 1] * Q:
                    out[done] = j
                    done += 1
                    U = UD - C[j] * Q
                    V = V * D
                    Q = Q * a[j]
                else:
                    Q <<= 1
                    U = (U << 1) + (V if bits.read() else 0)
                steps += 1
                if steps % 64 == 0:
                    g = math.gcd(math.gcd(U, V), Q)
                    if g > 1:
                        U //= g
                        V //= g
                        Q //= g
        return out


def sample_inputs(n: int, gamma: float, uniform_bits: BitStream | Iterable[int],
                  restart: int = INTERVAL_RESTART) -> tuple[np.ndarray, np.ndarray, np.ndarray, int]:
    """(t, x, y) arrays for n rounds and the number of uniform bits consumed."""
    bits = uniform_bits if isinstance(uniform_bits, BitStream) else BitStream(uniform_bits)
    start = bits.consumed
    syms, probs = input_symbols(gamma)
    idx = IntervalSampler(probs, restart).sample(n, bits)
    table = np.array(syms, dtype=np.int8)
    t, x, y = table[idx].T
    return t.copy(), x.copy(), y.copy(), bits.consumed - start


# -- device -------------------------------------------------------------------


@dataclass(frozen=True)
class DeviationModel:
    """How the simulated device departs from the honest model.

    kinds: honest, efficiency_shift (value = delta eta), amplitude_shift
    (value = delta sqrt(mu)), phase_misalignment (value = delta theta, rad),
    fixed_outcome (value = signed bin always reported).
    """

    kind: str = "honest"
    value: float = 0.0

    KINDS = ("honest", "efficiency_shift", "amplitude_shift", "phase_misalignment", "fixed_outcome")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown deviation kind {self.kind!r}")
        if self.kind == "fixed_outcome" and (self.value == 0 or self.value != int(self.value)):
            raise ValueError("fixed_outcome needs a nonzero signed bin")

    def device_params(self, params: ProtocolParams) -> ProtocolParams:
        if self.kind == "efficiency_shift":
            return params.replace(eta=min(max(params.eta + self.value, 0.0), 1.0))
        if self.kind == "amplitude_shift":
            return params.replace(amp=max(params.amp + self.value, 0.0))
        return params

    def outcome_table(self, params: ProtocolParams) -> dict[tuple[int, int], np.ndarray]:
        """Probability vectors over signed_bins(m_y) for every (x, y) the protocol uses."""
        dev = self.device_params(params)
        dtheta = self.value if self.kind == "phase_misalignment" else 0.0
        out = {}
        for x, y in [(0, 0), (1, 0), (2, 1), (3, 1), (0, 1)]:
            m = params.m_of_y(y)
            if self.kind == "fixed_outcome":
                p = np.zeros(2 * m)
                b = int(self.value)
                b = max(-m, min(m, b))
                p[signed_bins(m).index(b)] = 1.0
            else:
                p = bin_probabilities(x, THETA[y] + dtheta, dev, n_bins=2 * m)
            out[(x, y)] = p / p.sum()
        return out

    def to_json(self) -> dict:
        return {"kind": self.kind, "value": self.value}

    @classmethod
    def from_json(cls, obj) -> "DeviationModel":
        return cls(obj.get("kind", "honest"), float(obj.get("value", 0.0)))


# -- raw-bit encoding -----------------------------------------------------------


def b_code_width(m_max: int) -> int:
    return max(1, math.ceil(math.log2(2 * m_max)))


def round_width(m_max: int) -> int:
    return b_code_width(m_max) + 4


def encode_b(b: np.ndarray, m_max: int) -> np.ndarray:
    """Signed bin -> index in signed_bins(m_max): -m..-1 -> 0..m-1, +1..+m -> m..2m-1."""
    b = np.asarray(b, dtype=np.int64)
    return np.where(b < 0, b + m_max, b + m_max - 1)


def decode_b(code: np.ndarray, m_max: int) -> np.ndarray:
    code = np.asarray(code, dtype=np.int64)
    return np.where(code < m_max, code - m_max, code - m_max + 1)


def round_codes(t, x, y, b, m_max: int) -> np.ndarray:
    """Per-round integer codes of (B, T, X, Y), B in the most significant bits."""
    return (encode_b(b, m_max) << 4) | (np.asarray(t, np.int64) << 3) | (np.asarray(x, np.int64) << 1) | np.asarray(y, np.int64)


def codes_to_bits(codes: np.ndarray, width: int) -> np.ndarray:
    shifts = np.arange(width - 1, -1, -1)
    return ((codes[:, None] >> shifts) & 1).astype(np.uint8).ravel()


def pack_rounds(t, x, y, b, m_max: int) -> np.ndarray:
    """Raw string R as a bit array (one uint8 per bit), rounds in order, MSB first per field."""
    return codes_to_bits(round_codes(t, x, y, b, m_max), round_width(m_max))


def unpack_rounds(bits: np.ndarray, m_max: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    w = round_width(m_max)
    bits = np.asarray(bits, dtype=np.int64)
    if len(bits) % w:
        raise ValueError(f"bit length {len(bits)} is not a multiple of the round width {w}")
    weights = 1 << np.arange(w - 1, -1, -1)
    codes = bits.reshape(-1, w) @ weights
    return (codes >> 3) & 1, (codes >> 1) & 3, codes & 1, decode_b(codes >> 4, m_max)


# -- runs -----------------------------------------------------------------------


@dataclass
class RoundRecords:
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    b: np.ndarray
    score: np.ndarray  # category index, -1 for generation rounds

    def __len__(self):
        return len(self.t)


@dataclass
class RunTranscript:
    params: ProtocolParams
    deviation: DeviationModel
    seed: int
    n: int
    sampler: str
    dist: ScoreDistribution  # omega, delta and observed freq = f(c)/gamma
    counts: dict[ScoreLabel, int]
    n_test: int
    verdict: Verdict
    records: RoundRecords | None = None
    raw_bits: np.ndarray | None = field(default=None, repr=False)  # one uint8 per bit
    raw_nbits: int = 0
    bits_consumed: int | None = None

    @property
    def accepted(self) -> bool:
        return self.verdict.accepted

    def summary(self) -> dict:
        return {
            "params": self.params.to_json(),
            "deviation": self.deviation.to_json(),
            "seed": self.seed,
            "n": self.n,
            "sampler": self.sampler,
            "n_test": self.n_test,
            "counts": {str(c): v for c, v in self.counts.items()},
            "distribution": self.dist.to_json(),
            "accepted": self.verdict.accepted,
            "violated": [str(c) for c in self.verdict.violated],
            "raw_nbits": self.raw_nbits,
            "bits_consumed": self.bits_consumed,
        }

    def write_summary(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2))


def pack_raw_bits(transcript: RunTranscript) -> np.ndarray:
    if transcript.records is None:
        raise ValueError("transcript has no per-round records (streaming mode)")
    r = transcript.records
    return pack_rounds(r.t, r.x, r.y, r.b, max(transcript.params.m_x, transcript.params.m_p))


def _score_table(params: ProtocolParams) -> np.ndarray:
    """table[x, k] = category index for a test round with input x and outcome signed_bins(m_y)[k]."""
    cats = params.score_layout.categories
    m_max = max(params.m_x, params.m_p)
    table = np.full((4, 2 * m_max), -1, dtype=np.int64)
    for x in range(4):
        y = y_of_x(x)
        for k, b in enumerate(signed_bins(params.m_of_y(y))):
            table[x, k] = cats.index(assign_score(1, x, y, b, params.score_layout))
    return table


@dataclass
class _BlockJob:
    params: ProtocolParams
    deviation: DeviationModel
    seed: int
    block: int
    size: int
    sampler: str
    keep_records: bool
    keep_bits: bool
    restart: int


def _run_block(job: _BlockJob):
    params, gamma = job.params, job.params.gamma
    table = job.deviation.outcome_table(params)
    cdfs = {k: np.cumsum(v) for k, v in table.items()}
    scores = _score_table(params)
    n_cat = len(params.score_layout.categories)
    m_max = max(params.m_x, params.m_p)
    counts = np.zeros(n_cat, dtype=np.int64)
    rng = block_rng(job.seed, job.block, 0)
    bit_rng = block_rng(job.seed, job.block, 1)
    bits = BitStream.from_rng(bit_rng) if job.sampler == "interval" else None
    recs, raws = [], []
    consumed = 0
    done = 0
    while done < job.size:
        k = min(CHUNK, job.size - done)
        if job.sampler == "interval":
            t, x, y, used = sample_inputs(k, gamma, bits, job.restart)
            consumed += used
            t, x, y = t.astype(np.int64), x.astype(np.int64), y.astype(np.int64)
        else:
            t = (rng.random(k) < gamma).astype(np.int64)
            x = np.where(t == 1, rng.integers(0, 4, size=k), 0)
            y = np.where(t == 1, (x >= 2).astype(np.int64), 1)
        u = rng.random(k)
        kidx = np.zeros(k, dtype=np.int64)
        for (xx, yy), cdf in cdfs.items():
            sel = (x == xx) & (y == yy)
            if sel.any():
                kidx[sel] = np.minimum(np.searchsorted(cdf, u[sel], side="right"), len(cdf) - 1)
        m_y = np.where(y == 0, params.m_x, params.m_p)
        b = np.where(kidx < m_y, kidx - m_y, kidx - m_y + 1)
        sc = np.where(t == 1, scores[x, kidx], -1)
        counts += np.bincount(sc[sc >= 0], minlength=n_cat)
        if job.keep_records:
            recs.append((t.astype(np.int8), x.astype(np.int8), y.astype(np.int8), b.astype(np.int8), sc.astype(np.int8)))
        if job.keep_bits:
            raws.append(pack_rounds(t, x, y, b, m_max))
        done += k
    rec = None
    if recs:
        rec = tuple(np.concatenate(parts) for parts in zip(*recs))
    raw = np.concatenate(raws) if raws else None
    return counts, rec, raw, consumed


def _workers(workers: int | None) -> int:
    if workers is None:
        workers = int(os.environ.get("STQRNG_WORKERS", "1"))
    return max(1, workers)


def simulate_run(params: ProtocolParams, tolerances: ScoreDistribution, deviation: DeviationModel | None = None,
                 seed: int = 0, n: int | None = None, sampler: str = "direct", mode: str = "memory",
                 block_size: int = DEFAULT_BLOCK, workers: int | None = None, raw_out: str | Path | None = None,
                 restart: int = INTERVAL_RESTART) -> RunTranscript:
    """Simulate one protocol run of n rounds (default params.n_rounds).

    sampler: "direct" draws inputs from the block generator, "interval" derives
    them from uniform bits with the interval algorithm and counts the bits used,
    "multinomial" draws the category counts of an honest-i.i.d. run directly
    (no per-round data).  mode: "memory" keeps records and raw bits,
    "streaming" keeps only counts and writes raw bits to ``raw_out`` if given.
    """
    deviation = deviation or DeviationModel()
    n = int(params.n_rounds if n is None else n)
    if block_size <= 0 or block_size % 8:
        raise ValueError("block_size must be a positive multiple of 8")
    if sampler not in ("direct", "interval", "multinomial"):
        raise ValueError(f"unknown sampler {sampler!r}")
    if mode not in ("memory", "streaming"):
        raise ValueError(f"unknown mode {mode!r}")
    cats = params.score_layout.categories
    n_cat = len(cats)

    if sampler == "multinomial":
        counts = _multinomial_counts(params, deviation, seed, n)
        return _finish(params, tolerances, deviation, seed, n, sampler, counts, None, None, None)

    n_blocks = max(1, math.ceil(n / block_size))
    jobs = [
        _BlockJob(params, deviation, seed, i, min(block_size, n - i * block_size), sampler,
                  mode == "memory", mode == "memory" or raw_out is not None, restart)
        for i in range(n_blocks)
    ]
    counts = np.zeros(n_cat, dtype=np.int64)
    recs, raws = [], []
    consumed = 0
    sink = open(raw_out, "wb") if raw_out is not None else None
    try:
        w = _workers(workers)
        if w > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=w) as ex:
                results = ex.map(_run_block, jobs)
                for res in results:
                    consumed += _merge(res, counts, recs, raws, sink)
        else:
            for job in jobs:
                consumed += _merge(_run_block(job), counts, recs, raws, sink)
    finally:
        if sink is not None:
            sink.close()
    rec = None
    if recs:
        t, x, y, b, sc = (np.concatenate(p) for p in zip(*recs))
        rec = RoundRecords(t, x, y, b, sc)
    raw = np.concatenate(raws) if raws else None
    return _finish(params, tolerances, deviation, seed, n, sampler, counts, rec, raw,
                   consumed if sampler == "interval" else None)


def _merge(res, counts, recs, raws, sink) -> int:
    c, rec, raw, consumed = res
    counts += c
    if rec is not None:
        recs.append(rec)
    if raw is not None:
        if sink is not None:
            sink.write(np.packbits(raw).tobytes())
        else:
            raws.append(raw)
    return consumed


def _multinomial_counts(params, deviation, seed, n) -> np.ndarray:
    table = deviation.outcome_table(params)
    scores = _score_table(params)
    n_cat = len(params.score_layout.categories)
    probs = np.zeros(n_cat + 1)
    probs[-1] = 1.0 - params.gamma
    for x in range(4):
        y = y_of_x(x)
        for k, p in enumerate(table[(x, y)]):
            probs[scores[x, k]] += params.gamma * 0.25 * p
    probs = np.clip(probs, 0.0, None)
    probs /= probs.sum()
    rng = block_rng(seed, 0, 2)
    return rng.multinomial(n, probs)[:n_cat].astype(np.int64)


def _finish(params, tolerances, deviation, seed, n, sampler, counts, rec, raw, consumed) -> RunTranscript:
    cats = params.score_layout.categories
    cdict = {c: int(v) for c, v in zip(cats, counts)}
    freq = {c: v / (n * params.gamma) for c, v in cdict.items()}
    dist = ScoreDistribution(dict(tolerances.omega), dict(tolerances.delta), freq)
    verdict = accept_test(dist, params.gamma, n_rounds=n, counts=cdict)
    m_max = max(params.m_x, params.m_p)
    return RunTranscript(params, deviation, int(seed), n, sampler, dist, cdict, int(sum(cdict.values())), verdict,
                         rec, raw, n * round_width(m_max), consumed)
