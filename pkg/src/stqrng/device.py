"""Push-push Mach-Zehnder modulator with phase-dependent loss.

Each arm applies phase phi with power transmission 1 - loss_slope * |phi|.
Driving the arms with phi1 and r * phi1 and combining them with a static
bias gives an output whose phase can be swept over pi/2 while the power
at the two working points stays equal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq, minimize_scalar

# 35% power loss at 1.5 pi of modulated phase, loss linear in phase
DEFAULT_LOSS_SLOPE = 0.35 / (1.5 * math.pi)
DEFAULT_PHASE_LIMIT = 1.5 * math.pi
MIN_INTENSITY = 1e-9


@dataclass(frozen=True)
class MzmConfig:
    loss_slope: float = DEFAULT_LOSS_SLOPE
    bias: float = 0.0
    ratio: float = 0.6
    phase_limit: float = DEFAULT_PHASE_LIMIT  # largest |phi1| swept

    def __post_init__(self):
        if self.loss_slope < 0:
            raise ValueError("loss_slope must be nonnegative")
        if not 0 < self.ratio <= 1:
            raise ValueError("ratio must lie in (0, 1]")
        if self.loss_slope * self.phase_limit > 1:
            raise ValueError("phase_limit exceeds the range where the loss model is valid")

    def replace(self, **kw) -> "MzmConfig":
        d = dict(loss_slope=self.loss_slope, bias=self.bias, ratio=self.ratio, phase_limit=self.phase_limit)
        d.update(kw)
        return MzmConfig(**d)


def arm_amplitude(phi, cfg: MzmConfig):
    phi = np.asarray(phi, dtype=float)
    t = 1.0 - cfg.loss_slope * np.abs(phi)
    if np.any(t < 0):
        raise ValueError("loss factor negative: phase outside the modelled range")
    out = np.sqrt(t) * np.exp(1j * phi)
    return out[()] if out.ndim == 0 else out


def output_field(phi1, cfg: MzmConfig):
    return 0.5 * (arm_amplitude(phi1, cfg) + arm_amplitude(cfg.ratio * np.asarray(phi1, dtype=float), cfg)
                  * np.exp(1j * cfg.bias))


def mzm_output(phi1, cfg: MzmConfig):
    """(intensity, phase) of the combined field; phase is unwrapped along array input."""
    f = output_field(phi1, cfg)
    inten = np.abs(f) ** 2
    ph = np.angle(f)
    if np.ndim(ph):
        ph = np.unwrap(ph)
    return inten, ph


@dataclass
class WorkingPoint:
    phi1_start: float
    phi1_end: float
    bias: float
    ripple: float
    intensity: float  # at the working points (criterion "equal_intensity") or mean over the interval

    def as_tuple(self):
        return self.phi1_start, self.phi1_end, self.bias, self.ripple


def _phase_step(cfg, a, b):
    """Phase of the output at b relative to a, valid while it stays inside (-pi, pi)."""
    return float(np.angle(output_field(b, cfg) * np.conj(output_field(a, cfg))))


def _span_ends(grid, phase, target):
    """For each grid start, the interpolated phi1 where |phase - phase[start]| first reaches target.

    NaN where the span is never reached.
    """
    d = np.abs(phase[None, :] - phase[:, None])
    hit = (d >= target) & np.triu(np.ones(d.shape, dtype=bool), 1)
    j = np.argmax(hit, axis=1)
    ok = hit[np.arange(len(grid)), j]
    ends = np.full(len(grid), np.nan)
    i = np.nonzero(ok)[0]
    j = j[i]
    d0, d1 = d[i, j - 1], d[i, j]
    ends[i] = grid[j - 1] + (target - d0) / (d1 - d0) * (grid[j] - grid[j - 1])
    return ends


def _refine_end(cfg, start, approx, width, target):
    lo, hi = max(start + 1e-12, approx - width), min(cfg.phase_limit, approx + width)

    def f(p):
        return abs(_phase_step(cfg, start, p)) - target

    if f(lo) * f(hi) > 0:
        return approx
    return brentq(f, lo, hi, xtol=1e-14)


def _ripple(cfg, a, b, samples=401):
    inten, _ = mzm_output(np.linspace(a, b, samples), cfg)
    return float((inten.max() - inten.min()) / inten.mean())


def _best_for_bias(cfg, target, criterion, n_grid, refine=False):
    grid = np.linspace(0.0, cfg.phase_limit, n_grid)
    inten, phase = mzm_output(grid, cfg)
    ends = _span_ends(grid, phase, target)
    h = grid[1] - grid[0]
    valid = ~np.isnan(ends)
    if not valid.any():
        return None
    if criterion == "equal_intensity":
        g = np.full(n_grid, np.nan)
        g[valid] = np.interp(ends[valid], grid, inten) - inten[valid]
        cands = []
        for k in range(n_grid - 1):
            a, b = g[k], g[k + 1]
            if np.isnan(a) or np.isnan(b) or a * b > 0 or (a == 0 and k > 0):
                continue
            s = grid[k] + (a / (a - b) if a != b else 0.0) * h
            e = ends[k] + (s - grid[k]) / h * (ends[k + 1] - ends[k])
            if refine:
                def gap(x):
                    ee = _refine_end(cfg, x, float(np.interp(x, grid[valid], ends[valid])), 2 * h, target)
                    return float(mzm_output(ee, cfg)[0] - mzm_output(x, cfg)[0])

                lo, hi = grid[k], grid[k + 1]
                if gap(lo) * gap(hi) <= 0 and gap(lo) != gap(hi):
                    s = brentq(gap, lo, hi, xtol=1e-14)
                e = _refine_end(cfg, s, e, 2 * h, target)
            i_wp = float(mzm_output(s, cfg)[0])
            if i_wp > MIN_INTENSITY:  # extinction is not a working point
                cands.append((i_wp, float(s), float(e)))
        if not cands:
            return None
        inten_wp, s, e = max(cands)
        return WorkingPoint(s, e, cfg.bias, _ripple(cfg, s, e), inten_wp)
    if criterion == "min_ripple":
        ks = np.nonzero(valid)[0]
        starts, stops = grid[ks], ends[ks]
        # 101 samples across every candidate interval at once
        pts = starts[:, None] + (stops - starts)[:, None] * np.linspace(0.0, 1.0, 101)[None, :]
        inten_k = np.abs(output_field(pts, cfg)) ** 2
        rip = (inten_k.max(axis=1) - inten_k.min(axis=1)) / inten_k.mean(axis=1)
        i = int(np.argmin(rip))
        s, e = float(starts[i]), float(stops[i])
        if not refine:
            return WorkingPoint(s, e, cfg.bias, float(rip[i]), float(inten_k[i].mean()))
        e = _refine_end(cfg, s, e, 2 * h, target)
        inten_r = mzm_output(np.linspace(s, e, 101), cfg)[0]
        return WorkingPoint(s, e, cfg.bias, _ripple(cfg, s, e, 101), float(inten_r.mean()))
    raise ValueError(f"unknown criterion {criterion!r}")


def find_working_point(cfg: MzmConfig, target_phase_range: float = math.pi / 2,
                       criterion: str = "equal_intensity", n_bias: int = 181, n_grid: int = 401,
                       optimize_bias: bool = True) -> WorkingPoint:
    """phi1 interval whose output phase spans target_phase_range, and the bias that serves it best.

    ``equal_intensity``: the two ends carry the same power (no phase-dependent loss
    between the working states) and that power is maximal.  ``min_ripple``:
    minimize (max - min) / mean intensity across the interval.  The ripple is
    reported in both cases.
    """
    if target_phase_range < 0:
        raise ValueError("target phase range must be nonnegative")
    if target_phase_range == 0:
        inten = float(mzm_output(0.0, cfg)[0])
        return WorkingPoint(0.0, 0.0, cfg.bias, 0.0, inten)
    if not optimize_bias:
        wp = _best_for_bias(cfg, target_phase_range, criterion, n_grid, refine=True)
        if wp is None:
            raise ValueError("no interval reaches the requested phase span")
        return wp

    def score(wp):
        if wp is None:
            return -1e300
        return wp.intensity if criterion == "equal_intensity" else -wp.ripple

    biases = np.linspace(-math.pi, math.pi, n_bias, endpoint=False)
    cands = [(_best_for_bias(cfg.replace(bias=b), target_phase_range, criterion, n_grid), b) for b in biases]
    scores = np.array([score(w) for w, _ in cands])
    if not (scores > -1e300).any():
        raise ValueError("no interval reaches the requested phase span")
    k = int(np.argmax(scores))
    step = biases[1] - biases[0]

    def neg(b):
        return -score(_best_for_bias(cfg.replace(bias=b), target_phase_range, criterion, n_grid))

    res = minimize_scalar(neg, bounds=(biases[k] - step, biases[k] + step), method="bounded",
                          options={"xatol": 1e-7})
    bias = float(res.x) if -res.fun >= scores[k] else float(biases[k])
    wp = _best_for_bias(cfg.replace(bias=bias), target_phase_range, criterion, n_grid, refine=True)
    if wp is None:
        raise ValueError("no interval reaches the requested phase span")
    return wp


def ratio_scan(ratios, cfg: MzmConfig | None = None, target_phase_range: float = math.pi / 2,
               criterion: str = "equal_intensity", **kw) -> list[tuple[float, WorkingPoint | None]]:
    cfg = cfg or MzmConfig()
    out = []
    for r in ratios:
        try:
            out.append((float(r), find_working_point(cfg.replace(ratio=float(r)), target_phase_range, criterion, **kw)))
        except ValueError:
            out.append((float(r), None))
    return out


def optimal_ratio(ratios, cfg: MzmConfig | None = None, target_phase_range: float = math.pi / 2,
                  criterion: str = "equal_intensity", refine: bool = True, **kw) -> tuple[float, WorkingPoint]:
    """Best push-push ratio on the grid, optionally refined between its neighbours."""
    cfg = cfg or MzmConfig()
    scan = [(r, w) for r, w in ratio_scan(ratios, cfg, target_phase_range, criterion, **kw) if w is not None]
    if not scan:
        raise ValueError("no ratio admits a working point")

    def merit(w):
        return w.intensity if criterion == "equal_intensity" else -w.ripple

    r0, w0 = max(scan, key=lambda t: merit(t[1]))
    if not refine or len(ratios) < 2:
        return r0, w0
    grid = np.sort(np.asarray(ratios, dtype=float))
    k = int(np.searchsorted(grid, r0))
    lo, hi = grid[max(k - 1, 0)], grid[min(k + 1, len(grid) - 1)]
    hi = min(hi, 1.0)

    def neg(r):
        try:
            return -merit(find_working_point(cfg.replace(ratio=float(r)), target_phase_range, criterion, **kw))
        except ValueError:
            return 1e300

    res = minimize_scalar(neg, bounds=(lo, hi), method="bounded", options={"xatol": 1e-4})
    if res.fun <= -merit(w0):
        r = float(res.x)
        return r, find_working_point(cfg.replace(ratio=r), target_phase_range, criterion, **kw)
    return r0, w0


def device_curves(ratios, cfg: MzmConfig | None = None, n_phi: int = 101):
    """Rows (r, phi1, intensity, phase) at each ratio's working-point bias."""
    cfg = cfg or MzmConfig()
    rows = []
    for r, wp in ratio_scan(ratios, cfg):
        c = cfg.replace(ratio=r, bias=wp.bias if wp is not None else cfg.bias)
        phi = np.linspace(0.0, cfg.phase_limit, n_phi)
        inten, ph = mzm_output(phi, c)
        rows += [(r, float(p), float(i), float(q)) for p, i, q in zip(phi, inten, ph)]
    return rows
