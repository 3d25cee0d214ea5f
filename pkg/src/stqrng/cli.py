"""Command-line driver.

Exit codes: 0 success / accept, 2 protocol abort, 3 nonpositive rate,
4 configuration error, 5 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import itertools
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .completeness import calibrate_delta, completeness_report
from .config import ConfigError, RunConfig, load_config
from .core import ScoreDistribution, honest_score_distribution
from .device import device_curves, optimal_ratio, ratio_scan
from .eat import asymptotic_rate
from .extractor import extract, finalize_output, read_bits, seed_length, write_bits
from .pipeline import CertificateCache, certify_rate
from .sdp.solver import InteriorPointSolver, SdpError
from .sim import simulate_run

EXIT_OK, EXIT_ABORT, EXIT_NONPOSITIVE, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3, 4, 5
WORKERS_ENV = "STQRNG_WORKERS"

log = logging.getLogger("stqrng")


# -- output helpers ---------------------------------------------------------------


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def write_json(path: Path, obj) -> None:
    _atomic_write(path, json.dumps(obj, indent=2) + "\n")


def write_csv(path: Path, header: list[str], rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    tmp.replace(path)


def _workers(cfg: RunConfig, flag: int | None) -> int:
    if flag is not None:
        return max(1, flag)
    if WORKERS_ENV in os.environ:
        return max(1, int(os.environ[WORKERS_ENV]))
    return cfg.workers or 1


def _solver(cfg: RunConfig) -> InteriorPointSolver:
    return InteriorPointSolver(max_iter=cfg.sdp.max_iter, max_size=cfg.sdp.max_size)


def _cache(cfg: RunConfig) -> CertificateCache | None:
    return CertificateCache(cfg.paths.cache_dir) if cfg.paths.cache_dir else None


RATE_COLUMNS = ["eta", "amp", "gamma", "n", "pguess", "h", "beta", "V", "K", "xi",
                "k_bound", "ell_out", "ell_in", "r_net", "h_asymptotic"]


def _rate_row(res) -> list:
    p, r = res.params, res.report
    return [p.eta, p.amp, p.gamma, float(p.n_rounds), res.pguess, r.h, r.beta, r.V, r.K, r.xi,
            r.k_bound, r.ell_out, r.ell_in, r.r_net, asymptotic_rate(res.certificate, res.omega_tilde, p.gamma)]


def _rate_json(res) -> dict:
    return {
        "params": res.params.to_json(),
        "pguess": res.pguess,
        "certificate": res.certificate.to_json(),
        "tolerances": res.dist.to_json(),
        "report": res.report.to_json(),
    }


# -- commands -----------------------------------------------------------------------


def cmd_rate(cfg: RunConfig, args) -> int:
    out = Path(cfg.paths.out_dir)
    res = certify_rate(cfg.params, cfg.budget, cfg.sdp.level, cfg.allocation, _solver(cfg), _cache(cfg))
    write_json(out / "rate.json", _rate_json(res))
    write_csv(out / "rate.csv", RATE_COLUMNS, [_rate_row(res)])
    r = res.report
    print(f"pguess={res.pguess:.8f} h={r.h:.6e} beta={r.beta:.4e} ell={r.ell_out} ell_in={r.ell_in:.6e} "
          f"r_net={r.r_net:.6e}")
    return EXIT_OK if r.positive else EXIT_NONPOSITIVE


def _sweep_point(job) -> tuple[int, list]:
    i, cfg, params, out = job
    res = certify_rate(params, cfg.budget, cfg.sdp.level, cfg.allocation, _solver(cfg), _cache(cfg))
    write_json(out / "points" / f"point-{i:04d}.json", _rate_json(res))
    return i, _rate_row(res)


def sweep_points(cfg: RunConfig):
    base = cfg.params
    grid = cfg.sweep
    axes = [grid.eta or [base.eta], grid.amp or [base.amp], grid.gamma or [base.gamma], grid.n or [base.n_rounds]]
    for eta, amp, gamma, n in itertools.product(*axes):
        yield base.replace(eta=float(eta), amp=float(amp), gamma=float(gamma), n_rounds=float(n))


def cmd_sweep(cfg: RunConfig, args) -> int:
    out = Path(cfg.paths.out_dir)
    if cfg.paths.cache_dir is None:
        cfg.paths.cache_dir = str(out / "certificates")
    jobs = [(i, cfg, p, out) for i, p in enumerate(sweep_points(cfg))]
    w = _workers(cfg, args.workers)
    if w > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=w) as ex:
            rows = dict(ex.map(_sweep_point, jobs))
    else:
        rows = dict(map(_sweep_point, jobs))
    write_csv(out / "sweep.csv", RATE_COLUMNS, [rows[i] for i in sorted(rows)])
    print(f"{len(rows)} points -> {out / 'sweep.csv'}")
    return EXIT_OK


def _tolerances(cfg: RunConfig, params) -> ScoreDistribution:
    honest = honest_score_distribution(params)
    delta = calibrate_delta(params.n_rounds, params.gamma, honest, cfg.budget.eps_com_target, cfg.allocation)
    return ScoreDistribution(dict(honest.omega), delta)


def _sim_params(cfg: RunConfig):
    n = cfg.simulate.n if cfg.simulate.n is not None else int(cfg.params.n_rounds)
    return cfg.params.replace(n_rounds=n), n


def _simulate(cfg: RunConfig, params, tol, n, workers, raw_out=None, mode=None):
    s = cfg.simulate
    return simulate_run(params, tol, s.deviation, seed=s.seed, n=n, sampler=s.sampler, mode=mode or s.mode,
                        block_size=s.block_size, workers=workers, raw_out=raw_out)


def cmd_simulate(cfg: RunConfig, args) -> int:
    out = Path(cfg.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    params, n = _sim_params(cfg)
    tol = _tolerances(cfg, params)
    streaming = cfg.simulate.mode == "streaming"
    raw_path = out / "raw.bin"
    tr = _simulate(cfg, params, tol, n, _workers(cfg, args.workers),
                   raw_out=raw_path if streaming and cfg.simulate.sampler != "multinomial" else None)
    if tr.raw_bits is not None:
        write_bits(raw_path, tr.raw_bits)
    write_json(out / "transcript.json", tr.summary())
    print(f"n={n} test rounds={tr.n_test} verdict={'accept' if tr.accepted else 'abort'}")
    return EXIT_OK if tr.accepted else EXIT_ABORT


def _read_seed(cfg: RunConfig, length: int) -> np.ndarray:
    path = cfg.extract.seed_file
    if path is None:
        raise ConfigError("extract.seed_file is required: extractor seeds come from an external trusted source")
    try:
        bits = read_bits(path)
    except OSError as e:
        raise ConfigError(f"cannot read seed file: {e}") from None
    if len(bits) < length:
        raise ConfigError(f"seed file holds {len(bits)} bits, {length} needed")
    return bits[:length]


def cmd_certify(cfg: RunConfig, args) -> int:
    out = Path(cfg.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.simulate.sampler == "multinomial":
        raise ConfigError("certify needs per-round data; use the direct or interval sampler")
    params, n = _sim_params(cfg)
    res = certify_rate(params, cfg.budget, cfg.sdp.level, cfg.allocation, _solver(cfg), _cache(cfg))
    tr = _simulate(cfg, params, res.dist, n, _workers(cfg, args.workers), mode="memory")
    write_json(out / "transcript.json", tr.summary())
    k_path = out / "K.bin"
    if k_path.exists():
        k_path.unlink()
    verdict = {
        "accepted": tr.accepted,
        "violated": [str(c) for c in tr.verdict.violated],
        "ell_certified": res.report.ell_out,
        "r_net": res.report.r_net,
        "pguess": res.pguess,
    }
    if not tr.accepted:
        write_json(out / "verdict.json", verdict)
        print("abort: " + ", ".join(verdict["violated"]))
        return EXIT_ABORT
    ell = cfg.extract.out_len if cfg.extract.out_len is not None else res.report.ell_out
    verdict["ell"] = ell
    verdict["certified"] = 0 < ell <= res.report.ell_out
    if ell <= 0:
        write_json(out / "verdict.json", verdict)
        print(f"accept, but the certified output length is {ell}; nothing to extract")
        return EXIT_NONPOSITIVE
    r = tr.raw_bits
    s = _read_seed(cfg, seed_length(len(r), ell))
    z = extract(r, s, ell)
    k = finalize_output(z, s)
    write_bits(k_path, k)
    verdict.update(k_bits=int(len(k)), seed_bits=int(len(s)), raw_bits=int(len(r)),
                   k_sha256=hashlib.sha256(np.packbits(k).tobytes()).hexdigest())
    write_json(out / "verdict.json", verdict)
    tag = "" if verdict["certified"] else " (output length above the certified bound)"
    print(f"accept: K = {len(z)} + {len(s)} bits -> {k_path}{tag}")
    return EXIT_OK


def cmd_extract(cfg: RunConfig, args) -> int:
    e = cfg.extract
    if e.input is None or e.out_len is None or e.output is None:
        raise ConfigError("extract needs input, out_len and output")
    try:
        r = read_bits(e.input, e.input_bits)
    except (OSError, ValueError) as err:
        raise ConfigError(f"cannot read input: {err}") from None
    s = _read_seed(cfg, seed_length(len(r), e.out_len))
    k = finalize_output(extract(r, s, e.out_len), s)
    write_bits(e.output, k)
    print(f"K = {e.out_len} + {len(s)} bits -> {e.output}")
    return EXIT_OK


def cmd_device(cfg: RunConfig, args) -> int:
    out = Path(cfg.paths.out_dir)
    d = cfg.device
    mzm = d.mzm()
    rows = device_curves(d.ratios, mzm, n_phi=d.n_phi)
    write_csv(out / "device_curves.csv", ["r", "phi1", "intensity", "phase"], rows)
    summary = {}
    for crit in ("equal_intensity", "min_ripple"):
        scan = ratio_scan(d.ratios, mzm, d.target_phase_range, crit)
        write_csv(out / f"working_points_{crit}.csv", ["r", "phi1_start", "phi1_end", "bias", "ripple", "intensity"],
                  [(r, w.phi1_start, w.phi1_end, w.bias, w.ripple, w.intensity) for r, w in scan if w is not None])
        try:
            r_opt, wp = optimal_ratio(d.ratios, mzm, d.target_phase_range, crit)
            summary[crit] = {"ratio": r_opt, "phi1_start": wp.phi1_start, "phi1_end": wp.phi1_end,
                             "bias": wp.bias, "ripple": wp.ripple, "intensity": wp.intensity}
        except ValueError as err:
            summary[crit] = {"error": str(err)}
    summary["default_criterion"] = d.criterion
    write_json(out / "device_summary.json", summary)
    best = summary[d.criterion]
    if "ratio" in best:
        print(f"optimal ratio ({d.criterion}) = {best['ratio']:.4f}, ripple {best['ripple']:.4f}")
    return EXIT_OK


def cmd_calibrate_delta(cfg: RunConfig, args) -> int:
    out = Path(cfg.paths.out_dir)
    p = cfg.params
    honest = honest_score_distribution(p)
    delta = calibrate_delta(p.n_rounds, p.gamma, honest, cfg.budget.eps_com_target, cfg.allocation)
    dist = ScoreDistribution(dict(honest.omega), delta)
    rep = completeness_report(p.n_rounds, p.gamma, dist)
    write_json(out / "delta.json", {"distribution": dist.to_json(), "completeness": rep.to_json()})
    for c in p.score_layout.categories:
        print(f"{str(c):>8}  omega={honest.omega[c]:.4f}  delta={delta[c]:.4e}")
    print(f"eps_com total = {rep.total:.4e}")
    return EXIT_OK


COMMANDS = {
    "rate": (cmd_rate, "certificate + finite-size rate at the configured parameters"),
    "sweep": (cmd_sweep, "rate over the sweep grid (eta x amp x gamma x n) to CSV"),
    "simulate": (cmd_simulate, "one simulated run: transcript summary and raw bits"),
    "certify": (cmd_certify, "simulate, accept/abort, extract K = (Z, S)"),
    "extract": (cmd_extract, "Toeplitz extraction of a raw bit file with a seed file"),
    "device": (cmd_device, "modulator curves and working points over push-push ratios"),
    "calibrate-delta": (cmd_calibrate_delta, "tolerances meeting the completeness target"),
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="stqrng", description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = ap.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("-c", "--config", help="JSON run configuration (defaults: reference parameter set)")
        p.add_argument("-o", "--out", help="output directory (overrides paths.out_dir)")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("rate", "sweep", "certify"):
            p.add_argument("--cache", help="certificate cache directory (overrides paths.cache_dir)")
        if name in ("sweep", "simulate", "certify"):
            p.add_argument("-j", "--workers", type=int, help=f"worker processes (env {WORKERS_ENV} also works)")
        if name in ("simulate", "certify"):
            p.add_argument("--seed", type=int, help="simulation seed (overrides simulate.seed)")
            p.add_argument("--streaming", action="store_true", help="keep counts only (simulate)")
        if name in ("certify", "extract"):
            p.add_argument("--seed-file", help="extractor seed bits, MSB-first (overrides extract.seed_file)")
            p.add_argument("--out-len", type=int, help="extractor output length (overrides extract.out_len)")
        if name == "extract":
            p.add_argument("--input", help="raw bit file")
            p.add_argument("--input-bits", type=int, help="number of bits to read from the raw file")
            p.add_argument("--output", help="K output file")
    return ap


def _apply_flags(cfg: RunConfig, args) -> None:
    if args.out:
        cfg.paths.out_dir = args.out
    if getattr(args, "cache", None):
        cfg.paths.cache_dir = args.cache
    if getattr(args, "seed", None) is not None:
        cfg.simulate.seed = args.seed
    if getattr(args, "streaming", False):
        cfg.simulate.mode = "streaming"
    for flag, attr in (("seed_file", "seed_file"), ("out_len", "out_len"), ("input", "input"),
                       ("input_bits", "input_bits"), ("output", "output")):
        v = getattr(args, flag, None)
        if v is not None:
            setattr(cfg.extract, attr, v)
    if not hasattr(args, "workers"):
        args.workers = None


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    func = COMMANDS[args.command][0]
    try:
        cfg = load_config(args.config)
        _apply_flags(cfg, args)
        return func(cfg, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (SdpError, ArithmeticError, np.linalg.LinAlgError) as e:
        print(f"numerical failure: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
