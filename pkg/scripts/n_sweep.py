"""Finite-size net rate against the number of rounds, with the asymptotic value for reference."""

import argparse
import csv
import sys

import numpy as np

from stqrng.core import table1_params
from stqrng.eat import ErrorBudget, asymptotic_rate
from stqrng.pipeline import CertificateCache, certify_rate


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--log10-n", nargs=3, type=float, default=[8, 12, 0.25], metavar=("START", "STOP", "STEP"))
    ap.add_argument("--eta", type=float, default=None, help="detection efficiency (default: reference value)")
    ap.add_argument("--cache", help="certificate cache directory")
    ap.add_argument("--out", help="CSV path (default stdout)")
    args = ap.parse_args()

    base = table1_params()
    if args.eta is not None:
        base = base.replace(eta=args.eta)
    start, stop, step = args.log10_n
    cache = CertificateCache(args.cache) if args.cache else None

    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    w = csv.writer(fh)
    w.writerow(["n", "beta", "r_net", "h_asymptotic"])
    for e in np.arange(start, stop + step / 2, step):
        # tolerances shrink with n, so the certificate is shared but omega~ is rebuilt per point
        res = certify_rate(base.replace(n_rounds=float(10**e)), ErrorBudget(), cache=cache)
        h = asymptotic_rate(res.certificate, res.omega_tilde, base.gamma)
        w.writerow([10**e, res.report.beta, res.report.r_net, h])
        fh.flush()
    if args.out:
        fh.close()


if __name__ == "__main__":
    main()
