"""Wall-clock scaling of likelihood evaluations and sweeps with lattice size.

    python scripts/scaling.py --exponents 12 14 16 18 --out scaling.csv
"""

import argparse

from fgp.simulate import fit_scaling_exponent, scaling_probe
from fgp.spectral import SpectralModel


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--exponents", type=int, nargs="+", default=[12, 14, 16, 18])
    ap.add_argument("--rho", type=float, default=5.0)
    ap.add_argument("--reps", type=int, default=5)
    ap.add_argument("--out", default="scaling.csv")
    args = ap.parse_args()

    model = SpectralModel("squared_exponential", 100.0, (args.rho,), sigma2=1.0)
    rows = scaling_probe([2**e for e in args.exponents], model, reps=args.reps, csv_path=args.out)
    print(f"{'n':>8s} {'m/n':>6s} {'lik (s)':>10s} {'lik full (s)':>12s} {'speedup':>8s} {'sweep (s)':>10s}")
    for r in rows:
        speed = r["seconds_likelihood_full"] / r["seconds_likelihood"]
        print(f"{r['n']:8d} {r['sparsity']:6.3f} {r['seconds_likelihood']:10.2e} {r['seconds_likelihood_full']:12.2e} {speed:8.1f} {r['seconds_sweep']:10.3f}")
    n = [r["n"] for r in rows]
    for key in ("seconds_likelihood", "seconds_sweep"):
        a, c = fit_scaling_exponent(n, [r[key] for r in rows])
        print(f"{key}: time = {c:.2e} n^{a:.3f} log n")


if __name__ == "__main__":
    main()
