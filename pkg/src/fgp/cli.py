"""Command-line entry point.

Exit codes: 0 success, 1 invalid input (flags, configuration, data files),
2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import dataio
from .dataio import ConfigError, RunConfig, atomic_write_text, ingest_csv, load_config
from .diagnostics import diagnostics
from .nonstationary import _predict_draw, ns_fit
from .simulate import SimSpec, atomic_write_rows, cross_validate, scaling_probe, simulate, write_predictions_csv
from .spectral import SpectralModel, build_frequency_lattice
from .stationary import EmbeddingError, fit, predict

log = logging.getLogger("fgp")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _load_run(args, require_data=True):
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "data", None):
        cfg.data.path = args.data
    if getattr(args, "seed", None) is not None:
        cfg.mcmc.seed = args.seed
    cfg.validate(require_data=require_data)
    data = ingest_csv(cfg.data.path, cfg.data.coords, cfg.data.value, cfg.data.noise)
    trend = None
    if cfg.trend.get("degree") is not None:
        data, trend = dataio.detrend(data, cfg.trend["degree"])
    return cfg, data, trend


def cmd_simulate(args) -> int:
    if not args.spec:
        spec = SimSpec()
    else:
        p = Path(args.spec)
        if not p.is_file():
            raise ConfigError(f"spec file not found: {p}")
        spec = SimSpec.from_dict(yaml.safe_load(p.read_text()) or {})
    if args.seed is not None:
        spec.seed = args.seed
    obs, truth = simulate(spec, np.random.default_rng(spec.seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataio.write_observations_csv(out / "observations.csv", obs)
    if truth is not None:
        atomic_write_rows(out / "truth.csv", ["s1", "s2", "rho"], (list(c) + [r] for c, r in zip(obs.coords, truth)))
    else:
        row = dict(spec.kernel, sigma2=spec.sigma2, nu2=spec.nu2)
        atomic_write_rows(out / "truth.csv", list(row), [list(row.values())])
    atomic_write_text(out / "spec.yaml", yaml.safe_dump(spec.to_dict(), sort_keys=True))
    print(f"wrote {len(obs)} observations to {out / 'observations.csv'}")
    return 0


def cmd_fit(args) -> int:
    cfg, data, trend = _load_run(args)
    model = cfg.spectral_model()
    post = fit(data, cfg.fit_config(), model)
    extra = {"config": cfg.to_dict(), "trend": trend.to_dict() if trend else None}
    out = dataio.save_posterior(args.out, post, extra)
    for k in post.names:
        print(f"{k:>10s}  mean {post.mean[k]:.4g}  sd {post.sd[k]:.3g}")
    print(f"posterior written to {out}")
    return 0


def cmd_fit_ns(args) -> int:
    cfg, data, trend = _load_run(args)
    model = cfg.spectral_model()
    post = ns_fit(data, cfg.ns_config(), model)
    out = dataio.save_ns_posterior(args.out, post)
    summ = yaml.safe_load((out / "summary.yaml").read_text())
    summ["config"] = cfg.to_dict()
    summ["trend"] = trend.to_dict() if trend else None
    atomic_write_text(out / "summary.yaml", yaml.safe_dump(summ, sort_keys=False))
    print(f"dominating components (>5% occupancy): {post.dominating()}")
    for c in post.component_summary()[: max(post.dominating(), 1)]:
        print(json.dumps({k: round(v, 4) if isinstance(v, float) else v for k, v in c.items()}))
    print(f"posterior written to {out}")
    return 0


def cmd_predict(args) -> int:
    summary, emb, draws = dataio.load_posterior(args.posterior)
    targets = dataio.read_targets(args.targets)
    if targets.shape[1] != len(emb.shape):
        raise ConfigError(f"targets have {targets.shape[1]} coordinates, posterior has {len(emb.shape)}")
    if summary.get("kind") == "nonstationary":
        lat = build_frequency_lattice(emb.shape)
        tl = emb.to_lattice(targets)
        from .harmonic import axis_bases

        bases = axis_bases(lat, tl)
        ms, vs = [], []
        for d in draws:
            m, v, _ = _predict_draw(d.coeffs.astype(complex), d.eta_coeffs.astype(complex), lat, tl, bases, d.z_models, d.nu2)
            ms.append(m)
            vs.append(v)
        ms = np.array(ms)
        mean, var = ms.mean(axis=0), np.mean(vs, axis=0) + ms.var(axis=0)
    else:
        res = predict(draws, targets, emb)
        mean, var = res["mean"], res["var"]
    tr = summary.get("trend")
    if tr:
        mean = mean + dataio.Trend.from_dict(tr).evaluate(targets)
    write_predictions_csv(args.out, targets, None, mean, np.sqrt(var))
    print(f"predictions for {len(targets)} targets written to {args.out}")
    return 0


def cmd_cv(args) -> int:
    cfg, data, _ = _load_run(args)
    model = cfg.spectral_model()
    conf = cfg.fit_config() if args.method == "stationary" else cfg.ns_config()
    rng = np.random.default_rng(cfg.mcmc.seed)
    audit = Path(args.out) / f"cv_{args.method}_predictions.csv" if args.out else None
    rep = cross_validate(data, args.method, args.split, conf, rng, model, audit_path=audit)
    if rep.error:
        print(f"fit failed: {rep.error}", file=sys.stderr)
        return 2
    row = rep.as_row()
    if args.out:
        atomic_write_rows(Path(args.out) / f"cv_{args.method}.csv", list(row), [list(row.values())])
    print(json.dumps(row))
    return 0


def cmd_diagnose(args) -> int:
    paths = []
    for p in args.posterior:
        p = Path(p)
        if p.is_dir():
            found = sorted(p.glob("draws_chain*.csv"))
            if not found:
                raise ConfigError(f"{p}: no draws_chain*.csv files")
            paths.extend(found)
        elif p.is_file():
            paths.append(p)
        else:
            raise ConfigError(f"posterior path not found: {p}")
    chains, names = dataio.read_draw_files(paths)
    keep = [j for j, nm in enumerate(names) if np.ptp(np.concatenate([c[:, j] for c in chains])) > 0 or len(chains) == 1]
    names = [names[j] for j in keep]
    chains = [c[:, keep] for c in chains]
    rep = diagnostics(chains, names, max_lag=args.max_lag)
    rows = rep.rows()
    if args.out:
        out = Path(args.out)
        atomic_write_rows(out / "diagnostics.csv", list(rows[0]), [list(r.values()) for r in rows])
        lags = len(next(iter(rep.autocorr.values())))
        atomic_write_rows(out / "autocorrelation.csv", ["lag", *names], ([k] + [float(rep.autocorr[n][k]) for n in names] for k in range(lags)))
        traces = rep.traces
        atomic_write_rows(
            out / "traces.csv", ["chain", "draw", *names],
            ([c + 1, i] + traces[c, i].tolist() for c in range(traces.shape[0]) for i in range(traces.shape[1])),
        )
    for r in rows:
        print(f"{r['parameter']:>10s}  rhat {r['rhat']:.4f}  ess {r['ess']:.1f}  acf1 {r['acf1']:.3f}{'  FLAG' if r['flag'] else ''}")
    return 0


def cmd_scaling(args) -> int:
    try:
        sizes = [int(v) for v in args.sizes.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--sizes must be a comma-separated list of integers, got {args.sizes!r}") from None
    if sizes != sorted(sizes) or not sizes:
        raise ConfigError("--sizes must be ascending")
    model = SpectralModel("squared_exponential", 100.0, (args.rho,), sigma2=1.0)
    rows = scaling_probe(sizes, model, reps=args.reps, csv_path=args.out)
    for r in rows:
        print(json.dumps(r))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fgp", description="Spectral lattice Gaussian process fitting and prediction")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("simulate", help="generate synthetic observations")
    s.add_argument("--spec", help="YAML simulation spec")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_simulate)

    for name, fn in (("fit", cmd_fit), ("fit-ns", cmd_fit_ns)):
        f = sub.add_parser(name, help="run the stationary sampler" if name == "fit" else "run the mixture sampler")
        f.add_argument("--data")
        f.add_argument("--config")
        f.add_argument("--out", required=True)
        f.add_argument("--seed", type=int)
        f.set_defaults(func=fn)

    pr = sub.add_parser("predict", help="predict at target coordinates from a saved posterior")
    pr.add_argument("--posterior", required=True)
    pr.add_argument("--targets", required=True)
    pr.add_argument("--out", required=True)
    pr.set_defaults(func=cmd_predict)

    cv = sub.add_parser("cv", help="train/test split cross-validation")
    cv.add_argument("--data")
    cv.add_argument("--config")
    cv.add_argument("--split", type=float, default=0.8)
    cv.add_argument("--method", choices=("stationary", "nonstationary"), default="stationary")
    cv.add_argument("--out")
    cv.add_argument("--seed", type=int)
    cv.set_defaults(func=cmd_cv)

    dg = sub.add_parser("diagnose", help="autocorrelation and between-chain agreement")
    dg.add_argument("--posterior", nargs="+", required=True, help="posterior directories or draw CSV files")
    dg.add_argument("--out")
    dg.add_argument("--max-lag", type=int, default=100)
    dg.set_defaults(func=cmd_diagnose)

    sc = sub.add_parser("scaling", help="time likelihood evaluations and sweeps")
    sc.add_argument("--sizes", required=True, help="comma-separated lattice sizes (cells)")
    sc.add_argument("--reps", type=int, default=5)
    sc.add_argument("--rho", type=float, default=5.0)
    sc.add_argument("--out")
    sc.set_defaults(func=cmd_scaling)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, EmbeddingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
