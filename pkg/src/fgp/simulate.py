"""Synthetic data generators, cross-validation and timing probes."""

from __future__ import annotations

import csv
import math
import os
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import linalg

from .harmonic import fft_ortho, project_grid, white_spectrum
from .spectral import SpectralModel, build_frequency_lattice
from .stationary import FitConfig, ObservationSet, SpectralBand, StationarySampler, embed, fit
from .nonstationary import ns_fit

MAX_DENSE_POINTS = 5000
GENERATORS = ("stationary_dense", "stationary_spectral", "pintore_ns")


@dataclass
class SimSpec:
    generator: str = "stationary_dense"
    bounds: list = field(default_factory=lambda: [[0.0, 100.0], [0.0, 100.0]])
    count: int = 900
    kernel: dict = field(default_factory=lambda: {"family": "matern", "phi": 100.0, "rho": 5.0, "kappa": 1.5})
    sigma2: float = 1.0
    nu2: float = 0.0
    seed: int = 0
    lattice_shape: list | None = None  # spectral path only
    grid: bool = False  # integer grid locations instead of uniform draws

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise ValueError(f"unknown generator {self.generator!r}; expected one of {GENERATORS}")
        if self.count < 1:
            raise ValueError("count must be positive")
        b = np.asarray(self.bounds, float)
        if b.ndim != 2 or b.shape[1] != 2 or np.any(b[:, 1] <= b[:, 0]):
            raise ValueError("bounds must be [[lo, hi], ...] with hi > lo")
        if self.sigma2 < 0 or self.nu2 < 0:
            raise ValueError("noise variances must be non-negative")

    @property
    def d(self) -> int:
        return len(self.bounds)

    def model(self) -> SpectralModel | None:
        kw = dict(self.kernel)
        if float(kw.get("phi", 0.0)) == 0.0:
            return None
        return SpectralModel.from_dict({**kw, "sigma2": max(self.sigma2, 1e-12)})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, block: dict) -> "SimSpec":
        unknown = set(block) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown simulation keys: {sorted(unknown)}")
        return cls(**block)


def _locations(spec: SimSpec, rng) -> np.ndarray:
    b = np.asarray(spec.bounds, float)
    if spec.grid:
        side = int(round(spec.count ** (1.0 / spec.d)))
        axes = [np.linspace(lo, hi, side) for lo, hi in b]
        g = np.meshgrid(*axes, indexing="ij")
        return np.stack([v.ravel() for v in g], axis=1)
    return b[:, 0] + (b[:, 1] - b[:, 0]) * rng.uniform(size=(spec.count, spec.d))


def _add_noise(signal, spec: SimSpec, rng):
    # nugget then observation noise, drawn in that order
    return signal + math.sqrt(spec.sigma2) * rng.standard_normal(signal.size) + math.sqrt(spec.nu2) * rng.standard_normal(signal.size)


def _cholesky(cov: np.ndarray, what: str) -> np.ndarray:
    try:
        return linalg.cholesky(cov, lower=True)
    except linalg.LinAlgError as exc:
        ev = np.linalg.eigvalsh(cov)
        raise RuntimeError(f"{what}: covariance not positive definite (min eigenvalue {ev.min():.3e}, size {cov.shape[0]})") from exc


def simulate_stationary(spec: SimSpec, rng: np.random.Generator | None = None) -> ObservationSet:
    """Stationary field at random locations plus nugget and observation noise.

    Dense path: exact closed-form covariance through a Cholesky factor.
    Spectral path: the lattice construction, ``mu = Q G^1/2 Y`` evaluated at the
    locations (lattice spacing from ``lattice_shape`` over the bounds).
    """
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    locs = _locations(spec, rng)
    model = spec.model()
    if model is None:
        signal = np.zeros(len(locs))
    elif spec.generator == "stationary_dense":
        if len(locs) > MAX_DENSE_POINTS:
            raise ValueError(f"dense simulation limited to {MAX_DENSE_POINTS} points")
        cov = model.covariance(locs[:, None, :] - locs[None, :, :])
        cov[np.diag_indices_from(cov)] += 1e-10 * model.phi
        signal = _cholesky(cov, "stationary simulation") @ rng.standard_normal(len(locs))
    elif spec.generator == "stationary_spectral":
        signal = spectral_field(model, spec, locs, rng)
    else:
        raise ValueError("use simulate_pintore_ns for the non-stationary generator")
    return ObservationSet(locs, _add_noise(signal, spec, rng))


def spectral_field(model: SpectralModel, spec: SimSpec, locs: np.ndarray, rng) -> np.ndarray:
    """Draw ``Q G^1/2 Y`` at ``locs`` on the lattice described by ``spec``."""
    b = np.asarray(spec.bounds, float)
    shape = tuple(spec.lattice_shape) if spec.lattice_shape else tuple([64] * spec.d)
    spacing = (b[:, 1] - b[:, 0]) / np.asarray(shape)
    if len(model.rho) == 1 and not np.allclose(spacing, spacing[0]):
        raise ValueError("isotropic model needs equal lattice spacing")
    lat = build_frequency_lattice(shape)
    if len(model.rho) == 1:
        mlat = model.with_params(rho=(model.rho[0] / spacing[0],))
    else:
        mlat = model.with_params(rho=tuple(r / s for r, s in zip(model.rho, spacing)))
    band = SpectralBand(lat, 0.0)
    g = band.density_grid(mlat)
    coeffs = np.sqrt(g) * white_spectrum(shape, rng)
    tl = (locs - b[:, 0]) / spacing
    return project_grid(coeffs, lat, tl)


# ---------------------------------------------------------------------------
# non-stationary generator
# ---------------------------------------------------------------------------


def pintore_range(s: np.ndarray) -> np.ndarray:
    """Local range surface ``(cos(4 pi s1 / 100) + 2) exp(s2 / 200)``."""
    s = np.atleast_2d(s)
    return (np.cos(4 * np.pi * s[:, 0] / 100.0) + 2.0) * np.exp(s[:, 1] / 200.0)


def pintore_covariance(locs: np.ndarray, phi: float, range_fn=pintore_range) -> np.ndarray:
    """Localized squared-exponential covariance with a spatially varying range."""
    locs = np.atleast_2d(locs)
    alpha = 2.0 * range_fn(locs) ** 2
    a1, a2 = alpha[:, None], alpha[None, :]
    amean = 0.5 * (a1 + a2)
    h = np.sqrt(a1 * a2) / amean
    d2 = np.sum((locs[:, None, :] - locs[None, :, :]) ** 2, axis=-1)
    return phi * h * np.exp(-d2 / amean)


def simulate_pintore_ns(spec: SimSpec, rng: np.random.Generator | None = None, range_fn=pintore_range):
    """Non-stationary field with the spatially varying range surface.

    Returns the observations and the true range at each location.
    """
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    if spec.count > MAX_DENSE_POINTS:
        raise ValueError(f"dense simulation limited to {MAX_DENSE_POINTS} points")
    if spec.d != 2:
        raise ValueError("the range surface is defined in two dimensions")
    locs = _locations(spec, rng)
    phi = float(spec.kernel.get("phi", 100.0))
    cov = pintore_covariance(locs, phi, range_fn)
    cov[np.diag_indices_from(cov)] += 1e-10 * phi
    signal = _cholesky(cov, "non-stationary simulation") @ rng.standard_normal(len(locs))
    return ObservationSet(locs, _add_noise(signal, spec, rng)), range_fn(locs)


def simulate(spec: SimSpec, rng=None):
    if spec.generator == "pintore_ns":
        return simulate_pintore_ns(spec, rng)
    return simulate_stationary(spec, rng), None


# ---------------------------------------------------------------------------
# cross-validation
# ---------------------------------------------------------------------------


@dataclass
class CvReport:
    method: str
    rmse: float
    mad: float
    n_train: int
    n_test: int
    seconds: dict
    median_abs_error: float = float("nan")
    predictions: dict | None = field(default=None, repr=False)
    error: str | None = None

    def as_row(self) -> dict:
        return {
            "method": self.method, "rmse": self.rmse, "mad": self.mad,
            "median_abs_error": self.median_abs_error, "n_train": self.n_train,
            "n_test": self.n_test, **{f"seconds_{k}": v for k, v in self.seconds.items()},
        }


def prediction_metrics(truth, mean) -> tuple[float, float, float]:
    """RMSE, median absolute deviation of the errors, median absolute error."""
    e = np.asarray(mean, float) - np.asarray(truth, float)
    rmse = float(np.sqrt(np.mean(e * e)))
    mad = float(np.median(np.abs(e - np.median(e))))
    return rmse, mad, float(np.median(np.abs(e)))


def split_indices(n: int, fraction: float, rng) -> tuple[np.ndarray, np.ndarray]:
    if not 0.0 < fraction < 1.0:
        raise ValueError("split fraction must lie in (0, 1)")
    perm = rng.permutation(n)
    k = int(round(fraction * n))
    k = min(max(k, 1), n - 1)
    return np.sort(perm[:k]), np.sort(perm[k:])


def cross_validate(
    data: ObservationSet,
    method: str,
    split_fraction: float,
    config,
    rng: np.random.Generator,
    model: SpectralModel,
    audit_path=None,
) -> CvReport:
    """Seeded train/test split, fit on train, predict test, score.

    Predictions accumulate over all retained draws during the fit.  A fit
    failure returns a partial report with ``error`` set.
    """
    if method not in ("stationary", "nonstationary"):
        raise ValueError("method must be 'stationary' or 'nonstationary'")
    t0 = time.perf_counter()
    tr, te = split_indices(len(data), split_fraction, rng)
    train, test = data.subset(tr), data.subset(te)
    times = {"split": time.perf_counter() - t0}
    t1 = time.perf_counter()
    try:
        if method == "stationary":
            post = fit(train, config, model, targets=test.coords)
        else:
            post = ns_fit(train, config, model, targets=test.coords)
    except Exception as exc:  # partial report, caller decides
        times["fit"] = time.perf_counter() - t1
        return CvReport(method, float("nan"), float("nan"), len(tr), len(te), times, error=f"{type(exc).__name__}: {exc}")
    times["fit"] = time.perf_counter() - t1
    pred = post.predictions
    rmse, mad, mae = prediction_metrics(test.values, pred["mean"])
    out = {"coords": test.coords, "truth": test.values, "mean": pred["mean"], "sd": np.sqrt(pred["var"])}
    if audit_path is not None:
        write_predictions_csv(audit_path, out["coords"], out["truth"], out["mean"], out["sd"])
    return CvReport(method, rmse, mad, len(tr), len(te), times, mae, out)


# ---------------------------------------------------------------------------
# CSV helpers (atomic)
# ---------------------------------------------------------------------------


def atomic_write_rows(path, header: Sequence[str], rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for row in rows:
                w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def write_predictions_csv(path, coords, truth, mean, sd) -> Path:
    coords = np.atleast_2d(coords)
    d = coords.shape[1]
    header = [f"s{k + 1}" for k in range(d)] + ["truth", "mean", "sd"]
    t = np.full(len(mean), np.nan) if truth is None else truth
    rows = (list(c) + [tv, mv, sv] for c, tv, mv, sv in zip(coords, t, mean, sd))
    return atomic_write_rows(path, header, rows)


def metrics_from_csv(path) -> tuple[float, float, float]:
    arr = np.genfromtxt(path, delimiter=",", names=True)
    return prediction_metrics(arr["truth"], arr["mean"])


# ---------------------------------------------------------------------------
# scaling
# ---------------------------------------------------------------------------


def _median_time(fn, reps: int, min_seconds: float = 0.0) -> float:
    """Median seconds per call; short calls are batched to at least ``min_seconds``."""
    t = time.perf_counter()
    fn()
    first = time.perf_counter() - t
    inner = max(1, math.ceil(min_seconds / max(first, 1e-9)))
    ts = []
    for _ in range(reps):
        t = time.perf_counter()
        for _ in range(inner):
            fn()
        ts.append((time.perf_counter() - t) / inner)
    return float(np.median(ts))


def scaling_probe(sizes, model: SpectralModel, reps: int = 5, eps_rel: float = 0.01, seed: int = 0, csv_path=None, sweeps: int = 3) -> list[dict]:
    """Median wall-clock of likelihood evaluations and sweeps per lattice size.

    ``sizes`` are lattice shapes (tuples) or totals (square-ish 2-D lattices).
    The likelihood columns time the transform-cached path with truncation
    (``m_active``) and with every frequency kept.
    """
    shapes = []
    for s in sizes:
        if np.isscalar(s):
            side = int(round(math.sqrt(int(s))))
            shapes.append((side, int(s) // side) if side * (int(s) // side) == int(s) else (int(s),))
        else:
            shapes.append(tuple(int(v) for v in s))
    totals = [int(np.prod(s)) for s in shapes]
    if totals != sorted(totals):
        raise ValueError("sizes must be ascending")
    reps = max(int(reps), 5)
    rng = np.random.default_rng(seed)
    rows = []
    for shape in shapes:
        lat = build_frequency_lattice(shape)
        z = rng.standard_normal(shape)
        band = SpectralBand(lat, eps_rel)
        full = SpectralBand(lat, 0.0)
        w = fft_ortho(z)
        band.set_field(w)
        full.set_field(w)
        diag = band.diagonal(model)
        t_trunc = _median_time(lambda: band.loglik(model), reps, 0.01)
        t_full = _median_time(lambda: full.loglik(model), reps, 0.01)
        n = int(np.prod(shape))
        coords = np.stack(np.unravel_index(np.arange(n), shape), axis=1).astype(float)
        obs = ObservationSet(coords, z.reshape(-1))
        emb = embed(obs)
        cfg = FitConfig(steps=1, burn_in=0, eps_rel=eps_rel)
        sampler = StationarySampler(emb, model, cfg, np.random.default_rng(seed))
        sampler.sweep()
        t_sweep = _median_time(lambda: [sampler.sweep() for _ in range(sweeps)], reps) / sweeps
        rows.append({
            "n": n, "shape": "x".join(map(str, shape)), "m_active": diag.m_active,
            "sparsity": diag.m_active / n, "seconds_likelihood": t_trunc,
            "seconds_likelihood_full": t_full, "seconds_sweep": t_sweep,
        })
    if csv_path is not None:
        keys = list(rows[0])
        atomic_write_rows(csv_path, keys, ([r[k] for k in keys] for r in rows))
    return rows


def fit_scaling_exponent(n, seconds) -> tuple[float, float]:
    """Least-squares ``a`` and ``c`` in ``seconds = c n^a log n``."""
    n = np.asarray(n, float)
    y = np.log(np.asarray(seconds, float)) - np.log(np.log(n))
    X = np.column_stack([np.ones_like(n), np.log(n)])
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    return float(coef[1]), float(np.exp(coef[0]))
