"""Data ingestion, detrending, run configuration and posterior persistence."""

from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from .harmonic import ifft_ortho, write_lattice_field
from .nonstationary import NSFitConfig, NSPosterior
from .simulate import atomic_write_rows
from .spectral import SpectralModel
from .stationary import EmbeddedData, FitConfig, ObservationSet, PosteriorSummary, Priors, SpectralDraw


class ConfigError(ValueError):
    """Invalid user input (configuration, data files, flags)."""


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------


def ingest_csv(path, coord_columns=None, value_column: str = "value", noise_column: str | None = None) -> ObservationSet:
    """Read observations from a headed CSV file.

    ``coord_columns`` defaults to every column named ``s1, s2, ...``.  Rows
    with empty or non-finite entries are rejected, listing their line numbers.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"data file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ConfigError(f"{path}: empty file") from None
        rows = list(reader)
    if coord_columns is None:
        coord_columns = [h for h in header if h.startswith("s") and h[1:].isdigit()]
    wanted = list(coord_columns) + [value_column] + ([noise_column] if noise_column else [])
    missing = [c for c in wanted if c not in header]
    if missing or not coord_columns:
        raise ConfigError(f"{path}: missing columns {missing or ['coordinates']}; header is {header}")
    idx = [header.index(c) for c in wanted]
    vals = np.empty((len(rows), len(idx)))
    bad = []
    for r, row in enumerate(rows):
        line = r + 2
        try:
            vals[r] = [float(row[i]) for i in idx]
        except (ValueError, IndexError):
            bad.append(line)
            continue
        if not np.all(np.isfinite(vals[r])):
            bad.append(line)
    if bad:
        shown = ", ".join(map(str, bad[:20])) + (" ..." if len(bad) > 20 else "")
        raise ConfigError(f"{path}: {len(bad)} row(s) not finite or unparseable at line(s) {shown}")
    if not rows:
        raise ConfigError(f"{path}: no data rows")
    d = len(coord_columns)
    noise = vals[:, d + 1] if noise_column else None
    return ObservationSet(vals[:, :d], vals[:, d], noise)


def write_observations_csv(path, data: ObservationSet) -> Path:
    header = [f"s{k + 1}" for k in range(data.d)] + ["value"] + (["noise_var"] if data.noise_var is not None else [])
    cols = [data.coords, data.values[:, None]] + ([data.noise_var[:, None]] if data.noise_var is not None else [])
    return atomic_write_rows(path, header, np.hstack(cols).tolist())


# ---------------------------------------------------------------------------
# detrending
# ---------------------------------------------------------------------------


@dataclass
class Trend:
    """Additive polynomial trend: intercept plus powers 1..degree_k of each coordinate."""

    degree: tuple[int, ...]
    beta: np.ndarray

    def design(self, coords) -> np.ndarray:
        return trend_design(coords, self.degree)

    def evaluate(self, coords) -> np.ndarray:
        return self.design(coords) @ self.beta

    def to_dict(self) -> dict:
        return {"degree": list(self.degree), "beta": [float(b) for b in self.beta]}

    @classmethod
    def from_dict(cls, block: dict) -> "Trend":
        return cls(tuple(block["degree"]), np.asarray(block["beta"], float))


def trend_design(coords, degree) -> np.ndarray:
    coords = np.atleast_2d(np.asarray(coords, float))
    d = coords.shape[1]
    deg = (degree,) * d if np.isscalar(degree) else tuple(degree)
    if len(deg) != d or any(int(v) < 0 for v in deg):
        raise ConfigError("trend degree needs one non-negative entry per coordinate")
    cols = [np.ones(coords.shape[0])]
    for k, dk in enumerate(deg):
        for p in range(1, int(dk) + 1):
            cols.append(coords[:, k] ** p)
    return np.column_stack(cols)


def detrend(data: ObservationSet, degree) -> tuple[ObservationSet, Trend]:
    """Least-squares polynomial trend removal; returns residuals and the trend."""
    deg = (degree,) * data.d if np.isscalar(degree) else tuple(int(v) for v in degree)
    X = trend_design(data.coords, deg)
    if X.shape[0] < X.shape[1] or np.linalg.matrix_rank(X) < X.shape[1]:
        raise ConfigError(f"trend design matrix is rank deficient ({X.shape[1]} columns, {X.shape[0]} rows)")
    beta, *_ = np.linalg.lstsq(X, data.values, rcond=None)
    resid = data.values - X @ beta
    return ObservationSet(data.coords, resid, data.noise_var), Trend(deg, beta)


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------


@dataclass
class DataBlock:
    path: str | None = None
    coords: list | None = None
    value: str = "value"
    noise: str | None = None
    mode: str = "strict"
    target_shape: list | None = None
    spacing: float | None = None
    pad: int = 0


@dataclass
class McmcBlock:
    steps: int = 3000
    burn_in: int = 1000
    thin: int = 5
    chains: int = 1
    seed: int = 0
    k_init: int = 16
    k_max: int = 32
    nu2: float = 0.1
    kappa_mis: float = 0.0
    update_kappa_mis: bool = True
    metropolis_steps: int = 4
    warmup_fixed: int = 20
    warm_start: int = 200
    keep_spectra: int = 100
    init_points: int = 1000
    interweave: bool = True


@dataclass
class RunConfig:
    model: dict = field(default_factory=lambda: {"family": "matern", "phi": 1.0, "rho": 1.0, "kappa": 1.5, "sigma2": 1.0, "eps_rel": 0.01})
    mcmc: McmcBlock = field(default_factory=McmcBlock)
    data: DataBlock = field(default_factory=DataBlock)
    trend: dict = field(default_factory=lambda: {"degree": None})
    priors: dict = field(default_factory=dict)
    weight_priors: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, tree: dict | None) -> "RunConfig":
        tree = dict(tree or {})
        unknown = set(tree) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        try:
            mcmc = McmcBlock(**(tree.get("mcmc") or {}))
            data = DataBlock(**(tree.get("data") or {}))
        except TypeError as exc:
            raise ConfigError(f"bad config key: {exc}") from None
        cfg = cls(
            model=dict(tree.get("model") or cls().model),
            mcmc=mcmc,
            data=data,
            trend=dict(tree.get("trend") or {"degree": None}),
            priors=dict(tree.get("priors") or {}),
            weight_priors=dict(tree.get("weight_priors") or {}),
        )
        return cfg

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def validate(self, require_data: bool = True) -> "RunConfig":
        m = self.mcmc
        if m.steps < 1:
            raise ConfigError("mcmc.steps must be at least 1")
        if not 0 <= m.burn_in < m.steps:
            raise ConfigError("mcmc.steps must exceed mcmc.burn_in")
        if m.thin < 1:
            raise ConfigError("mcmc.thin must be >= 1")
        if m.chains < 1:
            raise ConfigError("mcmc.chains must be >= 1")
        if require_data:
            if not self.data.path:
                raise ConfigError("data.path is required")
            if not Path(self.data.path).is_file():
                raise ConfigError(f"data.path: file not found: {self.data.path}")
        if self.data.mode not in ("strict", "misaligned"):
            raise ConfigError("data.mode must be strict or misaligned")
        if self.data.mode == "misaligned" and not self.data.target_shape:
            raise ConfigError("data.target_shape is required in misaligned mode")
        try:
            self.spectral_model()
            self.fit_priors()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"model/priors: {exc}") from None
        return self

    def spectral_model(self) -> SpectralModel:
        return SpectralModel.from_dict(self.model)

    def fit_priors(self) -> Priors:
        return Priors.from_dict(self.priors)

    def _common(self) -> dict:
        m, d = self.mcmc, self.data
        return dict(
            steps=m.steps, burn_in=m.burn_in, thin=m.thin, seed=m.seed,
            eps_rel=float(self.model.get("eps_rel", 0.01)), mode=d.mode,
            target_shape=tuple(d.target_shape) if d.target_shape else None,
            spacing=d.spacing, pad=d.pad, nu2=m.nu2, kappa_mis=m.kappa_mis,
            warmup_fixed=m.warmup_fixed, init_points=m.init_points, priors=self.fit_priors(),
        )

    def fit_config(self) -> FitConfig:
        m = self.mcmc
        return FitConfig(chains=m.chains, update_kappa_mis=m.update_kappa_mis, interweave=m.interweave, metropolis_steps=m.metropolis_steps, keep_spectra=m.keep_spectra, **self._common())

    def ns_config(self) -> NSFitConfig:
        m = self.mcmc
        return NSFitConfig(k_init=m.k_init, k_max=m.k_max, update_kappa_mis=m.update_kappa_mis, warm_start=m.warm_start, keep_spectra=m.keep_spectra, weight_priors=Priors.from_dict(self.weight_priors), **self._common())


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        tree = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from None
    if tree is not None and not isinstance(tree, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return RunConfig.from_dict(tree)


def atomic_write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def atomic_savez(path, **arrays) -> Path:
    path = Path(path)
    buf = io.BytesIO()
    np.savez_compressed(buf, **arrays)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    with os.fdopen(fd, "wb") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)
    return path


# ---------------------------------------------------------------------------
# posterior persistence
# ---------------------------------------------------------------------------


def _embedding_dict(emb: EmbeddedData) -> dict:
    return {"shape": list(emb.shape), "scale": emb.scale.tolist(), "offset": emb.offset.tolist(), "mode": emb.mode}


def _embedding_from(block: dict) -> EmbeddedData:
    z = np.zeros(0)
    return EmbeddedData(tuple(block["shape"]), z.astype(int), z, np.asarray(block["scale"], float), np.asarray(block["offset"], float), z, block.get("mode", "strict"))


def save_posterior(out_dir, post: PosteriorSummary, extra: dict | None = None) -> Path:
    """Per-chain draw CSVs, a YAML summary, the retained spectra and a latent snapshot."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = ["iteration", *post.names, "loglik"]
    for c in range(post.draws.shape[0]):
        rows = (np.concatenate([[it], d, [ll]]).tolist() for it, d, ll in zip(post.iterations, post.draws[c], post.loglik[c]))
        atomic_write_rows(out / f"draws_chain{c + 1}.csv", header, rows)
    summary = {
        "kind": "stationary",
        "names": post.names,
        "mean": {k: float(v) for k, v in post.mean.items()},
        "sd": {k: float(v) for k, v in post.sd.items()},
        "acceptance": [float(a) for a in post.acceptance],
        "chains": int(post.draws.shape[0]),
        "draws_per_chain": int(post.draws.shape[1]),
        "embedding": _embedding_dict(post.embedding),
        "model": post.base_model.to_dict() if post.base_model else None,
        **(extra or {}),
    }
    atomic_write_text(out / "summary.yaml", yaml.safe_dump(summary, sort_keys=False))
    spec = [d for chain in post.spectra for d in chain]
    if spec:
        atomic_savez(
            out / "spectra.npz",
            coeffs=np.array([d.coeffs for d in spec]),
            params=np.array([[d.model.phi, *d.model.rho, d.model.sigma2, d.nu2, d.kappa_mis] for d in spec]),
            model=np.array(json.dumps(spec[0].model.to_dict())),
        )
        mu = ifft_ortho(spec[-1].coeffs.astype(complex)).real
        write_lattice_field(out / "latent_mu.txt", mu)
    return out


def load_posterior(out_dir):
    """Load a saved stationary or non-stationary posterior for prediction."""
    out = Path(out_dir)
    sfile = out / "summary.yaml"
    if not sfile.is_file():
        raise ConfigError(f"{out}: no summary.yaml (not a posterior directory)")
    summary = yaml.safe_load(sfile.read_text())
    emb = _embedding_from(summary["embedding"])
    sp = out / "spectra.npz"
    if not sp.is_file():
        raise ConfigError(f"{out}: no retained spectra to predict from")
    z = np.load(sp)
    base = SpectralModel.from_dict(json.loads(str(z["model"])))
    if summary.get("kind") == "nonstationary":
        return summary, emb, _ns_draws(z, base)
    draws = []
    nr = len(base.rho)
    for c, p in zip(z["coeffs"], z["params"]):
        mdl = base.with_params(phi=float(p[0]), rho=tuple(float(v) for v in p[1:1 + nr]), sigma2=float(p[1 + nr]))
        draws.append(SpectralDraw(mdl, c, float(p[2 + nr]), float(p[3 + nr])))
    return summary, emb, draws


def _ns_draws(z, base: SpectralModel):
    from .nonstationary import NSDraw

    nr = len(base.rho)
    draws = []
    for c, e, p, nu in zip(z["coeffs"], z["eta_coeffs"], z["params"], z["nu2"]):
        models = [base.with_params(phi=float(r[0]), rho=tuple(float(v) for v in r[1:1 + nr]), sigma2=float(r[1 + nr])) for r in p]
        draws.append(NSDraw(models, c, e, float(nu)))
    return draws


def save_ns_posterior(out_dir, post: NSPosterior, lattice_models: bool = True) -> Path:
    """Component draws CSV, summary, label and weight fields, retained spectra."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = ["iteration", "component", *post.names]
    rows = []
    for j, it in enumerate(post.iterations):
        for k in range(post.k):
            rows.append([int(it), k + 1, *post.draws[j, k].tolist()])
    atomic_write_rows(out / "component_draws.csv", header, rows)
    atomic_write_rows(out / "noise_draws.csv", ["iteration", "nu2"], zip(post.iterations.tolist(), post.nu2.tolist()))
    summary = {
        "kind": "nonstationary",
        "k": post.k,
        "names": post.names,
        "dominating": post.dominating(),
        "occupancy": [float(v) for v in post.occupancy],
        "components": post.component_summary(),
        "nu2_mean": float(post.nu2.mean()),
        "acceptance_z": [float(v) for v in post.acceptance_z],
        "acceptance_m": [float(v) for v in post.acceptance_m],
        "embedding": _embedding_dict(post.embedding),
    }
    atomic_write_text(out / "summary.yaml", yaml.safe_dump(summary, sort_keys=False))
    write_lattice_field(out / "labels.txt", post.label_field())
    for k, wf in enumerate(post.weight_fields()):
        write_lattice_field(out / f"weight_{k + 1}.txt", wf)
    if post.spectra:
        d0 = post.spectra[0]
        nr = len(d0.z_models[0].rho)
        for k in range(post.k):
            mu = ifft_ortho(post.spectra[-1].coeffs[k].reshape(post.embedding.shape).astype(complex)).real
            write_lattice_field(out / f"mean_{k + 1}.txt", mu)
        atomic_savez(
            out / "spectra.npz",
            coeffs=np.array([d.coeffs for d in post.spectra]),
            eta_coeffs=np.array([d.eta_coeffs for d in post.spectra]),
            params=np.array([[[m.phi, *m.rho, m.sigma2] for m in d.z_models] for d in post.spectra]),
            nu2=np.array([d.nu2 for d in post.spectra]),
            model=np.array(json.dumps(d0.z_models[0].to_dict())),
        )
    return out


def read_draw_files(paths) -> tuple[list[np.ndarray], list[str]]:
    """Parameter columns (no iteration/loglik) from one or more draw CSVs."""
    chains, names = [], None
    for p in paths:
        arr = np.genfromtxt(p, delimiter=",", names=True)
        cols = [c for c in arr.dtype.names if c not in ("iteration", "loglik")]
        if names is None:
            names = cols
        elif cols != names:
            raise ConfigError(f"{p}: columns {cols} differ from {names}")
        chains.append(np.column_stack([np.atleast_1d(arr[c]) for c in cols]))
    if names is None:
        raise ConfigError("no draw files given")
    return chains, names


def read_targets(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"targets file not found: {path}")
    arr = np.genfromtxt(path, delimiter=",", names=True)
    cols = [c for c in arr.dtype.names if c.startswith("s") and c[1:].isdigit()]
    if not cols:
        raise ConfigError(f"{path}: needs coordinate columns s1, s2, ...")
    out = np.column_stack([np.atleast_1d(arr[c]) for c in cols])
    if not np.all(np.isfinite(out)):
        raise ConfigError(f"{path}: non-finite target coordinates")
    return out
