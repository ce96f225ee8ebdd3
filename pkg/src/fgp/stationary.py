"""Stationary FGP: lattice embedding, augmented likelihood, Gibbs sampler, kriging.

Model on the embedding lattice ``S`` (n cells)::

    Y ~ CN(0, I)            (fold symmetric)
    mu = Q G^1/2 Y
    Z_s ~ N(mu_s, sigma2)
    Zobs_i ~ N(Z_{cell(i)}, lambda_i),   lambda_i = nu2_i (1 + kappa_mis * dist_i)

Ranges in the sampler are in lattice units; summaries convert them back.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy import linalg, optimize
from scipy.sparse.linalg import LinearOperator, cg

from .harmonic import SpectralVector, axis_bases, fft_ortho, ifft_ortho, project_grid, white_spectrum
from .spectral import (
    FrequencyLattice,
    SpectralDiagonal,
    SpectralModel,
    band_halfwidths,
    build_frequency_lattice,
    covariance_matrix,
    truncate_spectrum,
)

log = logging.getLogger(__name__)

LOG2PI = math.log(2 * math.pi)


# ---------------------------------------------------------------------------
# data and embedding
# ---------------------------------------------------------------------------


@dataclass
class ObservationSet:
    coords: np.ndarray
    values: np.ndarray
    noise_var: np.ndarray | None = None

    def __post_init__(self):
        self.coords = np.atleast_2d(np.asarray(self.coords, dtype=float))
        if self.coords.shape[0] == 1 and np.ndim(self.values) == 1 and len(self.values) > 1:
            self.coords = self.coords.T
        self.values = np.asarray(self.values, dtype=float).reshape(-1)
        if self.coords.shape[0] != self.values.size:
            raise ValueError("coordinate and value counts differ")
        if self.values.size == 0:
            raise ValueError("observation set is empty")
        if not (np.all(np.isfinite(self.coords)) and np.all(np.isfinite(self.values))):
            raise ValueError("observations must be finite")
        if self.noise_var is not None:
            self.noise_var = np.asarray(self.noise_var, dtype=float).reshape(-1)
            if self.noise_var.size != self.values.size or np.any(~(self.noise_var > 0)):
                raise ValueError("per-observation noise variances must be positive")

    @property
    def d(self) -> int:
        return self.coords.shape[1]

    def __len__(self) -> int:
        return self.values.size

    def subset(self, idx) -> "ObservationSet":
        nv = None if self.noise_var is None else self.noise_var[idx]
        return ObservationSet(self.coords[idx], self.values[idx], nv)


@dataclass
class EmbeddedData:
    """Observations assigned to cells of an integer lattice.

    ``cell`` holds flat C-order cell indices (0-based); lattice index ``u`` sits
    at original coordinate ``offset + scale * u``.  ``cell_coords`` reports the
    1-based integer cell coordinates.
    """

    shape: tuple[int, ...]
    cell: np.ndarray
    values: np.ndarray
    scale: np.ndarray
    offset: np.ndarray
    distance: np.ndarray
    mode: str = "strict"
    noise_var: np.ndarray | None = None

    @property
    def n(self) -> int:
        return int(np.prod(self.shape))

    @property
    def d(self) -> int:
        return len(self.shape)

    @property
    def has_offsets(self) -> bool:
        """True when some observation sits off its lattice cell."""
        return self.distance.size > 0 and bool(np.any(self.distance > 0))

    @property
    def observed_cells(self) -> np.ndarray:
        return np.unique(self.cell)

    @property
    def cell_coords(self) -> np.ndarray:
        return np.stack(np.unravel_index(self.cell, self.shape), axis=1) + 1

    def members(self, flat_cell: int) -> np.ndarray:
        return np.flatnonzero(self.cell == flat_cell)

    def to_lattice(self, coords) -> np.ndarray:
        return (np.atleast_2d(np.asarray(coords, dtype=float)) - self.offset) / self.scale

    def to_original(self, u) -> np.ndarray:
        return self.offset + self.scale * np.atleast_2d(np.asarray(u, dtype=float))

    def lattice(self, m_dims=None) -> FrequencyLattice:
        return build_frequency_lattice(self.shape, m_dims)


def _float_gcd(values: np.ndarray, tol: float) -> float:
    """Largest step ``h`` with every value an integer multiple of ``h`` (within tol)."""
    vals = np.unique(np.round(np.abs(values[values > tol]), 12))
    if vals.size == 0:
        return 1.0
    h = vals[0]
    for v in vals[1:]:
        a, b = max(v, h), min(v, h)
        while b > tol:
            a, b = b, math.fmod(a, b)
            if abs(b - a) <= tol:
                b = 0.0
        h = a
    return float(h)


MAX_LATTICE_CELLS = 1 << 24


class EmbeddingError(ValueError):
    """Observations cannot be placed on the requested lattice."""


def embed(
    observations: ObservationSet,
    mode: str = "strict",
    target_shape: Sequence[int] | None = None,
    spacing=None,
    origin=None,
    common_scale: bool = False,
    tol: float = 1e-9,
) -> EmbeddedData:
    """Map irregular coordinates onto an integer lattice.

    strict: divide by the GCD of coordinate differences per axis and shift the
    minimum to the first cell; fails when coordinates are incommensurable.
    misaligned: assign each point to its nearest cell of a ``target_shape``
    lattice (ties go to the smaller index) and record the distance.
    """
    obs = observations
    coords = obs.coords
    d = coords.shape[1]
    lo = coords.min(axis=0) if origin is None else np.broadcast_to(np.asarray(origin, float), (d,)).copy()
    if mode == "strict":
        if spacing is not None:
            scale = np.broadcast_to(np.asarray(spacing, float), (d,)).copy()
        else:
            scale = np.array([_float_gcd(np.diff(np.unique(coords[:, k])), tol) for k in range(d)])
            if common_scale:
                scale[:] = _float_gcd(scale, tol)
        u = (coords - lo) / scale
        ui = np.rint(u)
        if np.any(np.abs(ui - u) * scale > tol * (1.0 + np.abs(coords))) or np.any(ui.max(axis=0) + 1 > MAX_LATTICE_CELLS):
            raise EmbeddingError(
                "coordinates are not commensurable on a lattice; use mode='misaligned' with a target_shape"
            )
        ui = ui.astype(np.int64)
        need = tuple(int(v) + 1 for v in ui.max(axis=0))
        shape = need if target_shape is None else tuple(int(v) for v in target_shape)
        if any(s < r for s, r in zip(shape, need)) or np.any(ui < 0):
            raise EmbeddingError(f"target_shape {shape} too small; need at least {need}")
        dist = np.zeros(len(obs))
    elif mode == "misaligned":
        if target_shape is None:
            raise EmbeddingError("misaligned embedding needs target_shape")
        shape = tuple(int(v) for v in target_shape)
        if spacing is None:
            span = coords.max(axis=0) - lo
            scale = np.where(np.asarray(shape) > 1, span / np.maximum(np.asarray(shape) - 1, 1), 1.0)
            scale[scale <= 0] = 1.0
            if common_scale:
                scale[:] = scale.max()
        else:
            scale = np.broadcast_to(np.asarray(spacing, float), (d,)).copy()
        u = (coords - lo) / scale
        # nearest cell, ties to the smaller index
        ui = np.ceil(u - 0.5).astype(np.int64)
        ui = np.clip(ui, 0, np.asarray(shape) - 1)
        dist = np.sqrt(np.sum(((u - ui) * scale) ** 2, axis=1))
    else:
        raise EmbeddingError(f"unknown embedding mode {mode!r}")
    cell = np.ravel_multi_index(tuple(ui.T), shape)
    return EmbeddedData(shape, cell, obs.values.copy(), scale, lo, dist, mode, None if obs.noise_var is None else obs.noise_var.copy())


# ---------------------------------------------------------------------------
# priors, configuration, state
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Priors:
    """Uniform range prior and inverse-gamma priors on the variance parameters."""

    range_bounds: tuple[float, float] = (0.0, 1000.0)
    scale_ig: tuple[float, float] = (0.1, 0.1)
    nugget_ig: tuple[float, float] = (0.1, 0.1)
    noise_ig: tuple[float, float] = (0.1, 0.1)
    kappa_mis_bounds: tuple[float, float] = (0.0, 1000.0)

    @staticmethod
    def _ig_logpdf(x, ab):
        a, b = ab
        return a * math.log(b) - math.lgamma(a) - (a + 1) * math.log(x) - b / x

    def log_theta(self, model: SpectralModel) -> float:
        """Log prior density of (phi, rho..., sigma2) on the natural scale."""
        lo, hi = self.range_bounds
        if any(not (lo < r < hi) for r in model.rho):
            return -math.inf
        width = -len(model.rho) * math.log(hi - lo)
        return width + self._ig_logpdf(model.phi, self.scale_ig) + self._ig_logpdf(model.sigma2, self.nugget_ig)

    @classmethod
    def from_dict(cls, block: dict | None) -> "Priors":
        if not block:
            return cls()
        return cls(**{k: tuple(v) for k, v in block.items()})

    def to_dict(self) -> dict:
        return {k: list(getattr(self, k)) for k in self.__dataclass_fields__}


@dataclass
class FitConfig:
    steps: int = 3000
    burn_in: int = 1000
    thin: int = 5
    chains: int = 1
    seed: int = 0
    eps_rel: float = 0.01
    truncation: str = "band"
    mode: str = "strict"
    target_shape: tuple[int, ...] | None = None
    spacing: float | None = None
    pad: int = 0
    update_theta: bool = True
    update_noise: bool = True
    update_kappa_mis: bool = True
    interweave: bool = True
    nu2: float = 0.1
    kappa_mis: float = 0.0
    metropolis_steps: int = 4
    target_accept: float = 0.3
    warmup_fixed: int = 20
    keep_spectra: int = 200
    init: dict | None = None
    init_points: int = 1000
    priors: Priors = field(default_factory=Priors)

    def validate(self):
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if not 0 <= self.burn_in < self.steps:
            raise ValueError("burn_in must be in [0, steps)")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if self.chains < 1:
            raise ValueError("chains must be >= 1")
        if not self.nu2 > 0:
            raise ValueError("nu2 must be positive")
        if self.kappa_mis < 0:
            raise ValueError("kappa_mis must be non-negative")
        if self.truncation not in ("band", "pointwise"):
            raise ValueError("truncation must be 'band' or 'pointwise'")
        if self.init_points < 0:
            raise ValueError("init_points must be non-negative")
        return self


@dataclass
class StationaryChainState:
    model: SpectralModel
    z: np.ndarray
    y: np.ndarray  # full-grid coefficients; dropped frequencies hold prior noise
    mu: np.ndarray
    nu2: float
    kappa_mis: float = 0.0
    iteration: int = 0

    def spectral_vector(self, diag: SpectralDiagonal) -> SpectralVector:
        return SpectralVector.from_full(diag, self.y)


def noise_variances(data: EmbeddedData, nu2: float, kappa_mis: float) -> np.ndarray:
    """Per-observation noise variance ``lambda_i``."""
    base = np.full(data.values.size, nu2) if data.noise_var is None else data.noise_var
    return base * (1.0 + kappa_mis * data.distance)


# ---------------------------------------------------------------------------
# spectral band helper for the sampler
# ---------------------------------------------------------------------------


class SpectralBand:
    """Band-truncated evaluation of the lattice likelihood from cached power.

    The power spectrum ``|Q*Z|^2`` is stored fftshift-ed so the retained box
    ``|j_k| <= h_k`` is a contiguous slice and an evaluation touches only the m
    retained cells.
    """

    def __init__(self, lattice: FrequencyLattice, eps_rel: float, rule: str = "band"):
        self.lattice = lattice
        self.eps_rel = eps_rel
        self.rule = rule
        self.shape = lattice.shape
        self.axis_sq = [np.fft.fftshift(lattice.axis_omega(k, full=True)) ** 2 for k in range(lattice.d)]
        self.centre = [n // 2 for n in lattice.n_dims]
        self.full_sq = [
            (lattice.axis_omega(k, full=True) ** 2).reshape([-1 if i == k else 1 for i in range(lattice.d)])
            for k in range(lattice.d)
        ]
        self.power = None
        self.total = 0.0

    def set_field(self, w: np.ndarray):
        """Cache the power of the transformed field ``w = Q* Z`` (full grid)."""
        p = w.real ** 2 + w.imag ** 2
        self.power = np.fft.fftshift(p)
        self.total = float(p.sum())

    def slices(self, model: SpectralModel):
        h = band_halfwidths(model, self.lattice, self.eps_rel)
        if any(v < 0 for v in h):
            return None
        out = []
        for k, (hk, n) in enumerate(zip(h, self.lattice.n_dims)):
            c = self.centre[k]
            if 2 * hk + 1 >= n:
                out.append(slice(0, n))
            else:
                out.append(slice(c - hk, c + hk + 1))
        return tuple(out)

    def density_box(self, model: SpectralModel, sl) -> np.ndarray:
        sq = []
        for k in range(self.lattice.d):
            shape = [1] * self.lattice.d
            v = self.axis_sq[k][sl[k]]
            shape[k] = v.size
            sq.append(v.reshape(shape))
        return model.density_sq(sq)

    def loglik(self, model: SpectralModel) -> float:
        """log N(Z; 0, Q G Q* + sigma2 I) with truncated G."""
        s2 = model.sigma2
        n = self.lattice.n
        if self.rule == "pointwise":
            g = model.density_sq(self.full_sq)
            g = np.where(g >= self.eps_rel * s2, g, 0.0)
            p = np.fft.ifftshift(self.power)
            v = g + s2
            return -0.5 * (float(np.sum(p / v)) + float(np.sum(np.log(v))) + n * LOG2PI)
        sl = self.slices(model)
        if sl is None:
            return -0.5 * (self.total / s2 + n * math.log(s2) + n * LOG2PI)
        g = self.density_box(model, sl)
        v = g + s2
        p = self.power[sl]
        m = v.size
        quad = float(np.sum(p / v)) + (self.total - float(p.sum())) / s2
        logdet = float(np.sum(np.log(v))) + (n - m) * math.log(s2)
        return -0.5 * (quad + logdet + n * LOG2PI)

    def density_grid(self, model: SpectralModel) -> np.ndarray:
        """Truncated g on the full grid in FFT order."""
        if self.rule == "pointwise":
            g = model.density_sq(self.full_sq)
            return np.where(g >= self.eps_rel * model.sigma2, g, 0.0)
        sl = self.slices(model)
        out = np.zeros(self.shape)
        if sl is None:
            return out
        shifted = np.zeros(self.shape)
        shifted[sl] = self.density_box(model, sl)
        out = np.fft.ifftshift(shifted)
        return out

    def diagonal(self, model: SpectralModel) -> SpectralDiagonal:
        g = self.density_grid(model).reshape(-1)
        active = np.flatnonzero(g > 0)
        return SpectralDiagonal(self.lattice, active, g[active], model.sigma2, self.eps_rel, self.rule)


# ---------------------------------------------------------------------------
# likelihood
# ---------------------------------------------------------------------------


def lattice_loglik(z: np.ndarray, diag: SpectralDiagonal) -> float:
    """log N(Z; 0, Q G Q* + sigma2 I) on the full lattice; dropped g are zero."""
    w = fft_ortho(z)
    p = (w.real ** 2 + w.imag ** 2).reshape(-1)
    n = p.size
    s2 = diag.sigma2
    g = diag.values
    v = g + s2
    pa = p[diag.active]
    quad = float(np.sum(pa / v)) + float(p.sum() - pa.sum()) / s2
    logdet = float(np.sum(np.log(v))) + (n - diag.m_active) * math.log(s2)
    return -0.5 * (quad + logdet + n * LOG2PI)


def observation_loglik(z: np.ndarray, data: EmbeddedData, lam: np.ndarray) -> float:
    if np.any(~(lam > 0)):
        raise ValueError("noise variances must be positive")
    r = data.values - z.reshape(-1)[data.cell]
    return -0.5 * float(np.sum(r * r / lam + np.log(lam) + LOG2PI))


def augmented_log_likelihood(state: StationaryChainState, data: EmbeddedData, diag: SpectralDiagonal) -> float:
    """Joint log density of the lattice field and the observations.

    Equals the product of m + n_obs independent normals after the unitary
    transform; dropped frequencies contribute ``|(Q*Z)_l|^2 / sigma2 + log sigma2``.
    """
    if not diag.sigma2 > 0 or not state.nu2 > 0:
        raise ValueError("variances must be positive")
    if state.z.shape != diag.lattice.shape:
        raise ValueError("state does not match the lattice")
    lam = noise_variances(data, state.nu2, state.kappa_mis)
    return lattice_loglik(state.z, diag) + observation_loglik(state.z, data, lam)


def conditional_field_draw(
    data: EmbeddedData,
    g: np.ndarray,
    sigma2: float,
    lam: np.ndarray,
    rng: np.random.Generator,
    rtol: float = 1e-8,
    maxiter: int = 2000,
) -> np.ndarray:
    """Exact draw of the lattice field given the data at fixed parameters.

    Conditional simulation: an unconditional lattice draw is corrected by the
    kriging update of the residual between the data and simulated data.  The
    observation system ``S (Q G Q* + sigma2 I) S' + diag(lam)`` is solved by
    conjugate gradients with FFT mat-vecs, so each iteration costs one pair of
    transforms.  ``g`` is the truncated density on the full grid.
    """
    shape, n, cell = data.shape, data.n, data.cell
    root = np.sqrt(g)

    def lattice_cov(field):
        return ifft_ortho(g * fft_ortho(field)).real + sigma2 * field

    def matvec(a):
        scat = np.bincount(cell, weights=a, minlength=n).reshape(shape)
        return lattice_cov(scat).reshape(-1)[cell] + lam * a

    z_u = ifft_ortho(root * white_spectrum(shape, rng)).real + math.sqrt(sigma2) * rng.standard_normal(shape)
    y_u = z_u.reshape(-1)[cell] + np.sqrt(lam) * rng.standard_normal(cell.size)
    diag = float(g.mean()) + sigma2 + lam
    op = LinearOperator((cell.size, cell.size), matvec=matvec, dtype=float)
    pre = LinearOperator((cell.size, cell.size), matvec=lambda v: v / diag, dtype=float)
    a, info = cg(op, data.values - y_u, rtol=rtol, maxiter=maxiter, M=pre)
    if info > 0:
        log.warning("conditional draw: conjugate gradients stopped after %d iterations", info)
    return z_u + lattice_cov(np.bincount(cell, weights=a, minlength=n).reshape(shape))


# ---------------------------------------------------------------------------
# Metropolis on log parameters
# ---------------------------------------------------------------------------


class AdaptiveMetropolis:
    """Random-walk Metropolis on a log-parameter vector with adaptive covariance.

    The step scale follows a Robbins-Monro recursion towards ``target``; the
    proposal covariance tracks the empirical covariance.  ``freeze`` stops both.
    """

    def __init__(self, x0: np.ndarray, step: float = 0.1, target: float = 0.3):
        self.p = x0.size
        self.cov = np.eye(self.p) * step ** 2
        self.log_scale = 0.0
        self.target = target
        self.mean = x0.copy()
        self.m2 = np.zeros((self.p, self.p))
        self.count = 0
        self.accepted = 0
        self.proposed = 0
        self.frozen = False
        self._chol = np.linalg.cholesky(self.cov)

    def propose(self, x, rng):
        return x + math.exp(self.log_scale) * (self._chol @ rng.standard_normal(self.p))

    def record(self, x, accepted: bool):
        self.proposed += 1
        self.accepted += int(accepted)
        if self.frozen:
            return
        self.count += 1
        t = self.count
        self.log_scale += (float(accepted) - self.target) / t ** 0.6
        delta = x - self.mean
        self.mean += delta / t
        self.m2 += np.outer(delta, x - self.mean)
        if t >= 50 and t % 25 == 0:
            emp = self.m2 / (t - 1)
            cov = (2.38 ** 2 / self.p) * emp + 1e-6 * np.eye(self.p)
            try:
                self._chol = np.linalg.cholesky(cov)
                self.cov = cov
                self.log_scale = 0.0 if t == 50 else self.log_scale
            except np.linalg.LinAlgError:
                pass

    @property
    def rate(self) -> float:
        return self.accepted / max(self.proposed, 1)


def _pack(model: SpectralModel) -> np.ndarray:
    return np.log(np.array([model.phi, *model.rho, model.sigma2]))


def _unpack(model: SpectralModel, x: np.ndarray) -> SpectralModel:
    v = np.exp(x)
    return model.with_params(phi=float(v[0]), rho=tuple(float(r) for r in v[1:-1]), sigma2=float(v[-1]))


def _log_target(band: SpectralBand, model: SpectralModel, priors: Priors) -> float:
    lp = priors.log_theta(model)
    if not np.isfinite(lp):
        return -math.inf
    jac = math.log(model.phi) + sum(math.log(r) for r in model.rho) + math.log(model.sigma2)
    return band.loglik(model) + lp + jac


# ---------------------------------------------------------------------------
# sampler
# ---------------------------------------------------------------------------


def kappa_mis_step(rng, kappa, r2, base, distance, bounds, step):
    """One log-scale random-walk update of the misalignment inflation.

    Targets ``prod N(r_i; 0, base_i (1 + kappa d_i))`` under a uniform prior.
    Returns the new value and whether the proposal was accepted.
    """
    lo, hi = bounds

    def target(kap):
        if not lo < kap < hi:
            return -math.inf
        lam = base * (1.0 + kap * distance)
        return -0.5 * float(np.sum(r2 / lam + np.log(lam))) + math.log(kap)

    k0 = max(kappa, 1e-6)
    kp = k0 * math.exp(step * rng.standard_normal())
    if math.log(rng.uniform()) < target(kp) - target(k0):
        return kp, True
    return kappa, False


class StationarySampler:
    """Gibbs sampler over (theta, Y, Z, nu2) for one chain.

    Sweep order: theta | Z (Y integrated out), Y | Z, mu = Q G^1/2 Y,
    Z | mu, data, then nu2 and kappa_mis.  Drawing theta before Y keeps the
    partially collapsed scheme valid.

    With ``interweave`` a second theta move runs after the Z update in the
    whitened coordinates ``(Y, eps)``, ``Z = Q G^1/2 Y + sigma eps``, scored
    by the observation likelihood alone.  theta | Z is very tight when most
    cells are unobserved; the whitened move is not, and the two together mix
    far better than either.
    """

    def __init__(self, data: EmbeddedData, model: SpectralModel, config: FitConfig, rng: np.random.Generator):
        self.data = data
        self.config = config
        self.rng = rng
        self.lattice = build_frequency_lattice(data.shape)
        self.band = SpectralBand(self.lattice, config.eps_rel, config.truncation)
        self.priors = config.priors
        n = data.n
        counts = np.bincount(data.cell, minlength=n)
        z0 = np.zeros(n)
        obs = counts > 0
        z0[obs] = np.bincount(data.cell, weights=data.values, minlength=n)[obs] / counts[obs]
        z0 = z0.reshape(data.shape)
        self.state = StationaryChainState(model, z0, np.zeros(data.shape, complex), np.zeros(data.shape), config.nu2, config.kappa_mis)
        self.w = fft_ortho(z0)
        self.band.set_field(self.w)
        self.metro = AdaptiveMetropolis(_pack(model), step=0.05, target=config.target_accept)
        self.metro_nc = AdaptiveMetropolis(_pack(model), step=0.05, target=config.target_accept)
        self.kappa_step = 0.3
        self.kappa_acc = [0, 0]
        self._draw_y()
        self._update_mu()

    # individual conditional updates -----------------------------------
    def _draw_y(self):
        s = self.state
        g = self.band.density_grid(s.model)
        self.g = g
        s2 = s.model.sigma2
        mean = np.sqrt(g) * self.w / (g + s2)
        sd = np.sqrt(s2 / (g + s2))
        y = mean + sd * white_spectrum(self.data.shape, self.rng)
        s.y = y

    def _update_mu(self):
        s = self.state
        s.mu = ifft_ortho(np.sqrt(self.g) * s.y).real

    def _update_theta(self):
        s = self.state
        x = _pack(s.model)
        cur = _log_target(self.band, s.model, self.priors)
        for _ in range(self.config.metropolis_steps):
            xp = self.metro.propose(x, self.rng)
            prop = _unpack(s.model, xp)
            try:
                new = _log_target(self.band, prop, self.priors)
            except (FloatingPointError, ValueError):
                new = -math.inf
            ok = np.isfinite(new) and math.log(self.rng.uniform()) < new - cur
            if ok:
                x, cur, s.model = xp, new, prop
            self.metro.record(x, bool(ok))

    def _obs_loglik(self, z_flat: np.ndarray, lam: np.ndarray) -> float:
        r = self.data.values - z_flat[self.data.cell]
        return -0.5 * float(np.sum(r * r / lam))

    def _update_theta_whitened(self):
        s, data = self.state, self.data
        lam = noise_variances(data, s.nu2, s.kappa_mis)
        eps = (s.z - s.mu) / math.sqrt(s.model.sigma2)
        x = _pack(s.model)
        cur = self.priors.log_theta(s.model) + float(np.sum(x)) + self._obs_loglik(s.z.reshape(-1), lam)
        for _ in range(self.config.metropolis_steps):
            xp = self.metro_nc.propose(x, self.rng)
            prop = _unpack(s.model, xp)
            new = self.priors.log_theta(prop) + float(np.sum(xp))
            if np.isfinite(new):
                g = self.band.density_grid(prop)
                mu = ifft_ortho(np.sqrt(g) * s.y).real
                z = mu + math.sqrt(prop.sigma2) * eps
                new += self._obs_loglik(z.reshape(-1), lam)
            ok = np.isfinite(new) and math.log(self.rng.uniform()) < new - cur
            if ok:
                x, cur, s.model, self.g, s.mu, s.z = xp, new, prop, g, mu, z
            self.metro_nc.record(x, bool(ok))
        self.w = fft_ortho(s.z)
        self.band.set_field(self.w)

    def initialise_field(self):
        """Replace Z by an exact draw given the data at the current parameters.

        The constructor's Z (cell means, zeros elsewhere) is far from typical
        when most cells are unobserved, and theta | Z then wanders off for
        thousands of sweeps.
        """
        s = self.state
        self.g = self.band.density_grid(s.model)
        lam = noise_variances(self.data, s.nu2, s.kappa_mis)
        s.z = conditional_field_draw(self.data, self.g, s.model.sigma2, lam, self.rng)
        self.w = fft_ortho(s.z)
        self.band.set_field(self.w)
        self._draw_y()
        self._update_mu()

    def freeze(self):
        """Stop proposal adaptation (end of burn-in)."""
        self.metro.frozen = True
        self.metro_nc.frozen = True

    def _update_z(self):
        s, data = self.state, self.data
        n = data.n
        lam = noise_variances(data, s.nu2, s.kappa_mis)
        prec_obs = np.bincount(data.cell, weights=1.0 / lam, minlength=n)
        wsum = np.bincount(data.cell, weights=data.values / lam, minlength=n)
        s2 = s.model.sigma2
        mu = s.mu.reshape(-1)
        prec = 1.0 / s2 + prec_obs
        mean = (mu / s2 + wsum) / prec
        z = mean + self.rng.standard_normal(n) / np.sqrt(prec)
        s.z = z.reshape(data.shape)
        self.w = fft_ortho(s.z)
        self.band.set_field(self.w)

    def _update_noise(self):
        s, data = self.state, self.data
        if data.noise_var is not None:
            return
        a, b = self.priors.noise_ig
        f = 1.0 + s.kappa_mis * data.distance
        r = data.values - s.z.reshape(-1)[data.cell]
        shape = a + 0.5 * r.size
        rate = b + 0.5 * float(np.sum(r * r / f))
        s.nu2 = rate / self.rng.gamma(shape)

    def _update_kappa(self):
        s, data = self.state, self.data
        r2 = (data.values - s.z.reshape(-1)[data.cell]) ** 2
        base = np.full(r2.size, s.nu2) if data.noise_var is None else data.noise_var
        s.kappa_mis, ok = kappa_mis_step(self.rng, s.kappa_mis, r2, base, data.distance, self.priors.kappa_mis_bounds, self.kappa_step)
        self.kappa_acc[0] += int(ok)
        self.kappa_acc[1] += 1

    def sweep(self, update_theta: bool | None = None):
        cfg = self.config
        upd = cfg.update_theta if update_theta is None else update_theta
        if upd:
            self._update_theta()
        self._draw_y()
        self._update_mu()
        self._update_z()
        if upd and cfg.interweave:
            self._update_theta_whitened()
        if cfg.update_noise:
            self._update_noise()
        if cfg.update_kappa_mis and self.data.has_offsets:
            self._update_kappa()
        self.state.iteration += 1
        if not (np.all(np.isfinite(self.state.z)) and np.isfinite(self.state.model.phi)):
            raise FloatingPointError(f"chain diverged at iteration {self.state.iteration}: {self.diagnostic_dump()}")
        return self.state

    def diagonal(self) -> SpectralDiagonal:
        return self.band.diagonal(self.state.model)

    def log_likelihood(self) -> float:
        return augmented_log_likelihood(self.state, self.data, self.diagonal())

    def diagnostic_dump(self) -> dict:
        s = self.state
        return {
            "iteration": s.iteration,
            "model": s.model.to_dict(),
            "nu2": s.nu2,
            "kappa_mis": s.kappa_mis,
            "z_finite": bool(np.all(np.isfinite(s.z))),
            "mu_range": (float(np.nanmin(s.mu)), float(np.nanmax(s.mu))),
        }


def gibbs_sweep(state: StationaryChainState, data: EmbeddedData, diag: SpectralDiagonal, rng: np.random.Generator, config: FitConfig | None = None) -> StationaryChainState:
    """One sweep at fixed theta: Y | Z, mu, Z | mu, data, optional nu2.

    Stateless convenience wrapper; :class:`StationarySampler` adds the theta
    update and transform caching.
    """
    cfg = config or FitConfig(update_theta=False, update_noise=False)
    new = replace(state)
    w = fft_ortho(state.z)
    g = diag.full()
    s2 = state.model.sigma2
    y = np.sqrt(g) * w / (g + s2) + np.sqrt(s2 / (g + s2)) * white_spectrum(data.shape, rng)
    new.y = y
    new.mu = ifft_ortho(np.sqrt(g) * new.y).real
    lam = noise_variances(data, state.nu2, state.kappa_mis)
    prec_obs = np.bincount(data.cell, weights=1.0 / lam, minlength=data.n)
    wsum = np.bincount(data.cell, weights=data.values / lam, minlength=data.n)
    prec = 1.0 / s2 + prec_obs
    mean = (new.mu.reshape(-1) / s2 + wsum) / prec
    new.z = (mean + rng.standard_normal(data.n) / np.sqrt(prec)).reshape(data.shape)
    if cfg.update_noise and data.noise_var is None:
        a, b = cfg.priors.noise_ig
        r = data.values - new.z.reshape(-1)[data.cell]
        new.nu2 = (b + 0.5 * float(np.sum(r * r / (1 + state.kappa_mis * data.distance)))) / rng.gamma(a + 0.5 * r.size)
    new.iteration = state.iteration + 1
    return new


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------


@dataclass
class SpectralDraw:
    """What prediction needs from one retained draw (lattice units)."""

    model: SpectralModel
    coeffs: np.ndarray  # full grid G^1/2 Y
    nu2: float
    kappa_mis: float


@dataclass
class PosteriorSummary:
    names: list[str]
    draws: np.ndarray  # (chains, kept, params); ranges in original units
    iterations: np.ndarray
    acceptance: list[float]
    loglik: np.ndarray  # (chains, kept)
    embedding: EmbeddedData | None = None
    base_model: SpectralModel | None = None
    spectra: list[list[SpectralDraw]] = field(default_factory=list)
    predictions: dict | None = None
    extra: dict = field(default_factory=dict)

    @property
    def flat(self) -> np.ndarray:
        return self.draws.reshape(-1, self.draws.shape[-1])

    @property
    def mean(self) -> dict:
        return dict(zip(self.names, self.flat.mean(axis=0)))

    @property
    def sd(self) -> dict:
        return dict(zip(self.names, self.flat.std(axis=0, ddof=1) if self.flat.shape[0] > 1 else np.zeros(len(self.names))))

    def interval(self, name: str, level: float = 0.95) -> tuple[float, float]:
        col = self.flat[:, self.names.index(name)]
        a = (1 - level) / 2
        return float(np.quantile(col, a)), float(np.quantile(col, 1 - a))


def param_names(model: SpectralModel) -> list[str]:
    rho = ["rho"] if len(model.rho) == 1 else [f"rho{k + 1}" for k in range(len(model.rho))]
    return ["phi", *rho, "sigma2", "nu2", "kappa_mis"]


def _initial_model(base: SpectralModel, data: EmbeddedData, init: dict | None) -> SpectralModel:
    var = float(np.var(data.values)) if data.values.size > 1 else 1.0
    var = var if var > 0 else 1.0
    kw = {"phi": 0.9 * var, "sigma2": 0.1 * var}
    if init:
        kw.update({k: v for k, v in init.items() if k in ("phi", "sigma2", "rho")})
    rho = kw.pop("rho", base.rho)
    rho = tuple(rho) if isinstance(rho, (list, tuple)) else (rho,)
    kw["rho"] = tuple(float(r) / float(s) for r, s in zip(rho, data.scale))
    return base.with_params(**kw)


@dataclass
class StartingPoint:
    model: SpectralModel
    nu2: float
    kappa_mis: float


def marginal_mode_start(
    data: EmbeddedData,
    model: SpectralModel,
    band: SpectralBand,
    nu2: float,
    kappa_mis: float,
    priors: Priors,
    rng: np.random.Generator,
    max_points: int = 1000,
    fit_noise: bool = True,
    fit_kappa: bool = True,
) -> StartingPoint:
    """Posterior mode of the lattice model with the field integrated out.

    Evaluated densely on at most ``max_points`` observations, so it is a
    starting point rather than an estimate: the sampler then only has to
    explore around it.  Optimises on the log scale (Jacobian included) so a
    vague nugget prior cannot pull sigma2 to zero.
    """
    nobs = data.values.size
    idx = np.sort(rng.choice(nobs, max_points, replace=False)) if nobs > max_points else np.arange(nobs)
    cell = data.cell[idx]
    vals = data.values[idx]
    u = np.unravel_index(cell, data.shape)
    lag = tuple((a[:, None] - a[None, :]) % n for a, n in zip(u, data.shape))
    same = cell[:, None] == cell[None, :]
    dist = data.distance[idx] if data.distance.size else np.zeros(idx.size)
    base = data.noise_var[idx] if data.noise_var is not None else None
    fit_noise = fit_noise and base is None
    fit_kappa = fit_kappa and bool(np.any(dist > 0))
    nth = 2 + len(model.rho)
    x0 = list(_pack(model))
    if fit_noise:
        x0.append(math.log(nu2))
    if fit_kappa:
        x0.append(math.log(max(kappa_mis, 1.0)))

    def unpack(x):
        mdl = _unpack(model, x[:nth])
        k = nth
        v = math.exp(x[k]) if fit_noise else nu2
        k += int(fit_noise)
        kap = math.exp(x[k]) if fit_kappa else kappa_mis
        return mdl, v, kap

    def objective(x):
        mdl, v, kap = unpack(x)
        lp = priors.log_theta(mdl)
        if fit_noise:
            lp += priors._ig_logpdf(v, priors.noise_ig)
        lo, hi = priors.kappa_mis_bounds
        if fit_kappa and not lo < kap < hi:
            return np.inf
        if not np.isfinite(lp):
            return np.inf
        c = np.fft.ifftn(band.density_grid(mdl)).real
        lam = (base if base is not None else v) * (1.0 + kap * dist)
        cov = c[lag] + mdl.sigma2 * same
        cov[np.diag_indices_from(cov)] += lam
        try:
            fac = linalg.cho_factor(cov, lower=True)
        except linalg.LinAlgError:
            return np.inf
        quad = float(vals @ linalg.cho_solve(fac, vals))
        return 0.5 * quad + float(np.sum(np.log(np.diag(fac[0])))) - lp - float(np.sum(x))

    lo, hi = priors.range_bounds
    box = [(-30.0, 30.0)] + [(math.log(max(lo, 1e-12)) + 1e-9, math.log(hi) - 1e-9)] * len(model.rho) + [(-30.0, 30.0)]
    if fit_noise:
        box.append((-30.0, 30.0))
    if fit_kappa:
        klo, khi = priors.kappa_mis_bounds
        box.append((math.log(max(klo, 1e-12)) + 1e-9, math.log(khi) - 1e-9))
    x0 = np.clip(np.array(x0), [b[0] for b in box], [b[1] for b in box])
    res = optimize.minimize(objective, x0, method="L-BFGS-B", bounds=box, options={"maxiter": 500})
    x = res.x if np.isfinite(res.fun) and res.fun <= objective(x0) else x0
    mdl, v, kap = unpack(x)
    log.info("starting point: phi %.4g, rho %s, sigma2 %.4g, nu2 %.4g, kappa_mis %.4g (%d evaluations)",
             mdl.phi, mdl.rho, mdl.sigma2, v, kap, res.nfev)
    return StartingPoint(mdl, v, kap)


def starting_point(emb: EmbeddedData, base: SpectralModel, config, rng: np.random.Generator) -> StartingPoint:
    """Sampler starting parameters for ``fit`` and ``ns_fit``."""
    if config.init is not None or not config.init_points or not config.update_theta:
        return StartingPoint(base, config.nu2, config.kappa_mis)
    band = SpectralBand(build_frequency_lattice(emb.shape), config.eps_rel, config.truncation)
    return marginal_mode_start(emb, base, band, config.nu2, config.kappa_mis, config.priors, rng,
                               config.init_points, config.update_noise, config.update_kappa_mis)


def _embed_for(data: ObservationSet, model: SpectralModel, config: FitConfig) -> EmbeddedData:
    iso = len(model.rho) == 1
    shape = config.target_shape
    emb = embed(data, config.mode, shape, spacing=config.spacing, common_scale=iso)
    if config.pad:
        shape = tuple(s + config.pad for s in emb.shape)
        emb = embed(data, config.mode, shape, spacing=emb.scale, origin=emb.offset, common_scale=iso)
    if iso and not np.allclose(emb.scale, emb.scale[0]):
        raise ValueError("isotropic family needs equal lattice spacing per axis")
    return emb


def _range_to_original(model: SpectralModel, data: EmbeddedData) -> list[float]:
    if len(model.rho) == 1:
        return [model.rho[0] * float(data.scale[0])]
    return [r * float(s) for r, s in zip(model.rho, data.scale)]


def fit(data: ObservationSet, config: FitConfig, model: SpectralModel, targets=None) -> PosteriorSummary:
    """Run one or more chains; optionally accumulate predictions at ``targets``.

    ``model`` fixes the family.  Chains start from the collapsed posterior
    mode on a subsample (see :func:`marginal_mode_start`) unless
    ``config.init`` gives the starting parameters or ``init_points`` is 0.
    """
    config.validate()
    emb = _embed_for(data, model, config)
    *seeds, start_seed = np.random.SeedSequence(config.seed).spawn(config.chains + 1)
    start = starting_point(emb, _initial_model(model, emb, config.init), config, np.random.default_rng(start_seed))
    base = start.model
    chain_cfg = replace(config, nu2=start.nu2, kappa_mis=start.kappa_mis)
    names = param_names(model)
    kept_idx = np.arange(config.burn_in, config.steps, config.thin)
    draws = np.empty((config.chains, kept_idx.size, len(names)))
    ll = np.empty((config.chains, kept_idx.size))
    acc = []
    spectra: list[list[SpectralDraw]] = []
    lat = build_frequency_lattice(emb.shape)
    preds = None
    if targets is not None:
        tl = emb.to_lattice(targets)
        bases = axis_bases(lat, tl)
        pm, pm2, pv = np.zeros(len(tl)), np.zeros(len(tl)), np.zeros(len(tl))
        npred = 0
    spec_every = max(1, int(math.ceil(kept_idx.size / max(config.keep_spectra, 1)))) if config.keep_spectra else 0
    for c, ss in enumerate(seeds):
        rng = np.random.default_rng(ss)
        sampler = StationarySampler(emb, base, chain_cfg, rng)
        sampler.initialise_field()
        chain_spec = []
        j = 0
        for it in range(config.steps):
            sampler.sweep(update_theta=config.update_theta and it >= config.warmup_fixed)
            if it + 1 == config.burn_in:
                sampler.freeze()
            if j < kept_idx.size and it == kept_idx[j]:
                s = sampler.state
                draws[c, j] = [s.model.phi, *_range_to_original(s.model, emb), s.model.sigma2, s.nu2, s.kappa_mis]
                ll[c, j] = sampler.log_likelihood()
                coeffs = np.sqrt(sampler.g) * s.y
                if targets is not None:
                    mean_t = project_grid(coeffs, lat, tl, bases=bases)
                    pm += mean_t
                    pm2 += mean_t ** 2
                    pv += s.nu2 + s.model.sigma2
                    npred += 1
                if spec_every and j % spec_every == 0:
                    chain_spec.append(SpectralDraw(s.model, coeffs.astype(np.complex64), s.nu2, s.kappa_mis))
                j += 1
        sampler.freeze()
        acc.append(sampler.metro.rate)
        spectra.append(chain_spec)
        log.info("chain %d done: acceptance %.3f", c, sampler.metro.rate)
    if targets is not None:
        mean = pm / npred
        var_means = np.maximum(pm2 / npred - mean ** 2, 0.0)
        preds = {"mean": mean, "var": pv / npred + var_means, "mc_var": var_means, "count": npred}
    post = PosteriorSummary(names, draws, kept_idx, acc, ll, emb, model, spectra, preds)
    post.extra["start"] = dict(zip(names, [base.phi, *_range_to_original(base, emb), base.sigma2, start.nu2, start.kappa_mis]))
    return post


# ---------------------------------------------------------------------------
# prediction
# ---------------------------------------------------------------------------


def predict(posterior: PosteriorSummary | Sequence[SpectralDraw], targets, embedding: EmbeddedData | None = None) -> dict:
    """Monte-Carlo predictive mean and variance at ``targets`` (original units).

    Each draw contributes mean ``Q_s G^1/2 Y`` and variance ``nu2 + sigma2``.
    """
    if isinstance(posterior, PosteriorSummary):
        draws = [d for chain in posterior.spectra for d in chain]
        embedding = posterior.embedding
    else:
        draws = list(posterior)
    if not draws:
        raise ValueError("no retained draws to predict from")
    if embedding is None:
        raise ValueError("an embedding is needed to map targets to the lattice")
    tl = embedding.to_lattice(targets)
    if not np.all(np.isfinite(tl)):
        raise ValueError("targets must be finite")
    lat = build_frequency_lattice(embedding.shape)
    bases = axis_bases(lat, tl)
    means = np.array([project_grid(d.coeffs.astype(complex), lat, tl, bases=bases) for d in draws])
    var = np.array([d.nu2 + d.model.sigma2 for d in draws])
    m = means.mean(axis=0)
    v = var.mean() + means.var(axis=0)
    return {"mean": m, "var": v, "draws": means}


def kriging_dense(data: EmbeddedData, model: SpectralModel, targets, nu2: float, kappa_mis: float = 0.0, eps_rel: float | None = None, rule: str = "band") -> dict:
    """Conditional-Gaussian kriging with the FGP covariance (small-instance oracle).

    ``targets`` in original units; the model is in lattice units.
    """
    lat = build_frequency_lattice(data.shape)
    diag = truncate_spectrum(model, lat, eps_rel, rule)
    cells = np.stack(np.unravel_index(data.cell, data.shape), axis=1).astype(float)
    c11 = covariance_matrix(diag, cells, nugget=False)
    same = data.cell[:, None] == data.cell[None, :]
    c11 = c11 + model.sigma2 * same + np.diag(noise_variances(data, nu2, kappa_mis))
    tl = data.to_lattice(targets)
    c21 = covariance_matrix(diag, tl, cells)
    cf = linalg.cho_factor(c11)
    mean = c21 @ linalg.cho_solve(cf, data.values)
    c0 = float(np.sum(diag.values) / lat.n)
    var = c0 + model.sigma2 + nu2 - np.einsum("ij,ji->i", c21, linalg.cho_solve(cf, c21.T))
    return {"mean": mean, "var": var}
