"""Non-stationary FGP: probit stick-breaking mixture of spectral densities.

All K components share one spectral vector ``Y``::

    mu_k = Q G_k^1/2 Y,    Z_k ~ N(mu_k, sigma2_k I)
    eta_k ~ FGP(M_k),      L_k = eta_k + N(0, I),   u_k = Phi(eta_k)
    p_k = u_k prod_{j<k} (1 - u_j),      u_K = 1 (finite truncation)
    Zobs_i ~ N(Z_{C(i)}, lambda_i)

Labels, slice variables and stick weights live on lattice cells; only
observed cells carry labels.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.fft as sfft
from scipy import special

from .harmonic import axis_bases, fft_ortho, ifft_ortho, project_grid, white_spectrum
from .spectral import SpectralModel, build_frequency_lattice, truncate_spectrum
from .stationary import (
    AdaptiveMetropolis,
    EmbeddedData,
    FitConfig,
    StationarySampler,
    ObservationSet,
    Priors,
    SpectralBand,
    _embed_for,
    _initial_model,
    starting_point,
    kappa_mis_step,
    noise_variances,
)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# configuration and state
# ---------------------------------------------------------------------------


@dataclass
class NSFitConfig:
    k_init: int = 16
    k_max: int = 32
    steps: int = 3000
    burn_in: int = 1000
    thin: int = 5
    seed: int = 0
    eps_rel: float = 0.01
    truncation: str = "band"
    mode: str = "strict"
    target_shape: tuple[int, ...] | None = None
    spacing: float | None = None
    pad: int = 0
    nu2: float = 0.1
    kappa_mis: float = 0.0
    update_kappa_mis: bool = True
    update_noise: bool = True
    update_theta: bool = True
    update_weights: bool = True
    metropolis_steps: int = 2
    target_accept: float = 0.3
    warmup_fixed: int = 20
    freeze_after: int | None = 500
    keep_spectra: int = 50
    weight_family: str | None = None
    weight_init: dict | None = None
    init: dict | None = None
    init_points: int = 1000
    init_labels: str = "prior"
    warm_start: int = 200
    predict_rule: str = "modal"
    priors: Priors = field(default_factory=Priors)
    weight_priors: Priors = field(default_factory=Priors)

    def validate(self):
        if self.k_init < 1:
            raise ValueError("k_init must be at least 1")
        if self.k_init > self.k_max:
            raise ValueError("k_init exceeds k_max")
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if not 0 <= self.burn_in < self.steps:
            raise ValueError("burn_in must be in [0, steps)")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if not self.nu2 > 0:
            raise ValueError("nu2 must be positive")
        if self.init_labels not in ("prior", "single"):
            raise ValueError("init_labels must be 'prior' or 'single'")
        return self


@dataclass
class ComponentBank:
    """Per-component mean-field and weight-field models plus lattice fields.

    Field arrays are stacked along axis 0 and flattened over the lattice.
    Weight fields exist for components 0..K-2; the last component takes the
    remaining stick.
    """

    z_models: list[SpectralModel]
    m_models: list[SpectralModel]
    z: np.ndarray  # (K, n)
    mu: np.ndarray  # (K, n)
    latent: np.ndarray  # L, (K-1, n)
    eta: np.ndarray  # (K-1, n)

    def __post_init__(self):
        if len(self.z_models) < 1:
            raise ValueError("component bank needs K >= 1")
        if len(self.m_models) != len(self.z_models) - 1:
            raise ValueError("need K-1 weight-field models")
        for mm in self.m_models:
            if mm.sigma2 != 1.0:
                raise ValueError("weight fields have a unit nugget")

    @property
    def k(self) -> int:
        return len(self.z_models)


@dataclass
class MixtureState:
    y: np.ndarray  # full-grid shared coefficients
    labels: np.ndarray  # per observed cell, 0-based component index
    r: np.ndarray  # per observed cell slice variable
    u: np.ndarray  # (K, n) sticks, last row ones
    p: np.ndarray  # (K, n) weights
    bank: ComponentBank
    nu2: float
    kappa_mis: float = 0.0
    iteration: int = 0


def ifft_ortho_stack(coeffs: np.ndarray) -> np.ndarray:
    """Real inverse transform of a stack of coefficient grids (leading axis)."""
    axes = tuple(range(1, coeffs.ndim))
    return sfft.ifftn(coeffs, axes=axes, norm="ortho").real


def fft_ortho_stack(fields: np.ndarray) -> np.ndarray:
    axes = tuple(range(1, fields.ndim))
    return sfft.fftn(fields, axes=axes, norm="ortho")


def truncated_normal_above(a: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draws of ``X ~ N(0, 1)`` conditioned on ``X > a``."""
    tail = special.ndtr(-np.minimum(a, 37.0))
    v = np.maximum(u * tail, np.finfo(float).tiny)
    return np.maximum(-special.ndtri(v), a)


def stick_weights(eta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sticks ``u = Phi(eta)`` (last row 1) and weights ``p_k = u_k prod_{j<k}(1-u_j)``."""
    eta = np.atleast_2d(eta)
    k = eta.shape[0] + 1
    u = np.ones((k,) + eta.shape[1:])
    u[:-1] = special.ndtr(eta)
    # log-space remainder keeps deep sticks accurate
    log_rest = np.concatenate([np.zeros((1,) + eta.shape[1:]), np.cumsum(special.log_ndtr(-eta), axis=0)])
    p = u * np.exp(log_rest)
    return u, p


# ---------------------------------------------------------------------------
# covariance
# ---------------------------------------------------------------------------


def _sqrt_spectra(models, lattice, eps_rel, rule="band"):
    out = []
    for mdl in models:
        band = SpectralBand(lattice, eps_rel, rule)
        out.append(np.sqrt(band.density_grid(mdl)).reshape(-1))
    return np.array(out)


def _rows(lattice, locations) -> np.ndarray:
    """Unnormalised rows of ``Q`` (N, n): products of per-axis bases, C order."""
    bases = axis_bases(lattice, locations)
    r = bases[0]
    for b in bases[1:]:
        r = (r[:, :, None] * b[:, None, :]).reshape(r.shape[0], -1)
    return r


def ns_covariance(
    bank_or_models,
    lattice,
    s1,
    s2,
    labels: tuple[int, int] | None = None,
    weights: tuple[np.ndarray, np.ndarray] | None = None,
    eps_rel: float = 0.01,
) -> float:
    """Covariance between two sites under the shared-Y mixture.

    With ``labels`` it is ``Q_s1 G_c1^1/2 G_c2^1/2 Q_s2* + sigma2 1(s1 = s2)``.
    With ``weights`` (per-site component probabilities) labels are averaged
    out: a double sum over component pairs for distinct sites, a single sum
    at the same site (where both labels coincide).
    """
    models = bank_or_models.z_models if isinstance(bank_or_models, ComponentBank) else list(bank_or_models)
    k = len(models)
    a = _sqrt_spectra(models, lattice, eps_rel)
    r = _rows(lattice, np.vstack([np.ravel(s1), np.ravel(s2)]).astype(float))
    kern = (r[0] * np.conj(r[1])).real / lattice.n
    same = bool(np.array_equal(np.ravel(s1), np.ravel(s2)))
    s2v = np.array([m.sigma2 for m in models])
    if labels is not None:
        c1, c2 = labels
        if not (0 <= c1 < k and 0 <= c2 < k):
            raise ValueError(f"labels must lie in 0..{k - 1}")
        if same and c1 != c2:
            raise ValueError("one site carries one label")
        cov = float(np.sum(a[c1] * a[c2] * kern))
        return cov + (float(s2v[c1]) if same else 0.0)
    if weights is None:
        raise ValueError("give labels or weights")
    p1, p2 = (np.asarray(v, float).reshape(-1) for v in weights)
    if same:
        return float(np.sum(p1 @ (a * a) * kern) + p1 @ s2v)
    return float(np.sum((p1 @ a) * (p2 @ a) * kern))


def conditional_covariance_matrix(models, lattice, locations, labels, eps_rel: float = 0.01) -> np.ndarray:
    """Covariance matrix of ``Z_s`` given per-site labels (positive definite)."""
    locs = np.atleast_2d(np.asarray(locations, float))
    labels = np.asarray(labels, int)
    a = _sqrt_spectra(models, lattice, eps_rel)
    r = _rows(lattice, locs) * (a[labels] / math.sqrt(lattice.n))
    cov = r.real @ r.real.T + r.imag @ r.imag.T
    cov[np.diag_indices_from(cov)] += np.array([models[c].sigma2 for c in labels])
    return 0.5 * (cov + cov.T)


# ---------------------------------------------------------------------------
# joint likelihood of component fields with Y integrated out
# ---------------------------------------------------------------------------


class JointSpectralLikelihood:
    """``log p(Z_1..Z_K | theta)`` with the shared Y integrated out.

    Per frequency the K-vector ``(Q*Z_k)_l`` is normal with covariance
    ``diag(sigma2_k) + a a^T`` (``a_k = g_k^1/2``), so the inverse and the
    determinant follow from the rank-one update formulas.  Running sums over
    components make one component's change an O(n) update.
    """

    def __init__(self, a: np.ndarray, s2: np.ndarray, w: np.ndarray):
        self.a = a.copy()
        self.s2 = s2.astype(float).copy()
        self.set_fields(w)

    def set_fields(self, w: np.ndarray):
        self.w = w
        self.power = w.real ** 2 + w.imag ** 2
        self.ptot = self.power.sum(axis=1)
        self._sums()

    def _sums(self):
        inv = 1.0 / self.s2
        self.A = np.einsum("k,kl->l", inv, self.a ** 2)
        self.B = np.einsum("k,kl->l", inv, self.a * self.w)
        self.Q0 = float(np.sum(self.ptot * inv))
        self.logs2 = float(np.sum(np.log(self.s2)))

    def _value(self, A, B, Q0, logs2):
        n = A.size
        quad = Q0 - float(np.sum((B.real ** 2 + B.imag ** 2) / (1.0 + A)))
        logdet = n * logs2 + float(np.sum(np.log1p(A)))
        return -0.5 * (quad + logdet)

    def value(self) -> float:
        return self._value(self.A, self.B, self.Q0, self.logs2)

    def proposal(self, k: int, a_new: np.ndarray, s2_new: float):
        A = self.A + a_new ** 2 / s2_new - self.a[k] ** 2 / self.s2[k]
        B = self.B + (a_new / s2_new - self.a[k] / self.s2[k]) * self.w[k]
        Q0 = self.Q0 + self.ptot[k] * (1.0 / s2_new - 1.0 / self.s2[k])
        logs2 = self.logs2 + math.log(s2_new) - math.log(self.s2[k])
        return self._value(A, B, Q0, logs2), (A, B, Q0, logs2)

    def accept(self, k: int, a_new: np.ndarray, s2_new: float, cache):
        self.a[k] = a_new
        self.s2[k] = s2_new
        self.A, self.B, self.Q0, self.logs2 = cache


def joint_loglik(z_fields: np.ndarray, a: np.ndarray, s2: np.ndarray) -> float:
    """Convenience: joint log density of K lattice fields including the constant."""
    k = z_fields.shape[0]
    shape = z_fields.shape[1:]
    w = np.array([fft_ortho(z).reshape(-1) for z in z_fields])
    n = int(np.prod(shape))
    return JointSpectralLikelihood(a, np.asarray(s2), w).value() - 0.5 * k * n * math.log(2 * math.pi)


# ---------------------------------------------------------------------------
# sampler
# ---------------------------------------------------------------------------


def _pack(model: SpectralModel, with_nugget: bool) -> np.ndarray:
    v = [model.phi, *model.rho] + ([model.sigma2] if with_nugget else [])
    return np.log(np.array(v))


def _unpack(model: SpectralModel, x: np.ndarray, with_nugget: bool) -> SpectralModel:
    v = np.exp(x)
    if with_nugget:
        return model.with_params(phi=float(v[0]), rho=tuple(float(r) for r in v[1:-1]), sigma2=float(v[-1]))
    return model.with_params(phi=float(v[0]), rho=tuple(float(r) for r in v[1:]))


def _log_prior(model: SpectralModel, priors: Priors, with_nugget: bool) -> float:
    lo, hi = priors.range_bounds
    if any(not (lo < r < hi) for r in model.rho):
        return -math.inf
    lp = -len(model.rho) * math.log(hi - lo) + priors._ig_logpdf(model.phi, priors.scale_ig)
    jac = math.log(model.phi) + sum(math.log(r) for r in model.rho)
    if with_nugget:
        lp += priors._ig_logpdf(model.sigma2, priors.nugget_ig)
        jac += math.log(model.sigma2)
    return lp + jac


class NonStationarySampler:
    """Slice Gibbs sampler for the shared-Y mixture (one chain).

    Sweep order:
      1. labels | r, weights, mu (component fields integrated out), then
         component fields at observed cells refreshed for the new labels
      3. L_k | eta_k, labels (truncated normal)
      4. theta_M,k | L_k (eta integrated out)
      5. eta_k | L_k, theta_M,k (diagonal in frequency)
      6. sticks and weights from eta
      7. theta_Z,k | Z_1..Z_K (Y integrated out)
      8. Y | Z_1..Z_K
      9. mu_k = Q G_k^1/2 Y
     10. Z_k | mu_k, labels, data
         nu2 | residuals
      2. r | labels, weights (drawn last so the next label step sees fresh r)
    """

    def __init__(self, data: EmbeddedData, z_model: SpectralModel, config: NSFitConfig, rng: np.random.Generator, m_model: SpectralModel | None = None):
        self.data = data
        self.config = config
        self.rng = rng
        self.lattice = build_frequency_lattice(data.shape)
        n = data.n
        self.n = n
        K = config.k_init
        self.K = K
        self.cells = data.observed_cells
        self.cell_pos = np.searchsorted(self.cells, data.cell)
        self.frozen = np.zeros(K, bool)
        self.last_seen = np.zeros(K, int)
        self.z_bands = [SpectralBand(self.lattice, config.eps_rel, config.truncation) for _ in range(K)]
        self.m_bands = [SpectralBand(self.lattice, config.eps_rel, config.truncation) for _ in range(K - 1)]
        if m_model is None:
            fam = config.weight_family or z_model.family
            wi = config.weight_init or {}
            m_model = SpectralModel(fam, float(wi.get("phi", 1.0)), tuple(np.atleast_1d(wi.get("rho", 10.0 * z_model.rho[0]))), z_model.kappa, 1.0, config.eps_rel)
            if fam == "matern":
                m_model = m_model.with_params(rho=(m_model.rho[0],))
        z_models = [z_model] * K
        m_models = [m_model] * (K - 1)
        counts = np.bincount(data.cell, minlength=n)
        zobs = np.zeros(n)
        obs = counts > 0
        zobs[obs] = np.bincount(data.cell, weights=data.values, minlength=n)[obs] / counts[obs]
        eta = np.zeros((K - 1, n))
        bank = ComponentBank(z_models, m_models, np.zeros((K, n)), np.zeros((K, n)), eta.copy(), eta)
        u, p = stick_weights(eta) if K > 1 else (np.ones((1, n)), np.ones((1, n)))
        if K == 1 or config.init_labels == "single":
            labels = np.zeros(self.cells.size, int)
        else:
            cum = np.cumsum(p[:, self.cells], axis=0)
            labels = np.minimum((rng.uniform(size=self.cells.size) > cum).sum(axis=0), K - 1)
        bank.z[:] = 0.0
        bank.z[labels, self.cells] = zobs[self.cells]
        self.state = MixtureState(np.zeros(data.shape, complex), labels, np.zeros(self.cells.size), u, p, bank, config.nu2, config.kappa_mis)
        self.zmetro = [AdaptiveMetropolis(_pack(z_model, True), 0.05, config.target_accept) for _ in range(K)]
        self.mmetro = [AdaptiveMetropolis(_pack(m_model, False), 0.05, config.target_accept) for _ in range(K - 1)]
        self.w = fft_ortho_stack(bank.z.reshape((K,) + data.shape)).reshape(K, n)
        self.a = np.array([np.sqrt(b.density_grid(mm)).reshape(-1) for b, mm in zip(self.z_bands, z_models)])
        self.joint = JointSpectralLikelihood(self.a, np.array([mm.sigma2 for mm in z_models]), self.w)
        self._draw_y()
        self._update_mu()
        if K > 1:
            self._draw_r()

    def warm_start(self, sweeps: int):
        """Seed every component from a short stationary run.

        With many components sharing Y, a cold start lets the mean fields absorb
        the data only slowly and the noise variance can settle on an inflated
        value first; starting from a fitted stationary state avoids that.
        """
        if sweeps <= 0:
            return
        cfg = self.config
        scfg = FitConfig(steps=sweeps, burn_in=0, eps_rel=cfg.eps_rel, truncation=cfg.truncation,
                         nu2=cfg.nu2, kappa_mis=cfg.kappa_mis, update_noise=cfg.update_noise, update_kappa_mis=cfg.update_kappa_mis,
                         metropolis_steps=4, warmup_fixed=min(cfg.warmup_fixed, sweeps), priors=cfg.priors)
        st = StationarySampler(self.data, self.state.bank.z_models[0], scfg, self.rng)
        st.initialise_field()
        for it in range(sweeps):
            st.sweep(update_theta=it >= scfg.warmup_fixed)
        s, bank = self.state, self.state.bank
        mdl = st.state.model
        bank.z_models = [mdl] * self.K
        s.nu2 = st.state.nu2
        s.kappa_mis = st.state.kappa_mis
        bank.z = np.tile(st.state.z.reshape(-1), (self.K, 1))
        g = np.sqrt(st.band.density_grid(mdl)).reshape(-1)
        self.a = np.tile(g, (self.K, 1))
        for met in self.zmetro:
            met.mean = _pack(mdl, True)
        self.w = fft_ortho_stack(bank.z.reshape((self.K,) + self.data.shape)).reshape(self.K, self.n)
        self.joint = JointSpectralLikelihood(self.a, np.full(self.K, mdl.sigma2), self.w)
        self._draw_y()
        self._update_mu()
        if self.K > 1:
            self._draw_r()

    def set_component_models(self, z_models=None, m_models=None):
        """Replace component models and rebuild the cached spectra."""
        bank = self.state.bank
        if z_models is not None:
            if len(z_models) != self.K:
                raise ValueError(f"need {self.K} component models")
            bank.z_models = list(z_models)
            self.a = np.array([np.sqrt(b.density_grid(m)).reshape(-1) for b, m in zip(self.z_bands, bank.z_models)])
            self.joint = JointSpectralLikelihood(self.a, np.array([m.sigma2 for m in bank.z_models]), self.w)
            for met, m in zip(self.zmetro, bank.z_models):
                met.mean = _pack(m, True)
        if m_models is not None:
            if len(m_models) != self.K - 1 or any(m.sigma2 != 1.0 for m in m_models):
                raise ValueError(f"need {self.K - 1} weight models with unit nugget")
            bank.m_models = list(m_models)

    # helpers -----------------------------------------------------------
    def _fft(self, x):
        return fft_ortho(x.reshape(self.data.shape)).reshape(-1)

    def _ifft(self, c):
        return ifft_ortho(c.reshape(self.data.shape)).real.reshape(-1)

    def _cell_stats(self):
        """Per observed cell: summed precision and precision-weighted values."""
        lam = noise_variances(self.data, self.state.nu2, self.state.kappa_mis)
        m = self.cells.size
        prec = np.bincount(self.cell_pos, weights=1.0 / lam, minlength=m)
        wsum = np.bincount(self.cell_pos, weights=self.data.values / lam, minlength=m)
        return prec, wsum

    # step 1 ------------------------------------------------------------
    def _draw_labels(self):
        s, bank = self.state, self.state.bank
        K = self.K
        prec, wsum = self._cell_stats()
        s2 = np.array([mm.sigma2 for mm in bank.z_models])[:, None]
        mu = bank.mu[:, self.cells]
        post_prec = prec[None, :] + 1.0 / s2
        # log marginal of the cell's observations with Z_k integrated out (k-dependent part)
        ll = -0.5 * np.log(s2) - 0.5 * np.log(post_prec) + 0.5 * (wsum[None, :] + mu / s2) ** 2 / post_prec - 0.5 * mu ** 2 / s2
        admissible = s.p[:, self.cells] > s.r[None, :]
        ll = np.where(admissible, ll, -np.inf)
        empty = ~admissible.any(axis=0)
        if np.any(empty):
            raise RuntimeError(f"{int(empty.sum())} cells have no admissible component; raise k_init (k_max={self.config.k_max})")
        ll -= ll.max(axis=0, keepdims=True)
        pr = np.exp(ll)
        cum = np.cumsum(pr, axis=0)
        draw = self.rng.uniform(size=self.cells.size) * cum[-1]
        s.labels = np.minimum((draw[None, :] > cum).sum(axis=0), K - 1)

    # step 3 ------------------------------------------------------------
    def _draw_latent(self):
        s, bank = self.state, self.state.bank
        K = self.K
        lab = np.full(self.n, K, dtype=int)  # unobserved: untruncated everywhere
        lab[self.cells] = s.labels
        for k in range(K - 1):
            eta = bank.eta[k]
            above = lab == k
            below = (lab > k) & (lab < K)
            # cells with label below k and unobserved cells stay untruncated
            x = self.rng.standard_normal(self.n)
            uu = self.rng.uniform(size=self.n)
            pos = truncated_normal_above(-eta[above], uu[above])
            neg = -truncated_normal_above(eta[below], uu[below])
            x[above] = pos
            x[below] = neg
            bank.latent[k] = eta + x

    # steps 4-6 ---------------------------------------------------------
    def _update_weight_fields(self, update_theta: bool):
        s, bank = self.state, self.state.bank
        pri = self.config.weight_priors
        for k in range(self.K - 1):
            wl = self._fft(bank.latent[k])
            band = self.m_bands[k]
            band.set_field(wl.reshape(self.data.shape))
            if update_theta and not self.frozen[k]:
                mdl = bank.m_models[k]
                met = self.mmetro[k]
                x = _pack(mdl, False)
                cur = band.loglik(mdl) + _log_prior(mdl, pri, False)
                for _ in range(self.config.metropolis_steps):
                    xp = met.propose(x, self.rng)
                    try:
                        prop = _unpack(mdl, xp, False)
                        new = band.loglik(prop) + _log_prior(prop, pri, False)
                    except (ValueError, FloatingPointError, OverflowError):
                        new = -math.inf
                    ok = np.isfinite(new) and math.log(self.rng.uniform()) < new - cur
                    if ok:
                        x, cur, mdl = xp, new, prop
                    met.record(x, bool(ok))
                bank.m_models[k] = mdl
            mg = band.density_grid(bank.m_models[k]).reshape(-1)
            shrink = mg / (mg + 1.0)
            c = shrink * wl + np.sqrt(shrink) * white_spectrum(self.data.shape, self.rng).reshape(-1)
            bank.eta[k] = self._ifft(np.where(mg > 0, c, 0.0))
        s.u, s.p = stick_weights(bank.eta)

    # step 7 ------------------------------------------------------------
    def _update_component_theta(self):
        bank = self.state.bank
        pri = self.config.priors
        jl = self.joint
        for k in range(self.K):
            if self.frozen[k]:
                continue
            mdl = bank.z_models[k]
            met = self.zmetro[k]
            x = _pack(mdl, True)
            cur = jl.value() + _log_prior(mdl, pri, True)
            for _ in range(self.config.metropolis_steps):
                xp = met.propose(x, self.rng)
                try:
                    prop = _unpack(mdl, xp, True)
                    lp = _log_prior(prop, pri, True)
                    if np.isfinite(lp):
                        a_new = np.sqrt(self.z_bands[k].density_grid(prop)).reshape(-1)
                        val, cache = jl.proposal(k, a_new, prop.sigma2)
                        new = val + lp
                    else:
                        new = -math.inf
                except (ValueError, FloatingPointError, OverflowError):
                    new = -math.inf
                ok = np.isfinite(new) and math.log(self.rng.uniform()) < new - cur
                if ok:
                    jl.accept(k, a_new, prop.sigma2, cache)
                    x, cur, mdl = xp, new, prop
                met.record(x, bool(ok))
            bank.z_models[k] = mdl
        self.a = jl.a

    # steps 8-9 ---------------------------------------------------------
    def _draw_y(self):
        jl = self.joint
        prec = 1.0 + jl.A
        y = jl.B / prec + white_spectrum(self.data.shape, self.rng).reshape(-1) / np.sqrt(prec)
        self.state.y = y.reshape(self.data.shape)

    def _update_mu(self):
        yflat = self.state.y.reshape(-1)
        coeffs = (self.a * yflat[None, :]).reshape((self.K,) + self.data.shape)
        self.state.bank.mu = ifft_ortho_stack(coeffs).reshape(self.K, self.n)

    # step 10 -----------------------------------------------------------
    def _draw_fields(self, cells_only: bool = False):
        s, bank = self.state, self.state.bank
        K = self.K
        s2 = np.array([mm.sigma2 for mm in bank.z_models])
        if not cells_only:
            z = bank.mu + self.rng.standard_normal((K, self.n)) * np.sqrt(s2)[:, None]
        else:
            z = bank.z
        prec_o, wsum = self._cell_stats()
        lab = s.labels
        sc = s2[lab]
        prec = 1.0 / sc + prec_o
        mean = (bank.mu[lab, self.cells] / sc + wsum) / prec
        if cells_only:
            # labelled component at each observed cell, then others from their prior
            other = bank.mu[:, self.cells] + self.rng.standard_normal((K, self.cells.size)) * np.sqrt(s2)[:, None]
            z[:, self.cells] = other
        z[lab, self.cells] = mean + self.rng.standard_normal(self.cells.size) / np.sqrt(prec)
        bank.z = z
        if not cells_only:
            self.w = fft_ortho_stack(z.reshape((K,) + self.data.shape)).reshape(K, self.n)
            self.joint.set_fields(self.w)

    def _draw_fields_stationary_order(self):
        """Z draw consuming the RNG exactly like the stationary sampler (K = 1)."""
        s, bank = self.state, self.state.bank
        lam = noise_variances(self.data, s.nu2, s.kappa_mis)
        prec_obs = np.bincount(self.data.cell, weights=1.0 / lam, minlength=self.n)
        wsum = np.bincount(self.data.cell, weights=self.data.values / lam, minlength=self.n)
        s2 = bank.z_models[0].sigma2
        prec = 1.0 / s2 + prec_obs
        mean = (bank.mu[0] / s2 + wsum) / prec
        bank.z = (mean + self.rng.standard_normal(self.n) / np.sqrt(prec))[None, :]
        self.w = fft_ortho_stack(bank.z.reshape((1,) + self.data.shape)).reshape(1, self.n)
        self.joint.set_fields(self.w)

    def _update_noise(self):
        s, data = self.state, self.data
        if data.noise_var is not None:
            return
        a, b = self.config.priors.noise_ig
        f = 1.0 + s.kappa_mis * data.distance
        lab = s.labels[self.cell_pos]
        r = data.values - s.bank.z[lab, data.cell]
        s.nu2 = (b + 0.5 * float(np.sum(r * r / f))) / self.rng.gamma(a + 0.5 * r.size)

    def _update_kappa(self):
        s, data = self.state, self.data
        lab = s.labels[self.cell_pos]
        r2 = (data.values - s.bank.z[lab, data.cell]) ** 2
        base = np.full(r2.size, s.nu2) if data.noise_var is None else data.noise_var
        s.kappa_mis, _ = kappa_mis_step(self.rng, s.kappa_mis, r2, base, data.distance, self.config.priors.kappa_mis_bounds, 0.3)

    # step 2 ------------------------------------------------------------
    def _draw_r(self):
        s = self.state
        pc = s.p[s.labels, self.cells]
        s.r = self.rng.uniform(size=self.cells.size) * pc

    def refresh_weights(self):
        s = self.state
        s.u, s.p = stick_weights(s.bank.eta) if self.K > 1 else (np.ones((1, self.n)), np.ones((1, self.n)))

    # sweep -------------------------------------------------------------
    def sweep(self, update_theta: bool | None = None):
        cfg = self.config
        upd = cfg.update_theta if update_theta is None else update_theta
        s = self.state
        if self.K > 1:
            self._draw_labels()
            self._draw_fields(cells_only=True)
            self.w = fft_ortho_stack(s.bank.z.reshape((self.K,) + self.data.shape)).reshape(self.K, self.n)
            self.joint.set_fields(self.w)
            if cfg.update_weights:
                self._draw_latent()
                self._update_weight_fields(upd)
            occupied = np.bincount(s.labels, minlength=self.K) > 0
            self.last_seen[occupied] = s.iteration
            if cfg.freeze_after is not None:
                self.frozen = (s.iteration - self.last_seen) > cfg.freeze_after
        if upd:
            self._update_component_theta()
        self._draw_y()
        self._update_mu()
        if self.K > 1:
            self._draw_fields()
        else:
            self._draw_fields_stationary_order()
        if cfg.update_noise:
            self._update_noise()
        if cfg.update_kappa_mis and self.data.has_offsets:
            self._update_kappa()
        if self.K > 1:
            self._draw_r()
        s.iteration += 1
        if not (np.all(np.isfinite(s.bank.z)) and np.all(np.isfinite(s.y))):
            raise FloatingPointError(f"chain diverged at iteration {s.iteration}")
        return s

    # prediction helpers --------------------------------------------------
    def component_coeffs(self) -> np.ndarray:
        return self.a * self.state.y.reshape(-1)[None, :]

    def eta_coeffs(self) -> np.ndarray:
        return np.array([self._fft(e) for e in self.state.bank.eta]) if self.K > 1 else np.zeros((0, self.n), complex)


def ns_gibbs_sweep(sampler: NonStationarySampler, update_theta: bool | None = None) -> MixtureState:
    """One full sweep of the mixture sampler; returns the updated state."""
    return sampler.sweep(update_theta)


# ---------------------------------------------------------------------------
# fitting and prediction
# ---------------------------------------------------------------------------


@dataclass
class NSDraw:
    z_models: list[SpectralModel]
    coeffs: np.ndarray  # (K, n) complex64, G_k^1/2 Y
    eta_coeffs: np.ndarray  # (K-1, n) complex64
    nu2: float


@dataclass
class NSPosterior:
    k: int
    names: list[str]
    draws: np.ndarray  # (kept, K, params) component parameters, ranges in original units
    nu2: np.ndarray
    iterations: np.ndarray
    label_counts: np.ndarray  # (K, observed cells) number of retained draws with that label
    mean_weights: np.ndarray  # (K, n) posterior mean p_k on the lattice
    acceptance_z: list[float]
    acceptance_m: list[float]
    embedding: EmbeddedData
    spectra: list[NSDraw] = field(default_factory=list)
    predictions: dict | None = None
    cells: np.ndarray | None = None

    @property
    def occupancy(self) -> np.ndarray:
        """Average fraction of observed cells labelled k."""
        return self.label_counts.sum(axis=1) / self.label_counts.sum()

    def dominating(self, threshold: float = 0.05) -> int:
        return int(np.sum(self.occupancy > threshold))

    @property
    def modal_labels(self) -> np.ndarray:
        """Per observed cell ``argmax_k`` of the posterior mean weight."""
        return np.argmax(self.mean_weights[:, self.cells], axis=0)

    def component_summary(self) -> list[dict]:
        """Per component (occupancy-sorted) posterior means and SDs."""
        order = np.argsort(-self.occupancy)
        out = []
        for k in order:
            d = self.draws[:, k, :]
            out.append({
                "component": int(k),
                "occupancy": float(self.occupancy[k]),
                **{f"{nm}_mean": float(d[:, i].mean()) for i, nm in enumerate(self.names)},
                **{f"{nm}_sd": float(d[:, i].std(ddof=1)) if d.shape[0] > 1 else 0.0 for i, nm in enumerate(self.names)},
            })
        return out

    def label_field(self) -> np.ndarray:
        """Lattice field of modal labels (1-based; 0 at unobserved cells)."""
        out = np.zeros(self.embedding.n)
        out[self.cells] = self.modal_labels + 1
        return out.reshape(self.embedding.shape)

    def weight_fields(self) -> np.ndarray:
        return self.mean_weights.reshape((self.k,) + self.embedding.shape)


def _predict_draw(coeffs, eta_coeffs, lat, tl, bases, models, nu2, rule: str = "modal"):
    """Per-draw predictive mean/variance at lattice-unit targets.

    ``modal`` uses the component with the largest weight at each target;
    ``mixture`` averages the component means and variances with the weights.
    """
    K = coeffs.shape[0]
    s2 = np.array([m.sigma2 for m in models])
    if K > 1:
        eta_t = np.array([project_grid(c.reshape(lat.shape), lat, tl, bases=bases) for c in eta_coeffs])
        _, p = stick_weights(eta_t)
    else:
        p = np.ones((1, len(tl)))
    chosen = np.argmax(p, axis=0)
    if rule == "mixture":
        comp = np.array([project_grid(c.reshape(lat.shape), lat, tl, bases=bases) for c in coeffs])
        mean = np.sum(p * comp, axis=0)
        var = nu2 + p.T @ s2 + np.sum(p * comp ** 2, axis=0) - mean ** 2
        return mean, var, chosen
    if rule != "modal":
        raise ValueError("prediction rule must be 'modal' or 'mixture'")
    mean = np.empty(len(tl))
    for k in np.unique(chosen):
        sel = chosen == k
        sub = [b[sel] for b in bases]
        mean[sel] = project_grid(coeffs[k].reshape(lat.shape), lat, tl[sel], bases=sub)
    return mean, nu2 + s2[chosen], chosen


def ns_fit(data: ObservationSet, config: NSFitConfig, model: SpectralModel, targets=None) -> NSPosterior:
    """Run the mixture sampler and summarise components, labels and weights."""
    config.validate()
    emb = _embed_for(data, model, config)
    seq = np.random.SeedSequence(config.seed)
    start = starting_point(emb, _initial_model(model, emb, config.init), config, np.random.default_rng(seq.spawn(1)[0]))
    rng = np.random.default_rng(seq)
    sampler = NonStationarySampler(emb, start.model, replace(config, nu2=start.nu2, kappa_mis=start.kappa_mis), rng)
    sampler.warm_start(config.warm_start)
    K = sampler.K
    lat = sampler.lattice
    names = ["phi", *(["rho"] if len(start.model.rho) == 1 else [f"rho{k + 1}" for k in range(len(start.model.rho))]), "sigma2"]
    kept = np.arange(config.burn_in, config.steps, config.thin)
    draws = np.empty((kept.size, K, len(names)))
    nu2 = np.empty(kept.size)
    counts = np.zeros((K, sampler.cells.size))
    wsum = np.zeros((K, emb.n))
    spectra = []
    every = max(1, int(math.ceil(kept.size / max(config.keep_spectra, 1)))) if config.keep_spectra else 0
    if targets is not None:
        tl = emb.to_lattice(targets)
        bases = axis_bases(lat, tl)
        pm = np.zeros(len(tl))
        pm2 = np.zeros(len(tl))
        pv = np.zeros(len(tl))
        alt = np.zeros(len(tl))
    j = 0
    scale = emb.scale
    for it in range(config.steps):
        sampler.sweep(update_theta=config.update_theta and it >= config.warmup_fixed)
        if it + 1 == config.burn_in:
            for m in sampler.zmetro + sampler.mmetro:
                m.frozen = True
        if j < kept.size and it == kept[j]:
            s = sampler.state
            for k, mdl in enumerate(s.bank.z_models):
                rng_o = [mdl.rho[0] * scale[0]] if len(mdl.rho) == 1 else [r * sc for r, sc in zip(mdl.rho, scale)]
                draws[j, k] = [mdl.phi, *rng_o, mdl.sigma2]
            nu2[j] = s.nu2
            counts[s.labels, np.arange(sampler.cells.size)] += 1
            wsum += s.p
            coeffs = sampler.component_coeffs()
            ec = sampler.eta_coeffs()
            if targets is not None:
                mean_t, var_t, _ = _predict_draw(coeffs, ec, lat, tl, bases, s.bank.z_models, s.nu2, config.predict_rule)
                pm += mean_t
                pm2 += mean_t ** 2
                pv += var_t
                if config.predict_rule == "modal":
                    alt_m, _, _ = _predict_draw(coeffs, ec, lat, tl, bases, s.bank.z_models, s.nu2, "mixture")
                    alt += alt_m
            if every and j % every == 0:
                spectra.append(NSDraw(list(s.bank.z_models), coeffs.astype(np.complex64), ec.astype(np.complex64), s.nu2))
            j += 1
    for m in sampler.zmetro + sampler.mmetro:
        m.frozen = True
    preds = None
    if targets is not None:
        mean = pm / kept.size
        mcv = np.maximum(pm2 / kept.size - mean ** 2, 0.0)
        preds = {"mean": mean, "var": pv / kept.size + mcv, "mc_var": mcv, "count": kept.size}
        if config.predict_rule == "modal":
            preds["mixture_mean"] = alt / kept.size
    return NSPosterior(
        K, names, draws, nu2, kept, counts, wsum / kept.size,
        [m.rate for m in sampler.zmetro], [m.rate for m in sampler.mmetro],
        emb, spectra, preds, sampler.cells,
    )


def ns_predict(posterior: NSPosterior, targets, rule: str = "modal") -> dict:
    """Monte-Carlo predictive mean and variance using the modal component per target."""
    if not posterior.spectra:
        raise ValueError("no retained draws to predict from")
    emb = posterior.embedding
    tl = emb.to_lattice(targets)
    if not np.all(np.isfinite(tl)):
        raise ValueError("targets must be finite")
    lat = build_frequency_lattice(emb.shape)
    bases = axis_bases(lat, tl)
    means, vars_ = [], []
    for d in posterior.spectra:
        m, v, _ = _predict_draw(d.coeffs.astype(complex), d.eta_coeffs.astype(complex), lat, tl, bases, d.z_models, d.nu2, rule)
        means.append(m)
        vars_.append(v)
    means = np.array(means)
    return {"mean": means.mean(axis=0), "var": np.mean(vars_, axis=0) + means.var(axis=0), "draws": means}
