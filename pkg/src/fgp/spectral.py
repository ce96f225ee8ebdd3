"""Frequency lattices, spectral density families and spectral truncation.

Conventions
-----------
Frequencies live on the DFT grid of the embedding lattice.  Along axis ``k``
the signed integer index ``j`` (``numpy.fft.fftfreq`` order) maps to

    omega = 2 * delta_k * j / n_k

so with ``delta_k = pi`` the grid is the usual set of DFT frequencies in
``(-pi, pi]``.  For even ``n_k`` the index ``-n_k/2`` is the Nyquist frequency;
``-delta_k`` and ``+delta_k`` are identified, so exactly ``n_k`` frequencies
exist per axis.

Fourier pair::

    g(w) = int exp(-i x.w) C(x) dx,      C(x) = (2 pi)^-d int exp(i x.w) g(w) dw

so the covariance of the discrete construction is
``sum_l g(w_l) cos(w_l . x) / n`` (a Riemann sum with cell volume ``1/n`` when
``delta = pi``).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy import special

FAMILIES = ("matern", "squared_exponential", "separable_product")


# ---------------------------------------------------------------------------
# frequency lattice
# ---------------------------------------------------------------------------


def _band_indices(n: int, m: int) -> np.ndarray:
    """Signed DFT indices of the centred band of ``m`` out of ``n``, FFT order."""
    j = np.fft.fftfreq(n, d=1.0 / n).astype(np.int64)
    lo, hi = -(m // 2), (m + 1) // 2 - 1
    return j[(j >= lo) & (j <= hi)]


@dataclass(frozen=True)
class FrequencyLattice:
    """Cartesian frequency support tied to an ``n_1 x ... x n_d`` location lattice.

    ``m_dims[k]`` frequencies are kept along axis ``k``.  When ``m_k = n_k`` the
    whole DFT grid is used.  For odd ``m_k`` the band is ``|j| <= (m_k-1)/2``;
    for even ``m_k < n_k`` it is ``-m_k/2 .. m_k/2-1`` (the lone ``-m_k/2`` has no
    mirror partner and is dropped again by :func:`truncate_spectrum`).
    """

    n_dims: tuple[int, ...]
    m_dims: tuple[int, ...]
    deltas: tuple[float, ...]

    def __post_init__(self):
        if not (len(self.n_dims) == len(self.m_dims) == len(self.deltas)):
            raise ValueError("n_dims, m_dims and deltas must have the same length")
        if len(self.n_dims) == 0:
            raise ValueError("lattice needs at least one dimension")
        for n, m, dlt in zip(self.n_dims, self.m_dims, self.deltas):
            if n < 1 or m < 1:
                raise ValueError("lattice sizes must be positive")
            if m > n:
                raise ValueError(f"retained count m={m} exceeds lattice size n={n}")
            if not (np.isfinite(dlt) and dlt > 0):
                raise ValueError("half-bandwidth must be positive")

    @property
    def d(self) -> int:
        return len(self.n_dims)

    @property
    def n(self) -> int:
        return int(np.prod(self.n_dims))

    @property
    def m(self) -> int:
        return int(np.prod(self.m_dims))

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.n_dims)

    @property
    def full_band(self) -> bool:
        return self.m_dims == self.n_dims

    def axis_index(self, k: int) -> np.ndarray:
        """Retained signed indices along axis ``k`` (FFT order)."""
        return _band_indices(self.n_dims[k], self.m_dims[k])

    def axis_omega(self, k: int, full: bool = False) -> np.ndarray:
        n = self.n_dims[k]
        j = np.fft.fftfreq(n, d=1.0 / n) if full else self.axis_index(k)
        return 2.0 * self.deltas[k] * np.asarray(j, dtype=float) / n

    def is_nyquist(self, k: int, j: np.ndarray) -> np.ndarray:
        n = self.n_dims[k]
        return (n % 2 == 0) & (np.asarray(j) == -(n // 2))

    def flat_indices(self) -> np.ndarray:
        """Flat (C order) positions of the retained frequencies in the n-grid."""
        pos = [np.mod(self.axis_index(k), self.n_dims[k]) for k in range(self.d)]
        grids = np.meshgrid(*pos, indexing="ij")
        return np.ravel_multi_index([g.ravel() for g in grids], self.n_dims)

    def signed_index(self, flat: np.ndarray) -> np.ndarray:
        """Signed per-axis indices, shape (len(flat), d), of flat grid positions."""
        unr = np.unravel_index(np.asarray(flat), self.n_dims)
        out = np.empty((np.size(flat), self.d), dtype=np.int64)
        for k, (u, n) in enumerate(zip(unr, self.n_dims)):
            out[:, k] = np.where(u >= (n + 1) // 2, u - n, u) if n > 1 else 0
        return out

    def omega_of(self, flat: np.ndarray) -> np.ndarray:
        j = self.signed_index(flat)
        return 2.0 * j * np.asarray(self.deltas) / np.asarray(self.n_dims)

    def mirror(self, flat: np.ndarray) -> np.ndarray:
        """Flat position of ``-omega`` for each flat position (mod-n negation)."""
        unr = np.unravel_index(np.asarray(flat), self.n_dims)
        neg = [np.mod(-u, n) for u, n in zip(unr, self.n_dims)]
        return np.ravel_multi_index(neg, self.n_dims)

    def coordinates(self) -> np.ndarray:
        """Retained frequency coordinates, shape (m, d)."""
        return self.omega_of(self.flat_indices())

    def full_omega_grid(self) -> list[np.ndarray]:
        """Open-mesh (broadcastable) per-axis frequencies over the whole n-grid."""
        out = []
        for k in range(self.d):
            shape = [1] * self.d
            shape[k] = self.n_dims[k]
            out.append(self.axis_omega(k, full=True).reshape(shape))
        return out


def build_frequency_lattice(
    n_dims: Sequence[int],
    m_dims: Sequence[int] | None = None,
    deltas: Sequence[float] | None = None,
) -> FrequencyLattice:
    n_dims = tuple(int(v) for v in n_dims)
    m_dims = n_dims if m_dims is None else tuple(int(v) for v in m_dims)
    if deltas is None:
        deltas = (np.pi,) * len(n_dims)
    return FrequencyLattice(n_dims, m_dims, tuple(float(v) for v in deltas))


# ---------------------------------------------------------------------------
# spectral families
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SpectralModel:
    """Covariance family with parameters, evaluated through its spectral density.

    ``rho`` holds one range for isotropic use or one per dimension.  ``kappa``
    is the Matern smoothness and is ignored by the Gaussian families.
    """

    family: str
    phi: float
    rho: tuple[float, ...]
    kappa: float = 1.5
    sigma2: float = 1.0
    eps_rel: float = 0.01

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        rho = (self.rho,) if np.isscalar(self.rho) else tuple(self.rho)
        object.__setattr__(self, "rho", tuple(float(r) for r in rho))
        if not self.phi > 0:
            raise ValueError("phi must be positive")
        if not self.rho or any(not r > 0 for r in self.rho):
            raise ValueError("range parameters must be positive")
        if not self.kappa > 0:
            raise ValueError("kappa must be positive")
        if not self.sigma2 > 0:
            raise ValueError("sigma2 must be positive (the nugget keeps the covariance full rank)")
        if self.eps_rel < 0:
            raise ValueError("eps_rel must be non-negative")
        if self.family == "matern" and len(self.rho) != 1:
            raise ValueError("matern is isotropic: give a single range")

    def _ranges(self, d: int) -> np.ndarray:
        if len(self.rho) == 1:
            return np.full(d, self.rho[0])
        if len(self.rho) != d:
            raise ValueError(f"model has {len(self.rho)} ranges but omega has dimension {d}")
        return np.asarray(self.rho)

    def density(self, omega) -> np.ndarray:
        """Spectral density at frequencies ``omega`` of shape (..., d)."""
        omega = np.asarray(omega, dtype=float)
        if omega.ndim == 0:
            omega = omega[None]
        d = omega.shape[-1]
        return self.density_sq([omega[..., k] ** 2 for k in range(d)])

    def density_sq(self, omega_sq: Sequence[np.ndarray]) -> np.ndarray:
        """Density from per-axis squared frequencies (broadcastable arrays)."""
        d = len(omega_sq)
        if self.family == "matern":
            rho, kap = self.rho[0], self.kappa
            r2 = sum(omega_sq)
            lognorm = (
                d * np.log(2.0)
                + 0.5 * d * np.log(np.pi)
                + special.gammaln(kap + 0.5 * d)
                - special.gammaln(kap)
                - 2.0 * kap * np.log(rho)
            )
            return self.phi * np.exp(lognorm) * (rho ** -2 + r2) ** (-(kap + 0.5 * d))
        rho = self._ranges(d)
        expo = sum(r * r * w2 for r, w2 in zip(rho, omega_sq))
        return self.phi * (2 * np.pi) ** (0.5 * d) * np.prod(rho) * np.exp(-0.5 * expo)

    def covariance(self, lag) -> np.ndarray:
        """Closed-form covariance C(x) without the nugget; ``lag`` shape (..., d)."""
        lag = np.asarray(lag, dtype=float)
        if self.family == "matern":
            r = np.sqrt(np.sum(lag ** 2, axis=-1)) / self.rho[0]
            kap = self.kappa
            if kap == 0.5:
                return self.phi * np.exp(-r)
            if kap == 1.5:
                return self.phi * (1.0 + r) * np.exp(-r)
            if kap == 2.5:
                return self.phi * (1.0 + r + r * r / 3.0) * np.exp(-r)
            with np.errstate(invalid="ignore"):
                c = 2.0 ** (1 - kap) / special.gamma(kap) * r ** kap * special.kv(kap, r)
            return self.phi * np.where(r > 0, c, 1.0)
        rho = self._ranges(lag.shape[-1])
        return self.phi * np.exp(-0.5 * np.sum((lag / rho) ** 2, axis=-1))

    def with_params(self, **kw) -> "SpectralModel":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "phi": float(self.phi),
            "rho": [float(r) for r in self.rho],
            "kappa": float(self.kappa),
            "sigma2": float(self.sigma2),
            "eps_rel": float(self.eps_rel),
        }

    @classmethod
    def from_dict(cls, block: dict) -> "SpectralModel":
        unknown = set(block) - {"family", "phi", "rho", "kappa", "sigma2", "eps_rel"}
        if unknown:
            raise ValueError(f"unknown model keys: {sorted(unknown)}")
        if "family" not in block:
            raise ValueError("model block needs 'family'")
        kw = dict(block)
        rho = kw.get("rho", 1.0)
        kw["rho"] = tuple(rho) if isinstance(rho, (list, tuple)) else (rho,)
        return cls(**kw)


def spectral_density(model: SpectralModel, omega) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    if not np.all(np.isfinite(omega)):
        raise ValueError("frequency must be finite")
    return model.density(omega)


# ---------------------------------------------------------------------------
# truncation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SpectralDiagonal:
    """Active frequencies of a lattice with their spectral density values.

    ``active`` are flat C-order positions in the full n-grid (sorted); dropped
    frequencies are implicit zeros.
    """

    lattice: FrequencyLattice
    active: np.ndarray
    values: np.ndarray
    sigma2: float
    eps_rel: float = 0.01
    rule: str = "band"
    _full: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def m_active(self) -> int:
        return int(self.active.size)

    @property
    def sparsity(self) -> float:
        return self.m_active / self.lattice.n

    def omegas(self) -> np.ndarray:
        return self.lattice.omega_of(self.active)

    def full(self) -> np.ndarray:
        """Dense n-grid of g with zeros at dropped frequencies (lattice shape)."""
        if self._full is None:
            out = np.zeros(self.lattice.n)
            out[self.active] = self.values
            object.__setattr__(self, "_full", out.reshape(self.lattice.shape))
        return self._full

    def mask(self) -> np.ndarray:
        out = np.zeros(self.lattice.n, dtype=bool)
        out[self.active] = True
        return out.reshape(self.lattice.shape)


def _fold_closed(lattice: FrequencyLattice, flat: np.ndarray) -> np.ndarray:
    keep = np.isin(lattice.mirror(flat), flat)
    return flat[keep]


def truncate_spectrum(
    model: SpectralModel,
    lattice: FrequencyLattice,
    eps_rel: float | None = None,
    rule: str = "band",
) -> SpectralDiagonal:
    """Drop frequencies whose density is negligible against the nugget.

    ``rule="pointwise"`` keeps exactly ``{l : g(w_l) >= eps_rel * sigma2}``.
    ``rule="band"`` (default) keeps the smallest Cartesian sub-band
    ``|j_k| <= h_k`` containing all of those, so the support stays a product
    grid; every dropped frequency still has ``g < eps_rel * sigma2``.
    Either way the result is closed under ``w -> -w``.
    """
    eps_rel = model.eps_rel if eps_rel is None else float(eps_rel)
    if eps_rel < 0:
        raise ValueError("eps_rel must be non-negative")
    if rule not in ("band", "pointwise"):
        raise ValueError(f"unknown truncation rule {rule!r}")
    flat = np.sort(lattice.flat_indices())
    g = model.density(lattice.omega_of(flat))
    keep = g >= eps_rel * model.sigma2
    if rule == "band" and keep.any():
        j = np.abs(lattice.signed_index(flat))
        h = j[keep].max(axis=0)
        inband = np.all(j <= h, axis=1)
        # a kept Nyquist index widens the band to the whole axis
        keep = keep | inband
    flat = _fold_closed(lattice, flat[keep])
    if flat.size == 0:
        raise ValueError(
            "no frequency passes the truncation threshold; rescale the locations "
            "so the range parameter grows in lattice units"
        )
    g = model.density(lattice.omega_of(flat))
    return SpectralDiagonal(lattice, flat, g, float(model.sigma2), eps_rel, rule)


def band_halfwidths(model: SpectralModel, lattice: FrequencyLattice, eps_rel: float) -> tuple[int, ...]:
    """Per-axis band half-widths from on-axis density evaluations, O(sum n_k).

    Valid for densities that decrease in every ``|w_k|`` (all families here),
    where the widest above-threshold frequency along axis ``k`` lies on that axis.
    Returns -1 for an axis when even ``w = 0`` falls below the threshold.
    """
    thr = eps_rel * model.sigma2
    out = []
    for k in range(lattice.d):
        w = lattice.axis_omega(k)
        sq = [np.zeros(1)] * lattice.d
        sq[k] = w ** 2
        g = model.density_sq(sq)
        j = np.abs(lattice.axis_index(k))
        out.append(int(j[g >= thr].max()) if np.any(g >= thr) else -1)
    return tuple(out)


# ---------------------------------------------------------------------------
# covariance from the spectrum
# ---------------------------------------------------------------------------


def _phase_sum(diag: SpectralDiagonal, lag: np.ndarray) -> complex:
    lat = diag.lattice
    j = lat.signed_index(diag.active)
    w = 2.0 * j * np.asarray(lat.deltas) / np.asarray(lat.n_dims)
    factors = np.ones(diag.m_active, dtype=complex)
    for k in range(lat.d):
        nyq = lat.is_nyquist(k, j[:, k])
        ph = w[:, k] * lag[k]
        factors *= np.where(nyq, np.cos(ph) + 0j, np.exp(1j * ph))
    return complex(np.sum(factors * diag.values) / lat.n)


def spectral_sum(diag: SpectralDiagonal, lag) -> complex:
    """``sum_l exp(i w_l . x) g_l / n`` with the Nyquist fold split evenly.

    The imaginary part vanishes for fold-closed supports; the real part is
    the covariance without nugget.
    """
    lag = np.asarray(lag, dtype=float).reshape(-1)
    if lag.size != diag.lattice.d or not np.all(np.isfinite(lag)):
        raise ValueError("lag must be a finite d-vector")
    return _phase_sum(diag, lag)


def covariance_from_spectrum(
    diag: SpectralDiagonal,
    lag,
    same_point: bool = False,
    lattice: FrequencyLattice | None = None,
) -> float:
    if lattice is not None and lattice != diag.lattice:
        raise ValueError("lattice does not match the spectral diagonal")
    lag = np.asarray(lag, dtype=float).reshape(-1)
    if lag.size != diag.lattice.d or not np.all(np.isfinite(lag)):
        raise ValueError("lag must be a finite d-vector")
    w = diag.omegas()
    c = float(np.sum(diag.values * np.cos(w @ lag)) / diag.lattice.n)
    return c + (diag.sigma2 if same_point else 0.0)


def covariance_matrix(diag: SpectralDiagonal, xa, xb=None, nugget: bool = True) -> np.ndarray:
    """Covariance between two location sets by direct summation over frequencies.

    Uses ``cos(w.(x-y)) = cos(w.x)cos(w.y) + sin(w.x)sin(w.y)`` so the cost is
    two matrix products.  The nugget is added where ``xb`` is omitted and the
    point is the same row/column.
    """
    xa = np.atleast_2d(np.asarray(xa, dtype=float))
    same = xb is None
    xb = xa if same else np.atleast_2d(np.asarray(xb, dtype=float))
    w = diag.omegas()
    pa, pb = xa @ w.T, xb @ w.T
    gw = diag.values / diag.lattice.n
    cov = (np.cos(pa) * gw) @ np.cos(pb).T + (np.sin(pa) * gw) @ np.sin(pb).T
    if same and nugget:
        cov[np.diag_indices_from(cov)] += diag.sigma2
    return cov


MAX_ORACLE_POINTS = 2048


def dense_covariance_oracle(diag: SpectralDiagonal, locations, lattice: FrequencyLattice | None = None) -> np.ndarray:
    """Materialised ``Q G Q* + I sigma2`` for a small location set (test oracle)."""
    locs = np.atleast_2d(np.asarray(locations, dtype=float))
    if locs.shape[0] > MAX_ORACLE_POINTS:
        raise ValueError(f"dense oracle limited to {MAX_ORACLE_POINTS} locations")
    if lattice is not None and lattice != diag.lattice:
        raise ValueError("lattice does not match the spectral diagonal")
    cov = covariance_matrix(diag, locs)
    return 0.5 * (cov + cov.T)
