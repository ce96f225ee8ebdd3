"""Projection between the location lattice and the frequency support.

``Q`` has entries ``exp(i s.w_l) / sqrt(n)``; on the integer lattice
``s = 0..n_k-1`` its action is the unitary inverse DFT, so ``Q* Z`` is
``fftn(Z, norm="ortho")`` restricted to active frequencies and ``Q c`` is
``ifftn`` of the zero-padded coefficients.  Off-lattice rows are summed
directly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.fft as sfft

from .spectral import FrequencyLattice, SpectralDiagonal

FOLD_TOL = 1e-8


def fft_ortho(field: np.ndarray) -> np.ndarray:
    return sfft.fftn(field, norm="ortho")


def ifft_ortho(coeffs: np.ndarray) -> np.ndarray:
    return sfft.ifftn(coeffs, norm="ortho")


def white_spectrum(shape, rng: np.random.Generator) -> np.ndarray:
    """Fold-symmetric standard complex normal coefficients on the full grid.

    The unitary DFT of real white noise: each mirror pair ``(w, -w)`` carries
    one complex normal with ``E|Y|^2 = 1`` and its conjugate, self-paired
    frequencies carry a real N(0, 1).
    """
    return fft_ortho(rng.standard_normal(shape))


@dataclass(frozen=True)
class SpectralVector:
    """Complex coefficients on the active frequencies of a spectral diagonal."""

    diag: SpectralDiagonal
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape != (self.diag.m_active,):
            raise ValueError("coefficient count does not match the active set")

    def full(self) -> np.ndarray:
        out = np.zeros(self.diag.lattice.n, dtype=complex)
        out[self.diag.active] = self.values
        return out.reshape(self.diag.lattice.shape)

    @classmethod
    def from_full(cls, diag: SpectralDiagonal, grid: np.ndarray) -> "SpectralVector":
        return cls(diag, np.asarray(grid).reshape(-1)[diag.active].astype(complex))

    def fold_residual(self) -> float:
        """Max ``|c(-w) - conj(c(w))|`` over the active set."""
        lat = self.diag.lattice
        pos = np.searchsorted(self.diag.active, lat.mirror(self.diag.active))
        return float(np.max(np.abs(self.values[pos] - np.conj(self.values)), initial=0.0))


def forward_transform(field: np.ndarray, diag: SpectralDiagonal) -> SpectralVector:
    """``(Q* Z)_l`` for the active frequencies, via one FFT."""
    field = np.asarray(field, dtype=float)
    if field.shape != diag.lattice.shape:
        raise ValueError(f"field shape {field.shape} does not match lattice {diag.lattice.shape}")
    return SpectralVector.from_full(diag, fft_ortho(field))


def inverse_transform(coeffs: SpectralVector, diag: SpectralDiagonal | None = None) -> np.ndarray:
    """``Q c`` on the lattice; dropped frequencies enter as zeros."""
    diag = coeffs.diag if diag is None else diag
    if diag is not coeffs.diag and not np.array_equal(diag.active, coeffs.diag.active):
        raise ValueError("coefficients belong to a different active set")
    out = ifft_ortho(coeffs.full())
    scale = max(float(np.linalg.norm(out)), 1e-300)
    if np.linalg.norm(out.imag) > FOLD_TOL * scale:
        raise ValueError("coefficients are not fold-symmetric: field has an imaginary part")
    return out.real


def _axis_basis(lat: FrequencyLattice, k: int, x: np.ndarray) -> np.ndarray:
    """Per-axis factors exp(i x w_j) over all n_k indices; Nyquist uses cos."""
    n = lat.n_dims[k]
    j = np.fft.fftfreq(n, d=1.0 / n)
    w = 2.0 * lat.deltas[k] * j / n
    ph = np.outer(x, w)
    out = np.exp(1j * ph)
    nyq = lat.is_nyquist(k, j)
    if np.any(nyq):
        out[:, nyq] = np.cos(ph[:, nyq])
    return out


def project_offsite(coeffs: SpectralVector, locations, diag: SpectralDiagonal | None = None, chunk: int = 4096) -> np.ndarray:
    """``sum_l exp(i s.w_l) c_l / sqrt(n)`` at arbitrary locations (lattice units).

    Exact direct summation, separable over axes: per chunk of points the
    d-dimensional coefficient grid is contracted one axis at a time.
    """
    diag = coeffs.diag if diag is None else diag
    lat = diag.lattice
    locs = np.atleast_2d(np.asarray(locations, dtype=float))
    if locs.shape[1] != lat.d:
        raise ValueError("location dimension does not match the lattice")
    if not np.all(np.isfinite(locs)):
        raise ValueError("locations must be finite")
    grid = coeffs.full()
    return project_grid(grid, lat, locs, chunk=chunk)


def project_grid(grid: np.ndarray, lat: FrequencyLattice, locs: np.ndarray, chunk: int = 4096, bases=None) -> np.ndarray:
    """Real part of ``Q_s grid`` for many points; ``bases`` caches per-axis factors."""
    out = np.empty(locs.shape[0])
    scale = 1.0 / np.sqrt(lat.n)
    for a in range(0, locs.shape[0], chunk):
        sl = slice(a, a + chunk)
        if bases is None:
            b = [_axis_basis(lat, k, locs[sl, k]) for k in range(lat.d)]
        else:
            b = [bk[sl] for bk in bases]
        # contract the first axis, then carry a (points, ...) tensor along
        acc = b[0] @ grid.reshape(lat.n_dims[0], -1)
        acc = acc.reshape((acc.shape[0],) + tuple(lat.n_dims[1:]))
        for k in range(1, lat.d):
            acc = np.einsum("pj...,pj->p...", acc, b[k])
        out[sl] = acc.real * scale
    return out


def axis_bases(lat: FrequencyLattice, locs: np.ndarray) -> list[np.ndarray]:
    locs = np.atleast_2d(np.asarray(locs, dtype=float))
    return [_axis_basis(lat, k, locs[:, k]) for k in range(lat.d)]


def lattice_points(lat: FrequencyLattice) -> np.ndarray:
    """All integer lattice coordinates, C order, shape (n, d)."""
    grids = np.meshgrid(*[np.arange(n, dtype=float) for n in lat.n_dims], indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1)


def dense_q(lat: FrequencyLattice, locations, active: np.ndarray | None = None) -> np.ndarray:
    """Materialised rows ``Q_s`` (complex, shape (N, m)) by the defining formula."""
    locs = np.atleast_2d(np.asarray(locations, dtype=float))
    flat = lat.flat_indices() if active is None else np.asarray(active)
    j = lat.signed_index(flat)
    w = 2.0 * j * np.asarray(lat.deltas) / np.asarray(lat.n_dims)
    return np.exp(1j * (locs @ w.T)) / np.sqrt(lat.n)


MAX_ORTHO_N = 4096


@dataclass
class OrthogonalityReport:
    n: int
    m: int
    gram_deviation: float  # max |Q*Q - I_m|
    projector_deviation: float  # max |QQ* - I_n|

    @property
    def columns_orthonormal(self) -> bool:
        return self.gram_deviation <= 1e-10

    @property
    def rows_orthonormal(self) -> bool:
        return self.projector_deviation <= 1e-10


def _kron_identity_deviation(factors: list[np.ndarray]) -> float:
    """Max ``|A_1 (x) ... (x) A_d - I|`` without forming the full product."""
    if len(factors) == 1:
        a = factors[0]
        return float(np.abs(a - np.eye(a.shape[0])).max())
    order = sorted(range(len(factors)), key=lambda k: -factors[k].shape[0])
    a = factors[order[0]]
    rest = factors[order[1]]
    for k in order[2:]:
        rest = np.kron(rest, factors[k])
    off = np.abs(a - np.diag(np.diag(a))).max() * np.abs(rest).max()
    eye = np.eye(rest.shape[0])
    on = max(float(np.abs(a[i, i] * rest - eye).max()) for i in range(a.shape[0]))
    return float(max(off, on))


def orthogonality_check(lattice: FrequencyLattice) -> OrthogonalityReport:
    """Max deviations of ``Q*Q`` from ``I_m`` and ``QQ*`` from ``I_n`` on the lattice.

    Rows of ``Q`` factor as products over axes, so both Gram matrices are
    Kronecker products of per-axis ones built from the defining formula.
    """
    if lattice.n > MAX_ORTHO_N:
        raise ValueError(f"orthogonality check limited to n <= {MAX_ORTHO_N}")
    grams, projs = [], []
    for k in range(lattice.d):
        sub = FrequencyLattice((lattice.n_dims[k],), (lattice.m_dims[k],), (lattice.deltas[k],))
        q = dense_q(sub, lattice_points(sub))
        grams.append(q.conj().T @ q)
        projs.append(q @ q.conj().T)
    return OrthogonalityReport(lattice.n, lattice.m, _kron_identity_deviation(grams), _kron_identity_deviation(projs))


# ---------------------------------------------------------------------------
# lattice field dumps
# ---------------------------------------------------------------------------

_MAGIC = b"FGPLAT1\0"


def write_lattice_field(path, field: np.ndarray, binary: bool | None = None) -> Path:
    """Write a real lattice field; last dimension varies fastest.

    Text form: ``# shape: n1,n2,...`` and ``# order: C`` header lines then one
    value per line.  Binary form (``.bin``): magic, ndim, shape (int64 each),
    float64 values little-endian.
    """
    path = Path(path)
    field = np.asarray(field, dtype=float)
    if not np.all(np.isfinite(field)):
        raise ValueError("lattice field has non-finite values")
    binary = path.suffix == ".bin" if binary is None else binary
    tmp = path.with_name(path.name + ".tmp")
    if binary:
        with open(tmp, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<q", field.ndim))
            fh.write(struct.pack(f"<{field.ndim}q", *field.shape))
            fh.write(np.ascontiguousarray(field, dtype="<f8").tobytes())
    else:
        with open(tmp, "w") as fh:
            fh.write("# shape: " + ",".join(str(s) for s in field.shape) + "\n")
            fh.write("# order: C\n")
            np.savetxt(fh, field.reshape(-1), fmt="%.17g")
    tmp.replace(path)
    return path


def read_lattice_field(path) -> np.ndarray:
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(len(_MAGIC))
    if head == _MAGIC:
        raw = path.read_bytes()
        off = len(_MAGIC)
        (ndim,) = struct.unpack_from("<q", raw, off)
        off += 8
        shape = struct.unpack_from(f"<{ndim}q", raw, off)
        off += 8 * ndim
        return np.frombuffer(raw, dtype="<f8", offset=off).reshape(shape).copy()
    shape = None
    with open(path) as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            key, _, val = line[1:].partition(":")
            if key.strip() == "shape":
                shape = tuple(int(v) for v in val.split(","))
    if shape is None:
        raise ValueError(f"{path}: missing '# shape:' header")
    vals = np.loadtxt(path, comments="#", ndmin=1)
    return vals.reshape(shape)
