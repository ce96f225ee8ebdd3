"""MCMC diagnostics: autocorrelation, effective sample size, potential scale reduction."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.fft as sfft

log = logging.getLogger(__name__)

RHAT_FLAG = 1.1


def autocorrelation(x: np.ndarray, max_lag: int = 100) -> np.ndarray:
    """Sample autocorrelation of a 1-D chain for lags ``0..max_lag`` via FFT."""
    x = np.asarray(x, float)
    n = x.size
    if n < 2:
        return np.ones(1)
    x = x - x.mean()
    size = sfft.next_fast_len(2 * n)
    f = sfft.rfft(x, size)
    acov = sfft.irfft(f * np.conj(f), size)[:n]
    if acov[0] <= 0:
        out = np.zeros(min(max_lag, n - 1) + 1)
        out[0] = 1.0
        return out
    return acov[: min(max_lag, n - 1) + 1] / acov[0]


def effective_sample_size(x: np.ndarray) -> float:
    """ESS from the initial positive sequence of paired autocorrelations."""
    x = np.asarray(x, float)
    n = x.size
    if n < 4:
        return float(n)
    rho = autocorrelation(x, n - 1)
    tau = 1.0
    for k in range(1, len(rho) - 1, 2):
        pair = rho[k] + rho[k + 1]
        if pair <= 0:
            break
        tau += 2.0 * pair
    return float(n / max(tau, 1e-12))


def potential_scale_reduction(chains: np.ndarray) -> float:
    """Gelman-Rubin statistic for an array (chains, draws); floored at 1."""
    chains = np.asarray(chains, float)
    m, n = chains.shape
    if m < 2 or n < 2:
        return 1.0
    means = chains.mean(axis=1)
    w = chains.var(axis=1, ddof=1).mean()
    b = n * means.var(ddof=1)
    if w <= 0:
        return 1.0 if b <= 0 else float("inf")
    var_plus = (n - 1) / n * w + b / n
    return float(max(1.0, np.sqrt(var_plus / w)))


@dataclass
class DiagnosticsReport:
    names: list[str]
    traces: np.ndarray  # (chains, draws, params)
    autocorr: dict
    rhat: dict
    ess: dict
    acceptance: list[float] = field(default_factory=list)

    @property
    def flagged(self) -> list[str]:
        return [k for k, v in self.rhat.items() if v > RHAT_FLAG]

    def rows(self) -> list[dict]:
        return [
            {"parameter": k, "rhat": self.rhat[k], "ess": self.ess[k], "acf1": float(self.autocorr[k][1]) if len(self.autocorr[k]) > 1 else float("nan"), "flag": k in self.flagged}
            for k in self.names
        ]


def diagnostics(chains, names: list[str], max_lag: int = 100, acceptance=None) -> DiagnosticsReport:
    """Diagnostics from a list of per-chain draw arrays (draws, params).

    Chains of unequal length are truncated to the shortest with a warning.
    """
    chains = [np.asarray(c, float) for c in chains]
    if not chains:
        raise ValueError("need at least one chain")
    lengths = {c.shape[0] for c in chains}
    if len(lengths) > 1:
        short = min(lengths)
        warnings.warn(f"chain lengths differ {sorted(lengths)}; truncating to {short}", stacklevel=2)
        chains = [c[:short] for c in chains]
    arr = np.stack(chains)
    if arr.shape[2] != len(names):
        raise ValueError("parameter names do not match the draw columns")
    acf, rhat, ess = {}, {}, {}
    for j, nm in enumerate(names):
        acf[nm] = np.mean([autocorrelation(arr[c, :, j], max_lag) for c in range(arr.shape[0])], axis=0)
        rhat[nm] = potential_scale_reduction(arr[:, :, j])
        ess[nm] = float(sum(effective_sample_size(arr[c, :, j]) for c in range(arr.shape[0])))
    rep = DiagnosticsReport(list(names), arr, acf, rhat, ess, list(acceptance or []))
    for nm in rep.flagged:
        log.warning("parameter %s has potential scale reduction %.3f > %.1f", nm, rhat[nm], RHAT_FLAG)
    return rep
