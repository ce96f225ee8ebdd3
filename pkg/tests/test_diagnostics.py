import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fgp.diagnostics import RHAT_FLAG, autocorrelation, diagnostics, effective_sample_size, potential_scale_reduction


def ar1(phi, n, rng):
    x = np.empty(n)
    x[0] = rng.standard_normal() / math.sqrt(1 - phi**2)
    e = rng.standard_normal(n)
    for t in range(1, n):
        x[t] = phi * x[t - 1] + e[t]
    return x


def test_white_noise_lag_one():
    n = 10000
    x = np.random.default_rng(0).standard_normal(n)
    assert abs(autocorrelation(x, 5)[1]) <= 3 / math.sqrt(n)


def test_ar1_lag_one():
    x = ar1(0.9, 20000, np.random.default_rng(1))
    assert autocorrelation(x, 5)[1] == pytest.approx(0.9, abs=0.05)


def test_ar1_effective_sample_size():
    # integrated autocorrelation time of AR(1) is (1 + phi) / (1 - phi)
    x = ar1(0.5, 50000, np.random.default_rng(2))
    assert effective_sample_size(x) == pytest.approx(50000 / 3, rel=0.15)


@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=200))
@settings(max_examples=50, deadline=None)
def test_lag_zero_is_one(vals):
    acf = autocorrelation(np.array(vals), 10)
    assert acf[0] == 1.0
    assert np.all(np.abs(acf) <= 1 + 1e-9)


def test_identical_chains():
    x = np.random.default_rng(3).standard_normal(500)
    assert potential_scale_reduction(np.stack([x, x])) == 1.0


def test_separated_chains_flagged(caplog):
    rng = np.random.default_rng(4)
    chains = [rng.standard_normal((300, 1)), rng.standard_normal((300, 1)) + 5]
    rep = diagnostics(chains, ["rho"])
    assert rep.rhat["rho"] > RHAT_FLAG and rep.flagged == ["rho"]
    assert "rho" in caplog.text


def test_length_mismatch_truncates():
    rng = np.random.default_rng(5)
    with pytest.warns(UserWarning, match="truncating to 80"):
        rep = diagnostics([rng.standard_normal((100, 2)), rng.standard_normal((80, 2))], ["a", "b"], max_lag=10)
    assert rep.traces.shape == (2, 80, 2)
    assert len(rep.autocorr["a"]) == 11
    assert {r["parameter"] for r in rep.rows()} == {"a", "b"}


def test_name_mismatch():
    with pytest.raises(ValueError):
        diagnostics([np.zeros((10, 2))], ["a"])
    with pytest.raises(ValueError):
        diagnostics([], [])


def test_constant_chain():
    acf = autocorrelation(np.ones(50), 5)
    assert acf[0] == 1.0 and np.all(acf[1:] == 0)
    assert potential_scale_reduction(np.ones((2, 50))) == 1.0
