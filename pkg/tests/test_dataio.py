import numpy as np
import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

from fgp.dataio import (
    ConfigError,
    RunConfig,
    Trend,
    atomic_write_text,
    detrend,
    ingest_csv,
    load_config,
    load_posterior,
    save_posterior,
    write_observations_csv,
)
from fgp.simulate import atomic_write_rows
from fgp.spectral import SpectralModel
from fgp.stationary import FitConfig, ObservationSet, fit


def write(path, text):
    path.write_text(text)
    return path


class TestIngest:
    def test_three_rows(self, tmp_path):
        obs = ingest_csv(write(tmp_path / "d.csv", "s1,s2,value\n0,0,1.5\n1,0,2\n0,1,-1\n"))
        assert len(obs) == 3
        np.testing.assert_array_equal(obs.values, [1.5, 2.0, -1.0])
        assert obs.coords.shape == (3, 2)

    def test_nan_row_reports_line(self, tmp_path):
        p = write(tmp_path / "d.csv", "s1,s2,value\n0,0,1\n1,0,nan\n0,1,2\n")
        with pytest.raises(ConfigError, match="line\\(s\\) 3"):
            ingest_csv(p)

    def test_unparseable(self, tmp_path):
        with pytest.raises(ConfigError, match="line\\(s\\) 2"):
            ingest_csv(write(tmp_path / "d.csv", "s1,value\nabc,1\n"))

    def test_duplicate_coordinates_accepted(self, tmp_path):
        obs = ingest_csv(write(tmp_path / "d.csv", "s1,s2,value\n1,1,0.5\n1,1,0.7\n"))
        assert len(obs) == 2

    def test_missing_column(self, tmp_path):
        with pytest.raises(ConfigError, match="missing columns"):
            ingest_csv(write(tmp_path / "d.csv", "s1,s2,y\n0,0,1\n"))

    def test_named_columns_and_noise(self, tmp_path):
        p = write(tmp_path / "d.csv", "lon,lat,temp,var\n0,0,1,0.1\n2,1,3,0.2\n")
        obs = ingest_csv(p, ["lon", "lat"], "temp", "var")
        np.testing.assert_array_equal(obs.noise_var, [0.1, 0.2])

    def test_missing_file_and_empty(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            ingest_csv(tmp_path / "none.csv")
        with pytest.raises(ConfigError, match="no data rows"):
            ingest_csv(write(tmp_path / "e.csv", "s1,value\n"))

    def test_write_read_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        obs = ObservationSet(rng.uniform(size=(20, 2)), rng.standard_normal(20))
        back = ingest_csv(write_observations_csv(tmp_path / "o.csv", obs))
        np.testing.assert_array_equal(back.coords, obs.coords)
        np.testing.assert_array_equal(back.values, obs.values)


class TestDetrend:
    def test_linear_exact(self):
        rng = np.random.default_rng(1)
        x = rng.uniform(0, 10, (40, 2))
        obs = ObservationSet(x, 3.0 - 2.0 * x[:, 0])
        res, tr = detrend(obs, (1, 0))
        assert np.abs(res.values).max() <= 1e-10
        np.testing.assert_allclose(tr.beta, [3.0, -2.0], atol=1e-10)

    def test_degree_zero_is_mean(self):
        v = np.random.default_rng(2).standard_normal(30)
        res, tr = detrend(ObservationSet(np.arange(30.0)[:, None], v), 0)
        np.testing.assert_allclose(res.values, v - v.mean(), atol=1e-13)

    def test_normal_equations_oracle(self):
        rng = np.random.default_rng(3)
        x = rng.uniform(-2, 2, (50, 3))
        v = rng.standard_normal(50) + x[:, 2] ** 2
        _, tr = detrend(ObservationSet(x, v), 2)
        X = np.column_stack([np.ones(50)] + [x[:, k] ** p for k in range(3) for p in (1, 2)])
        beta = np.linalg.solve(X.T @ X, X.T @ v)
        np.testing.assert_allclose(tr.beta, beta, atol=1e-8)

    def test_trend_round_trip(self):
        rng = np.random.default_rng(4)
        x = rng.uniform(0, 5, (25, 2))
        obs = ObservationSet(x, rng.standard_normal(25))
        res, tr = detrend(obs, (2, 1))
        again = Trend.from_dict(tr.to_dict())
        np.testing.assert_allclose(res.values + again.evaluate(x), obs.values, atol=1e-12)

    def test_rank_deficient(self):
        obs = ObservationSet(np.ones((10, 1)), np.arange(10.0))
        with pytest.raises(ConfigError, match="rank"):
            detrend(obs, 1)


class TestConfig:
    def test_defaults_round_trip(self):
        cfg = RunConfig()
        assert RunConfig.from_dict(yaml.safe_load(cfg.dump())).dump() == cfg.dump()

    @given(st.integers(1, 50), st.integers(0, 40), st.integers(1, 5), st.sampled_from(["strict", "misaligned"]), st.floats(0.01, 10))
    @settings(max_examples=40, deadline=None)
    def test_round_trip_idempotent(self, steps, burn, thin, mode, rho):
        tree = {"mcmc": {"steps": steps, "burn_in": burn, "thin": thin}, "data": {"mode": mode, "target_shape": [8, 8]},
                "model": {"family": "matern", "phi": 1.0, "rho": rho}, "trend": {"degree": [1, 2]}}
        once = RunConfig.from_dict(tree).dump()
        assert RunConfig.from_dict(yaml.safe_load(once)).dump() == once

    def test_validation(self, tmp_path):
        with pytest.raises(ConfigError, match="data.path"):
            RunConfig().validate()
        cfg = RunConfig.from_dict({"mcmc": {"steps": 10, "burn_in": 10}})
        with pytest.raises(ConfigError, match="burn_in"):
            cfg.validate(require_data=False)
        with pytest.raises(ConfigError, match="thin"):
            RunConfig.from_dict({"mcmc": {"thin": 0}}).validate(require_data=False)
        with pytest.raises(ConfigError, match="target_shape"):
            RunConfig.from_dict({"data": {"mode": "misaligned"}}).validate(require_data=False)
        with pytest.raises(ConfigError, match="unknown config"):
            RunConfig.from_dict({"modle": {}})
        with pytest.raises(ConfigError, match="bad config key"):
            RunConfig.from_dict({"mcmc": {"step": 3}})
        with pytest.raises(ConfigError, match="model"):
            RunConfig.from_dict({"model": {"family": "cauchy", "phi": 1, "rho": 1}}).validate(require_data=False)

    def test_load(self, tmp_path):
        p = write(tmp_path / "c.yaml", "mcmc:\n  steps: 50\n  burn_in: 10\n")
        assert load_config(p).mcmc.steps == 50
        with pytest.raises(ConfigError, match="mapping"):
            load_config(write(tmp_path / "b.yaml", "- 1\n- 2\n"))
        with pytest.raises(ConfigError, match="YAML"):
            load_config(write(tmp_path / "x.yaml", "a: [1\n"))

    def test_sampler_configs(self):
        cfg = RunConfig.from_dict({"mcmc": {"steps": 40, "burn_in": 5, "k_init": 3}})
        assert cfg.fit_config().steps == 40
        assert cfg.ns_config().k_init == 3


class TestAtomicWrites:
    def test_interrupted_rows_leave_nothing(self, tmp_path):
        def rows():
            yield [1, 2]
            raise KeyboardInterrupt

        target = tmp_path / "out.csv"
        with pytest.raises(KeyboardInterrupt):
            atomic_write_rows(target, ["a", "b"], rows())
        assert list(tmp_path.iterdir()) == []

    def test_interrupted_rewrite_keeps_old_file(self, tmp_path):
        target = atomic_write_rows(tmp_path / "out.csv", ["a"], [[1]])
        before = target.read_text()

        def rows():
            yield [2]
            raise RuntimeError

        with pytest.raises(RuntimeError):
            atomic_write_rows(target, ["a"], rows())
        assert target.read_text() == before
        assert [p.name for p in tmp_path.iterdir()] == ["out.csv"]

    def test_text(self, tmp_path):
        p = atomic_write_text(tmp_path / "sub" / "t.txt", "hello")
        assert p.read_text() == "hello"


def test_posterior_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    x = rng.integers(0, 10, (60, 2)).astype(float)
    post = fit(ObservationSet(x, rng.standard_normal(60)), FitConfig(steps=30, burn_in=10, thin=2, keep_spectra=5), SpectralModel("matern", 1.0, (2.0,)))
    save_posterior(tmp_path, post)
    summary, emb, draws = load_posterior(tmp_path)
    assert summary["kind"] == "stationary" and emb.shape == post.embedding.shape
    assert len(draws) == 5
    last = post.spectra[0][-1]
    np.testing.assert_array_equal(draws[-1].coeffs, last.coeffs)
    assert draws[-1].model.rho == last.model.rho and draws[-1].nu2 == last.nu2
    with pytest.raises(ConfigError):
        load_posterior(tmp_path / "missing")
