import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import dense_loglik

from fgp.diagnostics import effective_sample_size
from fgp.harmonic import fft_ortho, ifft_ortho, lattice_points, white_spectrum
from fgp.spectral import SpectralModel, build_frequency_lattice, dense_covariance_oracle, truncate_spectrum
from fgp.stationary import (
    FitConfig,
    ObservationSet,
    SpectralBand,
    StationaryChainState,
    StationarySampler,
    augmented_log_likelihood,
    embed,
    fit,
    gibbs_sweep,
    kriging_dense,
    lattice_loglik,
    predict,
)


def grid_obs(shape, rng, values=None):
    u = lattice_points(build_frequency_lattice(shape))
    v = rng.standard_normal(len(u)) if values is None else values
    return ObservationSet(u, v)


class TestEmbed:
    def test_gcd_mapping(self):
        emb = embed(ObservationSet([[2.0], [4.0], [8.0]], [1.0, 2.0, 3.0]))
        assert emb.scale[0] == 2.0
        np.testing.assert_array_equal(emb.cell_coords[:, 0], [1, 2, 4])
        assert emb.shape[0] >= 4
        np.testing.assert_allclose(emb.to_original(emb.cell_coords - 1)[:, 0], [2, 4, 8])

    def test_fractional_spacing(self):
        x = np.array([[0.1, 5.0], [0.4, 5.5], [0.7, 7.0]])
        emb = embed(ObservationSet(x, [0.0, 1.0, 2.0]))
        np.testing.assert_allclose(emb.scale, [0.3, 0.5])
        assert emb.shape == (3, 5)

    def test_incommensurable_strict(self):
        with pytest.raises(ValueError, match="misaligned"):
            embed(ObservationSet([[0.0], [1.0], [math.sqrt(2)]], [0.0, 0.0, 0.0]))

    def test_misaligned_needs_shape(self):
        with pytest.raises(ValueError):
            embed(ObservationSet([[0.0], [1.0]], [0.0, 0.0]), "misaligned")

    def test_empty(self):
        with pytest.raises(ValueError):
            ObservationSet(np.zeros((0, 2)), [])

    def test_on_lattice_point_has_zero_distance(self):
        obs = ObservationSet([[0.0, 0.0], [3.0, 1.0], [9.0, 9.0]], [1.0, 2.0, 3.0])
        emb = embed(obs, "misaligned", (10, 10))
        assert emb.distance[1] == 0.0

    def test_shared_cell(self):
        obs = ObservationSet([[0.0], [2.1], [1.9], [10.0]], [1.0, 2.0, 3.0, 4.0])
        emb = embed(obs, "misaligned", (11,))
        assert emb.cell[1] == emb.cell[2] == 2
        np.testing.assert_array_equal(emb.members(2), [1, 2])
        np.testing.assert_allclose(emb.distance[1:3], [0.1, 0.1])

    def test_tie_goes_to_smaller_index(self):
        obs = ObservationSet([[0.0], [2.5], [10.0]], [0.0, 0.0, 0.0])
        emb = embed(obs, "misaligned", (11,))
        assert emb.cell[1] == 2

    @given(st.lists(st.integers(-50, 50), min_size=2, max_size=20, unique=True), st.integers(1, 7))
    @settings(max_examples=50, deadline=None)
    def test_strict_cells_are_exact(self, ints, step):
        x = np.array(ints, float)[:, None] * step * 0.25
        emb = embed(ObservationSet(x, np.zeros(len(x))))
        assert np.all(emb.distance == 0)
        np.testing.assert_allclose(emb.to_original(emb.cell_coords - 1), x, atol=1e-9)
        assert emb.cell_coords.min() == 1


class TestLikelihood:
    def test_zero_field(self):
        lat = build_frequency_lattice((4, 4))
        diag = truncate_spectrum(SpectralModel("matern", 2.0, (1.5,), sigma2=0.4), lat, 0.0)
        emb = grid_obs((4, 4), np.random.default_rng(0), np.zeros(16))
        emb = embed(emb)
        st_ = StationaryChainState(SpectralModel("matern", 2.0, (1.5,), sigma2=0.4), np.zeros((4, 4)), np.zeros((4, 4), complex), np.zeros((4, 4)), 0.3)
        expect = -0.5 * np.sum(np.log(diag.values + 0.4)) - 0.5 * 16 * math.log(0.3) - 0.5 * 32 * math.log(2 * math.pi)
        assert augmented_log_likelihood(st_, emb, diag) == pytest.approx(expect, rel=1e-12)

    @pytest.mark.parametrize("seed", range(20))
    def test_dense_oracle(self, seed):
        rng = np.random.default_rng(seed)
        shape = (4, 4) if seed % 2 == 0 else (6, 6)
        model = SpectralModel(str(rng.choice(["matern", "squared_exponential"])), rng.uniform(0.5, 5), (rng.uniform(0.5, 3),), sigma2=rng.uniform(0.1, 1))
        diag = truncate_spectrum(model, build_frequency_lattice(shape), 0.0)
        obs = grid_obs(shape, rng)
        keep = rng.uniform(size=len(obs)) < 0.7
        keep[0] = True
        emb = embed(obs.subset(np.flatnonzero(keep)), target_shape=shape)
        z = rng.standard_normal(shape) * 2
        nu2 = rng.uniform(0.05, 1)
        state = StationaryChainState(model, z, np.zeros(shape, complex), np.zeros(shape), nu2)
        got = augmented_log_likelihood(state, emb, diag)
        ref = dense_loglik(z, emb, diag, nu2)
        assert abs(got - ref) <= 1e-8 * abs(ref)

    def test_band_path_matches_diagonal_path(self):
        rng = np.random.default_rng(1)
        lat = build_frequency_lattice((30, 24))
        model = SpectralModel("squared_exponential", 10.0, (3.0,), sigma2=0.5)
        band = SpectralBand(lat, 0.01)
        z = rng.standard_normal((30, 24))
        band.set_field(fft_ortho(z))
        assert band.loglik(model) == pytest.approx(lattice_loglik(z, band.diagonal(model)), rel=1e-12)
        # the band diagonal keeps the same frequencies as truncate_spectrum
        np.testing.assert_array_equal(band.diagonal(model).active, truncate_spectrum(model, lat, 0.01).active)

    def test_truncated_vs_full_per_point(self):
        rng = np.random.default_rng(2)
        lat = build_frequency_lattice((100, 100))
        model = SpectralModel("squared_exponential", 100.0, (5.0,))
        full = truncate_spectrum(model, lat, 0.0)
        z = ifft_ortho(np.sqrt(full.full()) * white_spectrum(lat.shape, rng)).real + rng.standard_normal(lat.shape)
        cut = truncate_spectrum(model, lat, 0.01)
        diff = abs(lattice_loglik(z, full) - lattice_loglik(z, cut)) / lat.n
        assert diff <= 1e-3

    def test_nonpositive_noise(self):
        lat = build_frequency_lattice((4,))
        diag = truncate_spectrum(SpectralModel("matern", 1.0, (1.0,)), lat, 0.0)
        emb = embed(ObservationSet([[0.0], [1.0]], [0.0, 1.0]), target_shape=(4,))
        s = StationaryChainState(SpectralModel("matern", 1.0, (1.0,)), np.zeros(4), np.zeros(4, complex), np.zeros(4), 0.0)
        with pytest.raises(ValueError):
            augmented_log_likelihood(s, emb, diag)


class TestKolmogorovConsistency:
    def test_permutation_and_marginal(self):
        rng = np.random.default_rng(3)
        diag = truncate_spectrum(SpectralModel("matern", 3.0, (2.0,), sigma2=0.2), build_frequency_lattice((12, 12)), 0.0)
        x = rng.uniform(0, 12, (9, 2))
        c = dense_covariance_oracle(diag, x)
        perm = rng.permutation(9)
        # equal up to BLAS summation order
        np.testing.assert_allclose(dense_covariance_oracle(diag, x[perm]), c[np.ix_(perm, perm)], rtol=0, atol=1e-14 * np.abs(c).max())
        keep = np.delete(np.arange(9), 4)
        np.testing.assert_allclose(dense_covariance_oracle(diag, x[keep]), c[np.ix_(keep, keep)], rtol=0, atol=1e-14 * np.abs(c).max())


def y_posterior_oracle(z, g, s2):
    """Dense posterior moments of the real white-noise vector x with Y = F x."""
    shape = z.shape
    n = z.size
    eye = np.eye(n)
    a = np.array([ifft_ortho(np.sqrt(g) * fft_ortho(e.reshape(shape))).real.reshape(-1) for e in eye]).T
    prec = eye + a.T @ a / s2
    cov = np.linalg.inv(prec)
    mean = cov @ a.T @ z.reshape(-1) / s2
    f = np.array([fft_ortho(e.reshape(shape)).reshape(-1) for e in eye]).T
    return f @ mean, f @ cov @ f.conj().T, f @ cov @ f.T


class TestGibbs:
    def setup_method(self):
        self.shape = (4, 4)
        self.model = SpectralModel("matern", 3.0, (1.2,), sigma2=0.5)
        self.diag = truncate_spectrum(self.model, build_frequency_lattice(self.shape), 0.0)

    def test_y_conditional_moments(self):
        rng = np.random.default_rng(4)
        z = rng.standard_normal(self.shape) * 2
        emb = embed(grid_obs(self.shape, rng))
        state = StationaryChainState(self.model, z, np.zeros(self.shape, complex), np.zeros(self.shape), 0.1)
        n_draw = 20000
        ys = np.array([gibbs_sweep(state, emb, self.diag, rng).y.reshape(-1) for _ in range(n_draw)])
        mean, cov, pcov = y_posterior_oracle(z, self.diag.full(), self.model.sigma2)
        # real and imaginary parts separately
        for part, pv in ((np.real, 0.5 * (cov + pcov).real), (np.imag, 0.5 * (cov - pcov).real)):
            sd = np.sqrt(np.maximum(np.diag(pv), 1e-300))
            live = sd > 1e-9
            zm = (part(ys).mean(axis=0) - part(mean))[live] / (sd[live] / math.sqrt(n_draw))
            assert np.abs(zm).max() <= 4
            zv = (part(ys).var(axis=0)[live] - sd[live] ** 2) / (sd[live] ** 2 * math.sqrt(2 / n_draw))
            assert np.abs(zv).max() <= 4

    def test_no_signal_y_is_unit_noise(self):
        rng = np.random.default_rng(5)
        lat = build_frequency_lattice((6, 6))
        tiny = SpectralModel("squared_exponential", 1e-9, (1.0,), sigma2=2.0)
        band = SpectralBand(lat, 0.01)
        assert np.all(band.density_grid(tiny) == 0)
        emb = embed(grid_obs((6, 6), rng))
        smp = StationarySampler(emb, tiny, FitConfig(update_theta=False, update_noise=False), rng)
        ys = []
        for _ in range(4000):
            smp.sweep()
            ys.append(smp.state.y.reshape(-1))
        ys = np.array(ys)
        assert np.abs(ys.mean(axis=0)).max() < 4 / math.sqrt(4000) * 1.5
        np.testing.assert_allclose((np.abs(ys) ** 2).mean(axis=0), 1.0, atol=0.12)
        assert np.all(smp.state.mu == 0)

    def test_vanishing_noise_pins_observed_cells(self):
        rng = np.random.default_rng(6)
        obs = grid_obs(self.shape, rng)
        emb = embed(obs)
        state = StationaryChainState(self.model, np.zeros(self.shape), np.zeros(self.shape, complex), np.zeros(self.shape), 1e-14)
        new = gibbs_sweep(state, emb, self.diag, rng)
        np.testing.assert_allclose(new.z.reshape(-1)[emb.cell], emb.values, atol=1e-5)

    def test_mu_is_projection_of_y(self):
        rng = np.random.default_rng(7)
        emb = embed(grid_obs((8, 6), rng))
        smp = StationarySampler(emb, SpectralModel("matern", 2.0, (2.0,)), FitConfig(), rng)
        for _ in range(5):
            s = smp.sweep()
            diag = smp.diagonal()
            mu = ifft_ortho(np.sqrt(diag.full()) * s.y).real
            np.testing.assert_allclose(s.mu, mu, atol=1e-12)


class TestFit:
    def data(self, seed=0, n=150):
        rng = np.random.default_rng(seed)
        x = rng.integers(0, 20, (n, 2)).astype(float)
        return ObservationSet(x, rng.standard_normal(n))

    def test_draw_count_and_shapes(self):
        cfg = FitConfig(steps=60, burn_in=20, thin=4, chains=2, pad=4)
        post = fit(self.data(), cfg, SpectralModel("matern", 1.0, (2.0,)))
        assert post.draws.shape == (2, 10, len(post.names))
        assert all(v >= 0 for v in post.sd.values())
        lo, hi = post.interval("rho")
        assert lo <= post.mean["rho"] <= hi

    def test_zero_steps_rejected(self):
        with pytest.raises(ValueError):
            fit(self.data(), FitConfig(steps=0, burn_in=0), SpectralModel("matern", 1.0, (2.0,)))

    def test_reproducible(self):
        cfg = dict(steps=40, burn_in=10, thin=2, chains=2, seed=9)
        a = fit(self.data(), FitConfig(**cfg), SpectralModel("matern", 1.0, (2.0,)))
        b = fit(self.data(), FitConfig(**cfg), SpectralModel("matern", 1.0, (2.0,)))
        np.testing.assert_array_equal(a.draws, b.draws)
        assert not np.array_equal(a.draws[0], a.draws[1])

    def test_misaligned_reduces_to_strict(self):
        data = self.data(1)
        cfg = dict(steps=40, burn_in=10, thin=2, seed=3, target_shape=(20, 20), update_kappa_mis=False)
        a = fit(data, FitConfig(mode="strict", **cfg), SpectralModel("matern", 1.0, (2.0,)))
        b = fit(data, FitConfig(mode="misaligned", kappa_mis=5.0, **cfg), SpectralModel("matern", 1.0, (2.0,)))
        assert np.all(b.embedding.distance == 0)
        np.testing.assert_array_equal(a.draws[..., :-1], b.draws[..., :-1])

    def test_kappa_update_runs(self):
        rng = np.random.default_rng(2)
        data = ObservationSet(rng.uniform(0, 20, (120, 2)), rng.standard_normal(120))
        cfg = FitConfig(steps=60, burn_in=20, mode="misaligned", target_shape=(20, 20), update_kappa_mis=True, kappa_mis=0.5)
        post = fit(data, cfg, SpectralModel("matern", 1.0, (2.0,)))
        assert np.all(post.flat[:, -1] > 0)

    def test_recovers_parameters_on_a_grid(self):
        rng = np.random.default_rng(12)
        shape = (30, 30)
        truth = SpectralModel("matern", 10.0, (3.0,), sigma2=0.5)
        lat = build_frequency_lattice(shape)
        g = truncate_spectrum(truth, lat, 0.0).full()
        z = ifft_ortho(np.sqrt(g) * white_spectrum(shape, rng)).real + math.sqrt(0.5) * rng.standard_normal(shape)
        obs = grid_obs(shape, rng, z.reshape(-1) + 0.1 * rng.standard_normal(900))
        post = fit(obs, FitConfig(steps=1500, burn_in=500, pad=10), SpectralModel("matern", 1.0, (1.0,)))
        assert post.mean["rho"] == pytest.approx(3.0, rel=0.35)
        assert post.mean["phi"] == pytest.approx(10.0, rel=0.5)


class TestPredict:
    def test_interpolates_without_noise(self):
        rng = np.random.default_rng(8)
        shape = (10, 10)
        model = SpectralModel("matern", 5.0, (2.0,), sigma2=1e-6)
        obs = grid_obs(shape, rng, np.sin(lattice_points(build_frequency_lattice(shape)).sum(axis=1) / 3) * 2)
        cfg = FitConfig(steps=200, burn_in=100, thin=1, update_theta=False, update_noise=False, nu2=1e-8, eps_rel=0.0,
                        init={"phi": 5.0, "sigma2": 1e-6, "rho": 2.0}, warmup_fixed=0)
        tgt = obs.coords[[3, 47, 88]]
        post = fit(obs, cfg, model, targets=tgt)
        np.testing.assert_allclose(post.predictions["mean"], obs.values[[3, 47, 88]], atol=1e-2)
        dense = kriging_dense(post.embedding, model, tgt, 1e-8, eps_rel=0.0)
        np.testing.assert_allclose(dense["mean"], obs.values[[3, 47, 88]], atol=1e-2)

    def test_far_targets_revert_to_prior(self):
        rng = np.random.default_rng(9)
        x = rng.integers(0, 6, (30, 2)).astype(float)
        obs = ObservationSet(x, rng.standard_normal(30) * 2)
        # g / (g + sigma2) stays moderate so the chain at unobserved cells mixes
        model = SpectralModel("matern", 2.0, (0.6,), sigma2=1.0)
        cfg = FitConfig(steps=3000, burn_in=100, thin=1, update_theta=False, update_noise=False, nu2=0.2, pad=54,
                        init={"phi": 2.0, "sigma2": 1.0, "rho": 0.6}, warmup_fixed=0, keep_spectra=3000)
        tgt = np.array([[32.0, 31.0], [33.5, 29.0]])
        post = fit(obs, cfg, model, targets=tgt)
        res = predict(post, tgt)
        lat = build_frequency_lattice(post.embedding.shape)
        c0 = truncate_spectrum(model, lat, 0.01).values.sum() / lat.n + 1.0 + 0.2
        for i in range(2):
            d = res["draws"][:, i]
            se = d.std() / math.sqrt(effective_sample_size(d))
            assert abs(res["mean"][i]) <= 4 * se
        np.testing.assert_allclose(res["var"], c0, rtol=0.15)
        dense = kriging_dense(post.embedding, model, tgt, 0.2)
        np.testing.assert_allclose(dense["mean"], 0.0, atol=1e-6)
        np.testing.assert_allclose(dense["var"], c0, rtol=1e-2)

    def test_no_draws(self):
        with pytest.raises(ValueError):
            predict([], [[0.0, 0.0]])


def test_sweeps_stay_in_prior_predictive_band():
    from oracles import GEWEKE_PRIORS, _grid_data, _stationary_field, draw_prior

    rng = np.random.default_rng(21)
    shape = (8, 8)
    lat = build_frequency_lattice(shape)
    band = SpectralBand(lat, 0.01)
    pri = GEWEKE_PRIORS
    emb = _grid_data(shape, rng)

    def joint_draw():
        phi, rho, s2 = draw_prior(pri, rng)
        model = SpectralModel("matern", phi, (rho,), sigma2=s2)
        nu2 = pri.noise_ig[1] / rng.gamma(pri.noise_ig[0])
        z = _stationary_field(model, band, shape, rng)
        return model, z, nu2, z.reshape(-1)[emb.cell] + math.sqrt(nu2) * rng.standard_normal(emb.n)

    def aug_ll(model, z, nu2):
        st_ = StationaryChainState(model, z, np.zeros(shape, complex), np.zeros(shape), nu2)
        return augmented_log_likelihood(st_, emb, truncate_spectrum(model, lat, 0.01))

    ref = []
    for _ in range(4000):
        model, z, nu2, emb.values[:] = joint_draw()
        ref.append(aug_ll(model, z, nu2))
    lo, hi = np.quantile(ref, [0.005, 0.995])
    # successive-conditional chain: data redrawn given the current state, so
    # the sweep's stationary law is the joint prior and ll follows ref
    model, z, nu2, emb.values[:] = joint_draw()
    smp = StationarySampler(emb, model, FitConfig(nu2=nu2, priors=pri, metropolis_steps=4), rng)
    lls = []
    for _ in range(500):
        s = smp.sweep(update_theta=True)
        emb.values[:] = s.z.reshape(-1)[emb.cell] + math.sqrt(s.nu2) * rng.standard_normal(emb.n)
        lls.append(aug_ll(s.model, s.z, s.nu2))
    lls = np.array(lls)
    outside = np.mean((lls < lo) | (lls > hi))
    assert outside <= 0.05
    assert lo < np.median(lls) < hi
