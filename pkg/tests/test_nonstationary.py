import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special, stats

from fgp.harmonic import axis_bases, fft_ortho, ifft_ortho, lattice_points, white_spectrum
from fgp.nonstationary import (
    ComponentBank,
    JointSpectralLikelihood,
    NonStationarySampler,
    NSFitConfig,
    _predict_draw,
    conditional_covariance_matrix,
    joint_loglik,
    ns_covariance,
    ns_fit,
    ns_gibbs_sweep,
    ns_predict,
    stick_weights,
    truncated_normal_above,
)
from fgp.spectral import SpectralModel, build_frequency_lattice, covariance_from_spectrum, truncate_spectrum
from fgp.stationary import FitConfig, ObservationSet, StationarySampler, embed


def grid_embedding(shape, rng, frac=1.0):
    u = lattice_points(build_frequency_lattice(shape))
    keep = rng.uniform(size=len(u)) < frac
    keep[0] = True
    return embed(ObservationSet(u[keep], rng.standard_normal(keep.sum())), target_shape=shape)


def sampler(K=3, shape=(8, 8), seed=0, frac=1.0, **kw):
    rng = np.random.default_rng(seed)
    emb = grid_embedding(shape, rng, frac)
    cfg = NSFitConfig(k_init=K, k_max=max(K, 4), warm_start=0, **kw)
    return NonStationarySampler(emb, SpectralModel("squared_exponential", 1.0, (1.5,), sigma2=0.3), cfg, rng)


class TestSticks:
    @given(st.lists(st.floats(-8, 8), min_size=1, max_size=6))
    @settings(max_examples=60, deadline=None)
    def test_identity(self, eta):
        eta = np.array(eta)[:, None]
        u, p = stick_weights(eta)
        direct = [special.ndtr(eta[k, 0]) * np.prod([special.ndtr(-eta[j, 0]) for j in range(k)]) for k in range(len(eta))]
        np.testing.assert_allclose(p[:-1, 0], direct, rtol=1e-10, atol=1e-300)
        assert u[-1, 0] == 1.0
        assert p[:, 0].sum() == pytest.approx(1.0, abs=1e-12)
        assert np.all(p >= 0)

    def test_after_every_sweep(self):
        smp = sampler(K=4)
        for _ in range(15):
            s = ns_gibbs_sweep(smp)
            u, p = stick_weights(s.bank.eta)
            np.testing.assert_array_equal(s.p, p)
            np.testing.assert_array_equal(s.u, u)
            # slice validity
            assert np.all(s.r < s.p[s.labels, smp.cells])
            assert 0 < s.p.sum(axis=0).min() and s.p.sum(axis=0).max() <= 1 + 1e-12

    def test_saturated_first_stick(self):
        smp = sampler(K=3, update_weights=False)
        smp.state.bank.eta[0] = 10.0
        smp.state.bank.eta[1] = 0.0
        smp.refresh_weights()
        ns_gibbs_sweep(smp)
        assert np.all(smp.state.labels == 0)

    def test_empty_admissible_set(self):
        smp = sampler(K=2)
        smp.state.r[:] = 1.5
        with pytest.raises(RuntimeError, match="admissible"):
            ns_gibbs_sweep(smp)


class TestTruncatedNormal:
    @pytest.mark.parametrize("a", [-3.0, 0.0, 2.0, 8.0, 30.0])
    def test_mean_and_support(self, a):
        rng = np.random.default_rng(1)
        x = truncated_normal_above(np.full(40000, a), rng.uniform(size=40000))
        assert np.all(x >= a)
        ref = stats.truncnorm(a, np.inf)
        assert x.mean() == pytest.approx(ref.mean(), abs=4 * ref.std() / 200)


class TestCovariance:
    def setup_method(self):
        self.lat = build_frequency_lattice((12, 12))
        self.models = [
            SpectralModel("squared_exponential", 4.0, (3.0,), sigma2=0.2),
            SpectralModel("squared_exponential", 2.0, (0.8,), sigma2=0.5),
        ]

    def test_single_component_is_stationary(self):
        m = self.models[0]
        diag = truncate_spectrum(m, self.lat, 0.01)
        for s1, s2 in (([1.0, 2.0], [4.5, 3.0]), ([2.0, 2.0], [2.0, 2.0])):
            same = s1 == s2
            ref = covariance_from_spectrum(diag, np.subtract(s1, s2), same_point=same)
            assert ns_covariance([m], self.lat, s1, s2, labels=(0, 0)) == pytest.approx(ref, abs=1e-12)
            assert ns_covariance([m], self.lat, s1, s2, weights=([1.0], [1.0])) == pytest.approx(ref, abs=1e-12)

    def test_cross_component_covariance_nonzero(self):
        c = ns_covariance(self.models, self.lat, [1.0, 1.0], [2.0, 1.5], labels=(0, 1))
        assert abs(c) > 1e-3

    def test_label_range(self):
        with pytest.raises(ValueError):
            ns_covariance(self.models, self.lat, [1.0, 1.0], [2.0, 1.5], labels=(0, 2))

    def test_conditional_matrix_entries(self):
        rng = np.random.default_rng(2)
        x = rng.uniform(0, 12, (6, 2))
        lab = rng.integers(0, 2, 6)
        mat = conditional_covariance_matrix(self.models, self.lat, x, lab)
        for i in range(6):
            for j in range(6):
                if i == j:
                    ref = ns_covariance(self.models, self.lat, x[i], x[j], labels=(lab[i], lab[i]))
                else:
                    ref = ns_covariance(self.models, self.lat, x[i], x[j], labels=(lab[i], lab[j]))
                assert mat[i, j] == pytest.approx(ref, abs=1e-10)

    def test_positive_definite(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            K = int(rng.integers(1, 5))
            models = [SpectralModel(str(rng.choice(["matern", "squared_exponential"])), rng.uniform(0.5, 20), (rng.uniform(0.5, 4),), sigma2=rng.uniform(0.05, 2)) for _ in range(K)]
            npts = int(rng.integers(2, 21))
            mat = conditional_covariance_matrix(models, self.lat, rng.uniform(0, 12, (npts, 2)), rng.integers(0, K, npts))
            np.linalg.cholesky(mat)

    def test_shared_y_cross_covariance_by_simulation(self):
        rng = np.random.default_rng(4)
        shape = (8, 8)
        lat = build_frequency_lattice(shape)
        # disjoint dominant spectra: long and short range
        models = [SpectralModel("squared_exponential", 3.0, (2.5,), sigma2=0.1), SpectralModel("squared_exponential", 3.0, (0.6,), sigma2=0.1)]
        from fgp.stationary import SpectralBand
        a = [np.sqrt(SpectralBand(lat, 0.01).density_grid(m)) for m in models]
        n_draw = 10000
        s1, s2 = (1, 2), (2, 4)
        x1, x2 = np.empty(n_draw), np.empty(n_draw)
        for i in range(n_draw):
            y = white_spectrum(shape, rng)
            z1 = ifft_ortho(a[0] * y).real + math.sqrt(0.1) * rng.standard_normal(shape)
            z2 = ifft_ortho(a[1] * y).real + math.sqrt(0.1) * rng.standard_normal(shape)
            x1[i], x2[i] = z1[s1], z2[s2]
        prod = x1 * x2
        ref = ns_covariance(models, lat, s1, s2, labels=(0, 1))
        assert abs(prod.mean() - ref) <= 4 * prod.std() / math.sqrt(n_draw)


class TestJointLikelihood:
    def test_against_dense(self):
        rng = np.random.default_rng(5)
        shape = (3, 4)
        n = 12
        lat = build_frequency_lattice(shape)
        from fgp.stationary import SpectralBand
        models = [SpectralModel("matern", 2.0, (1.0,), sigma2=0.3), SpectralModel("squared_exponential", 1.0, (0.7,), sigma2=0.6)]
        a = np.array([np.sqrt(SpectralBand(lat, 0.0).density_grid(m)).reshape(-1) for m in models])
        z = rng.standard_normal((2,) + shape)
        # dense: stack (Z_1, Z_2) with shared Y; Q G^1/2 as real matrices
        eye = np.eye(n)
        ops = [np.array([ifft_ortho(a[k].reshape(shape) * fft_ortho(e.reshape(shape))).real.reshape(-1) for e in eye]).T for k in range(2)]
        big = np.vstack(ops)
        cov = big @ big.T + np.diag(np.repeat([0.3, 0.6], n))
        ref = stats.multivariate_normal(np.zeros(2 * n), cov).logpdf(z.reshape(-1))
        assert joint_loglik(z, a, np.array([0.3, 0.6])) == pytest.approx(ref, rel=1e-10)

    def test_incremental_proposal(self):
        rng = np.random.default_rng(6)
        a = np.abs(rng.standard_normal((3, 20)))
        w = rng.standard_normal((3, 20)) + 1j * rng.standard_normal((3, 20))
        jl = JointSpectralLikelihood(a, np.array([0.5, 1.0, 2.0]), w)
        a_new = np.abs(rng.standard_normal(20))
        val, cache = jl.proposal(1, a_new, 0.7)
        a2 = a.copy()
        a2[1] = a_new
        fresh = JointSpectralLikelihood(a2, np.array([0.5, 0.7, 2.0]), w)
        assert val == pytest.approx(fresh.value(), rel=1e-12)
        jl.accept(1, a_new, 0.7, cache)
        assert jl.value() == pytest.approx(fresh.value(), rel=1e-12)


class TestDegenerateK1:
    def test_matches_stationary_sampler(self):
        shape = (10, 8)
        rng = np.random.default_rng(7)
        emb = grid_embedding(shape, rng, frac=0.6)
        model = SpectralModel("matern", 2.0, (1.5,), sigma2=0.4)
        common = dict(nu2=0.2, metropolis_steps=3)
        a = StationarySampler(emb, model, FitConfig(interweave=False, **common), np.random.default_rng(11))
        b = NonStationarySampler(emb, model, NSFitConfig(k_init=1, warm_start=0, **common), np.random.default_rng(11))
        for _ in range(30):
            sa = a.sweep(update_theta=True)
            sb = b.sweep(update_theta=True)
        np.testing.assert_allclose(sb.bank.z[0].reshape(shape), sa.z, atol=1e-10)
        assert sb.bank.z_models[0].rho[0] == pytest.approx(sa.model.rho[0], rel=1e-10)
        assert sb.nu2 == pytest.approx(sa.nu2, rel=1e-10)
        assert np.all(sb.labels == 0)

    def test_prediction_matches_stationary_rule(self):
        rng = np.random.default_rng(8)
        lat = build_frequency_lattice((9, 9))
        coeffs = (white_spectrum((9, 9), rng) * 0.7).reshape(1, -1)
        tl = rng.uniform(0, 9, (5, 2))
        bases = axis_bases(lat, tl)
        m = SpectralModel("matern", 1.0, (1.0,), sigma2=0.4)
        mean, var, chosen = _predict_draw(coeffs, np.zeros((0, 81), complex), lat, tl, bases, [m], 0.1)
        from fgp.harmonic import project_grid
        np.testing.assert_allclose(mean, project_grid(coeffs[0].reshape(9, 9), lat, tl), atol=1e-12)
        np.testing.assert_allclose(var, 0.5)
        assert np.all(chosen == 0)


class TestPrediction:
    def setup_method(self):
        rng = np.random.default_rng(9)
        self.lat = build_frequency_lattice((10, 10))
        self.coeffs = np.array([white_spectrum((10, 10), rng).reshape(-1), 2 * white_spectrum((10, 10), rng).reshape(-1)])
        eta = ifft_ortho(white_spectrum((10, 10), rng) * 3).real
        self.eta_c = fft_ortho(eta).reshape(1, -1)
        self.tl = rng.uniform(0, 10, (30, 2))
        self.bases = axis_bases(self.lat, self.tl)
        self.models = [SpectralModel("matern", 1.0, (1.0,), sigma2=0.3), SpectralModel("matern", 1.0, (1.0,), sigma2=0.9)]

    @pytest.mark.parametrize("rule", ["modal", "mixture"])
    def test_relabelling_invariance(self, rule):
        m1, v1, _ = _predict_draw(self.coeffs, self.eta_c, self.lat, self.tl, self.bases, self.models, 0.1, rule)
        # for K = 2, swapping components is eta -> -eta
        m2, v2, _ = _predict_draw(self.coeffs[::-1], -self.eta_c, self.lat, self.tl, self.bases, self.models[::-1], 0.1, rule)
        np.testing.assert_allclose(m1, m2, atol=1e-10)
        np.testing.assert_allclose(v1, v2, atol=1e-10)

    def test_saturated_target_variance(self):
        sat = fft_ortho(np.full((10, 10), 10.0)).reshape(1, -1)
        _, var, chosen = _predict_draw(self.coeffs, sat, self.lat, self.tl, self.bases, self.models, 0.1)
        assert np.all(chosen == 0)
        np.testing.assert_allclose(var, 0.1 + 0.3)

    def test_unknown_rule(self):
        with pytest.raises(ValueError):
            _predict_draw(self.coeffs, self.eta_c, self.lat, self.tl, self.bases, self.models, 0.1, "vote")


class TestFit:
    def test_summary_structure(self):
        rng = np.random.default_rng(10)
        x = rng.integers(0, 16, (120, 2)).astype(float)
        data = ObservationSet(x, np.sin(x[:, 0] / 3) + 0.1 * rng.standard_normal(120))
        cfg = NSFitConfig(k_init=4, steps=60, burn_in=20, thin=2, warm_start=20, pad=4, keep_spectra=10)
        post = ns_fit(data, cfg, SpectralModel("squared_exponential", 1.0, (2.0,)), targets=x[:5] + 0.3)
        assert post.draws.shape == (20, 4, 3)
        assert post.occupancy.sum() == pytest.approx(1.0)
        summ = post.component_summary()
        occ = [c["occupancy"] for c in summ]
        assert occ == sorted(occ, reverse=True)
        assert 1 <= post.dominating() <= 4
        assert post.label_field().shape == post.embedding.shape
        assert set(np.unique(post.label_field())) <= set(range(5))
        np.testing.assert_allclose(post.weight_fields().sum(axis=0), 1.0, atol=1e-12)
        res = ns_predict(post, x[:5] + 0.3)
        assert res["mean"].shape == (5,) and np.all(res["var"] > 0)
        assert np.all(np.isfinite(post.predictions["mixture_mean"]))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            NSFitConfig(k_init=40, k_max=32).validate()
        with pytest.raises(ValueError):
            NSFitConfig(steps=10, burn_in=10).validate()

    def test_bank_invariants(self):
        m = SpectralModel("matern", 1.0, (1.0,))
        with pytest.raises(ValueError):
            ComponentBank([m, m], [m.with_params(sigma2=2.0)], *(np.zeros((2, 4)),) * 2, *(np.zeros((1, 4)),) * 2)
        with pytest.raises(ValueError):
            ComponentBank([m, m], [], *(np.zeros((2, 4)),) * 4)

    def test_reproducible(self):
        a, b = sampler(K=3, seed=4), sampler(K=3, seed=4)
        for _ in range(5):
            sa, sb = a.sweep(), b.sweep()
        np.testing.assert_array_equal(sa.bank.z, sb.bank.z)
        np.testing.assert_array_equal(sa.labels, sb.labels)


@pytest.mark.slow
def test_stationary_data_concentrates_on_one_component():
    from fgp.simulate import SimSpec, simulate_stationary

    top = []
    for seed in range(3):
        spec = SimSpec(count=400, grid=True, bounds=[[0, 19], [0, 19]], kernel={"family": "matern", "phi": 4.0, "rho": 3.0, "kappa": 1.5}, sigma2=0.2, seed=seed)
        cfg = NSFitConfig(k_init=4, steps=4000, burn_in=2000, thin=5, pad=8, seed=seed)
        post = ns_fit(simulate_stationary(spec), cfg, SpectralModel("matern", 1.0, (2.0,), kappa=1.5))
        top.append(post.occupancy.max())
    assert sum(t > 0.9 for t in top) >= 2, top
