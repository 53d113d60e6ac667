from dataclasses import replace

import numpy as np
import pytest

from skillform import baselines as bl, dgp
from skillform.model import (
    CobbDouglas,
    InvestmentParams,
    MeasurementParams,
    ModelSpec,
    ProductionSpec,
)
from skillform.numkit import GaussianMixture, mixture_sample


def cobb_douglas_model(base, a=(0.1, -0.2), g1=(0.6, 0.7), g2=(0.35, 0.25)):
    prods = tuple(ProductionSpec(fn=CobbDouglas(a[t], g1[t], g2[t]), shock_sd=0.1)
                  for t in range(2))
    return ModelSpec(T=2, M=3, production=prods, skill_measures=base.skill_measures,
                     invest_measures=base.invest_measures, investment=base.investment,
                     anchor=base.anchor, initial=base.initial, normalization="TL-scheme")


class TestTriad:
    def test_population_identity(self):
        cov = np.full((3, 3), 0.5)
        np.fill_diagonal(cov, 1.0)
        tri = bl.triad_from_cov(cov, np.zeros(3))
        assert tri.latent_var == pytest.approx(0.5)
        assert np.allclose(tri.loadings, 1.0)

    def test_zero_noise_matches_latent_variance(self, translog_model):
        tiny = tuple(tuple(MeasurementParams("continuous", 0.0, mp.loading, 1e-6) for mp in row)
                     for row in translog_model.skill_measures)
        model = ModelSpec(T=2, M=3, production=translog_model.production, skill_measures=tiny,
                          invest_measures=translog_model.invest_measures,
                          investment=translog_model.investment, anchor=translog_model.anchor,
                          initial=translog_model.initial, normalization=translog_model.normalization)
        ds = dgp.simulate_dataset(model, 5000, seed=3, keep_latents=True,
                                  check_normalization=False)
        tri, _ = bl.triad_variances(ds, 0)
        assert tri.latent_var == pytest.approx(float(np.var(ds.latents["ln_theta"][:, 0], ddof=1)),
                                               rel=1e-5)

    def test_rescaling_second_measure(self, translog_model):
        ds = dgp.simulate_dataset(translog_model, 3000, seed=5)
        tri = bl.triad_from_cov(np.cov(ds.Z_skill[:, 0, :].T), ds.Z_skill[:, 0, :].mean(axis=0))
        z2 = ds.Z_skill[:, 0, :].copy()
        c = 2.5
        z2[:, 1] *= c
        tri2 = bl.triad_from_cov(np.cov(z2.T), z2.mean(axis=0))
        assert tri2.loadings[1] == pytest.approx(c * tri.loadings[1], abs=1e-10)
        assert tri2.latent_var == pytest.approx(tri.latent_var, abs=1e-10)

    def test_degenerate_covariance_raises(self):
        cov = np.eye(3)
        with pytest.raises(bl.DegenerateTriadError):
            bl.triad_from_cov(cov, np.zeros(3))


class TestCobbDouglas:
    def test_identity_solve(self):
        assert np.allclose(bl.solve_cobb_douglas(np.eye(2), np.array([0.7, 0.3])), [0.7, 0.3])

    def test_correlated_solve(self):
        mat = np.array([[1.0, 0.5], [0.5, 1.0]])
        vec = np.array([0.8, 0.7])
        assert np.allclose(bl.solve_cobb_douglas(mat, vec), [0.6, 0.4])

    def test_singular_matrix_raises(self):
        with pytest.raises(np.linalg.LinAlgError):
            bl.solve_cobb_douglas(np.ones((2, 2)), np.ones(2))

    def test_simulation_consistency(self, translog_model):
        model = cobb_douglas_model(translog_model)
        ds = dgp.simulate_dataset(model, 100_000, seed=7)
        est = bl.cobb_douglas_moments(ds)
        for t in range(2):
            assert est[t]["gamma1"] == pytest.approx(model.production[t].fn.gamma1, abs=0.02)
            assert est[t]["gamma2"] == pytest.approx(model.production[t].fn.gamma2, abs=0.02)


class TestBartlett:
    def test_equal_setup_averages(self):
        w = bl.bartlett_weights(np.ones(3), np.ones(3))
        assert np.allclose(w, 1.0 / 3.0)

    def test_two_measure_weights(self):
        w = bl.bartlett_weights(np.array([1.0, 2.0]), np.array([1.0, 1.0]))
        assert np.allclose(w, [0.2, 0.4])

    @pytest.mark.parametrize("loadings,variances", [
        ((1.0, 0.7, 1.4), (0.2, 0.5, 0.3)),
        ((1.0, -0.5, 2.0), (1.0, 0.4, 0.9)),
    ])
    def test_unbiasedness_normalization(self, loadings, variances):
        w = bl.bartlett_weights(np.array(loadings), np.array(variances))
        assert float(w @ np.array(loadings)) == pytest.approx(1.0, abs=1e-12)

    def test_scores_track_latents(self, translog_model):
        ds = dgp.simulate_dataset(translog_model, 20_000, seed=9, keep_latents=True)
        tri, _ = bl.triad_variances(ds, 0)
        scores = bl.bartlett_scores(ds, 0, tri, "skill")
        resid = scores - ds.latents["ln_theta"][:, 0]
        assert abs(resid.mean()) < 0.02
        assert resid.std() < 0.5


class TestIvTranslog:
    def test_zero_noise_equals_ols_equals_truth(self, translog_model):
        tiny_s = tuple(tuple(MeasurementParams("continuous", 0.0, mp.loading, 1e-8) for mp in row)
                       for row in translog_model.skill_measures)
        tiny_i = tuple(tuple(MeasurementParams("continuous", 0.0, mp.loading, 1e-8) for mp in row)
                       for row in translog_model.invest_measures)
        prods = tuple(replace(p, shock_sd=1e-8) for p in translog_model.production)
        model = ModelSpec(T=2, M=3, production=prods, skill_measures=tiny_s,
                          invest_measures=tiny_i, investment=translog_model.investment,
                          anchor=translog_model.anchor, initial=translog_model.initial,
                          normalization=translog_model.normalization)
        ds = dgp.simulate_dataset(model, 4000, seed=11, check_normalization=False)
        iv = bl.iv_translog(ds)
        for t in range(2):
            fn = translog_model.production[t].fn
            assert iv["production"][t]["gamma1"] == pytest.approx(fn.gamma1, abs=1e-6)
            assert iv["production"][t]["gamma2"] == pytest.approx(fn.gamma2, abs=1e-6)
            assert iv["production"][t]["gamma3"] == pytest.approx(fn.gamma3, abs=1e-6)

    def test_instrument_order_invariance(self, translog_model):
        ds = dgp.simulate_dataset(translog_model, 1500, seed=13)
        a = bl.iv_translog(ds, bl.IvConfig(proxy=0, instrument=1, extra_instruments=(2,)))
        b = bl.iv_translog(ds, bl.IvConfig(proxy=0, instrument=2, extra_instruments=(1,)))
        for t in range(2):
            for key in ("a", "gamma1", "gamma2", "gamma3"):
                assert a["production"][t][key] == pytest.approx(b["production"][t][key], abs=1e-9)

    def test_proxy_cannot_instrument_itself(self):
        with pytest.raises(ValueError):
            bl.IvConfig(proxy=1, instrument=1)

    def test_first_stage_reported(self, translog_model):
        ds = dgp.simulate_dataset(translog_model, 1000, seed=17)
        iv = bl.iv_translog(ds)
        f = iv["production"][0]["first_stage_F"]
        assert len(f) == 4
        assert all(v > 100 for v in f[1:])  # strong instruments in this design


class TestEm:
    def test_single_component_closed_form(self):
        rng = np.random.default_rng(3)
        X = rng.standard_normal((500, 3)) @ np.diag([1.0, 0.5, 2.0]) + np.array([1.0, -2.0, 0.0])
        mix, info = bl.em_fit_mixture(X, 1)
        assert np.allclose(mix.means[0], X.mean(axis=0), atol=1e-10)
        assert np.allclose(mix.covs[0], np.cov(X.T, ddof=0) + np.eye(3) * 1e-6, atol=1e-8)

    def test_separated_components_recovered(self):
        true = GaussianMixture(np.array([0.4, 0.6]), np.array([[-5.0, 0.0], [5.0, 2.0]]),
                               np.array([np.eye(2) * 0.25, np.eye(2) * 0.5]))
        X = mixture_sample(true, 4000, seed=5)
        mix, info = bl.em_fit_mixture(X, 2)
        assert info["converged"]
        assert np.allclose(mix.means[0], [-5.0, 0.0], atol=0.05)
        assert np.allclose(mix.means[1], [5.0, 2.0], atol=0.05)

    def test_loglik_nondecreasing_on_random_instances(self):
        rng = np.random.default_rng(11)
        for trial in range(20):
            n = int(rng.integers(100, 400))
            d = int(rng.integers(1, 4))
            L = int(rng.integers(1, 4))
            X = rng.standard_normal((n, d)) * rng.uniform(0.5, 2.0) + rng.normal(0, 3, size=d)
            _, info = bl.em_fit_mixture(X, L, bl.EmConfig(seed=trial, max_iter=80))
            path = np.array(info["loglik_path"])
            assert np.all(np.diff(path) > -1e-8)

    def test_weights_respect_floor(self):
        rng = np.random.default_rng(2)
        X = rng.standard_normal((300, 2))
        mix, _ = bl.em_fit_mixture(X, 3, bl.EmConfig(seed=4))
        if mix is not None:
            assert np.all(mix.weights >= 1e-6 - 1e-12)
            assert np.all(mix.weights <= 1 - 1e-6 + 1e-12)


class TestAmnPipeline:
    def test_l1_gaussian_cobb_douglas_matches_moments(self, translog_model):
        model = cobb_douglas_model(translog_model)
        single = GaussianMixture(np.array([1.0]), np.array([[1.0, 2.0]]),
                                 np.array([[[0.6, 0.1], [0.1, 0.4]]]))
        model = ModelSpec(T=2, M=3, production=model.production,
                          skill_measures=model.skill_measures,
                          invest_measures=model.invest_measures, investment=model.investment,
                          anchor=model.anchor, initial=single, normalization="TL-scheme")
        # both estimators are consistent with different influence functions, so
        # their gap is Op(n^-1/2); n = 40k keeps the expected gap inside 0.01
        ds = dgp.simulate_dataset(model, 40_000, seed=23)
        res = bl.amn_pipeline(ds, bl.AmnConfig(L=1, seed=1), template=model)
        cd = bl.cobb_douglas_moments(ds)
        for t in range(2):
            fn = res.model.production[t].fn
            assert fn.gamma1 == pytest.approx(cd[t]["gamma1"], abs=0.01)
            assert fn.gamma2 == pytest.approx(cd[t]["gamma2"], abs=0.01)

    def test_recovers_original_means_design(self, ces_orig_model):
        ds = dgp.simulate_dataset(ces_orig_model, 1500, seed=4)
        res = bl.amn_pipeline(ds, bl.AmnConfig(L=2, seed=1), template=ces_orig_model)
        assert res.converged
        assert res.model is not None
        m = res.model
        assert np.allclose(np.sort(m.initial.means[:, 0]), [-4.0, 6.0], atol=0.3)
        for t in range(2):
            fn = m.production[t].fn
            true_fn = ces_orig_model.production[t].fn
            assert fn.gamma1 == pytest.approx(true_fn.gamma1, abs=0.1)
            assert fn.sigma == pytest.approx(true_fn.sigma, abs=0.15)

    def test_latent_draw_sample_shape(self, ces_orig_model):
        ds = dgp.simulate_dataset(ces_orig_model, 800, seed=6)
        res = bl.amn_pipeline(ds, bl.AmnConfig(L=2, nls_draws=5000, seed=2), template=ces_orig_model)
        assert res.latent_draws.shape == (5000, 6)


class TestControlFunction:
    def test_residuals_demeaned_and_orthogonal_with_true_latents(self, translog_model):
        ds = dgp.simulate_dataset(translog_model, 5000, seed=3, keep_latents=True)
        lt = ds.latents["ln_theta"][:, 0]
        li = ds.latents["ln_invest"][:, 0]
        ln_y = ds.ln_Y[:, 0]
        X = np.column_stack([np.ones(ds.n), lt, ln_y])
        beta = np.linalg.lstsq(X, li, rcond=None)[0]
        resid = bl.control_function(ds, 0, beta, theta_scores=lt, invest_scores=li)
        assert abs(resid.mean()) < 1e-12
        assert abs(np.corrcoef(resid, ln_y)[0, 1]) < 1e-8
        assert abs(np.corrcoef(resid, lt)[0, 1]) < 1e-8

    def test_bartlett_default_scores(self, translog_model):
        ds = dgp.simulate_dataset(translog_model, 2000, seed=5)
        resid = bl.control_function(ds, 0, np.array([0.0, 0.1, 0.9]))
        assert resid.shape == (2000,)
        assert abs(resid.mean()) < 1e-12
