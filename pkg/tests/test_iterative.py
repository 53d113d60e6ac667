import json
from dataclasses import replace

import numpy as np
import pytest

from conftest import smoke_fit_config
from skillform import dgp, iterative as it
from skillform.baselines import triad_variances
from skillform.model import (
    AnchorParams,
    InvestmentParams,
    MeasurementParams,
    ModelSpec,
    TransLog,
)
from skillform.numkit import (
    GaussianMixture,
    QuadratureConfig,
    gaussian_logpdf,
    mixture_logpdf,
    numeric_gradient,
)


def single_component_setup(n=200, seed=3):
    """Single mixture component with unit loadings and unit error sds, so the
    step-0 likelihood has a conjugate closed form."""
    base = dgp.build_preset(dgp.DgpConfig(preset="ces-new-means"))
    mix = GaussianMixture(np.array([1.0]), np.array([[1.0, 2.0]]),
                          np.array([[[0.8, 0.3], [0.3, 1.2]]]))
    meas = tuple(MeasurementParams("continuous", 0.0, 1.0, 1.0) for _ in range(3))
    model = ModelSpec(T=base.T, M=3, production=base.production,
                      skill_measures=(meas,) + base.skill_measures[1:],
                      invest_measures=base.invest_measures, investment=base.investment,
                      anchor=base.anchor, initial=mix, normalization=base.normalization)
    ds = dgp.simulate_dataset(model, n, seed=seed, check_normalization=False)
    space = it.Step0Space(1, 3, ["continuous"] * 3, np.zeros(3, bool), np.array([False, True, True]))
    vec = space.pack(mix, np.zeros(3), np.ones(3), np.ones(3))
    return model, ds, space, vec, mix


def closed_form_step0(ds, mix):
    y = ds.ln_Y[:, 0]
    z = ds.Z_skill[:, 0, :]
    cov = mix.covs[0]
    k = cov[0, 1] / cov[1, 1]
    v = cov[0, 0] - cov[0, 1] ** 2 / cov[1, 1]
    m_y = mix.means[0][0] + k * (y - mix.means[0][1])
    cov_z = v * np.ones((3, 3)) + np.eye(3)
    chol = np.linalg.cholesky(cov_z)
    ll_cond = gaussian_logpdf(z - m_y[:, None], np.zeros(3), chol)
    ll_marg = -0.5 * (np.log(2 * np.pi) + np.log(cov[1, 1]) + (y - mix.means[0][1]) ** 2 / cov[1, 1])
    return ll_cond + ll_marg


class TestLoglikStep0:
    def test_conjugate_closed_form(self):
        model, ds, space, vec, mix = single_component_setup()
        cfg = smoke_fit_config(quad=QuadratureConfig(draws=20_000, burn=20))
        ll = it.loglik_step0(space, vec, ds, cfg)
        err = np.abs(ll - closed_form_step0(ds, mix))
        # typical observations agree tightly; tail observations need more draws
        # (the acceptance suite checks 1e-4 per observation at high draw count)
        assert np.median(err) < 2e-5
        assert err.max() < 5e-3

    def test_flat_measures_carry_no_mixture_information(self):
        model, ds, space, vec, mix = single_component_setup()
        cfg = smoke_fit_config(quad=QuadratureConfig(draws=2000, burn=20))
        huge = np.full(3, 1e6)
        v_a = space.pack(mix, np.zeros(3), np.ones(3), huge)
        mix_b = GaussianMixture(np.array([1.0]), np.array([[0.0, 2.0]]),
                                np.array([[[1.5, 0.1], [0.1, 1.2]]]))
        v_b = space.pack(mix_b, np.zeros(3), np.ones(3), huge)
        y = ds.ln_Y[:, 0][:, None]
        marg_a = mixture_logpdf(GaussianMixture(mix.weights, mix.means[:, 1:], mix.covs[:, 1:, 1:]), y)
        marg_b = mixture_logpdf(GaussianMixture(mix_b.weights, mix_b.means[:, 1:], mix_b.covs[:, 1:, 1:]), y)
        cond_a = it.loglik_step0(space, v_a, ds, cfg) - marg_a
        cond_b = it.loglik_step0(space, v_b, ds, cfg) - marg_b
        assert np.max(np.abs(cond_a - cond_b)) < 1e-8

    def test_draw_refinement_self_consistency(self, ces_new_model):
        ds = dgp.simulate_dataset(ces_new_model, 500, seed=9)
        cfg_lo = smoke_fit_config(quad=QuadratureConfig(draws=1000, burn=20))
        cfg_hi = smoke_fit_config(quad=QuadratureConfig(draws=10_000, burn=20))
        init = it.default_init_step0(ds, ces_new_model, cfg_lo)
        skl, _ = it._fixed_loading_mask(ces_new_model, cfg_lo)
        skm, _ = it._fixed_mu_mask(ces_new_model, cfg_lo)
        space = it.Step0Space(2, 3, ["continuous"] * 3, ~skm[0], ~skl[0])
        vec = space.pack(init["mixture"], init["mu"], init["loading"], init["sd"])
        lo = float(it.loglik_step0(space, vec, ds, cfg_lo).sum())
        hi = float(it.loglik_step0(space, vec, ds, cfg_hi).sum())
        assert abs(lo - hi) / abs(hi) < 1e-3

    def test_analytic_score_matches_numeric(self):
        model, ds, space, vec, mix = single_component_setup(n=60)
        cfg = smoke_fit_config(quad=QuadratureConfig(draws=300, burn=20))
        _, score = it._score_step0(space, vec, ds, cfg)
        g_ana = score.sum(axis=0)
        g_num = numeric_gradient(lambda v: float(it.loglik_step0(space, v, ds, cfg).sum()), vec)
        assert np.max(np.abs(g_ana - g_num) / (1.0 + np.abs(g_num))) < 1e-5


class TestEstimateStep0:
    def test_single_gaussian_matches_triad(self):
        # closed-form linear factor analysis oracle at n = 2000
        model, _, _, _, mix = single_component_setup()
        loadings = (1.0, 0.8, 1.2)
        meas = tuple(MeasurementParams("continuous", 0.0, l, 0.6) for l in loadings)
        model = ModelSpec(T=model.T, M=3, production=model.production,
                          skill_measures=(meas,) + model.skill_measures[1:],
                          invest_measures=model.invest_measures, investment=model.investment,
                          anchor=model.anchor, initial=mix, normalization=model.normalization)
        ds = dgp.simulate_dataset(model, 2000, seed=17, check_normalization=False)
        cfg = smoke_fit_config(mixture_components=1, init_from_amn=False,
                               quad=QuadratureConfig(draws=500, burn=20))
        est = it.estimate_step0(ds, model, cfg)
        assert est.converged
        tri, _ = triad_variances(ds, 0)
        fitted = est.meta["measures"]
        for m in range(3):
            assert fitted[m].loading == pytest.approx(tri.loadings[m], abs=0.02)
        assert est.meta["mixture"].covs[0][0, 0] == pytest.approx(tri.latent_var, abs=0.05)

    def test_recovers_new_means_mixture(self, ces_new_model):
        ds = dgp.simulate_dataset(ces_new_model, 1500, seed=7)
        cfg = smoke_fit_config(fix_first_skill_loadings=True, init_from_amn=False,
                               quad=QuadratureConfig(draws=500, burn=20))
        est = it.estimate_step0(ds, ces_new_model, cfg)
        assert est.converged
        mix = est.meta["mixture"]
        fitted_mean = float(mix.weights @ mix.means[:, 0])
        assert fitted_mean == pytest.approx(4.5, abs=0.15)
        assert np.all(np.diff(mix.means[:, 0]) > 0)  # canonical order

    def test_init_label_permutation_invariance(self, ces_new_model):
        ds = dgp.simulate_dataset(ces_new_model, 400, seed=13)
        cfg = smoke_fit_config(fix_first_skill_loadings=True, init_from_amn=False,
                               quad=QuadratureConfig(draws=300, burn=20))
        init = it.default_init_step0(ds, ces_new_model, cfg)
        mix = init["mixture"]
        flipped = dict(init)
        flipped["mixture"] = GaussianMixture(mix.weights[::-1].copy(), mix.means[::-1].copy(),
                                             mix.covs[::-1].copy())
        a = it.estimate_step0(ds, ces_new_model, cfg, init=init)
        b = it.estimate_step0(ds, ces_new_model, cfg, init=flipped)
        assert np.allclose(a.vec, b.vec, atol=5e-4)

    def test_requires_minimum_sample(self, ces_new_model):
        ds = dgp.simulate_dataset(ces_new_model, 30, seed=1)
        with pytest.raises(ValueError, match="at least 50"):
            it.estimate_step0(ds, ces_new_model, smoke_fit_config())


class TestSynthetic:
    def test_degenerate_shocks_collapse_draws(self, translog_model, smoke_dataset, smoke_estimates):
        cfg = smoke_estimates.config
        steps = [smoke_estimates.steps[0]]
        est1 = smoke_estimates.steps[1]
        ep = dict(est1.meta["eval_params"])
        ep["eta_sd"] = 1e-12
        ep["shock_sd"] = 1e-12
        meta = dict(est1.meta); meta["eval_params"] = ep
        frozen = replace_step(est1, meta)
        syn = it.propagate_synthetic([steps[0], frozen], smoke_dataset, 1, 200, cfg)
        # initial conditional spread remains; shock-channel spread is gone:
        # holding the initial draw fixed means period-1 draws vary only through it
        base = it.propagate_synthetic([steps[0], est1], smoke_dataset, 1, 200, cfg)
        assert syn.draws.std(axis=1).mean() < base.draws.std(axis=1).mean()

    def test_requested_draw_count(self, smoke_dataset, smoke_estimates):
        syn = it.propagate_synthetic(smoke_estimates.steps[:1], smoke_dataset, 0, 500,
                                     smoke_estimates.config)
        assert syn.draws.shape == (smoke_dataset.n, 500)

    def test_mean_against_large_sample_oracle(self, translog_model, smoke_dataset, smoke_estimates):
        # propagate under the *estimated* parameters and compare with a large
        # path simulation of the same estimated model
        syn = it.propagate_synthetic(smoke_estimates.steps[:2], smoke_dataset, 1, 2000,
                                     smoke_estimates.config)
        est_model = smoke_estimates.model
        ln_theta, _, _, _, _ = dgp.simulate_latents(est_model, 1_000_000, seed=77)
        assert abs(syn.draws.mean() - ln_theta[:, 1].mean()) < 0.05

    def test_truly_degenerate_conditional_draws(self, ces_new_model):
        # with measurement/shock scales near zero every draw matches the path
        ds = dgp.simulate_dataset(ces_new_model, 100, seed=3)
        cfg = smoke_fit_config(quad=QuadratureConfig(draws=200, burn=20))
        space = it.Step0Space(1, 3, ["continuous"] * 3, np.zeros(3, bool),
                              np.array([False, True, True]))
        tiny = GaussianMixture(np.array([1.0]), np.array([[2.0, 1.0]]),
                               np.array([[[1e-12, 0.0], [0.0, 1.0]]]))
        vec = space.pack(tiny, np.zeros(3), np.ones(3), np.ones(3))
        step0 = it.StepEstimate(step=0, names=space.names, vec=vec, natural={},
                                loglik=0.0, converged=True, iterations=0,
                                scores=np.zeros((100, space.k)), hessian=-np.eye(space.k),
                                meta={"mixture": space.mixture(vec), "measures": space.measures(vec),
                                      "space": space})
        syn = it.propagate_synthetic([step0], ds, 0, 100, cfg)
        assert np.max(syn.draws.std(axis=1)) < 1e-5


def replace_step(est, meta):
    return it.StepEstimate(step=est.step, names=est.names, vec=est.vec, natural=est.natural,
                           loglik=est.loglik, converged=est.converged, iterations=est.iterations,
                           scores=est.scores, hessian=est.hessian, meta=meta)


class TestLoglikStept:
    def make_space(self, variant="translog"):
        return it.SteptSpace(0, 3, variant,
                             inv_kinds=["continuous"] * 3, skill_kinds=["continuous"] * 3,
                             free_inv_mu=np.zeros(3, bool), free_inv_loading=np.array([False, True, True]),
                             free_skill_mu=np.zeros(3, bool), free_skill_loading=np.array([False, True, True]),
                             endogenous=False, anchor=False)

    def test_intercept_only_closed_form(self, smoke_dataset, smoke_estimates):
        # gamma = 0 removes the production influence: the next-period skill
        # measures become an intercept-only Gaussian block whose marginal
        # likelihood has a conjugate closed form. Flat investment measures and
        # zeroed period-t factors isolate that block.
        space = self.make_space()
        est1 = smoke_estimates.steps[1]
        vec = est1.vec.copy()
        names = space.names
        # center the intercept-only block on the data so the quadrature grid
        # covers the integrand's mass
        a_val = float(smoke_dataset.Z_skill[:, 1, 0].mean())
        shock = float(smoke_dataset.Z_skill[:, 1, 0].std())
        for name, val in [("prod0_a", a_val), ("prod0_gamma1", 0.0), ("prod0_gamma2", 0.0),
                          ("prod0_gamma3", 0.0), ("log_shock_sd_0", np.log(shock))]:
            vec[names.index(name)] = val
        for m in range(3):
            vec[names.index(f"inv0_log_sd_{m + 1}")] = np.log(1e6)
            # measurement scales comparable to the shock keep the integrand wide
            vec[names.index(f"skill1_log_sd_{m + 1}")] = np.log(shock)
        # the step shocks use a later Halton prime, whose partial-block
        # imbalance needs a larger draw count than base 2 for 1e-4 agreement
        S = 80_000
        cfg = smoke_fit_config(quad=QuadratureConfig(draws=S, burn=20))
        syn = it.propagate_synthetic(smoke_estimates.steps[:1], smoke_dataset, 0, S, cfg)
        data = it._build_stept_data(smoke_dataset, 0, False)
        base = np.zeros((smoke_dataset.n, S))
        ll = it.loglik_stept(space, vec, syn, data, base, cfg)
        ep = space.eval_params(vec)
        lam = ep["skill_loading"]
        cov_z = ep["shock_sd"] ** 2 * np.outer(lam, lam) + np.diag(ep["skill_sd"] ** 2)
        chol = np.linalg.cholesky(cov_z)
        mean_z = ep["skill_mu"] + lam * a_val
        closed_skill = gaussian_logpdf(smoke_dataset.Z_skill[:, 1, :], mean_z, chol)
        flat_const = 3 * (-0.5 * np.log(2 * np.pi) - np.log(1e6))
        resid = ll - (closed_skill + flat_const)
        assert np.max(np.abs(resid)) < 1e-4

    def test_duplicate_draws_leave_value_unchanged(self, smoke_dataset, smoke_estimates):
        cfg = smoke_estimates.config
        est1 = smoke_estimates.steps[1]
        space = est1.meta["space"]
        syn = it.propagate_synthetic(smoke_estimates.steps[:1], smoke_dataset, 0, 300, cfg)
        data = it._build_stept_data(smoke_dataset, 0, False)
        base = it.base_skill_factors(smoke_estimates.steps[0].meta["measures"],
                                     smoke_dataset.Z_skill[:, 0, :], syn.draws)
        shock = it.shock_grid(300, cfg.quad.burn, dim_offset=2)
        ll = it.loglik_stept(space, est1.vec, syn, data, base, cfg, shock_normals=shock)
        syn2 = it.SyntheticState(period=0, draws=np.tile(syn.draws, (1, 2)), seed=0, burn=20)
        ll2 = it.loglik_stept(space, est1.vec, syn2, data, np.tile(base, (1, 2)), cfg,
                              shock_normals=np.tile(shock, (2, 1)))
        assert np.max(np.abs(ll - ll2)) < 1e-10

    def test_moving_production_far_from_truth_lowers_likelihood(self, smoke_dataset, smoke_estimates):
        est1 = smoke_estimates.steps[1]
        space = est1.meta["space"]
        cfg = smoke_estimates.config
        syn = it.propagate_synthetic(smoke_estimates.steps[:1], smoke_dataset, 0,
                                     cfg.quad.draws, cfg)
        data = it._build_stept_data(smoke_dataset, 0, False)
        base = it.base_skill_factors(smoke_estimates.steps[0].meta["measures"],
                                     smoke_dataset.Z_skill[:, 0, :], syn.draws)
        ll_hat = float(it.loglik_stept(space, est1.vec, syn, data, base, cfg).sum())
        vec_far = est1.vec.copy()
        vec_far[space.names.index("prod0_gamma1")] += 1.0
        ll_far = float(it.loglik_stept(space, vec_far, syn, data, base, cfg).sum())
        assert ll_far < ll_hat

    def test_analytic_score_matches_numeric(self, smoke_dataset, smoke_estimates):
        est1 = smoke_estimates.steps[1]
        space = est1.meta["space"]
        cfg = smoke_fit_config(quad=QuadratureConfig(draws=200, burn=20))
        syn = it.propagate_synthetic(smoke_estimates.steps[:1], smoke_dataset, 0, 200, cfg)
        sub = 80
        ds_small = dgp.Dataset(Y=smoke_dataset.Y[:sub], Z_skill=smoke_dataset.Z_skill[:sub],
                               Z_invest=smoke_dataset.Z_invest[:sub])
        syn_small = it.SyntheticState(period=0, draws=syn.draws[:sub], seed=0, burn=20)
        data = it._build_stept_data(ds_small, 0, False)
        base = it.base_skill_factors(smoke_estimates.steps[0].meta["measures"],
                                     ds_small.Z_skill[:, 0, :], syn_small.draws)
        shock = it.shock_grid(200, cfg.quad.burn, dim_offset=2)
        vec = est1.vec
        _, flat = it._stept_eval(space, space.eval_params(vec), data, syn_small.draws, base, shock, True)
        g_ana = (flat @ space.jacobian(vec)).sum(axis=0)
        g_num = numeric_gradient(
            lambda v: float(it.loglik_stept(space, v, syn_small, data, base, cfg,
                                            shock_normals=shock).sum()), vec)
        assert np.max(np.abs(g_ana - g_num) / (1.0 + np.abs(g_num))) < 1e-5

    def test_kde_option_close_to_headline_path(self, smoke_dataset, smoke_estimates):
        est1 = smoke_estimates.steps[1]
        space = est1.meta["space"]
        cfg = smoke_estimates.config
        cfg_kde = smoke_fit_config(kde_density=True, quad=cfg.quad)
        syn = it.propagate_synthetic(smoke_estimates.steps[:1], smoke_dataset, 0,
                                     cfg.quad.draws, cfg)
        data = it._build_stept_data(smoke_dataset, 0, False)
        base = it.base_skill_factors(smoke_estimates.steps[0].meta["measures"],
                                     smoke_dataset.Z_skill[:, 0, :], syn.draws)
        ll = it.loglik_stept(space, est1.vec, syn, data, base, cfg)
        ll_kde = it.loglik_stept(space, est1.vec, syn, data, base, cfg_kde)
        assert np.mean(np.abs(ll - ll_kde)) < 0.05


class TestEstimateAll:
    def test_t1_pipeline_runs_exactly_two_steps(self, translog_model):
        short = ModelSpec(
            T=1, M=3, production=translog_model.production[:1],
            skill_measures=translog_model.skill_measures[:2],
            invest_measures=translog_model.invest_measures[:1],
            investment=translog_model.investment[:1], anchor=translog_model.anchor,
            initial=translog_model.initial, normalization=translog_model.normalization)
        ds = dgp.simulate_dataset(short, 300, seed=3)
        cfg = smoke_fit_config(quad=QuadratureConfig(draws=300, burn=20))
        ests = it.estimate_all(ds, short, cfg)
        assert len(ests.steps) == 2
        assert ests.converged

    def test_same_seed_reproduces_estimates(self, translog_model):
        ds = dgp.simulate_dataset(translog_model, 250, seed=31)
        cfg = smoke_fit_config(quad=QuadratureConfig(draws=250, burn=20))
        a = it.estimate_all(ds, translog_model, cfg)
        b = it.estimate_all(ds, translog_model, cfg)
        for sa, sb in zip(a.steps, b.steps):
            assert np.array_equal(sa.vec, sb.vec)

    def test_json_roundtrip_and_rebuild(self, smoke_dataset, smoke_estimates):
        doc = json.loads(it.estimates_to_json(smoke_estimates))
        assert doc["estimator"] == "iterative"
        assert len(doc["steps"]) == 3
        rebuilt = it.rebuild_estimates(doc, smoke_dataset)
        for sa, sb in zip(smoke_estimates.steps, rebuilt.steps):
            assert np.allclose(sa.vec, sb.vec, atol=1e-12)
            assert np.allclose(sa.scores, sb.scores, atol=1e-8)

    def test_anchor_enters_final_step(self, translog_model):
        anchored = ModelSpec(
            T=translog_model.T, M=translog_model.M, production=translog_model.production,
            skill_measures=translog_model.skill_measures,
            invest_measures=translog_model.invest_measures,
            investment=translog_model.investment,
            anchor=AnchorParams(rho0=0.5, rho1=1.2, eta_sd=0.4, present=True),
            initial=translog_model.initial, normalization=translog_model.normalization)
        ds = dgp.simulate_dataset(anchored, 300, seed=8)
        assert ds.Q is not None
        cfg = smoke_fit_config(quad=QuadratureConfig(draws=300, burn=20))
        ests = it.estimate_all(ds, anchored, cfg)
        assert ests.converged
        assert "anchor_rho1" in ests.steps[2].names
        assert "anchor_rho1" not in ests.steps[1].names
        assert ests.model.anchor.present
        assert ests.model.anchor.rho1 == pytest.approx(1.2, abs=0.4)

    def test_binary_probit_measures_supported(self, translog_model):
        rows = []
        for t, row in enumerate(translog_model.skill_measures):
            new_row = list(row)
            new_row[2] = MeasurementParams("binary", 0.0, 0.7, 1.0)
            rows.append(tuple(new_row))
        binary_model = ModelSpec(
            T=translog_model.T, M=translog_model.M, production=translog_model.production,
            skill_measures=tuple(rows), invest_measures=translog_model.invest_measures,
            investment=translog_model.investment, anchor=translog_model.anchor,
            initial=translog_model.initial, normalization=translog_model.normalization)
        ds = dgp.simulate_dataset(binary_model, 400, seed=6)
        assert set(np.unique(ds.Z_skill[:, 0, 2])) <= {0.0, 1.0}
        cfg = smoke_fit_config(quad=QuadratureConfig(draws=300, burn=20), init_from_amn=False)
        ests = it.estimate_all(ds, binary_model, cfg)
        assert len(ests.steps) == 3
        est0 = ests.steps[0]
        assert "skill0_loading_3" in est0.names
        assert "skill0_log_sd_3" not in est0.names  # probit scale fixed at 1
        fitted = est0.meta["measures"][2]
        assert fitted.kind == "binary"
        assert fitted.loading == pytest.approx(0.7, abs=0.25)

    @pytest.mark.slow
    def test_endogenous_investment_recovers_kappa(self, translog_model):
        # informative design: the endogeneity channel kappa * eta_I must be
        # visible over the measurement noise for kappa to be well identified
        prods = tuple(replace(p, control_loading=0.5, shock_sd=0.15)
                      for p in translog_model.production)
        inv = tuple(InvestmentParams(0.0, 0.1, 0.9, 0.4) for _ in range(2))
        rows_s = tuple(tuple(MeasurementParams("continuous", 0.0, mp.loading, 0.3) for mp in row)
                       for row in translog_model.skill_measures)
        rows_i = tuple(tuple(MeasurementParams("continuous", 0.0, mp.loading, 0.3) for mp in row)
                       for row in translog_model.invest_measures)
        endo = ModelSpec(
            T=translog_model.T, M=translog_model.M, production=prods,
            skill_measures=rows_s, invest_measures=rows_i, investment=inv,
            anchor=translog_model.anchor, initial=translog_model.initial,
            normalization=translog_model.normalization)
        ds = dgp.simulate_dataset(endo, 1500, seed=19)
        cfg = smoke_fit_config(endogenous_investment=True, init_from_amn=False, max_iter=150,
                               quad=QuadratureConfig(draws=400, burn=20))
        ests = it.estimate_all(ds, endo, cfg)
        assert ests.converged
        kappas = [ests.steps[t + 1].meta["eval_params"]["kappa"] for t in range(2)]
        for k in kappas:
            assert k == pytest.approx(0.5, abs=0.2)
