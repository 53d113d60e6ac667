"""Comparison estimators: Cobb-Douglas moment estimation, Bartlett scoring,
the IV/2SLS trans-log estimator, and the mixture-approximation pipeline
(EM on the observed vector, minimum distance to the latent mixture, then
nonlinear least squares on latent draws).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .dgp import Dataset
from .model import (
    CES,
    AnchorParams,
    CobbDouglas,
    InvestmentParams,
    MeasurementParams,
    ModelSpec,
    ProductionSpec,
    TransLog,
    production_log_output,
)
from .numkit import (
    GaussianMixture,
    cov_to_vector,
    logits_to_weights,
    maximize,
    mixture_sample,
    vector_to_cov,
    weights_to_logits,
)


class DegenerateTriadError(ValueError):
    """A triad covariance needed for identification is numerically zero."""


# ---------------------------------------------------------------------------
# Linear factor moments
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TriadEstimate:
    loadings: np.ndarray  # (M,)
    intercepts: np.ndarray  # (M,)
    latent_var: float
    latent_mean: float
    error_vars: np.ndarray  # (M,)


def triad_from_cov(cov: np.ndarray, means: np.ndarray) -> TriadEstimate:
    """Loadings/variances from a covariance matrix of >= 3 measures with the
    first measure normalized (intercept 0, loading 1)."""
    M = cov.shape[0]
    if M < 3:
        raise DegenerateTriadError("triad identification needs at least three measures")
    for pair in ((0, 1), (0, 2), (1, 2)):
        if abs(cov[pair]) < 1e-10:
            raise DegenerateTriadError(f"covariance between measures {pair[0] + 1} and {pair[1] + 1} is degenerate")
    loadings = np.ones(M)
    loadings[1] = cov[1, 2] / cov[0, 2]
    loadings[2] = cov[1, 2] / cov[0, 1]
    latent_var = cov[0, 1] * cov[0, 2] / cov[1, 2]
    for m in range(3, M):
        loadings[m] = cov[0, m] / latent_var
    latent_mean = means[0]
    intercepts = means - loadings * latent_mean
    error_vars = np.diag(cov) - loadings**2 * latent_var
    return TriadEstimate(loadings=loadings, intercepts=intercepts, latent_var=float(latent_var),
                         latent_mean=float(latent_mean), error_vars=error_vars)


def triad_variances(dataset: Dataset, t: int):
    """Per-period factor-model moments for both latents: (skill TriadEstimate,
    investment TriadEstimate or None for t = T)."""
    skill = triad_from_cov(np.cov(dataset.Z_skill[:, t, :].T), dataset.Z_skill[:, t, :].mean(axis=0))
    invest = None
    if t < dataset.T:
        invest = triad_from_cov(np.cov(dataset.Z_invest[:, t, :].T), dataset.Z_invest[:, t, :].mean(axis=0))
    return skill, invest


def solve_cobb_douglas(second_moments: np.ndarray, cross: np.ndarray) -> np.ndarray:
    """Solve the displayed 2x2 system for (gamma1, gamma2)."""
    if abs(np.linalg.det(second_moments)) < 1e-12:
        raise np.linalg.LinAlgError("singular latent second-moment matrix")
    return np.linalg.solve(second_moments, cross)


def cobb_douglas_moments(dataset: Dataset) -> list[dict]:
    """Plug-in moment estimates of the Cobb-Douglas production per period."""
    out = []
    for t in range(dataset.T):
        skill_t, invest_t = triad_variances(dataset, t)
        skill_next, _ = triad_variances(dataset, t + 1)
        z_th = dataset.Z_skill[:, t, 0]
        z_iv = dataset.Z_invest[:, t, 0]
        z_next = dataset.Z_skill[:, t + 1, 0]
        cov_ti = float(np.cov(z_th, z_iv)[0, 1])
        mat = np.array([[skill_t.latent_var, cov_ti], [cov_ti, invest_t.latent_var]])
        vec = np.array([float(np.cov(z_th, z_next)[0, 1]), float(np.cov(z_iv, z_next)[0, 1])])
        g = solve_cobb_douglas(mat, vec)
        a = float(z_next.mean() - g[0] * z_th.mean() - g[1] * z_iv.mean())
        out.append({"a": a, "gamma1": float(g[0]), "gamma2": float(g[1]),
                    "skill_var": skill_t.latent_var, "invest_var": invest_t.latent_var,
                    "skill_next_var": skill_next.latent_var, "cov_skill_invest": cov_ti})
    return out


def bartlett_weights(loadings: np.ndarray, error_vars: np.ndarray) -> np.ndarray:
    lam = np.asarray(loadings, dtype=float)
    ev = np.asarray(error_vars, dtype=float)
    w = (lam / ev) / np.sum(lam**2 / ev)
    return w


def bartlett_scores(dataset: Dataset, t: int, est: TriadEstimate, which: str = "skill") -> np.ndarray:
    """Minimum-variance unbiased linear score of the latent; still noisy, so it
    is a diagnostic, not a clean regressor."""
    z = dataset.Z_skill[:, t, :] if which == "skill" else dataset.Z_invest[:, t, :]
    w = bartlett_weights(est.loadings, np.maximum(est.error_vars, 1e-8))
    return (z - est.intercepts) @ w


# ---------------------------------------------------------------------------
# IV / 2SLS trans-log estimator
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IvConfig:
    proxy: int = 0  # measure index replacing each latent in the estimating equation
    instrument: int = 1  # measure index serving as the instrument
    extra_instruments: tuple[int, ...] = ()  # additional measure indices
    include_interaction: bool = True  # trans-log interaction term

    def __post_init__(self) -> None:
        if self.proxy == self.instrument or self.proxy in self.extra_instruments:
            raise ValueError("a measure cannot be both proxy and instrument")


def _two_stage_ls(y: np.ndarray, X: np.ndarray, W: np.ndarray):
    """2SLS with instrument matrix W; returns (coef, first-stage F per column)."""
    WtW = W.T @ W
    try:
        proj = W @ np.linalg.solve(WtW, W.T @ X)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("rank-deficient first stage") from exc
    XtPX = X.T @ proj
    if abs(np.linalg.det(XtPX)) < 1e-10:
        raise np.linalg.LinAlgError("rank-deficient first stage")
    coef = np.linalg.solve(XtPX, proj.T @ y)
    n, k = W.shape
    fstats = []
    for j in range(X.shape[1]):
        x = X[:, j]
        resid = x - proj[:, j]
        tss = np.sum((x - x.mean()) ** 2)
        rss = np.sum(resid**2)
        if tss <= rss or k <= 1:
            fstats.append(0.0)
        elif rss <= 1e-12 * tss:
            fstats.append(1e12)  # exogenous column reproduced exactly by the instruments
        else:
            fstats.append(float(((tss - rss) / (k - 1)) / (rss / max(n - k, 1))))
    return coef, np.array(fstats)


def _descale(z: np.ndarray, est: TriadEstimate) -> np.ndarray:
    return (z - est.intercepts) / est.loadings


def iv_translog(dataset: Dataset, cfg: IvConfig = IvConfig()) -> dict:
    """Per-period 2SLS of the trans-log production function on de-scaled
    measures, plus the investment-equation estimates."""
    production = []
    investment = []
    for t in range(dataset.T):
        skill_t, invest_t = triad_variances(dataset, t)
        skill_next, _ = triad_variances(dataset, t + 1)
        zt = _descale(dataset.Z_skill[:, t, :], skill_t)
        zi = _descale(dataset.Z_invest[:, t, :], invest_t)
        znext = _descale(dataset.Z_skill[:, t + 1, :], skill_next)
        y = znext[:, cfg.proxy]
        ones = np.ones(dataset.n)
        X_cols = [ones, zt[:, cfg.proxy], zi[:, cfg.proxy]]
        W_cols = [ones, zt[:, cfg.instrument], zi[:, cfg.instrument]]
        for extra in cfg.extra_instruments:
            W_cols += [zt[:, extra], zi[:, extra]]
        if cfg.include_interaction:
            X_cols.append(zt[:, cfg.proxy] * zi[:, cfg.proxy])
            W_cols.append(zt[:, cfg.instrument] * zi[:, cfg.instrument])
            for extra in cfg.extra_instruments:
                W_cols.append(zt[:, extra] * zi[:, extra])
        coef, fstats = _two_stage_ls(y, np.column_stack(X_cols), np.column_stack(W_cols))
        production.append({
            "a": float(coef[0]), "gamma1": float(coef[1]), "gamma2": float(coef[2]),
            "gamma3": float(coef[3]) if cfg.include_interaction else 0.0,
            "first_stage_F": fstats.tolist(),
        })
        # investment equation: proxy measure on the left, instrumented skills
        ln_y = dataset.ln_Y[:, t]
        Xi = np.column_stack([ones, zt[:, cfg.proxy], ln_y])
        Wi = np.column_stack([ones, zt[:, cfg.instrument], ln_y])
        bcoef, bf = _two_stage_ls(zi[:, cfg.proxy], Xi, Wi)
        vy = float(np.var(ln_y))
        c_ty = float(np.cov(zt[:, 0], ln_y)[0, 1])
        eta_var = invest_t.latent_var - (
            bcoef[1] ** 2 * skill_t.latent_var + bcoef[2] ** 2 * vy + 2 * bcoef[1] * bcoef[2] * c_ty
        )
        investment.append({
            "beta0": float(bcoef[0]), "beta1": float(bcoef[1]), "beta2": float(bcoef[2]),
            "eta_var": float(max(eta_var, 1e-6)), "first_stage_F": bf.tolist(),
        })
    return {"production": production, "investment": investment, "config": cfg}


# ---------------------------------------------------------------------------
# EM for Gaussian mixtures on the observed vector
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EmConfig:
    tol: float = 1e-7
    max_iter: int = 500
    seed: int = 0
    weight_floor: float = 1e-6
    ridge: float = 1e-6


def _kmeanspp_centers(X: np.ndarray, L: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centers = [X[rng.integers(n)]]
    for _ in range(L - 1):
        d2 = np.min([np.sum((X - c) ** 2, axis=1) for c in centers], axis=0)
        total = d2.sum()
        if total <= 0:
            centers.append(X[rng.integers(n)])
            continue
        centers.append(X[rng.choice(n, p=d2 / total)])
    return np.array(centers)


def em_fit_mixture(X: np.ndarray, L: int, cfg: EmConfig = EmConfig()):
    """Full-covariance EM; returns (GaussianMixture, info dict). Convergence
    failures are reported in info, never raised."""
    X = np.asarray(X, dtype=float)
    n, d = X.shape
    rng = np.random.default_rng(cfg.seed)
    for attempt in range(2):
        mix, info = _em_once(X, L, cfg, rng)
        if info["status"] != "singular":
            info["attempt"] = attempt
            return mix, info
    info["attempt"] = 1
    return mix, info


def _em_once(X: np.ndarray, L: int, cfg: EmConfig, rng: np.random.Generator):
    n, d = X.shape
    centers = _kmeanspp_centers(X, L, rng)
    base_cov = np.cov(X.T) + np.eye(d) * cfg.ridge
    weights = np.full(L, 1.0 / L)
    means = centers.copy()
    covs = np.array([base_cov.copy() for _ in range(L)])
    loglik_path = []
    status = "maxiter"
    for it in range(cfg.max_iter):
        # E step in log space
        logp = np.empty((n, L))
        try:
            chols = np.linalg.cholesky(covs)
        except np.linalg.LinAlgError:
            status = "singular"
            break
        for l in range(L):
            dev = X - means[l]
            sol = np.linalg.solve(chols[l], dev.T)
            quad = np.sum(sol * sol, axis=0)
            logdet = 2.0 * np.sum(np.log(np.diag(chols[l])))
            logp[:, l] = np.log(weights[l]) - 0.5 * (d * np.log(2 * np.pi) + logdet + quad)
        shift = logp.max(axis=1, keepdims=True)
        r = np.exp(logp - shift)
        rsum = r.sum(axis=1)
        ll = float(np.sum(shift[:, 0] + np.log(rsum)))
        loglik_path.append(ll)
        if len(loglik_path) > 1 and abs(loglik_path[-1] - loglik_path[-2]) < cfg.tol * (1 + abs(ll)):
            status = "converged"
            break
        resp = r / rsum[:, None]
        nk = resp.sum(axis=0)
        weights = np.clip(nk / n, cfg.weight_floor, 1 - cfg.weight_floor)
        weights = weights / weights.sum()
        means = (resp.T @ X) / nk[:, None]
        for l in range(L):
            dev = X - means[l]
            covs[l] = (resp[:, l][:, None] * dev).T @ dev / nk[l] + np.eye(d) * cfg.ridge
    order = np.argsort(means[:, 0], kind="stable")
    weights, means, covs = weights[order], means[order], covs[order]
    try:
        mix = GaussianMixture(weights / weights.sum(), means, covs)
    except ValueError:
        status = "singular"
        mix = None
    info = {"status": status, "converged": status == "converged",
            "loglik_path": loglik_path, "n_iter": len(loglik_path)}
    return mix, info


# ---------------------------------------------------------------------------
# Mixture-approximation pipeline
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AmnConfig:
    L: int = 2
    em: EmConfig = field(default_factory=EmConfig)
    nls_draws: int = 10_000
    seed: int = 0
    md_max_iter: int = 400

    def __post_init__(self) -> None:
        if self.L < 1:
            raise ValueError("mixture needs at least one component")


@dataclass
class AmnResult:
    model: Optional[ModelSpec]
    latent_mixture: Optional[GaussianMixture]
    observed_mixture: Optional[GaussianMixture]
    latent_draws: Optional[np.ndarray]
    em_info: dict
    converged: bool
    md_objective: float = np.nan


def observed_vector(dataset: Dataset) -> np.ndarray:
    """Stacked observed vector: skill and investment measures period by period,
    then log income (one column; incomes repeat across periods in the designs)."""
    parts = []
    for t in range(dataset.T):
        parts.append(dataset.Z_skill[:, t, :])
        parts.append(dataset.Z_invest[:, t, :])
    parts.append(dataset.Z_skill[:, dataset.T, :])
    parts.append(dataset.ln_Y[:, 0][:, None])
    return np.hstack(parts)


def _latent_layout(T: int):
    """Latent stack indices: theta_0, I_0, theta_1, I_1, ..., theta_T, lnY."""
    names = []
    for t in range(T):
        names += [f"theta_{t}", f"invest_{t}"]
    names += [f"theta_{T}", "ln_y"]
    return {name: i for i, name in enumerate(names)}


def _loading_matrix(T: int, M: int, skill_loadings, invest_loadings, layout) -> np.ndarray:
    rows = M * (2 * T + 1) + 1
    Lmat = np.zeros((rows, len(layout)))
    r = 0
    for t in range(T):
        for m in range(M):
            Lmat[r, layout[f"theta_{t}"]] = skill_loadings[t][m]; r += 1
        for m in range(M):
            Lmat[r, layout[f"invest_{t}"]] = invest_loadings[t][m]; r += 1
    for m in range(M):
        Lmat[r, layout[f"theta_{T}"]] = skill_loadings[T][m]; r += 1
    Lmat[r, layout["ln_y"]] = 1.0
    return Lmat


class _MdSpace:
    """Minimum-distance parameter vector: free loadings, log error variances,
    latent means, and latent covariance Cholesky factors per component."""

    def __init__(self, T: int, M: int, L: int, d_lat: int, free_skill, free_invest):
        self.T, self.M, self.L, self.d = T, M, L, d_lat
        self.free_skill = free_skill  # (T+1, M) bool
        self.free_invest = free_invest  # (T, M) bool
        self.n_meas = M * (2 * T + 1)
        self.n_chol = d_lat * (d_lat + 1) // 2

    def pack(self, skill_loadings, invest_loadings, error_vars, nus, omegas):
        parts = [np.asarray(skill_loadings)[self.free_skill],
                 np.asarray(invest_loadings)[self.free_invest],
                 np.log(np.maximum(error_vars, 1e-10))]
        for l in range(self.L):
            parts.append(nus[l])
            parts.append(cov_to_vector(omegas[l]))
        return np.concatenate(parts)

    def unpack(self, vec):
        k = 0
        ns = int(self.free_skill.sum()); ni = int(self.free_invest.sum())
        skill = np.ones((self.T + 1, self.M)); skill[self.free_skill] = vec[k:k + ns]; k += ns
        invest = np.ones((self.T, self.M)); invest[self.free_invest] = vec[k:k + ni]; k += ni
        err = np.exp(np.clip(vec[k:k + self.n_meas], -25, 25)); k += self.n_meas
        nus, omegas = [], []
        for _ in range(self.L):
            nus.append(vec[k:k + self.d]); k += self.d
            omegas.append(vector_to_cov(vec[k:k + self.n_chol], self.d)); k += self.n_chol
        return skill, invest, err, np.array(nus), np.array(omegas)


def _md_objective(space: _MdSpace, vec, obs_means, obs_covs, layout):
    skill, invest, err, nus, omegas = space.unpack(vec)
    Lmat = _loading_matrix(space.T, space.M, skill, invest, layout)
    D = np.diag(np.append(err, 0.0))
    total = 0.0
    for l in range(space.L):
        dm = obs_means[l] - Lmat @ nus[l]
        dc = obs_covs[l] - Lmat @ omegas[l] @ Lmat.T - D
        total += float(dm @ dm) + float(np.sum(dc * dc))
    return total


def _md_init(space: _MdSpace, obs_means, obs_covs, layout, pooled_cov):
    T, M = space.T, space.M
    skill = np.ones((T + 1, M))
    invest = np.ones((T, M))
    err = np.full(space.n_meas, 0.25)
    blocks = []
    for t in range(T):
        blocks.append(("skill", t, M * 2 * t))
        blocks.append(("invest", t, M * 2 * t + M))
    blocks.append(("skill", T, M * 2 * T))
    first_rows = {}
    for kind, t, row0 in blocks:
        sub = pooled_cov[row0:row0 + M, row0:row0 + M]
        try:
            tri = triad_from_cov(sub, np.zeros(M))
            lam = tri.loadings
            ev = np.maximum(tri.error_vars, 1e-4)
        except DegenerateTriadError:
            lam = np.ones(M)
            ev = np.full(M, 0.25)
        if kind == "skill":
            skill[t] = lam
        else:
            invest[t] = lam
        err[row0:row0 + M] = ev
        first_rows[(kind, t)] = row0
    d = space.d
    nus = []
    omegas = []
    sel_rows = []
    for name, idx in sorted(layout.items(), key=lambda kv: kv[1]):
        if name == "ln_y":
            sel_rows.append(space.n_meas)
        else:
            kind, t = name.split("_")
            kind = "skill" if kind == "theta" else "invest"
            sel_rows.append(first_rows[(kind, int(t))])
    sel_rows = np.array(sel_rows)
    for l in range(space.L):
        nus.append(obs_means[l][sel_rows])
        om = obs_covs[l][np.ix_(sel_rows, sel_rows)].copy()
        om[np.diag_indices(d)] -= np.append(err[sel_rows[:-1]], 0.0)
        # eigenvalue floor keeps the initializer inside the PD cone
        vals, vecs = np.linalg.eigh(0.5 * (om + om.T))
        om = (vecs * np.maximum(vals, 1e-3)) @ vecs.T
        omegas.append(om)
    return skill, invest, err, nus, omegas


def amn_pipeline(dataset: Dataset, cfg: AmnConfig = AmnConfig(),
                 template: Optional[ModelSpec] = None,
                 production_variant: str = "ces") -> AmnResult:
    """Three-stage mixture pipeline: EM on the observed vector, minimum
    distance to the latent mixture, NLS on latent draws."""
    if template is not None:
        production_variant = _template_variant(template)
    X = observed_vector(dataset)
    obs_mix, em_info = em_fit_mixture(X, cfg.L, replace(cfg.em, seed=cfg.seed))
    if obs_mix is None:
        return AmnResult(model=None, latent_mixture=None, observed_mixture=None,
                         latent_draws=None, em_info=em_info, converged=False)
    T, M = dataset.T, dataset.M
    layout = _latent_layout(T)
    free_skill = np.zeros((T + 1, M), dtype=bool)
    free_skill[:, 1:] = True  # first skill loading normalized in every period
    free_invest = np.zeros((T, M), dtype=bool)
    free_invest[:, 1:] = True  # investment scale set by the first measure
    space = _MdSpace(T, M, cfg.L, len(layout), free_skill, free_invest)
    pooled = np.cov(X.T)
    init = _md_init(space, obs_mix.means, obs_mix.covs, layout, pooled)
    x0 = space.pack(*init)
    obj = lambda v: -_md_objective(space, v, obs_mix.means, obs_mix.covs, layout)
    res = maximize(obj, x0, tol=1e-10, max_iter=cfg.md_max_iter)
    skill_l, invest_l, err, nus, omegas = space.unpack(res.x)
    try:
        latent_mix = GaussianMixture(obs_mix.weights, np.array(nus), np.array(omegas))
    except ValueError:
        return AmnResult(model=None, latent_mixture=None, observed_mixture=obs_mix,
                         latent_draws=None, em_info=em_info, converged=False,
                         md_objective=-res.value)
    draws = mixture_sample(latent_mix, cfg.nls_draws, seed=cfg.seed + 1)
    production, investment = _nls_stage(draws, layout, T, production_variant)
    model = _assemble_amn_model(dataset, latent_mix, layout, skill_l, invest_l, err,
                                production, investment, template)
    return AmnResult(model=model, latent_mixture=latent_mix, observed_mixture=obs_mix,
                     latent_draws=draws, em_info=em_info,
                     converged=bool(em_info["converged"]), md_objective=-res.value)


def _template_variant(template: ModelSpec) -> str:
    fn = template.production[0].fn
    if isinstance(fn, TransLog):
        return "translog"
    if isinstance(fn, CES):
        return "ces"
    return "cobb-douglas"


def _nls_stage(draws: np.ndarray, layout, T: int, variant: str):
    production = []
    investment = []
    ln_y = draws[:, layout["ln_y"]]
    for t in range(T):
        x = draws[:, layout[f"theta_{t}"]]
        i = draws[:, layout[f"invest_{t}"]]
        nxt = draws[:, layout[f"theta_{t + 1}"]]
        if variant == "translog":
            Xm = np.column_stack([np.ones_like(x), x, i, x * i])
            coef = np.linalg.lstsq(Xm, nxt, rcond=None)[0]
            fn = TransLog(*map(float, coef))
            resid = nxt - Xm @ coef
        elif variant == "cobb-douglas":
            Xm = np.column_stack([np.ones_like(x), x, i])
            coef = np.linalg.lstsq(Xm, nxt, rcond=None)[0]
            fn = CobbDouglas(*map(float, coef))
            resid = nxt - Xm @ coef
        else:
            fn, resid = _fit_ces(x, i, nxt)
        shock_sd = max(float(resid.std()), 1e-3)
        production.append(ProductionSpec(fn=fn, shock_sd=shock_sd))
        Xi = np.column_stack([np.ones_like(x), x, ln_y])
        bc = np.linalg.lstsq(Xi, i, rcond=None)[0]
        eta_sd = max(float((i - Xi @ bc).std()), 1e-3)
        investment.append(InvestmentParams(float(bc[0]), float(bc[1]), float(bc[2]), eta_sd))
    return production, investment


def _fit_ces(x: np.ndarray, i: np.ndarray, nxt: np.ndarray):
    def unpack(v):
        return np.exp(v[0]), np.exp(v[1]), v[2]

    def obj(v):
        g1, g2, sig = unpack(v)
        f, _, _ = _ces_predict(g1, g2, sig, x, i)
        return -float(np.sum((nxt - f) ** 2))

    x0 = np.array([np.log(0.5), np.log(0.5), -0.4])
    res = maximize(obj, x0, tol=1e-10, max_iter=300)
    g1, g2, sig = unpack(res.x)
    f, _, _ = _ces_predict(g1, g2, sig, x, i)
    if abs(sig) < 1e-4:
        sig = -1e-4
    return CES(1.0, float(g1), float(g2), float(sig), 1.0), nxt - f


def _ces_predict(g1, g2, sig, x, i):
    if abs(sig) < 1e-4:
        g = g1 + g2
        w1 = (g1 * x + g2 * i) / g
        w2 = (g1 * x**2 + g2 * i**2) / (2 * g)
        return np.log(g) / sig + w1 + sig * (w2 - 0.5 * w1**2), None, None
    ax, ai = sig * x, sig * i
    m = np.maximum(ax, ai)
    inner = g1 * np.exp(ax - m) + g2 * np.exp(ai - m)
    return (m + np.log(inner)) / sig, None, None


def _assemble_amn_model(dataset: Dataset, latent_mix: GaussianMixture, layout,
                        skill_loadings, invest_loadings, err_vars,
                        production, investment, template: Optional[ModelSpec]) -> ModelSpec:
    T, M = dataset.T, dataset.M
    err_sd = np.sqrt(np.maximum(err_vars, 1e-10))
    rows_skill = []
    rows_invest = []
    r = 0
    for t in range(T):
        rows_skill.append(tuple(MeasurementParams("continuous", 0.0, float(skill_loadings[t][m]),
                                                  float(err_sd[r + m])) for m in range(M)))
        r += M
        rows_invest.append(tuple(MeasurementParams("continuous", 0.0, float(invest_loadings[t][m]),
                                                   float(err_sd[r + m])) for m in range(M)))
        r += M
    rows_skill.append(tuple(MeasurementParams("continuous", 0.0, float(skill_loadings[T][m]),
                                              float(err_sd[r + m])) for m in range(M)))
    idx = [layout["theta_0"], layout["ln_y"]]
    init_mix = GaussianMixture(latent_mix.weights, latent_mix.means[:, idx],
                               latent_mix.covs[np.ix_(range(latent_mix.n_components), idx, idx)])
    normalization = template.normalization if template is not None else "CES-scheme"
    return ModelSpec(
        T=T, M=M, production=tuple(production), skill_measures=tuple(rows_skill),
        invest_measures=tuple(rows_invest), investment=tuple(investment),
        anchor=AnchorParams(present=False), initial=init_mix, normalization=normalization,
    )


# ---------------------------------------------------------------------------
# Model assembly for the moment estimators
# ---------------------------------------------------------------------------


def assemble_model_iv(dataset: Dataset, iv_result: dict, template: ModelSpec,
                      initial: GaussianMixture, n_sim: int = 50_000, seed: int = 23) -> ModelSpec:
    """Estimated model from IV/moment production and investment estimates.

    The initial joint distribution is supplied externally (the mixture fit of
    the pipeline that ships alongside); shock scales come from the identified
    second moments, with the production-variance piece simulated.
    """
    T, M = dataset.T, dataset.M
    rows_skill = []
    rows_invest = []
    for t in range(T + 1):
        tri_s, tri_i = triad_variances(dataset, t)
        rows_skill.append(tuple(
            MeasurementParams("continuous", float(tri_s.intercepts[m]), float(tri_s.loadings[m]),
                              float(np.sqrt(max(tri_s.error_vars[m], 1e-6)))) for m in range(M)))
        if t < T:
            rows_invest.append(tuple(
                MeasurementParams("continuous", float(tri_i.intercepts[m]), float(tri_i.loadings[m]),
                                  float(np.sqrt(max(tri_i.error_vars[m], 1e-6)))) for m in range(M)))
    production = []
    investment = []
    rng = np.random.default_rng(seed)
    start = mixture_sample(initial, n_sim, seed)
    lt = start[:, 0]
    ln_y = start[:, 1]
    for t in range(T):
        prod = iv_result["production"][t]
        inv = iv_result["investment"][t]
        eta_sd = float(np.sqrt(inv["eta_var"]))
        investment.append(InvestmentParams(inv["beta0"], inv["beta1"], inv["beta2"], eta_sd))
        fn = TransLog(prod["a"], prod["gamma1"], prod["gamma2"], prod["gamma3"])
        li = inv["beta0"] + inv["beta1"] * lt + inv["beta2"] * ln_y + eta_sd * rng.standard_normal(n_sim)
        f = production_log_output(ProductionSpec(fn=fn, shock_sd=1.0), lt, li)
        tri_next, _ = triad_variances(dataset, t + 1)
        shock_var = max(tri_next.latent_var - float(np.var(f)), 1e-6)
        production.append(ProductionSpec(fn=fn, shock_sd=float(np.sqrt(shock_var))))
        lt = f + production[-1].shock_sd * rng.standard_normal(n_sim)
    return ModelSpec(
        T=T, M=M, production=tuple(production), skill_measures=tuple(rows_skill),
        invest_measures=tuple(rows_invest), investment=tuple(investment),
        anchor=AnchorParams(present=False), initial=initial,
        normalization=template.normalization,
    )


# ---------------------------------------------------------------------------
# Control function
# ---------------------------------------------------------------------------


def control_function(dataset: Dataset, t: int, beta: np.ndarray,
                     theta_scores: Optional[np.ndarray] = None,
                     invest_scores: Optional[np.ndarray] = None) -> np.ndarray:
    """Investment-equation residuals, demeaned, for use as an extra production
    covariate. Scores default to Bartlett scores from triad estimates."""
    if theta_scores is None:
        tri_s, _ = triad_variances(dataset, t)
        theta_scores = bartlett_scores(dataset, t, tri_s, "skill")
    if invest_scores is None:
        _, tri_i = triad_variances(dataset, t)
        invest_scores = bartlett_scores(dataset, t, tri_i, "invest")
    resid = invest_scores - beta[0] - beta[1] * theta_scores - beta[2] * dataset.ln_Y[:, t]
    return resid - resid.mean()


def baseline_estimate_to_dict(name: str, model: Optional[ModelSpec], extra: dict) -> dict:
    from .model import model_to_dict

    doc = {"estimator": name, "model": model_to_dict(model) if model is not None else None}
    doc.update(extra)
    return doc
