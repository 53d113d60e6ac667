"""Iterative simulated-maximum-likelihood estimator.

Step 0 fits the joint initial distribution of (ln theta_0, ln Y_0) together
with the period-0 skill measurement system by MLE over a quasi-Monte-Carlo
grid. Each later step t propagates a per-individual synthetic sample of
ln theta_t conditional on the income history, then estimates the period-t
investment measures, period-(t+1) skill measures, production, investment
equation and shock scales, holding everything estimated earlier fixed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.special import log_ndtr

from .dgp import Dataset
from .model import (
    CES,
    CES_SCHEME,
    TL_SCHEME,
    AnchorParams,
    CobbDouglas,
    InvestmentParams,
    MeasurementParams,
    ModelSpec,
    ProductionSpec,
    TransLog,
)
from .numkit import (
    GaussianMixture,
    QuadratureConfig,
    cov_to_vector,
    halton_points,
    logits_to_weights,
    maximize,
    mixture_condition,
    to_normal,
    vector_to_cov,
    weights_to_logits,
)

_LOG_2PI = float(np.log(2.0 * np.pi))
LOG_FLOOR = float(np.log(1e-300))


def _chunk_rows(S: int) -> int:
    # keep each (rows, S) work array near 4e6 elements
    return max(1, int(4_000_000 // max(S, 1)))


@dataclass(frozen=True)
class FitConfig:
    """Estimation settings for the iterative pipeline."""

    quad: QuadratureConfig = field(default_factory=QuadratureConfig)
    mixture_components: int = 2
    restarts: int = 3
    jitter_sd: float = 0.1
    fix_intercepts: bool = False  # pin every measurement intercept at 0
    fix_first_skill_loadings: Optional[bool] = None  # None -> scheme default
    endogenous_investment: bool = False
    kde_density: bool = False  # Gaussian-kernel smoothing of synthetic draws
    synthetic_draws: Optional[int] = None  # defaults to quad.draws
    max_iter: int = 300
    tol: float = 1e-6
    seed: int = 0
    analytic_scores: bool = True
    init_from_amn: bool = True

    @property
    def s_synthetic(self) -> int:
        return self.synthetic_draws if self.synthetic_draws is not None else self.quad.draws


@dataclass(frozen=True)
class SyntheticState:
    """Per-individual draws of ln theta_period given that individual's incomes."""

    period: int
    draws: np.ndarray  # (n, S)
    seed: int
    burn: int

    def __post_init__(self) -> None:
        if not np.all(np.isfinite(self.draws)):
            raise ValueError("synthetic draws contain non-finite values")

    @property
    def S(self) -> int:
        return self.draws.shape[1]


@dataclass
class StepEstimate:
    step: int  # 0 for the initial step, t+1 for transition step t
    names: list[str]
    vec: np.ndarray  # unconstrained coordinates at the optimum
    natural: dict
    loglik: float
    converged: bool
    iterations: int
    scores: np.ndarray  # (n, k) per-observation score at vec
    hessian: np.ndarray  # (k, k) mean per-observation Hessian
    floored: int = 0
    meta: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Normalization masks
# ---------------------------------------------------------------------------


def _fixed_loading_mask(template: ModelSpec, cfg: FitConfig):
    """(skill (T+1, M), invest (T, M)) boolean masks of loadings pinned at 1."""
    T, M = template.T, template.M
    skill = np.zeros((T + 1, M), dtype=bool)
    invest = np.zeros((T, M), dtype=bool)
    fix_first = cfg.fix_first_skill_loadings
    if template.normalization == TL_SCHEME:
        skill[:, 0] = True
        invest[:, 0] = True
    else:
        skill[0, 0] = True
        if fix_first is None:
            fix_first = False
        if fix_first:
            skill[:, 0] = True
    return skill, invest


def _fixed_mu_mask(template: ModelSpec, cfg: FitConfig):
    T, M = template.T, template.M
    skill = np.zeros((T + 1, M), dtype=bool)
    invest = np.zeros((T, M), dtype=bool)
    if cfg.fix_intercepts:
        skill[:, :] = True
        invest[:, :] = True
    else:
        skill[:, 0] = True
        invest[:, 0] = True
    return skill, invest


# ---------------------------------------------------------------------------
# Measurement-block helpers shared by both kernels
# ---------------------------------------------------------------------------


def _measure_block_loglik(z_col, kind, mu, loading, sd, latent):
    """Log-density/probability of one measure for latent values (n, S)."""
    idx = mu + loading * latent
    if kind == "continuous":
        r = z_col[:, None] - idx
        return -0.5 * (_LOG_2PI + (r / sd) ** 2) - np.log(sd)
    s = 2.0 * z_col[:, None] - 1.0
    return log_ndtr(s * idx)


def _inv_mills(u):
    # phi(u) / Phi(u), stable over the whole real line
    return np.exp(-0.5 * (_LOG_2PI + u * u) - log_ndtr(u))


class _MeasureBlock:
    """One block of M measures of a common latent, with analytic partials."""

    def __init__(self, z: np.ndarray, kinds: list[str]):
        self.z = z  # (n, M)
        self.kinds = kinds
        self.M = z.shape[1]

    def loglik(self, mu, loading, sd, latent):
        total = 0.0
        for m in range(self.M):
            total = total + _measure_block_loglik(self.z[:, m], self.kinds[m], mu[m], loading[m], sd[m], latent)
        return total

    def partials(self, mu, loading, sd, latent, w):
        """Weighted partial sums: d sum_m log f / d (mu_m, loading_m, sd_m) and
        the latent channel sum_m d log f / d latent, all reduced over draws by w."""
        n = self.z.shape[0]
        out_mu = np.empty((n, self.M))
        out_loading = np.empty((n, self.M))
        out_sd = np.empty((n, self.M))
        dlatent = 0.0
        for m in range(self.M):
            idx = mu[m] + loading[m] * latent
            if self.kinds[m] == "continuous":
                r = self.z[:, m][:, None] - idx
                g_idx = r / sd[m] ** 2  # d log f / d idx ( = -d/d mu with sign folded below)
                out_sd[:, m] = np.sum(w * (r * r / sd[m] ** 3 - 1.0 / sd[m]), axis=1)
            else:
                s = 2.0 * self.z[:, m][:, None] - 1.0
                g_idx = s * _inv_mills(s * idx)
                out_sd[:, m] = 0.0
            out_mu[:, m] = np.sum(w * g_idx, axis=1)
            out_loading[:, m] = np.sum(w * g_idx * latent, axis=1)
            dlatent = dlatent + g_idx * loading[m]
        return out_mu, out_loading, out_sd, dlatent


# ---------------------------------------------------------------------------
# Step 0: initial distribution + period-0 skill measurement
# ---------------------------------------------------------------------------


class Step0Space:
    """Unconstrained vector <-> evaluation parameters for the initial step.

    Evaluation parameters per mixture component l: weight p_l, income marginal
    (mu_y, s_y), conditional mean line (mu_th, slope k) and conditional sd c.
    """

    def __init__(self, L, M, kinds, free_mu, free_loading):
        self.L, self.M, self.kinds = L, M, list(kinds)
        self.free_mu = np.asarray(free_mu, dtype=bool)
        self.free_loading = np.asarray(free_loading, dtype=bool)
        self.free_sd = np.array([k == "continuous" for k in kinds])
        names = [f"mix_w_logit_{l}" for l in range(L - 1)]
        names += [f"mix_mean_theta_{l}" for l in range(L)]
        names += [f"mix_mean_y_{l}" for l in range(L)]
        for l in range(L):
            names += [f"mix_chol_{l}_{tag}" for tag in ("log_a", "b", "log_c")]
        names += [f"skill0_mu_{m + 1}" for m in range(M) if self.free_mu[m]]
        names += [f"skill0_loading_{m + 1}" for m in range(M) if self.free_loading[m]]
        names += [f"skill0_log_sd_{m + 1}" for m in range(M) if self.free_sd[m]]
        self.names = names
        self.k = len(names)

    def pack(self, mixture: GaussianMixture, mu, loading, sd) -> np.ndarray:
        parts = [weights_to_logits(mixture.weights), mixture.means[:, 0], mixture.means[:, 1]]
        chol = []
        for l in range(mixture.n_components):
            c = np.linalg.cholesky(mixture.covs[l])
            chol.append([np.log(c[0, 0]), c[1, 0], np.log(c[1, 1])])
        parts.append(np.asarray(chol).reshape(-1))
        parts.append(np.asarray(mu)[self.free_mu])
        parts.append(np.asarray(loading)[self.free_loading])
        parts.append(np.log(np.asarray(sd)[self.free_sd]))
        return np.concatenate(parts)

    def split(self, vec):
        L, M = self.L, self.M
        k = 0
        logits = vec[k:k + L - 1]; k += L - 1
        mth = vec[k:k + L]; k += L
        my = vec[k:k + L]; k += L
        chol = vec[k:k + 3 * L].reshape(L, 3); k += 3 * L
        mu = np.zeros(M)
        mu[self.free_mu] = vec[k:k + self.free_mu.sum()]; k += self.free_mu.sum()
        loading = np.ones(M)
        loading[self.free_loading] = vec[k:k + self.free_loading.sum()]; k += self.free_loading.sum()
        sd = np.ones(M)
        sd[self.free_sd] = np.exp(np.clip(vec[k:k + self.free_sd.sum()], -20.0, 20.0))
        return logits, mth, my, chol, mu, loading, sd

    def eval_params(self, vec):
        logits, mth, my, chol, mu, loading, sd = self.split(vec)
        p = logits_to_weights(logits)
        a = np.exp(np.clip(chol[:, 0], -20.0, 20.0))
        b = chol[:, 1]
        c = np.exp(np.clip(chol[:, 2], -20.0, 20.0))
        s_y = np.sqrt(b * b + c * c)
        slope = a * b / (s_y * s_y)
        cond_sd = a * c / s_y
        return {"p": p, "mu_y": my, "s_y": s_y, "mu_th": mth, "k": slope, "c": cond_sd,
                "mu": mu, "loading": loading, "sd": sd}

    _EVAL_ORDER = ("p", "mu_y", "s_y", "mu_th", "k", "c", "mu", "loading", "sd")

    def eval_flat(self, vec):
        ep = self.eval_params(vec)
        return np.concatenate([np.atleast_1d(ep[key]) for key in self._EVAL_ORDER])

    def jacobian(self, vec):
        base = self.eval_flat(vec)
        J = np.empty((base.size, vec.size))
        for j in range(vec.size):
            h = 1e-6 * (1.0 + abs(vec[j]))
            e = np.zeros_like(vec); e[j] = h
            J[:, j] = (self.eval_flat(vec + e) - self.eval_flat(vec - e)) / (2 * h)
        return J

    def mixture(self, vec) -> GaussianMixture:
        logits, mth, my, chol, _, _, _ = self.split(vec)
        L = self.L
        covs = np.empty((L, 2, 2))
        for l in range(L):
            low = np.array([[np.exp(chol[l, 0]), 0.0], [chol[l, 1], np.exp(chol[l, 2])]])
            covs[l] = low @ low.T
        return GaussianMixture(logits_to_weights(logits), np.column_stack([mth, my]), covs)

    def measures(self, vec) -> list[MeasurementParams]:
        _, _, _, _, mu, loading, sd = self.split(vec)
        return [
            MeasurementParams(self.kinds[m], float(mu[m]), float(loading[m]),
                              1.0 if self.kinds[m] == "binary" else float(sd[m]))
            for m in range(self.M)
        ]


def _step0_eval(ep: dict, z: np.ndarray, kinds, ln_y: np.ndarray, xi: np.ndarray, want_score: bool):
    """Joint per-observation log likelihood of (Z_theta_0, ln Y_0) and, when
    requested, its score with respect to the flat evaluation parameters."""
    n, M = z.shape
    L = ep["p"].size
    S = xi.size
    chunk = _chunk_rows(S)
    ll = np.empty(n)
    if want_score:
        sc = {key: np.zeros((n,) + np.atleast_1d(ep[key]).shape) for key in Step0Space._EVAL_ORDER}
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        y = ln_y[lo:hi]
        zc = z[lo:hi]
        blockc = _MeasureBlock(zc, kinds)
        comp_log = np.empty((hi - lo, L))
        payload = []
        for l in range(L):
            m_il = ep["mu_th"][l] + ep["k"][l] * (y - ep["mu_y"][l])  # (nc,)
            q = m_il[:, None] + ep["c"][l] * xi[None, :]  # (nc, S)
            logf = blockc.loglik(ep["mu"], ep["loading"], ep["sd"], q)  # (nc, S)
            mshift = logf.max(axis=1, keepdims=True)
            g = np.exp(logf - mshift)
            gsum = g.sum(axis=1)
            log_g_mean = mshift[:, 0] + np.log(gsum) - np.log(S)
            log_phi_y = -0.5 * (_LOG_2PI + ((y - ep["mu_y"][l]) / ep["s_y"][l]) ** 2) - np.log(ep["s_y"][l])
            comp_log[:, l] = np.log(ep["p"][l]) + log_phi_y + log_g_mean
            if want_score:
                payload.append((q, g / gsum[:, None], log_phi_y))
        shift = comp_log.max(axis=1, keepdims=True)
        r = np.exp(comp_log - shift)
        rsum = r.sum(axis=1)
        ll[lo:hi] = shift[:, 0] + np.log(rsum)
        if not want_score:
            continue
        resp = r / rsum[:, None]  # (nc, L) posterior component responsibilities
        for l in range(L):
            q, w, _ = payload[l]  # w: within-component normalized draw weights
            mu_g, loading_g, sd_g, dlat = blockc.partials(ep["mu"], ep["loading"], ep["sd"], q, w)
            rl = resp[:, l]
            sc["mu"][lo:hi] += rl[:, None] * mu_g
            sc["loading"][lo:hi] += rl[:, None] * loading_g
            sc["sd"][lo:hi] += rl[:, None] * sd_g
            dmean = np.sum(w * dlat, axis=1)  # d log G / d m_il
            dc = np.sum(w * dlat * xi[None, :], axis=1)
            yc = (y - ep["mu_y"][l]) / ep["s_y"][l]
            sc["p"][lo:hi, l] = rl / ep["p"][l]
            sc["mu_th"][lo:hi, l] = rl * dmean
            sc["k"][lo:hi, l] = rl * dmean * (y - ep["mu_y"][l])
            sc["mu_y"][lo:hi, l] = rl * (yc / ep["s_y"][l] - ep["k"][l] * dmean)
            sc["s_y"][lo:hi, l] = rl * (yc * yc - 1.0) / ep["s_y"][l]
            sc["c"][lo:hi, l] = rl * dc
    ll = np.maximum(ll, LOG_FLOOR)
    if not want_score:
        return ll, None
    flat = np.concatenate([sc[key].reshape(n, -1) for key in Step0Space._EVAL_ORDER], axis=1)
    return ll, flat


def loglik_step0(space: Step0Space, vec: np.ndarray, dataset: Dataset, cfg: FitConfig) -> np.ndarray:
    """Per-observation log likelihood of the initial step at the packed vector."""
    xi = to_normal(halton_points(1, cfg.quad.draws, cfg.quad.burn))[:, 0]
    ll, _ = _step0_eval(space.eval_params(vec), dataset.Z_skill[:, 0, :], space.kinds,
                        dataset.ln_Y[:, 0], xi, want_score=False)
    return ll


def _score_step0(space: Step0Space, vec, dataset, cfg):
    xi = to_normal(halton_points(1, cfg.quad.draws, cfg.quad.burn))[:, 0]
    ll, flat = _step0_eval(space.eval_params(vec), dataset.Z_skill[:, 0, :], space.kinds,
                           dataset.ln_Y[:, 0], xi, want_score=True)
    return ll, flat @ space.jacobian(vec)


# ---------------------------------------------------------------------------
# Transition steps
# ---------------------------------------------------------------------------


class SteptSpace:
    """Unconstrained vector <-> evaluation parameters for transition step t."""

    def __init__(self, t: int, M: int, variant: str, inv_kinds, skill_kinds,
                 free_inv_mu, free_inv_loading, free_skill_mu, free_skill_loading,
                 endogenous: bool, anchor: bool):
        self.t, self.M, self.variant = t, M, variant
        self.inv_kinds = list(inv_kinds)
        self.skill_kinds = list(skill_kinds)
        self.free_inv_mu = np.asarray(free_inv_mu, dtype=bool)
        self.free_inv_loading = np.asarray(free_inv_loading, dtype=bool)
        self.free_inv_sd = np.array([k == "continuous" for k in inv_kinds])
        self.free_skill_mu = np.asarray(free_skill_mu, dtype=bool)
        self.free_skill_loading = np.asarray(free_skill_loading, dtype=bool)
        self.free_skill_sd = np.array([k == "continuous" for k in skill_kinds])
        self.endogenous = endogenous
        self.anchor = anchor
        self.n_prod = {"translog": 4, "ces": 3, "cobb-douglas": 3}[variant]
        names = []
        names += [f"inv{t}_mu_{m + 1}" for m in range(M) if self.free_inv_mu[m]]
        names += [f"inv{t}_loading_{m + 1}" for m in range(M) if self.free_inv_loading[m]]
        names += [f"inv{t}_log_sd_{m + 1}" for m in range(M) if self.free_inv_sd[m]]
        names += [f"skill{t + 1}_mu_{m + 1}" for m in range(M) if self.free_skill_mu[m]]
        names += [f"skill{t + 1}_loading_{m + 1}" for m in range(M) if self.free_skill_loading[m]]
        names += [f"skill{t + 1}_log_sd_{m + 1}" for m in range(M) if self.free_skill_sd[m]]
        if variant == "translog":
            names += [f"prod{t}_a", f"prod{t}_gamma1", f"prod{t}_gamma2", f"prod{t}_gamma3"]
        elif variant == "ces":
            names += [f"prod{t}_log_gamma1", f"prod{t}_log_gamma2", f"prod{t}_sigma"]
        else:
            names += [f"prod{t}_a", f"prod{t}_gamma1", f"prod{t}_gamma2"]
        names += [f"beta0_{t}", f"beta1_{t}", f"beta2_{t}", f"log_eta_sd_{t}", f"log_shock_sd_{t}"]
        if endogenous:
            names.append(f"kappa_{t}")
        if anchor:
            names += ["anchor_rho0", "anchor_rho1", "anchor_log_sd"]
        self.names = names
        self.k = len(names)

    def pack(self, inv_mu, inv_loading, inv_sd, skill_mu, skill_loading, skill_sd,
             prod_vec, beta, eta_sd, shock_sd, kappa=0.0, anchor_vec=None) -> np.ndarray:
        parts = [np.asarray(inv_mu)[self.free_inv_mu],
                 np.asarray(inv_loading)[self.free_inv_loading],
                 np.log(np.asarray(inv_sd)[self.free_inv_sd]),
                 np.asarray(skill_mu)[self.free_skill_mu],
                 np.asarray(skill_loading)[self.free_skill_loading],
                 np.log(np.asarray(skill_sd)[self.free_skill_sd])]
        prod_vec = np.asarray(prod_vec, dtype=float)
        if self.variant == "ces":
            parts.append(np.array([np.log(prod_vec[0]), np.log(prod_vec[1]), prod_vec[2]]))
        else:
            parts.append(prod_vec)
        parts.append(np.asarray(beta, dtype=float))
        parts.append(np.log([eta_sd, shock_sd]))
        if self.endogenous:
            parts.append(np.array([kappa]))
        if self.anchor:
            av = np.asarray(anchor_vec, dtype=float)
            parts.append(np.array([av[0], av[1], np.log(av[2])]))
        return np.concatenate(parts)

    def eval_params(self, vec):
        M = self.M
        k = 0

        def take(count):
            nonlocal k
            out = vec[k:k + count]
            k += count
            return out

        inv_mu = np.zeros(M); inv_mu[self.free_inv_mu] = take(int(self.free_inv_mu.sum()))
        inv_loading = np.ones(M); inv_loading[self.free_inv_loading] = take(int(self.free_inv_loading.sum()))
        inv_sd = np.ones(M); inv_sd[self.free_inv_sd] = np.exp(np.clip(take(int(self.free_inv_sd.sum())), -20, 20))
        sk_mu = np.zeros(M); sk_mu[self.free_skill_mu] = take(int(self.free_skill_mu.sum()))
        sk_loading = np.ones(M); sk_loading[self.free_skill_loading] = take(int(self.free_skill_loading.sum()))
        sk_sd = np.ones(M); sk_sd[self.free_skill_sd] = np.exp(np.clip(take(int(self.free_skill_sd.sum())), -20, 20))
        raw = take(self.n_prod)
        if self.variant == "ces":
            prod = np.array([np.exp(np.clip(raw[0], -20, 20)), np.exp(np.clip(raw[1], -20, 20)), raw[2]])
        else:
            prod = np.asarray(raw, dtype=float)
        beta = take(3)
        eta_sd = float(np.exp(np.clip(take(1)[0], -20, 20)))
        shock_sd = float(np.exp(np.clip(take(1)[0], -20, 20)))
        kappa = float(take(1)[0]) if self.endogenous else 0.0
        anchor = take(3) if self.anchor else None
        if anchor is not None:
            anchor = np.array([anchor[0], anchor[1], np.exp(np.clip(anchor[2], -20, 20))])
        return {"inv_mu": inv_mu, "inv_loading": inv_loading, "inv_sd": inv_sd,
                "skill_mu": sk_mu, "skill_loading": sk_loading, "skill_sd": sk_sd,
                "prod": prod, "beta": np.asarray(beta, dtype=float),
                "eta_sd": eta_sd, "shock_sd": shock_sd, "kappa": kappa, "anchor": anchor}

    _EVAL_ORDER = ("inv_mu", "inv_loading", "inv_sd", "skill_mu", "skill_loading", "skill_sd",
                   "prod", "beta", "eta_sd", "shock_sd", "kappa", "anchor")

    def eval_flat(self, vec):
        ep = self.eval_params(vec)
        parts = []
        for key in self._EVAL_ORDER:
            if key == "kappa" and not self.endogenous:
                continue
            if ep[key] is None:
                continue
            parts.append(np.atleast_1d(np.asarray(ep[key], dtype=float)))
        return np.concatenate(parts)

    def jacobian(self, vec):
        base = self.eval_flat(vec)
        J = np.empty((base.size, vec.size))
        for j in range(vec.size):
            h = 1e-6 * (1.0 + abs(vec[j]))
            e = np.zeros_like(vec); e[j] = h
            J[:, j] = (self.eval_flat(vec + e) - self.eval_flat(vec - e)) / (2 * h)
        return J

    def production_spec(self, vec) -> ProductionSpec:
        ep = self.eval_params(vec)
        p = ep["prod"]
        if self.variant == "translog":
            fn = TransLog(float(p[0]), float(p[1]), float(p[2]), float(p[3]))
        elif self.variant == "ces":
            fn = CES(1.0, float(p[0]), float(p[1]), float(p[2]), 1.0)
        else:
            fn = CobbDouglas(float(p[0]), float(p[1]), float(p[2]))
        return ProductionSpec(fn=fn, shock_sd=ep["shock_sd"], control_loading=ep["kappa"])

    def measures(self, vec, which: str) -> list[MeasurementParams]:
        ep = self.eval_params(vec)
        kinds = self.inv_kinds if which == "invest" else self.skill_kinds
        mu = ep["inv_mu"] if which == "invest" else ep["skill_mu"]
        loading = ep["inv_loading"] if which == "invest" else ep["skill_loading"]
        sd = ep["inv_sd"] if which == "invest" else ep["skill_sd"]
        return [MeasurementParams(kinds[m], float(mu[m]), float(loading[m]),
                                  1.0 if kinds[m] == "binary" else float(sd[m]))
                for m in range(self.M)]


def _prod_f_and_parts(variant, prod, q, i, want_parts):
    """Production output f(q, i), d f/d i, and per-parameter partials."""
    if variant == "translog":
        a, g1, g2, g3 = prod
        f = a + g1 * q + g2 * i + g3 * q * i
        dfi = g2 + g3 * q
        parts = (lambda: [np.ones_like(f), q, i, q * i]) if want_parts else None
        return f, dfi, parts
    if variant == "cobb-douglas":
        a, g1, g2 = prod
        f = a + g1 * q + g2 * i
        dfi = np.full_like(f, g2)
        parts = (lambda: [np.ones_like(f), q, i]) if want_parts else None
        return f, dfi, parts
    g1, g2, sigma = prod
    if abs(sigma) < 1e-4:
        g = g1 + g2
        w1 = (g1 * q + g2 * i) / g
        w2 = (g1 * q**2 + g2 * i**2) / (2 * g)
        f = np.log(g) / sigma + w1 + sigma * (w2 - 0.5 * w1**2)
        share = np.full_like(f, g1 / g)
    else:
        aq, ai = sigma * q, sigma * i
        mshift = np.maximum(aq, ai)
        t1 = g1 * np.exp(aq - mshift)
        t2 = g2 * np.exp(ai - mshift)
        denom = t1 + t2
        f = (mshift + np.log(denom)) / sigma
        share = t1 / denom
    dfi = 1.0 - share

    def parts():
        # d f / d gamma1 = share / (sigma * gamma1), etc.; d f / d sigma via
        # the quotient rule, with a small central difference near sigma = 0
        d_g1 = share / (sigma * g1)
        d_g2 = (1.0 - share) / (sigma * g2)
        if abs(sigma) < 1e-3:
            h = 5e-4
            fp, _, _ = _prod_f_and_parts("ces", (g1, g2, sigma + h), q, i, False)
            fm, _, _ = _prod_f_and_parts("ces", (g1, g2, sigma - h), q, i, False)
            d_sig = (fp - fm) / (2 * h)
        else:
            d_sig = (-f + share * q + (1.0 - share) * i) / sigma
        return [d_g1, d_g2, d_sig]

    return f, dfi, (parts if want_parts else None)


@dataclass
class SteptData:
    """Immutable observed inputs of one transition step."""

    t: int
    z_inv: np.ndarray  # (n, M)
    z_skill: np.ndarray  # (n, M) period-(t+1) skill measures
    ln_y: np.ndarray  # (n,)
    anchor_values: Optional[np.ndarray] = None  # (n,)


def _build_stept_data(dataset: Dataset, t: int, with_anchor: bool) -> SteptData:
    anchor_values = dataset.Q if (with_anchor and dataset.Q is not None) else None
    return SteptData(t=t, z_inv=dataset.Z_invest[:, t, :], z_skill=dataset.Z_skill[:, t + 1, :],
                     ln_y=dataset.ln_Y[:, t], anchor_values=anchor_values)


def base_skill_factors(measures: list[MeasurementParams], z_t: np.ndarray, draws: np.ndarray) -> np.ndarray:
    """Period-t skill measure log factors at the synthetic draws (already-estimated
    parameters, held fixed during the step-t optimization)."""
    total = 0.0
    for m, mp in enumerate(measures):
        total = total + _measure_block_loglik(z_t[:, m], mp.kind, mp.mu, mp.loading, mp.error_sd, draws)
    return np.asarray(total)


def _stept_eval(space: SteptSpace, ep: dict, data: SteptData, q: np.ndarray,
                base_logf: np.ndarray, shock: np.ndarray, want_score: bool):
    """Per-observation log likelihood of step t and optional score w.r.t. the
    flat evaluation parameters. Integration averages the factor product over
    the synthetic draws paired one-to-one with the shock grid."""
    n, S = q.shape
    xi_i = shock[:, 0][None, :]
    xi_c = shock[:, 1][None, :]
    ll = np.empty(n)
    kflat = space.eval_flat(np.zeros(space.k)).size if want_score else 0
    score = np.empty((n, kflat)) if want_score else None
    beta = ep["beta"]
    chunk = _chunk_rows(S)
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        qc = q[lo:hi]
        yc = data.ln_y[lo:hi][:, None]
        ib = _MeasureBlock(data.z_inv[lo:hi], space.inv_kinds)
        sb = _MeasureBlock(data.z_skill[lo:hi], space.skill_kinds)
        i_d = beta[0] + beta[1] * qc + beta[2] * yc + ep["eta_sd"] * xi_i
        f, dfi, parts_fn = _prod_f_and_parts(space.variant, ep["prod"], qc, i_d, want_score)
        x_d = f + ep["kappa"] * ep["eta_sd"] * xi_i + ep["shock_sd"] * xi_c
        logint = base_logf[lo:hi] \
            + ib.loglik(ep["inv_mu"], ep["inv_loading"], ep["inv_sd"], i_d) \
            + sb.loglik(ep["skill_mu"], ep["skill_loading"], ep["skill_sd"], x_d)
        if data.anchor_values is not None:
            av = ep["anchor"]
            logint = logint + _measure_block_loglik(data.anchor_values[lo:hi], "continuous",
                                                    av[0], av[1], av[2], x_d)
        mshift = logint.max(axis=1, keepdims=True)
        g = np.exp(logint - mshift)
        gsum = g.sum(axis=1)
        ll[lo:hi] = mshift[:, 0] + np.log(gsum) - np.log(S)
        if not want_score:
            continue
        w = g / gsum[:, None]
        inv_mu_g, inv_loading_g, inv_sd_g, d_i_meas = ib.partials(
            ep["inv_mu"], ep["inv_loading"], ep["inv_sd"], i_d, w)
        sk_mu_g, sk_loading_g, sk_sd_g, d_x = sb.partials(
            ep["skill_mu"], ep["skill_loading"], ep["skill_sd"], x_d, w)
        anchor_g = None
        if data.anchor_values is not None:
            av = ep["anchor"]
            r = data.anchor_values[lo:hi][:, None] - av[0] - av[1] * x_d
            g_idx = r / av[2] ** 2
            anchor_g = np.column_stack([
                np.sum(w * g_idx, axis=1),
                np.sum(w * g_idx * x_d, axis=1),
                np.sum(w * (r * r / av[2] ** 3 - 1.0 / av[2]), axis=1),
            ])
            d_x = d_x + g_idx * av[1]
        # channels: d logint / d i = d_i_meas + d_x * dfi; production partials via d_x
        d_i = d_i_meas + d_x * dfi
        prod_parts = parts_fn()
        prod_g = np.column_stack([np.sum(w * d_x * pq, axis=1) for pq in prod_parts])
        beta_g = np.column_stack([
            np.sum(w * d_i, axis=1),
            np.sum(w * d_i * qc, axis=1),
            np.sum(w * d_i, axis=1) * data.ln_y[lo:hi],
        ])
        eta_g = np.sum(w * (d_i + d_x * ep["kappa"]) * xi_i, axis=1)[:, None]
        shock_g = np.sum(w * d_x * xi_c, axis=1)[:, None]
        cols = [inv_mu_g, inv_loading_g, inv_sd_g, sk_mu_g, sk_loading_g, sk_sd_g,
                prod_g, beta_g, eta_g, shock_g]
        if space.endogenous:
            cols.append(np.sum(w * d_x * ep["eta_sd"] * xi_i, axis=1)[:, None])
        if data.anchor_values is not None:
            cols.append(anchor_g)
        score[lo:hi] = np.concatenate(cols, axis=1)
    ll = np.maximum(ll, LOG_FLOOR)
    return ll, score


def shock_grid(S: int, burn: int, kde: bool = False, dim_offset: int = 0) -> np.ndarray:
    """Standard-normal Halton columns for the step shocks. `dim_offset` skips the
    Halton dimensions already consumed by the synthetic-state propagation so the
    paired (draw, shock) points sample the product measure."""
    dims = (3 if kde else 2) + dim_offset
    return to_normal(halton_points(dims, S, burn))[:, dim_offset:]


def loglik_stept(space: SteptSpace, vec: np.ndarray, synthetic: SyntheticState,
                 data: SteptData, base_logf: np.ndarray, cfg: FitConfig,
                 shock_normals: Optional[np.ndarray] = None) -> np.ndarray:
    """Per-observation step-t log likelihood at the packed vector."""
    if shock_normals is not None:
        shock = shock_normals
    else:
        shock = shock_grid(synthetic.S, cfg.quad.burn, cfg.kde_density,
                           dim_offset=2 + 2 * synthetic.period)
    q = synthetic.draws
    if cfg.kde_density:
        q = q + _silverman_bandwidth(q)[:, None] * shock[None, :, 2]
        shock = shock[:, :2]
    ll, _ = _stept_eval(space, space.eval_params(vec), data, q, base_logf, shock, want_score=False)
    return ll


def _silverman_bandwidth(draws: np.ndarray) -> np.ndarray:
    s = draws.std(axis=1)
    iqr = np.subtract(*np.percentile(draws, [75, 25], axis=1))
    spread = np.minimum(s, iqr / 1.34)
    spread = np.where(spread > 0, spread, s + 1e-12)
    return 0.9 * spread * draws.shape[1] ** (-0.2)


# ---------------------------------------------------------------------------
# Synthetic-state propagation
# ---------------------------------------------------------------------------


def initial_conditional(step0: StepEstimate, ln_y0: np.ndarray):
    """Per-individual conditional mixture of ln theta_0 given observed ln Y_0."""
    mix: GaussianMixture = step0.meta["mixture"]
    return mixture_condition(mix, 1, ln_y0)


def propagate_synthetic(steps: list[StepEstimate], dataset: Dataset, period: int,
                        S: int, cfg: FitConfig, seed: int = 0) -> SyntheticState:
    """End-to-end simulated draws of ln theta_period given each individual's
    observed incomes, under the estimated parameters of steps <= period.

    The underlying uniforms are a Halton grid shared across individuals; `seed`
    is recorded for metadata only (the grid itself is deterministic).
    """
    dims = 2 + 2 * period
    grid = halton_points(dims, S, cfg.quad.burn).points
    u = grid[:, 0]
    normals = to_normal(halton_points(dims, S, cfg.quad.burn))[:, 1:]
    w, cmeans, ccovs = initial_conditional(steps[0], dataset.ln_Y[:, 0])
    csd = np.sqrt(np.maximum(ccovs[:, 0, 0], 1e-300))
    cum = np.cumsum(w, axis=1)  # (n, L)
    comp = (u[None, :, None] > cum[:, None, :]).sum(axis=2)  # (n, S)
    mean_sel = np.take_along_axis(cmeans[:, :, 0], comp, axis=1)
    q = mean_sel + csd[comp] * normals[None, :, 0]
    for r in range(period):
        ep = steps[r + 1].meta["eval_params"]
        xi_i = normals[None, :, 1 + 2 * r]
        xi_c = normals[None, :, 2 + 2 * r]
        i_d = ep["beta"][0] + ep["beta"][1] * q + ep["beta"][2] * dataset.ln_Y[:, r][:, None] \
            + ep["eta_sd"] * xi_i
        variant = steps[r + 1].meta["variant"]
        f, _, _ = _prod_f_and_parts(variant, ep["prod"], q, i_d, False)
        q = f + ep["kappa"] * ep["eta_sd"] * xi_i + ep["shock_sd"] * xi_c
    return SyntheticState(period=period, draws=q, seed=seed, burn=cfg.quad.burn)


# ---------------------------------------------------------------------------
# Estimation drivers
# ---------------------------------------------------------------------------


def _canonicalize_step0(space: Step0Space, vec: np.ndarray) -> np.ndarray:
    """Reorder mixture components by ascending first mean coordinate."""
    logits, mth, my, chol, mu, loading, sd = space.split(vec)
    order = np.argsort(mth, kind="stable")
    if np.array_equal(order, np.arange(space.L)):
        return vec
    w = logits_to_weights(logits)[order]
    parts = [weights_to_logits(w), mth[order], my[order], chol[order].reshape(-1),
             mu[space.free_mu], loading[space.free_loading], np.log(sd[space.free_sd])]
    return np.concatenate(parts)


def _run_maximize(obj, value_and_grad, x0, cfg: FitConfig, rng: np.random.Generator, n_obs: int):
    # cfg.tol is on the mean per-observation score; the objective is the sum
    tol = cfg.tol * n_obs
    starts = [np.asarray(x0, dtype=float)]
    for _ in range(cfg.restarts):
        starts.append(x0 + cfg.jitter_sd * (1.0 + np.abs(x0)) * rng.standard_normal(x0.size))
    best = None
    for s0 in starts:
        res = maximize(obj, s0, tol=tol, max_iter=cfg.max_iter,
                       value_and_grad=value_and_grad if cfg.analytic_scores else None)
        if best is None or res.value > best.value:
            best = res
    return best


def _numeric_hessian_of_score(score_fn, vec: np.ndarray) -> np.ndarray:
    """Finite differences of the mean per-observation score (hessian step scale)."""
    k = vec.size
    H = np.empty((k, k))
    for j in range(k):
        h = 1e-4 * (1.0 + abs(vec[j]))
        e = np.zeros(k); e[j] = h
        H[:, j] = (score_fn(vec + e).mean(axis=0) - score_fn(vec - e).mean(axis=0)) / (2 * h)
    return 0.5 * (H + H.T)


def _newton_polish(obj, mean_score_fn, hess_fn, vec: np.ndarray, tol: float, max_steps: int = 40):
    """Newton refinement from a quasi-Newton endpoint until the mean score is
    below tol; returns (vec, hessian, polished_norm). The Hessian is reused
    across steps (it barely moves near the optimum) and recomputed once at the
    final point, where it doubles as the bootstrap cache."""
    def safe_solve(H, g):
        # force negative definiteness before solving so the step always ascends;
        # near-null directions get a curvature floor relative to the stiffest
        # one, which damps moves along weakly identified ridges
        vals, vecs = np.linalg.eigh(0.5 * (H + H.T))
        floor = -max(1e-12, 1e-9 * float(np.max(np.abs(vals))))
        vals = np.minimum(vals, floor)
        step = -(vecs @ ((vecs.T @ g) / vals))
        norm = float(np.linalg.norm(step))
        if norm > 2.0:  # unconstrained coordinates are O(1); cap the move
            step *= 2.0 / norm
        return step

    H = hess_fn(vec)
    f0 = obj(vec)
    g = mean_score_fn(vec)
    refreshes = 0
    moved = False
    for _ in range(max_steps):
        norm = float(np.linalg.norm(g))
        if norm < tol:
            break
        step = safe_solve(H, g)
        slope = float(g @ step)
        scale = 1.0
        improved = False
        for _ in range(12):
            cand = vec + scale * step
            fc = obj(cand)
            if np.isfinite(fc) and fc > f0 + 1e-4 * scale * slope:
                vec, f0, improved = cand, fc, True
                moved = True
                break
            scale *= 0.5
        if improved:
            g = mean_score_fn(vec)
            stalled = float(np.linalg.norm(g)) > 0.5 * norm
        else:
            stalled = True
        if stalled:
            if refreshes >= 10:
                if not improved:
                    break
            else:
                H = hess_fn(vec)
                refreshes += 1
                if not improved:
                    g = mean_score_fn(vec)
    if moved:
        H = hess_fn(vec)
    return vec, H, float(np.linalg.norm(mean_score_fn(vec)))


def estimate_step0(dataset: Dataset, template: ModelSpec, cfg: FitConfig,
                   init: Optional[dict] = None) -> StepEstimate:
    """MLE of the initial joint mixture and the period-0 skill measurement."""
    if dataset.n < 50:
        raise ValueError("step 0 needs at least 50 observations")
    skill_fix_loading, _ = _fixed_loading_mask(template, cfg)
    skill_fix_mu, _ = _fixed_mu_mask(template, cfg)
    kinds = [mp.kind for mp in template.skill_measures[0]]
    space = Step0Space(cfg.mixture_components, template.M, kinds,
                       free_mu=~skill_fix_mu[0], free_loading=~skill_fix_loading[0])
    if init is None:
        init = default_init_step0(dataset, template, cfg)
    x0 = space.pack(init["mixture"], init["mu"], init["loading"], init["sd"])

    def obj(v):
        return float(np.sum(loglik_step0(space, v, dataset, cfg)))

    def value_and_grad(v):
        ll, sc = _score_step0(space, v, dataset, cfg)
        return float(ll.sum()), sc.sum(axis=0)

    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0]))
    res = _run_maximize(obj, value_and_grad, x0, cfg, rng, dataset.n)
    vec = _canonicalize_step0(space, res.x)
    score_fn = lambda v: _score_step0(space, v, dataset, cfg)[1]
    vec, hessian, score_norm = _newton_polish(
        obj, lambda v: score_fn(v).mean(axis=0),
        lambda v: _numeric_hessian_of_score(score_fn, v), vec, cfg.tol)
    vec = _canonicalize_step0(space, vec)
    ll, scores = _score_step0(space, vec, dataset, cfg)
    floored = int(np.sum(ll <= LOG_FLOOR))
    first_order = score_norm < 10.0 * cfg.tol
    converged = (res.converged or first_order) and floored <= max(1, dataset.n // 1000)
    return StepEstimate(
        step=0, names=space.names, vec=vec, natural={"space": space},
        loglik=float(ll.sum()), converged=converged, iterations=res.iterations,
        scores=scores, hessian=hessian, floored=floored,
        meta={"mixture": space.mixture(vec), "measures": space.measures(vec),
              "space": space, "quad": cfg.quad},
    )


def estimate_stept(dataset: Dataset, t: int, synthetic: SyntheticState, template: ModelSpec,
                   cfg: FitConfig, prev_skill_measures: list[MeasurementParams],
                   init: Optional[dict] = None) -> StepEstimate:
    """MLE of the period-t block given the synthetic latent state."""
    variant = _variant_name(template.production[t])
    skill_fix_loading, inv_fix_loading = _fixed_loading_mask(template, cfg)
    skill_fix_mu, inv_fix_mu = _fixed_mu_mask(template, cfg)
    with_anchor = template.anchor.present and t == template.T - 1
    space = SteptSpace(
        t, template.M, variant,
        inv_kinds=[mp.kind for mp in template.invest_measures[t]],
        skill_kinds=[mp.kind for mp in template.skill_measures[t + 1]],
        free_inv_mu=~inv_fix_mu[t], free_inv_loading=~inv_fix_loading[t],
        free_skill_mu=~skill_fix_mu[t + 1], free_skill_loading=~skill_fix_loading[t + 1],
        endogenous=cfg.endogenous_investment, anchor=with_anchor,
    )
    data = _build_stept_data(dataset, t, with_anchor)
    base_logf = base_skill_factors(prev_skill_measures, dataset.Z_skill[:, t, :], synthetic.draws)
    shock = shock_grid(synthetic.S, cfg.quad.burn, cfg.kde_density,
                       dim_offset=2 + 2 * synthetic.period)
    q = synthetic.draws
    if cfg.kde_density:
        q = q + _silverman_bandwidth(q)[:, None] * shock[:, 2][None, :]
        shock = shock[:, :2]
    if init is None:
        init = default_init_stept(dataset, t, template, cfg)
    x0 = space.pack(**init)

    def obj(v):
        ll, _ = _stept_eval(space, space.eval_params(v), data, q, base_logf, shock, False)
        return float(ll.sum())

    def score_full(v):
        _, flat = _stept_eval(space, space.eval_params(v), data, q, base_logf, shock, True)
        return flat @ space.jacobian(v)

    def value_and_grad(v):
        ll, flat = _stept_eval(space, space.eval_params(v), data, q, base_logf, shock, True)
        return float(ll.sum()), (flat @ space.jacobian(v)).sum(axis=0)

    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, t + 1]))
    res = _run_maximize(obj, value_and_grad, x0, cfg, rng, dataset.n)
    vec, hessian, score_norm = _newton_polish(
        obj, lambda v: score_full(v).mean(axis=0),
        lambda v: _numeric_hessian_of_score(score_full, v), res.x, cfg.tol)
    ll, flat = _stept_eval(space, space.eval_params(vec), data, q, base_logf, shock, True)
    scores = flat @ space.jacobian(vec)
    floored = int(np.sum(ll <= LOG_FLOOR))
    first_order = score_norm < 10.0 * cfg.tol
    converged = (res.converged or first_order) and floored <= max(1, dataset.n // 1000)
    return StepEstimate(
        step=t + 1, names=space.names, vec=vec, natural={"space": space},
        loglik=float(ll.sum()), converged=converged, iterations=res.iterations,
        scores=scores, hessian=hessian, floored=floored,
        meta={"space": space, "eval_params": space.eval_params(vec), "variant": variant,
              "production": space.production_spec(vec),
              "invest_measures": space.measures(vec, "invest"),
              "skill_measures": space.measures(vec, "skill"),
              "quad": cfg.quad},
    )


def _variant_name(prod: ProductionSpec) -> str:
    if isinstance(prod.fn, TransLog):
        return "translog"
    if isinstance(prod.fn, CES):
        return "ces"
    return "cobb-douglas"


# ---------------------------------------------------------------------------
# Starting values
# ---------------------------------------------------------------------------


def default_init_step0(dataset: Dataset, template: ModelSpec, cfg: FitConfig) -> dict:
    """Moment-based starting values: triad-style loadings and a quantile split
    of (first skill measure, ln Y) into mixture components."""
    z = dataset.Z_skill[:, 0, :]
    ln_y = dataset.ln_Y[:, 0]
    loading, mu, err_var = _triad_loadings(z, fix_mu=cfg.fix_intercepts)
    L = cfg.mixture_components
    proxy = z[:, 0]
    qs = np.quantile(proxy, np.linspace(0, 1, L + 1))
    qs[0] -= 1.0
    qs[-1] += 1.0
    weights = np.empty(L)
    means = np.empty((L, 2))
    covs = np.empty((L, 2, 2))
    theta_err = max(err_var[0], 1e-4)
    for l in range(L):
        sel = (proxy > qs[l]) & (proxy <= qs[l + 1])
        if sel.sum() < 5:
            sel = np.ones(dataset.n, dtype=bool)
        pts = np.column_stack([proxy[sel], ln_y[sel]])
        weights[l] = max(sel.mean(), 1e-3)
        means[l] = pts.mean(axis=0)
        cov = np.cov(pts.T) + np.eye(2) * 1e-4
        cov[0, 0] = max(cov[0, 0] - theta_err, 0.05 * cov[0, 0])
        covs[l] = cov
    weights /= weights.sum()
    return {"mixture": GaussianMixture(weights, means, covs), "mu": mu, "loading": loading,
            "sd": np.sqrt(np.maximum(err_var, 1e-4))}


def _triad_loadings(z: np.ndarray, fix_mu: bool):
    """Covariance-ratio loadings with the first measure normalized."""
    M = z.shape[1]
    cov = np.cov(z.T)
    loading = np.ones(M)
    if M >= 3:
        if abs(cov[0, 2]) > 1e-10 and abs(cov[0, 1]) > 1e-10:
            loading[1] = cov[1, 2] / cov[0, 2]
            loading[2] = cov[1, 2] / cov[0, 1]
        latent_var = abs(cov[0, 1] * cov[0, 2] / cov[1, 2]) if abs(cov[1, 2]) > 1e-10 else cov[0, 0] * 0.5
        for m in range(3, M):
            loading[m] = cov[0, m] / latent_var if latent_var > 1e-10 else 1.0
    else:
        latent_var = abs(cov[0, 1]) if abs(cov[0, 1]) > 1e-10 else cov[0, 0] * 0.5
        loading[1] = cov[0, 1] / latent_var
    err_var = np.maximum(np.diag(cov) - loading**2 * latent_var, 1e-4)
    mu = np.zeros(M)
    if not fix_mu:
        mu = z.mean(axis=0) - loading * z[:, 0].mean()
        mu[0] = 0.0
    return loading, mu, err_var


def default_init_stept(dataset: Dataset, t: int, template: ModelSpec, cfg: FitConfig) -> dict:
    """Moment-based starting values for a transition step."""
    z_inv = dataset.Z_invest[:, t, :]
    z_sk = dataset.Z_skill[:, t + 1, :]
    z_sk_t = dataset.Z_skill[:, t, :]
    ln_y = dataset.ln_Y[:, t]
    inv_loading, inv_mu, inv_err = _triad_loadings(z_inv, fix_mu=cfg.fix_intercepts)
    sk_loading, sk_mu, sk_err = _triad_loadings(z_sk, fix_mu=cfg.fix_intercepts)
    theta_proxy = z_sk_t[:, 0]
    invest_proxy = z_inv[:, 0]
    X = np.column_stack([np.ones(dataset.n), theta_proxy, ln_y])
    beta = np.linalg.lstsq(X, invest_proxy, rcond=None)[0]
    eta_sd = max(float(np.std(invest_proxy - X @ beta)) * 0.7, 0.05)
    variant = _variant_name(template.production[t])
    next_proxy = z_sk[:, 0]
    Xp = np.column_stack([np.ones(dataset.n), theta_proxy, invest_proxy])
    cd = np.linalg.lstsq(Xp, next_proxy, rcond=None)[0]
    if variant == "translog":
        prod = np.array([cd[0], cd[1], cd[2], 0.0])
    elif variant == "ces":
        g1 = min(max(cd[1], 0.05), 2.0)
        g2 = min(max(cd[2], 0.05), 2.0)
        prod = np.array([g1, g2, -0.25])
    else:
        prod = np.array([cd[0], cd[1], cd[2]])
    shock_sd = max(float(np.std(next_proxy - Xp @ cd)) * 0.5, 0.05)
    init = {"inv_mu": inv_mu, "inv_loading": inv_loading, "inv_sd": np.sqrt(inv_err),
            "skill_mu": sk_mu, "skill_loading": sk_loading, "skill_sd": np.sqrt(sk_err),
            "prod_vec": prod, "beta": beta, "eta_sd": eta_sd, "shock_sd": shock_sd}
    if cfg.endogenous_investment:
        init["kappa"] = 0.0
    if template.anchor.present and t == template.T - 1 and dataset.Q is not None:
        rho1 = 1.0
        init["anchor_vec"] = np.array([float(dataset.Q.mean() - rho1 * next_proxy.mean()), rho1,
                                       max(float(dataset.Q.std()) * 0.5, 0.05)])
    return init


# ---------------------------------------------------------------------------
# Full pipeline
# ---------------------------------------------------------------------------


@dataclass
class IterativeEstimates:
    steps: list[StepEstimate]
    model: Optional[ModelSpec]  # None when a step failed before the pipeline finished
    converged: bool
    config: FitConfig
    synthetic_S: int

    def step_for_period(self, t: int) -> StepEstimate:
        return self.steps[t + 1]


def estimate_all(dataset: Dataset, template: ModelSpec, cfg: FitConfig,
                 init: Optional[dict] = None) -> IterativeEstimates:
    """Run the full iterative pipeline: step 0, then per-period transition steps."""
    inits = init if init is not None else {}
    if cfg.init_from_amn and not inits:
        inits = _amn_inits(dataset, template, cfg)
    steps: list[StepEstimate] = []
    step0 = estimate_step0(dataset, template, cfg, init=inits.get("step0"))
    steps.append(step0)
    S = cfg.s_synthetic
    prev_skill = step0.meta["measures"]
    for t in range(template.T):
        synthetic = propagate_synthetic(steps, dataset, t, S, cfg, seed=cfg.seed)
        est = estimate_stept(dataset, t, synthetic, template, cfg,
                             prev_skill_measures=prev_skill, init=inits.get(f"step{t + 1}"))
        steps.append(est)
        prev_skill = est.meta["skill_measures"]
        if not est.converged:
            break
    converged = all(s.converged for s in steps) and len(steps) == template.T + 1
    model = assemble_model(steps, template) if len(steps) == template.T + 1 else None
    return IterativeEstimates(steps=steps, model=model, converged=converged,
                              config=cfg, synthetic_S=S)


def _amn_inits(dataset: Dataset, template: ModelSpec, cfg: FitConfig) -> dict:
    """Starting values from the mixture-approximation baseline; falls back to
    moment-based values when that pipeline fails."""
    from .baselines import AmnConfig, amn_pipeline

    try:
        res = amn_pipeline(dataset, AmnConfig(L=cfg.mixture_components, seed=cfg.seed),
                           template=template)
        if not res.converged:
            return {}
    except Exception:
        return {}
    inits: dict = {}
    model = res.model
    init0 = default_init_step0(dataset, template, cfg)
    mix = model.initial
    if mix.n_components == cfg.mixture_components:
        init0["mixture"] = mix
    init0["loading"] = np.array([mp.loading for mp in model.skill_measures[0]])
    init0["sd"] = np.array([mp.error_sd for mp in model.skill_measures[0]])
    if not cfg.fix_intercepts:
        init0["mu"] = np.array([mp.mu for mp in model.skill_measures[0]])
    inits["step0"] = init0
    for t in range(template.T):
        base = default_init_stept(dataset, t, template, cfg)
        base["inv_loading"] = np.array([mp.loading for mp in model.invest_measures[t]])
        base["inv_sd"] = np.array([mp.error_sd for mp in model.invest_measures[t]])
        base["skill_loading"] = np.array([mp.loading for mp in model.skill_measures[t + 1]])
        base["skill_sd"] = np.array([mp.error_sd for mp in model.skill_measures[t + 1]])
        if not cfg.fix_intercepts:
            base["inv_mu"] = np.array([mp.mu for mp in model.invest_measures[t]])
            base["skill_mu"] = np.array([mp.mu for mp in model.skill_measures[t + 1]])
        fn = model.production[t].fn
        variant = _variant_name(template.production[t])
        if variant == "translog" and isinstance(fn, TransLog):
            base["prod_vec"] = np.array([fn.a, fn.gamma1, fn.gamma2, fn.gamma3])
        elif variant == "ces" and isinstance(fn, CES):
            base["prod_vec"] = np.array([fn.gamma1, fn.gamma2, fn.sigma])
        base["beta"] = np.array([model.investment[t].beta0, model.investment[t].beta1,
                                 model.investment[t].beta2])
        base["eta_sd"] = model.investment[t].eta_sd
        base["shock_sd"] = model.production[t].shock_sd
        inits[f"step{t + 1}"] = base
    return inits


def assemble_model(steps: list[StepEstimate], template: ModelSpec) -> ModelSpec:
    """Build the estimated ModelSpec from the per-step estimates."""
    step0 = steps[0]
    skill_rows = [tuple(step0.meta["measures"])]
    invest_rows = []
    production = []
    investment = []
    anchor = AnchorParams(present=False)
    for t in range(template.T):
        est = steps[t + 1]
        invest_rows.append(tuple(est.meta["invest_measures"]))
        skill_rows.append(tuple(est.meta["skill_measures"]))
        production.append(est.meta["production"])
        ep = est.meta["eval_params"]
        investment.append(InvestmentParams(float(ep["beta"][0]), float(ep["beta"][1]),
                                           float(ep["beta"][2]), float(ep["eta_sd"])))
        if ep["anchor"] is not None:
            anchor = AnchorParams(rho0=float(ep["anchor"][0]), rho1=float(ep["anchor"][1]),
                                  eta_sd=float(ep["anchor"][2]), present=True)
    return ModelSpec(
        T=template.T, M=template.M, production=tuple(production),
        skill_measures=tuple(skill_rows), invest_measures=tuple(invest_rows),
        investment=tuple(investment), anchor=anchor, initial=step0.meta["mixture"],
        normalization=template.normalization,
    )


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def rebuild_estimates(doc: dict, dataset: Dataset) -> IterativeEstimates:
    """Reconstruct a full IterativeEstimates from its JSON document plus the
    dataset: rebuilds the parameter spaces, restores the per-step vectors, and
    recomputes scores and Hessians in one pass each (no re-optimization)."""
    from .model import model_from_dict

    if doc.get("estimator") != "iterative":
        raise ValueError("document was not produced by the iterative estimator")
    template = model_from_dict(doc["model"])
    fc = dict(doc.get("fit_config", {}))
    quad = QuadratureConfig(draws=int(fc.get("draws", doc["quadrature"]["draws"])),
                            burn=int(doc["quadrature"]["burn"]),
                            seed=int(doc["quadrature"]["seed"]))
    cfg = FitConfig(
        quad=quad,
        mixture_components=int(fc.get("mixture_components", template.initial.n_components)),
        restarts=int(fc.get("restarts", 0)),
        jitter_sd=float(fc.get("jitter_sd", 0.1)),
        fix_intercepts=bool(fc.get("fix_intercepts", False)),
        fix_first_skill_loadings=fc.get("fix_first_skill_loadings"),
        endogenous_investment=bool(fc.get("endogenous_investment", False)),
        kde_density=bool(fc.get("kde_density", False)),
        synthetic_draws=fc.get("synthetic_draws") or doc.get("synthetic_draws"),
        max_iter=int(fc.get("max_iter", 300)),
        tol=float(fc.get("tol", 1e-5)),
        seed=int(fc.get("seed", doc.get("seed", 0))),
        init_from_amn=False,
    )
    skill_fix_loading, inv_fix_loading = _fixed_loading_mask(template, cfg)
    skill_fix_mu, inv_fix_mu = _fixed_mu_mask(template, cfg)
    steps: list[StepEstimate] = []
    step_docs = sorted(doc["steps"], key=lambda s: s["step"])

    kinds0 = [mp.kind for mp in template.skill_measures[0]]
    space0 = Step0Space(cfg.mixture_components, template.M, kinds0,
                        free_mu=~skill_fix_mu[0], free_loading=~skill_fix_loading[0])
    vec0 = np.array([step_docs[0]["parameters"][name] for name in space0.names])
    ll0, scores0 = _score_step0(space0, vec0, dataset, cfg)
    hess0 = _numeric_hessian_of_score(lambda v: _score_step0(space0, v, dataset, cfg)[1], vec0)
    steps.append(StepEstimate(
        step=0, names=space0.names, vec=vec0, natural={"space": space0},
        loglik=float(ll0.sum()), converged=bool(step_docs[0]["converged"]),
        iterations=int(step_docs[0]["iterations"]), scores=scores0, hessian=hess0,
        floored=int(np.sum(ll0 <= LOG_FLOOR)),
        meta={"mixture": space0.mixture(vec0), "measures": space0.measures(vec0),
              "space": space0, "quad": cfg.quad},
    ))
    S = cfg.s_synthetic
    prev_skill = steps[0].meta["measures"]
    for t in range(template.T):
        variant = _variant_name(template.production[t])
        with_anchor = template.anchor.present and t == template.T - 1
        space = SteptSpace(
            t, template.M, variant,
            inv_kinds=[mp.kind for mp in template.invest_measures[t]],
            skill_kinds=[mp.kind for mp in template.skill_measures[t + 1]],
            free_inv_mu=~inv_fix_mu[t], free_inv_loading=~inv_fix_loading[t],
            free_skill_mu=~skill_fix_mu[t + 1], free_skill_loading=~skill_fix_loading[t + 1],
            endogenous=cfg.endogenous_investment, anchor=with_anchor,
        )
        sd = step_docs[t + 1]
        vec = np.array([sd["parameters"][name] for name in space.names])
        synthetic = propagate_synthetic(steps, dataset, t, S, cfg, seed=cfg.seed)
        data = _build_stept_data(dataset, t, with_anchor)
        base_logf = base_skill_factors(prev_skill, dataset.Z_skill[:, t, :], synthetic.draws)
        shock = shock_grid(synthetic.S, cfg.quad.burn, cfg.kde_density, dim_offset=2 + 2 * t)
        q = synthetic.draws
        if cfg.kde_density:
            q = q + _silverman_bandwidth(q)[:, None] * shock[:, 2][None, :]
            shock = shock[:, :2]

        def score_full(v, space=space, data=data, q=q, base_logf=base_logf, shock=shock):
            _, flat = _stept_eval(space, space.eval_params(v), data, q, base_logf, shock, True)
            return flat @ space.jacobian(v)

        ll, flat = _stept_eval(space, space.eval_params(vec), data, q, base_logf, shock, True)
        scores = flat @ space.jacobian(vec)
        hess = _numeric_hessian_of_score(score_full, vec)
        steps.append(StepEstimate(
            step=t + 1, names=space.names, vec=vec, natural={"space": space},
            loglik=float(ll.sum()), converged=bool(sd["converged"]),
            iterations=int(sd["iterations"]), scores=scores, hessian=hess,
            floored=int(np.sum(ll <= LOG_FLOOR)),
            meta={"space": space, "eval_params": space.eval_params(vec), "variant": variant,
                  "production": space.production_spec(vec),
                  "invest_measures": space.measures(vec, "invest"),
                  "skill_measures": space.measures(vec, "skill"),
                  "quad": cfg.quad},
        ))
        prev_skill = steps[-1].meta["skill_measures"]
    model = assemble_model(steps, template)
    return IterativeEstimates(steps=steps, model=model,
                              converged=all(s.converged for s in steps),
                              config=cfg, synthetic_S=S)


def estimates_to_dict(est: IterativeEstimates) -> dict:
    from .model import model_to_dict

    fit = est.config
    model_doc = model_to_dict(est.model) if est.model is not None else None
    return {
        "estimator": "iterative",
        "converged": est.converged,
        "synthetic_draws": est.synthetic_S,
        "quadrature": {"draws": fit.quad.draws, "burn": fit.quad.burn,
                       "seed": fit.quad.seed},
        "seed": fit.seed,
        "fit_config": {
            "draws": fit.quad.draws, "burn": fit.quad.burn,
            "synthetic_draws": fit.synthetic_draws,
            "mixture_components": fit.mixture_components, "restarts": fit.restarts,
            "jitter_sd": fit.jitter_sd, "fix_intercepts": fit.fix_intercepts,
            "fix_first_skill_loadings": fit.fix_first_skill_loadings,
            "endogenous_investment": fit.endogenous_investment,
            "kde_density": fit.kde_density, "max_iter": fit.max_iter, "tol": fit.tol,
            "seed": fit.seed, "init_from_amn": fit.init_from_amn,
        },
        "steps": [
            {
                "step": s.step,
                "loglik": s.loglik,
                "converged": s.converged,
                "iterations": s.iterations,
                "floored": s.floored,
                "parameters": {name: float(v) for name, v in zip(s.names, s.vec)},
            }
            for s in est.steps
        ],
        "model": model_doc,
    }


def estimates_to_json(est: IterativeEstimates) -> str:
    return json.dumps(estimates_to_dict(est), indent=2, sort_keys=True)
