"""Reported model features: elasticities over quantile grids, quantile effects,
counterfactual income experiments, quantile paths, and bias/std tables.

Every feature is a function of a fully specified model (true or estimated), so
truth and estimates flow through the same code path.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dgp import simulate_latents
from .model import ModelSpec, elasticity_invest, elasticity_skill, production_log_output
from .numkit import mixture_sample

DEFAULT_ALPHAS = tuple(round(0.1 * k, 1) for k in range(1, 10))

SCENARIOS = ("baseline", "shift-t0", "shift-t1", "median-both", "targeted-below-median")


@dataclass(frozen=True)
class Scenario:
    variant: str
    shift_sd: float = 2.0
    scale: str = "level"  # "level": shift Y by k sd(Y); "log": shift ln Y by k sd(ln Y)

    def __post_init__(self) -> None:
        if self.variant not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.variant!r}; expected one of {SCENARIOS}")
        if self.scale not in ("log", "level"):
            raise ValueError(f"unknown shift scale {self.scale!r}")
        if self.variant.startswith("shift") or self.variant == "targeted-below-median":
            if not self.shift_sd > 0.0:
                raise ValueError("shift size must be positive for shift scenarios")


@dataclass(frozen=True)
class FeatureGrid:
    """Feature values on the quantile grid, keyed by feature name."""

    alphas: np.ndarray
    values: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        a = np.asarray(self.alphas, dtype=float)
        if np.any(a <= 0.0) or np.any(a >= 1.0) or np.any(np.diff(a) <= 0.0):
            raise ValueError("alpha grid must be strictly increasing inside (0, 1)")
        object.__setattr__(self, "alphas", a)


class LatentSim:
    """Simulated latent paths under a model, with quantile and CDF lookups."""

    def __init__(self, model: ModelSpec, n_sim: int, seed: int):
        if n_sim < 1000:
            raise ValueError("n_sim too small for quantile estimation")
        self.model = model
        ln_theta, ln_invest, ln_y, _, _ = simulate_latents(model, n_sim, seed)
        self.ln_theta = ln_theta
        self.ln_invest = ln_invest
        self.ln_y = ln_y
        self._sorted_theta = np.sort(ln_theta, axis=0)

    def q_theta(self, t: int, alphas) -> np.ndarray:
        return np.quantile(self.ln_theta[:, t], alphas)

    def q_invest(self, t: int, alphas) -> np.ndarray:
        return np.quantile(self.ln_invest[:, t], alphas)

    def cdf_theta(self, t: int, x) -> np.ndarray:
        col = self._sorted_theta[:, t]
        return np.searchsorted(col, np.asarray(x, dtype=float), side="right") / col.shape[0]


def latent_quantiles(model: ModelSpec, n_sim: int = 100_000, seed: int = 11) -> LatentSim:
    """Empirical latent quantiles/CDFs from simulated paths under the model."""
    return LatentSim(model, n_sim, seed)


def elasticity_profile(model: ModelSpec, which: str, t: int, alphas=DEFAULT_ALPHAS,
                       sim: Optional[LatentSim] = None, n_sim: int = 100_000, seed: int = 11) -> FeatureGrid:
    """Production elasticity along one latent's quantiles, the other at its median."""
    if which not in ("skill", "invest"):
        raise ValueError("which must be 'skill' or 'invest'")
    sim = sim if sim is not None else latent_quantiles(model, n_sim, seed)
    alphas = np.asarray(alphas, dtype=float)
    if which == "skill":
        lt = sim.q_theta(t, alphas)
        li = np.full_like(lt, sim.q_invest(t, 0.5))
        vals = elasticity_skill(model.production[t], lt, li)
    else:
        li = sim.q_invest(t, alphas)
        lt = np.full_like(li, sim.q_theta(t, 0.5))
        vals = elasticity_invest(model.production[t], lt, li)
    return FeatureGrid(alphas=alphas, values={f"{which}_elasticity_t{t}": np.asarray(vals)})


def quantile_effect(model: ModelSpec, t: int, alpha1: float, alpha2: float,
                    sim: Optional[LatentSim] = None, n_sim: int = 100_000, seed: int = 11) -> float:
    """Rank in the period-(t+1) skill distribution reached by the deterministic
    production output at the given input quantiles (shocks at their medians)."""
    sim = sim if sim is not None else latent_quantiles(model, n_sim, seed)
    lt = sim.q_theta(t, alpha1)
    li = sim.q_invest(t, alpha2)
    out = production_log_output(model.production[t], lt, li)
    return float(sim.cdf_theta(t + 1, out))


def _apply_scenario(scenario: Scenario, ln_theta0: np.ndarray, ln_y: np.ndarray, T: int) -> np.ndarray:
    """Per-period log incomes (n, T) under a counterfactual income change."""
    ln_y_t = np.tile(ln_y[:, None], (1, T)).astype(float)
    if scenario.variant == "baseline":
        return ln_y_t

    if scenario.scale == "log":
        sd = float(np.std(ln_y))

        def shifted(col):
            return col + scenario.shift_sd * sd
    else:
        sd_level = float(np.std(np.exp(ln_y)))

        def shifted(col):
            return np.log(np.exp(col) + scenario.shift_sd * sd_level)

    if scenario.variant == "shift-t0":
        ln_y_t[:, 0] = shifted(ln_y_t[:, 0])
    elif scenario.variant == "shift-t1":
        if T < 2:
            raise ValueError("shift-t1 requires at least two periods")
        ln_y_t[:, 1] = shifted(ln_y_t[:, 1])
    elif scenario.variant == "median-both":
        ln_y_t[:, :] = np.median(ln_y)
    else:  # targeted-below-median
        mask = (ln_theta0 < np.median(ln_theta0)) & (ln_y < np.median(ln_y))
        ln_y_t[mask, :] = shifted(ln_y_t[mask, :].T).T
    return ln_y_t


@dataclass(frozen=True)
class CdfResult:
    grid: np.ndarray
    cdf: np.ndarray
    samples: np.ndarray
    scenario: str


def _propagate_at_medians(model: ModelSpec, ln_theta0: np.ndarray, ln_y_t: np.ndarray) -> np.ndarray:
    """Deterministic propagation to period-T log skills with all shocks at 0."""
    lt = ln_theta0
    for t in range(model.T):
        iv = model.investment[t]
        li = iv.beta0 + iv.beta1 * lt + iv.beta2 * ln_y_t[:, t]
        lt = production_log_output(model.production[t], lt, li)
    return lt


def counterfactual_distribution(model: ModelSpec, scenario: Scenario, measure: int = 0,
                                n_sim: int = 100_000, seed: int = 11, grid_size: int = 512) -> CdfResult:
    """Empirical CDF of the chosen period-T skill measure under the scenario.

    Initial (ln theta_0, ln Y_0) keep their estimated joint distribution; all
    shocks and measurement errors sit at their medians (zero).
    """
    start = mixture_sample(model.initial, n_sim, seed)
    ln_theta0, ln_y = start[:, 0], start[:, 1]
    ln_y_t = _apply_scenario(scenario, ln_theta0, ln_y, model.T)
    lt_final = _propagate_at_medians(model, ln_theta0, ln_y_t)
    mp = model.skill_measures[model.T][measure]
    z = mp.mu + mp.loading * lt_final
    lo, hi = np.quantile(z, [0.001, 0.999])
    grid = np.linspace(lo, hi, grid_size)
    cdf = np.searchsorted(np.sort(z), grid, side="right") / z.shape[0]
    return CdfResult(grid=grid, cdf=cdf, samples=z, scenario=scenario.variant)


def quantile_path(model: ModelSpec, transfer_period: int, alphas=DEFAULT_ALPHAS,
                  n_sim: int = 100_000, seed: int = 11, shift_sd: float = 2.0,
                  measure: int = 0, scale: str = "level") -> FeatureGrid:
    """Standardized change in skill-distribution quantiles from an income
    transfer in one period: (Q_a(counterfactual) - Q_a(baseline)) / sd(baseline)."""
    scen = Scenario(variant=f"shift-t{transfer_period}", shift_sd=shift_sd, scale=scale)
    base = counterfactual_distribution(model, Scenario("baseline"), measure, n_sim, seed)
    cf = counterfactual_distribution(model, scen, measure, n_sim, seed)
    alphas = np.asarray(alphas, dtype=float)
    qb = np.quantile(base.samples, alphas)
    qc = np.quantile(cf.samples, alphas)
    sd = float(np.std(base.samples))
    return FeatureGrid(alphas=alphas, values={f"quantile_path_t{transfer_period}": (qc - qb) / sd})


def features_from_model(model: ModelSpec, n_sim: int = 100_000, seed: int = 11,
                        alphas=DEFAULT_ALPHAS) -> FeatureGrid:
    """All reported features of a model on the standard quantile grid."""
    alphas = np.asarray(alphas, dtype=float)
    sim = latent_quantiles(model, n_sim, seed)
    values: dict[str, np.ndarray] = {}
    for t in range(model.T):
        values.update(elasticity_profile(model, "skill", t, alphas, sim=sim).values)
        values.update(elasticity_profile(model, "invest", t, alphas, sim=sim).values)
        values[f"skill_effect_t{t}"] = np.array(
            [quantile_effect(model, t, a, 0.5, sim=sim) for a in alphas])
        values[f"invest_effect_t{t}"] = np.array(
            [quantile_effect(model, t, 0.5, a, sim=sim) for a in alphas])
    for tp in range(min(model.T, 2)):
        values.update(quantile_path(model, tp, alphas, n_sim=n_sim, seed=seed).values)
    return FeatureGrid(alphas=alphas, values=values, meta={"n_sim": n_sim, "seed": seed})


def feature_table(replications: list[FeatureGrid], truth: FeatureGrid) -> list[dict]:
    """Average absolute bias and std per feature, averaged over the alpha grid.

    Bias at each alpha is |mean over replications - truth|; the table reports
    its average, so all biases are positive.
    """
    if len(replications) < 2:
        raise ValueError("need at least 2 replications")
    rows = []
    for name, true_vals in truth.values.items():
        stack = np.array([rep.values[name] for rep in replications])  # (R, n_alpha)
        bias = np.abs(stack.mean(axis=0) - true_vals)
        std = stack.std(axis=0, ddof=1)
        rows.append({
            "feature": name,
            "bias": float(bias.mean()),
            "std": float(std.mean()),
            "replications": stack.shape[0],
        })
    return rows
