"""Multi-step score bootstrap: resample indices, then update each step's
parameter sub-vector by one Newton correction from cached scores and Hessians.
Later steps re-evaluate their scores at the bootstrap-shifted earlier
parameters (one score pass, no re-optimization), which is what carries the
estimation uncertainty of earlier steps into later ones.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .analysis import FeatureGrid, features_from_model
from .dgp import Dataset
from .iterative import (
    FitConfig,
    IterativeEstimates,
    StepEstimate,
    SyntheticState,
    assemble_model,
    base_skill_factors,
    propagate_synthetic,
    shock_grid,
    _build_stept_data,
    _silverman_bandwidth,
    _stept_eval,
)
from .model import ModelSpec


@dataclass(frozen=True)
class BootstrapConfig:
    n_draws: int = 500
    seed: int = 0
    compute_features: bool = True
    feature_n_sim: int = 50_000
    identity_resample: bool = False  # debug: resample is the identity permutation


@dataclass
class ScoreCache:
    """Read-only state shared by all bootstrap draws."""

    step_vecs: list[np.ndarray]
    scores: list[np.ndarray]  # per-observation scores at the point estimates
    hessians: list[np.ndarray]
    hessian_conds: list[float]
    mean_scores: list[np.ndarray]
    template: ModelSpec
    cfg: FitConfig
    synthetic_S: int


@dataclass
class BootstrapDraw:
    indices: np.ndarray
    tau_star: list[np.ndarray]
    valid: bool
    features: Optional[FeatureGrid] = None
    model: Optional[ModelSpec] = None
    wall_time: float = 0.0


def build_score_cache(estimates: IterativeEstimates, dataset: Dataset, cfg: Optional[FitConfig] = None) -> ScoreCache:
    """Cache per-observation scores and Hessians at the point estimates."""
    cfg = cfg if cfg is not None else estimates.config
    if not estimates.converged:
        raise ValueError("score cache requires a fully converged estimate")
    vecs, scores, hessians, conds, means = [], [], [], [], []
    for s in estimates.steps:
        cond = float(np.linalg.cond(s.hessian))
        if not np.isfinite(cond) or cond > 1e12:
            raise ValueError(f"step {s.step} Hessian is numerically singular (condition number {cond:.3g})")
        vecs.append(s.vec.copy())
        scores.append(s.scores.copy())
        hessians.append(s.hessian.copy())
        conds.append(cond)
        means.append(s.scores.mean(axis=0))
    template = estimates.model
    return ScoreCache(step_vecs=vecs, scores=scores, hessians=hessians, hessian_conds=conds,
                      mean_scores=means, template=template, cfg=cfg,
                      synthetic_S=estimates.synthetic_S)


def _shifted_steps(cache: ScoreCache, estimates: IterativeEstimates, tau_star: list[np.ndarray],
                   upto: int) -> list[StepEstimate]:
    """Lightweight step views with parameters replaced by tau_star[:upto+1]."""
    out = []
    for r, est in enumerate(estimates.steps[: upto + 1]):
        vec = tau_star[r]
        space = est.meta["space"]
        meta = dict(est.meta)
        if r == 0:
            meta["mixture"] = space.mixture(vec)
            meta["measures"] = space.measures(vec)
        else:
            meta["eval_params"] = space.eval_params(vec)
            meta["skill_measures"] = space.measures(vec, "skill")
            meta["invest_measures"] = space.measures(vec, "invest")
        shifted = StepEstimate(step=est.step, names=est.names, vec=vec, natural=est.natural,
                               loglik=est.loglik, converged=est.converged, iterations=est.iterations,
                               scores=est.scores, hessian=est.hessian, meta=meta)
        out.append(shifted)
    return out


def _stept_scores_at(cache: ScoreCache, estimates: IterativeEstimates, dataset: Dataset,
                     t: int, tau_star: list[np.ndarray]) -> np.ndarray:
    """Per-observation scores of step t at its point estimate, conditioning on
    the bootstrap-shifted earlier parameters."""
    cfg = cache.cfg
    shifted = _shifted_steps(cache, estimates, tau_star, upto=t)
    synthetic = propagate_synthetic(shifted, dataset, t, cache.synthetic_S, cfg, seed=cfg.seed)
    est = estimates.steps[t + 1]
    space = est.meta["space"]
    prev_skill = shifted[0].meta["measures"] if t == 0 else shifted[t].meta["skill_measures"]
    data = _build_stept_data(dataset, t, space.anchor)
    base_logf = base_skill_factors(prev_skill, dataset.Z_skill[:, t, :], synthetic.draws)
    shock = shock_grid(synthetic.S, cfg.quad.burn, cfg.kde_density, dim_offset=2 + 2 * t)
    q = synthetic.draws
    if cfg.kde_density:
        q = q + _silverman_bandwidth(q)[:, None] * shock[:, 2][None, :]
        shock = shock[:, :2]
    _, flat = _stept_eval(space, space.eval_params(est.vec), data, q, base_logf, shock, True)
    return flat @ space.jacobian(est.vec)


def bootstrap_replicate(cache: ScoreCache, estimates: IterativeEstimates, dataset: Dataset,
                        seed: int, identity_resample: bool = False) -> BootstrapDraw:
    """One bootstrap draw: resample, then chain the per-step Newton updates."""
    t0 = time.perf_counter()
    n = dataset.n
    rng = np.random.default_rng(seed)
    idx = np.arange(n) if identity_resample else rng.integers(0, n, size=n)
    tau_star: list[np.ndarray] = []
    valid = True
    # step 1: cached scores re-indexed by the resample
    delta = cache.scores[0][idx].mean(axis=0) - cache.mean_scores[0]
    upd = np.linalg.solve(cache.hessians[0], delta)
    tau_star.append(cache.step_vecs[0] - upd)
    T = len(estimates.steps) - 1
    for t in range(T):
        try:
            s_shift = _stept_scores_at(cache, estimates, dataset, t, tau_star)
        except (ValueError, FloatingPointError):
            valid = False
            break
        if not np.all(np.isfinite(s_shift)):
            valid = False
            break
        delta = s_shift[idx].mean(axis=0) - cache.mean_scores[t + 1]
        upd = np.linalg.solve(cache.hessians[t + 1], delta)
        tau_star.append(cache.step_vecs[t + 1] - upd)
        if not np.all(np.isfinite(tau_star[-1])):
            valid = False
            break
    draw = BootstrapDraw(indices=idx, tau_star=tau_star, valid=valid)
    draw.wall_time = time.perf_counter() - t0
    return draw


def draw_model(cache: ScoreCache, estimates: IterativeEstimates, draw: BootstrapDraw) -> ModelSpec:
    """Estimated model implied by one draw's shifted parameters."""
    shifted = _shifted_steps(cache, estimates, draw.tau_star, upto=len(draw.tau_star) - 1)
    return assemble_model(shifted, cache.template)


@dataclass
class BootstrapResult:
    draws: list[BootstrapDraw]
    invalid: int
    intervals: dict
    feature_draws: dict
    per_draw_seconds: float


def run_bootstrap(estimates: IterativeEstimates, dataset: Dataset, boot_cfg: BootstrapConfig,
                  cache: Optional[ScoreCache] = None) -> BootstrapResult:
    """B draws plus per-draw feature recomputation and percentile intervals."""
    cache = cache if cache is not None else build_score_cache(estimates, dataset)
    draws = []
    feature_draws: dict[str, list] = {}
    total = 0.0
    for b in range(boot_cfg.n_draws):
        seed = int(np.random.SeedSequence([boot_cfg.seed, b]).generate_state(1)[0])
        draw = bootstrap_replicate(cache, estimates, dataset, seed,
                                   identity_resample=boot_cfg.identity_resample)
        if draw.valid and boot_cfg.compute_features:
            t0 = time.perf_counter()
            try:
                model = draw_model(cache, estimates, draw)
                draw.model = model
                draw.features = features_from_model(model, n_sim=boot_cfg.feature_n_sim,
                                                    seed=boot_cfg.seed)
            except (ValueError, FloatingPointError):
                draw.valid = False
            draw.wall_time += time.perf_counter() - t0
        if draw.valid and draw.features is not None:
            for name, vals in draw.features.values.items():
                feature_draws.setdefault(name, []).append(vals)
        total += draw.wall_time
        draws.append(draw)
    invalid = sum(1 for d in draws if not d.valid)
    intervals = {}
    for name, stack in feature_draws.items():
        arr = np.array(stack)
        if arr.shape[0] >= 100:
            lo, hi = ci_percentile(arr, 0.95)
            intervals[name] = {"low": lo.tolist(), "high": hi.tolist()}
    return BootstrapResult(draws=draws, invalid=invalid, intervals=intervals,
                           feature_draws={k: np.array(v) for k, v in feature_draws.items()},
                           per_draw_seconds=total / max(len(draws), 1))


def ci_percentile(draw_values: np.ndarray, level: float = 0.95):
    """Equal-tailed percentile interval of the bootstrap feature distribution.

    Accepts (B,) or (B, grid); needs at least 100 valid draws."""
    arr = np.asarray(draw_values, dtype=float)
    if arr.shape[0] < 100:
        raise ValueError(f"need at least 100 valid draws, got {arr.shape[0]}")
    alpha = (1.0 - level) / 2.0
    lo = np.quantile(arr, alpha, axis=0)
    hi = np.quantile(arr, 1.0 - alpha, axis=0)
    return lo, hi


def draws_to_csv_rows(estimates: IterativeEstimates, draws: list[BootstrapDraw]):
    """One row per (draw, step, parameter): draw index, step, name, value."""
    rows = []
    for b, d in enumerate(draws):
        if not d.valid:
            continue
        for s, vec in zip(estimates.steps, d.tau_star):
            for name, val in zip(s.names, vec):
                rows.append((b, s.step, name, float(val)))
    return rows


def intervals_to_json(result: BootstrapResult, alphas) -> str:
    doc = {
        "n_draws": len(result.draws),
        "invalid": result.invalid,
        "per_draw_seconds": result.per_draw_seconds,
        "alphas": list(np.asarray(alphas, dtype=float)),
        "intervals": result.intervals,
    }
    return json.dumps(doc, indent=2, sort_keys=True)
