"""Parametric objects of the dynamic latent skill model: production technology,
measurement system, investment and anchor equations, and whole-model validation.

All types are immutable after construction; all evaluators are pure functions
vectorized over numpy arrays.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.special import log_ndtr

from .numkit import GaussianMixture

_LOG_2PI = float(np.log(2.0 * np.pi))

# Below this |sigma| the CES transition is evaluated through its analytic
# sigma -> 0 expansion to avoid catastrophic cancellation.
CES_SIGMA_SWITCH = 1e-4


class DomainError(ValueError):
    """Production-function evaluation left its mathematical domain."""


# ---------------------------------------------------------------------------
# Production technology
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CobbDouglas:
    a: float
    gamma1: float
    gamma2: float


@dataclass(frozen=True)
class TransLog:
    a: float
    gamma1: float
    gamma2: float
    gamma3: float


@dataclass(frozen=True)
class CES:
    scale: float  # multiplicative level A, enters as ln A
    gamma1: float
    gamma2: float
    sigma: float
    psi: float

    def __post_init__(self) -> None:
        for name in ("gamma1", "gamma2", "sigma", "psi"):
            if getattr(self, name) == 0.0:
                raise ValueError(f"CES requires nonzero {name} (weak-identification guard)")
        if self.scale <= 0.0:
            raise ValueError("CES scale must be positive")


@dataclass(frozen=True)
class ProductionSpec:
    fn: CobbDouglas | TransLog | CES
    shock_sd: float
    control_loading: float = 0.0  # kappa_t; 0 when investment is exogenous

    def __post_init__(self) -> None:
        if not self.shock_sd > 0.0:
            raise ValueError(f"shock_sd must be > 0, got {self.shock_sd}")


def _ces_log_output(fn: CES, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    g1, g2, sig, psi = fn.gamma1, fn.gamma2, fn.sigma, fn.psi
    la = np.log(fn.scale)
    if abs(sig) < CES_SIGMA_SWITCH:
        # Expansion of (psi/sig) * ln(g1 e^{sig x} + g2 e^{sig y}) around sig = 0,
        # keeping the first-order term in sig.
        g = g1 + g2
        if g <= 0:
            raise DomainError(f"CES share sum gamma1+gamma2 = {g} is not positive")
        w1 = (g1 * x + g2 * y) / g
        w2 = (g1 * x**2 + g2 * y**2) / (2.0 * g)
        return la + psi * (np.log(g) / sig + w1 + sig * (w2 - 0.5 * w1**2))
    ax, ay = sig * x, sig * y
    m = np.maximum(ax, ay)
    inner = g1 * np.exp(ax - m) + g2 * np.exp(ay - m)
    if np.any(inner <= 0.0):
        raise DomainError("CES argument gamma1*theta^sigma + gamma2*I^sigma is not positive")
    return la + (psi / sig) * (m + np.log(inner))


def _check_finite(ln_theta, ln_invest) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(ln_theta, dtype=float)
    y = np.asarray(ln_invest, dtype=float)
    if not np.all(np.isfinite(x)):
        raise DomainError("ln_theta contains a non-finite value")
    if not np.all(np.isfinite(y)):
        raise DomainError("ln_invest contains a non-finite value")
    return x, y


def production_log_output(spec: ProductionSpec, ln_theta, ln_invest):
    """Deterministic part of next-period log skills, f(ln theta_t, ln I_t)."""
    x, y = _check_finite(ln_theta, ln_invest)
    fn = spec.fn
    if isinstance(fn, CobbDouglas):
        out = fn.a + fn.gamma1 * x + fn.gamma2 * y
    elif isinstance(fn, TransLog):
        out = fn.a + fn.gamma1 * x + fn.gamma2 * y + fn.gamma3 * x * y
    elif isinstance(fn, CES):
        out = _ces_log_output(fn, x, y)
    else:  # pragma: no cover
        raise TypeError(f"unknown production variant {type(fn)}")
    if not np.all(np.isfinite(out)):
        raise DomainError("production output overflowed (exp(sigma * input) too large)")
    return out if isinstance(out, np.ndarray) and out.ndim else float(out)


def _ces_skill_share(fn: CES, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    ax, ay = fn.sigma * x, fn.sigma * y
    m = np.maximum(ax, ay)
    t1 = fn.gamma1 * np.exp(ax - m)
    t2 = fn.gamma2 * np.exp(ay - m)
    denom = t1 + t2
    if np.any(denom <= 0.0):
        raise DomainError("CES argument gamma1*theta^sigma + gamma2*I^sigma is not positive")
    return t1 / denom


def elasticity_skill(spec: ProductionSpec, ln_theta, ln_invest):
    """d ln theta_{t+1} / d ln theta_t at the given point."""
    x, y = _check_finite(ln_theta, ln_invest)
    fn = spec.fn
    if isinstance(fn, CobbDouglas):
        out = np.broadcast_to(fn.gamma1, np.broadcast_shapes(x.shape, y.shape)).astype(float)
    elif isinstance(fn, TransLog):
        out = fn.gamma1 + fn.gamma3 * y + 0.0 * x
    else:
        out = fn.psi * _ces_skill_share(fn, x, y)
    return out if isinstance(out, np.ndarray) and out.ndim else float(out)


def elasticity_invest(spec: ProductionSpec, ln_theta, ln_invest):
    """d ln theta_{t+1} / d ln I_t at the given point."""
    x, y = _check_finite(ln_theta, ln_invest)
    fn = spec.fn
    if isinstance(fn, CobbDouglas):
        out = np.broadcast_to(fn.gamma2, np.broadcast_shapes(x.shape, y.shape)).astype(float)
    elif isinstance(fn, TransLog):
        out = fn.gamma2 + fn.gamma3 * x + 0.0 * y
    else:
        out = fn.psi * (1.0 - _ces_skill_share(fn, x, y))
    return out if isinstance(out, np.ndarray) and out.ndim else float(out)


# ---------------------------------------------------------------------------
# Measurement system
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MeasurementParams:
    """One measurement equation: continuous linear-in-log-latent, or binary probit."""

    kind: str  # "continuous" | "binary"
    mu: float
    loading: float
    error_sd: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in ("continuous", "binary"):
            raise ValueError(f"unknown measurement kind {self.kind!r}")
        if self.loading == 0.0:
            raise ValueError("measurement loading must be nonzero")
        if self.kind == "continuous":
            if not self.error_sd > 0.0:
                raise ValueError(f"error_sd must be > 0, got {self.error_sd}")
        elif self.error_sd != 1.0:
            # probit scale is not separately identified
            raise ValueError("binary measures fix error_sd = 1")


def measurement_loglik(params: MeasurementParams, z, ln_latent):
    """Log density (continuous) or log probability (binary) of one measure."""
    z = np.asarray(z, dtype=float)
    q = np.asarray(ln_latent, dtype=float)
    if params.kind == "continuous":
        resid = z - params.mu - params.loading * q
        out = -0.5 * (_LOG_2PI + (resid / params.error_sd) ** 2) - np.log(params.error_sd)
    else:
        if not np.all((z == 0.0) | (z == 1.0)):
            raise ValueError("binary measure values must be 0 or 1")
        index = params.mu + params.loading * q
        out = np.where(z == 1.0, log_ndtr(index), log_ndtr(-index))
    return out if isinstance(out, np.ndarray) and out.ndim else float(out)


# ---------------------------------------------------------------------------
# Investment and anchor equations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InvestmentParams:
    beta0: float
    beta1: float
    beta2: float
    eta_sd: float

    def __post_init__(self) -> None:
        if not self.eta_sd > 0.0:
            raise ValueError(f"eta_sd must be > 0, got {self.eta_sd}")


@dataclass(frozen=True)
class AnchorParams:
    rho0: float = 0.0
    rho1: float = 1.0
    eta_sd: float = 1.0
    present: bool = False

    def __post_init__(self) -> None:
        if self.present:
            if self.rho1 == 0.0:
                raise ValueError("anchor slope rho1 must be nonzero")
            if not self.eta_sd > 0.0:
                raise ValueError(f"anchor eta_sd must be > 0, got {self.eta_sd}")


# ---------------------------------------------------------------------------
# Full model
# ---------------------------------------------------------------------------

TL_SCHEME = "TL-scheme"
CES_SCHEME = "CES-scheme"


@dataclass(frozen=True)
class ModelSpec:
    """Complete parametric description of the model across all periods.

    Periods: transitions t = 0..T-1; skills measured at t = 0..T, investment
    at t = 0..T-1. `initial` is the joint distribution of (ln theta_0, ln Y_0).
    """

    T: int
    M: int
    production: tuple[ProductionSpec, ...]
    skill_measures: tuple[tuple[MeasurementParams, ...], ...]  # (T+1, M)
    invest_measures: tuple[tuple[MeasurementParams, ...], ...]  # (T, M)
    investment: tuple[InvestmentParams, ...]
    anchor: AnchorParams
    initial: GaussianMixture
    normalization: str = TL_SCHEME

    def __post_init__(self) -> None:
        if self.T < 1:
            raise ValueError(f"T must be >= 1, got {self.T}")
        if self.M < 2:
            raise ValueError(f"M must be >= 2, got {self.M}")
        if self.normalization not in (TL_SCHEME, CES_SCHEME):
            raise ValueError(f"unknown normalization scheme {self.normalization!r}")
        object.__setattr__(self, "production", tuple(self.production))
        object.__setattr__(self, "skill_measures", tuple(tuple(row) for row in self.skill_measures))
        object.__setattr__(self, "invest_measures", tuple(tuple(row) for row in self.invest_measures))
        object.__setattr__(self, "investment", tuple(self.investment))
        if len(self.production) != self.T:
            raise ValueError("need one ProductionSpec per transition period")
        if len(self.skill_measures) != self.T + 1 or any(len(r) != self.M for r in self.skill_measures):
            raise ValueError("skill_measures must be (T+1) x M")
        if len(self.invest_measures) != self.T or any(len(r) != self.M for r in self.invest_measures):
            raise ValueError("invest_measures must be T x M")
        if len(self.investment) != self.T:
            raise ValueError("need one InvestmentParams per transition period")
        if self.initial.dim != 2:
            raise ValueError("initial mixture must be over (ln theta_0, ln Y_0)")


def validate_normalization(model: ModelSpec) -> list[str]:
    """Check the declared scheme's equalities; returns violations, never raises."""
    out: list[str] = []

    def check(value: float, target: float, label: str) -> None:
        if value != target:
            out.append(f"{label} = {value} (expected {target})")

    if model.normalization == TL_SCHEME:
        for t in range(model.T + 1):
            check(model.skill_measures[t][0].mu, 0.0, f"skill t={t} m=1 intercept")
            check(model.skill_measures[t][0].loading, 1.0, f"skill t={t} m=1 loading")
        for t in range(model.T):
            check(model.invest_measures[t][0].mu, 0.0, f"invest t={t} m=1 intercept")
            check(model.invest_measures[t][0].loading, 1.0, f"invest t={t} m=1 loading")
    else:
        for t in range(model.T + 1):
            check(model.skill_measures[t][0].mu, 0.0, f"skill t={t} m=1 intercept")
        for t in range(model.T):
            if model.invest_measures[t][0].mu != 0.0 and model.investment[t].beta0 != 0.0:
                out.append(
                    f"invest t={t}: neither the m=1 intercept ({model.invest_measures[t][0].mu}) "
                    f"nor beta0 ({model.investment[t].beta0}) is 0"
                )
        for t, prod in enumerate(model.production):
            if isinstance(prod.fn, CES):
                check(prod.fn.psi, 1.0, f"production t={t} psi")
        check(model.skill_measures[0][0].loading, 1.0, "skill t=0 m=1 loading")
    return out


# ---------------------------------------------------------------------------
# JSON serialization
# ---------------------------------------------------------------------------


def _take(d: dict, keys: set[str], what: str) -> None:
    unknown = set(d) - keys
    if unknown:
        raise ValueError(f"unknown fields in {what}: {sorted(unknown)}")


def _production_to_dict(p: ProductionSpec) -> dict:
    fn = p.fn
    if isinstance(fn, CobbDouglas):
        fd = {"variant": "cobb-douglas", "a": fn.a, "gamma1": fn.gamma1, "gamma2": fn.gamma2}
    elif isinstance(fn, TransLog):
        fd = {"variant": "translog", "a": fn.a, "gamma1": fn.gamma1, "gamma2": fn.gamma2, "gamma3": fn.gamma3}
    else:
        fd = {"variant": "ces", "scale": fn.scale, "gamma1": fn.gamma1, "gamma2": fn.gamma2,
              "sigma": fn.sigma, "psi": fn.psi}
    return {"fn": fd, "shock_sd": p.shock_sd, "control_loading": p.control_loading}


def _production_from_dict(d: dict) -> ProductionSpec:
    _take(d, {"fn", "shock_sd", "control_loading"}, "production")
    fd = dict(d["fn"])
    variant = fd.pop("variant")
    if variant == "cobb-douglas":
        _take(fd, {"a", "gamma1", "gamma2"}, "cobb-douglas fn")
        fn = CobbDouglas(**fd)
    elif variant == "translog":
        _take(fd, {"a", "gamma1", "gamma2", "gamma3"}, "translog fn")
        fn = TransLog(**fd)
    elif variant == "ces":
        _take(fd, {"scale", "gamma1", "gamma2", "sigma", "psi"}, "ces fn")
        fn = CES(**fd)
    else:
        raise ValueError(f"unknown production variant {variant!r}")
    return ProductionSpec(fn=fn, shock_sd=d["shock_sd"], control_loading=d.get("control_loading", 0.0))


def _measurement_to_dict(m: MeasurementParams) -> dict:
    return {"kind": m.kind, "mu": m.mu, "loading": m.loading, "error_sd": m.error_sd}


def _measurement_from_dict(d: dict) -> MeasurementParams:
    _take(d, {"kind", "mu", "loading", "error_sd"}, "measurement")
    return MeasurementParams(**d)


def model_to_dict(model: ModelSpec) -> dict:
    return {
        "T": model.T,
        "M": model.M,
        "normalization": model.normalization,
        "production": [_production_to_dict(p) for p in model.production],
        "skill_measures": [[_measurement_to_dict(m) for m in row] for row in model.skill_measures],
        "invest_measures": [[_measurement_to_dict(m) for m in row] for row in model.invest_measures],
        "investment": [
            {"beta0": v.beta0, "beta1": v.beta1, "beta2": v.beta2, "eta_sd": v.eta_sd} for v in model.investment
        ],
        "anchor": {"rho0": model.anchor.rho0, "rho1": model.anchor.rho1,
                   "eta_sd": model.anchor.eta_sd, "present": model.anchor.present},
        "initial": {
            "weights": model.initial.weights.tolist(),
            "means": model.initial.means.tolist(),
            "covs": model.initial.covs.tolist(),
        },
    }


def model_from_dict(d: dict) -> ModelSpec:
    _take(d, {"T", "M", "normalization", "production", "skill_measures", "invest_measures",
              "investment", "anchor", "initial"}, "model")
    inv = []
    for v in d["investment"]:
        _take(v, {"beta0", "beta1", "beta2", "eta_sd"}, "investment")
        inv.append(InvestmentParams(**v))
    anchor_d = dict(d["anchor"])
    _take(anchor_d, {"rho0", "rho1", "eta_sd", "present"}, "anchor")
    init_d = dict(d["initial"])
    _take(init_d, {"weights", "means", "covs"}, "initial")
    return ModelSpec(
        T=d["T"],
        M=d["M"],
        normalization=d["normalization"],
        production=tuple(_production_from_dict(p) for p in d["production"]),
        skill_measures=tuple(tuple(_measurement_from_dict(m) for m in row) for row in d["skill_measures"]),
        invest_measures=tuple(tuple(_measurement_from_dict(m) for m in row) for row in d["invest_measures"]),
        investment=tuple(inv),
        anchor=AnchorParams(**anchor_d),
        initial=GaussianMixture(
            weights=np.array(init_d["weights"]),
            means=np.array(init_d["means"]),
            covs=np.array(init_d["covs"]),
        ),
    )


def model_to_json(model: ModelSpec) -> str:
    return json.dumps(model_to_dict(model), indent=2, sort_keys=True)


def model_from_json(text: str) -> ModelSpec:
    return model_from_dict(json.loads(text))
