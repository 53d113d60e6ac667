"""Quasi-Monte-Carlo machinery, Gaussian mixture utilities, and generic
numerical helpers (optimizer driver, finite differences, reparameterizations).

Everything here is pure and reentrant; grids and samples are deterministic
functions of their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.special import ndtri

_PRIMES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71)

_LOG_2PI = float(np.log(2.0 * np.pi))


# ---------------------------------------------------------------------------
# Halton sequences
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HaltonGrid:
    """Deterministic low-discrepancy grid on (0,1)^dims."""

    dims: int
    count: int
    burn: int
    points: np.ndarray  # (count, dims), strictly inside (0,1)


def _radical_inverse(indices: np.ndarray, base: int) -> np.ndarray:
    """Vectorized radical inverse of positive integer indices in the given base."""
    idx = indices.astype(np.int64).copy()
    out = np.zeros(idx.shape, dtype=np.float64)
    f = 1.0 / base
    while idx.any():
        out += f * (idx % base)
        idx //= base
        f /= base
    return out


def halton_points(dims: int, count: int, burn: int = 0) -> HaltonGrid:
    """First `count` Halton points in the first `dims` prime bases, after
    skipping `burn` leading points. Index 0 (the origin) is never emitted."""
    if not 1 <= dims <= len(_PRIMES):
        raise ValueError(f"dims must be in [1, {len(_PRIMES)}], got {dims}")
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if burn < 0:
        raise ValueError(f"burn must be >= 0, got {burn}")
    indices = np.arange(1 + burn, 1 + burn + count)
    pts = np.empty((count, dims))
    for d in range(dims):
        pts[:, d] = _radical_inverse(indices, _PRIMES[d])
    return HaltonGrid(dims=dims, count=count, burn=burn, points=pts)


def to_normal(grid: HaltonGrid) -> np.ndarray:
    """Map a uniform grid to standard-normal points via the normal quantile."""
    return ndtri(grid.points)


@dataclass(frozen=True)
class QuadratureConfig:
    """Draw budget for quasi-Monte-Carlo integrals."""

    draws: int = 10_000
    burn: int = 20
    seed: int = 0

    def __post_init__(self) -> None:
        if self.draws < 100:
            raise ValueError(f"draws must be >= 100, got {self.draws}")


def quasi_mc_expectation(g, dims: int, cfg: QuadratureConfig) -> float:
    """E[g(xi)] for xi ~ N(0, I_dims), averaged over a Halton-normal grid.

    `g` receives the full (draws, dims) array and must return one value per row.
    """
    pts = to_normal(halton_points(dims, cfg.draws, cfg.burn))
    vals = np.asarray(g(pts), dtype=float).reshape(-1)
    if vals.shape[0] != cfg.draws:
        raise ValueError(f"g returned {vals.shape[0]} values for {cfg.draws} points")
    bad = ~np.isfinite(vals)
    if bad.any():
        raise ValueError(f"g returned a non-finite value at point index {int(np.nonzero(bad)[0][0])}")
    return float(vals.mean())


# ---------------------------------------------------------------------------
# Gaussian mixtures
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GaussianMixture:
    """Weighted mixture of multivariate normals with full covariances."""

    weights: np.ndarray  # (L,)
    means: np.ndarray  # (L, d)
    covs: np.ndarray  # (L, d, d)
    _chols: np.ndarray = field(init=False, repr=False, compare=False)

    def __eq__(self, other) -> bool:
        if not isinstance(other, GaussianMixture):
            return NotImplemented
        return (
            np.array_equal(self.weights, other.weights)
            and np.array_equal(self.means, other.means)
            and np.array_equal(self.covs, other.covs)
        )

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=float)
        m = np.atleast_2d(np.asarray(self.means, dtype=float))
        c = np.asarray(self.covs, dtype=float)
        if c.ndim == 2:
            c = c[None, :, :]
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "covs", c)
        L, d = m.shape
        if w.shape != (L,) or c.shape != (L, d, d):
            raise ValueError("inconsistent mixture shapes")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be nonnegative and sum to 1 within 1e-12")
        chols = np.empty_like(c)
        for l in range(L):
            if not np.allclose(c[l], c[l].T, atol=1e-10):
                raise ValueError(f"covariance of component {l} is not symmetric")
            try:
                chols[l] = np.linalg.cholesky(c[l])
            except np.linalg.LinAlgError as exc:
                raise ValueError(f"covariance of component {l} is not positive definite") from exc
        object.__setattr__(self, "_chols", chols)

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]


def gaussian_logpdf(x: np.ndarray, mean: np.ndarray, chol: np.ndarray) -> np.ndarray:
    """Log density of N(mean, L L') at rows of x, using the Cholesky factor L."""
    x = np.atleast_2d(x)
    dev = x - mean
    sol = np.linalg.solve(chol, dev.T)  # lower-triangular solve would do; covs are small
    quad = np.sum(sol * sol, axis=0)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    d = x.shape[1]
    return -0.5 * (d * _LOG_2PI + logdet + quad)


def mixture_logpdf(mix: GaussianMixture, x: np.ndarray) -> np.ndarray | float:
    """Log mixture density at x, max-shift stabilized. Accepts (d,) or (n, d)."""
    x = np.asarray(x, dtype=float)
    scalar = x.ndim == 1
    pts = np.atleast_2d(x)
    if pts.shape[1] != mix.dim:
        raise ValueError(f"x has dimension {pts.shape[1]}, mixture has {mix.dim}")
    comp = np.stack(
        [np.log(mix.weights[l]) + gaussian_logpdf(pts, mix.means[l], mix._chols[l]) for l in range(mix.n_components)],
        axis=1,
    )  # (n, L)
    m = comp.max(axis=1)
    out = m + np.log(np.exp(comp - m[:, None]).sum(axis=1))
    return float(out[0]) if scalar else out


def mixture_sample(mix: GaussianMixture, count: int, seed: int) -> np.ndarray:
    """Draw `count` reproducible samples: component by weight, then Cholesky transform."""
    rng = np.random.default_rng(seed)
    comp = rng.choice(mix.n_components, size=count, p=mix.weights)
    z = rng.standard_normal((count, mix.dim))
    out = np.empty((count, mix.dim))
    for l in range(mix.n_components):
        sel = comp == l
        out[sel] = mix.means[l] + z[sel] @ mix._chols[l].T
    return out


def mixture_condition(mix: GaussianMixture, obs_idx: int, obs_vals: np.ndarray):
    """Condition a mixture on one observed coordinate.

    Returns per-observation conditional weights (n, L), conditional means of the
    remaining coordinates (n, L, d-1), and per-component conditional covariances
    (L, d-1, d-1). Weights are updated by each component's marginal likelihood
    of the observed value.
    """
    y = np.asarray(obs_vals, dtype=float).reshape(-1)
    keep = [j for j in range(mix.dim) if j != obs_idx]
    L = mix.n_components
    n = y.shape[0]
    logw = np.empty((n, L))
    cmeans = np.empty((n, L, len(keep)))
    ccovs = np.empty((L, len(keep), len(keep)))
    for l in range(L):
        mu = mix.means[l]
        cov = mix.covs[l]
        vyy = cov[obs_idx, obs_idx]
        if vyy <= 0:
            raise ValueError(f"component {l} has non-positive variance on coordinate {obs_idx}")
        k = cov[keep, obs_idx] / vyy
        cmeans[:, l, :] = mu[keep] + np.outer(y - mu[obs_idx], k)
        ccovs[l] = cov[np.ix_(keep, keep)] - np.outer(k, cov[obs_idx, keep])
        logw[:, l] = np.log(mix.weights[l]) - 0.5 * (_LOG_2PI + np.log(vyy) + (y - mu[obs_idx]) ** 2 / vyy)
    shift = logw.max(axis=1, keepdims=True)
    w = np.exp(logw - shift)
    w /= w.sum(axis=1, keepdims=True)
    return w, cmeans, ccovs


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------


def numeric_gradient(h, x: np.ndarray, step: float | np.ndarray | None = None) -> np.ndarray:
    """Central-difference gradient; default step 1e-6 * (1 + |x_j|)."""
    x = np.asarray(x, dtype=float)
    steps = np.broadcast_to(step if step is not None else 1e-6 * (1.0 + np.abs(x)), x.shape)
    g = np.empty_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = steps[j]
        hi, lo = h(x + e), h(x - e)
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise ValueError(f"non-finite evaluation while differentiating coordinate {j}")
        g[j] = (hi - lo) / (2.0 * steps[j])
    return g


def numeric_hessian(h, x: np.ndarray, step: float | np.ndarray | None = None) -> np.ndarray:
    """Central-difference Hessian, symmetrized as (H + H')/2; step 1e-4 * (1 + |x_j|)."""
    x = np.asarray(x, dtype=float)
    steps = np.broadcast_to(step if step is not None else 1e-4 * (1.0 + np.abs(x)), x.shape).copy()
    k = x.size
    H = np.empty((k, k))
    f0 = h(x)
    if not np.isfinite(f0):
        raise ValueError("non-finite evaluation at the expansion point")
    for j in range(k):
        ej = np.zeros_like(x)
        ej[j] = steps[j]
        H[j, j] = (h(x + ej) - 2.0 * f0 + h(x - ej)) / steps[j] ** 2
        for m in range(j + 1, k):
            em = np.zeros_like(x)
            em[m] = steps[m]
            H[j, m] = H[m, j] = (
                h(x + ej + em) - h(x + ej - em) - h(x - ej + em) + h(x - ej - em)
            ) / (4.0 * steps[j] * steps[m])
    H = 0.5 * (H + H.T)
    if not np.all(np.isfinite(H)):
        raise ValueError("non-finite evaluation in Hessian stencil")
    return H


# ---------------------------------------------------------------------------
# Maximizer driver
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MaximizeResult:
    x: np.ndarray
    value: float
    converged: bool
    iterations: int


def maximize(h, x0: np.ndarray, bounds=None, tol: float = 1e-8, max_iter: int = 500,
             grad=None, value_and_grad=None) -> MaximizeResult:
    """Quasi-Newton ascent of h from x0 (L-BFGS-B under the hood).

    Gradients are central finite differences unless an analytic `grad` (or a
    fused `value_and_grad`) is supplied. Never returns a point with objective
    below h(x0); exceeding the iteration budget reports converged=False
    instead of raising.
    """
    x0 = np.asarray(x0, dtype=float)
    best = {"x": x0.copy(), "val": float(h(x0))}
    if not np.isfinite(best["val"]):
        raise ValueError("objective is non-finite at the starting point")

    def track(x, v):
        if np.isfinite(v) and v > best["val"]:
            best["val"] = v
            best["x"] = np.asarray(x, dtype=float).copy()
        return -v if np.isfinite(v) else 1e300

    if value_and_grad is not None:
        def fun(x):
            v, g = value_and_grad(x)
            nv = track(x, float(v))
            g = np.asarray(g, dtype=float)
            return nv, np.where(np.isfinite(g), -g, 0.0)

        jac = True
    else:
        fun = lambda x: track(x, float(h(x)))
        if grad is None:
            jac = lambda x: -numeric_gradient(h, x)
        else:
            jac = lambda x: -np.asarray(grad(x), dtype=float)

    res = minimize(
        fun,
        x0,
        jac=jac,
        method="L-BFGS-B",
        bounds=bounds,
        options={"maxiter": max_iter, "gtol": tol, "ftol": 1e-14},
    )
    if np.isfinite(-res.fun) and -res.fun > best["val"]:
        best["val"] = float(-res.fun)
        best["x"] = np.asarray(res.x, dtype=float)
    converged = bool(res.success) or float(np.max(np.abs(res.jac))) < 10.0 * tol
    return MaximizeResult(x=best["x"], value=best["val"], converged=converged, iterations=int(res.nit))


# ---------------------------------------------------------------------------
# Unconstrained reparameterizations
# ---------------------------------------------------------------------------


def weights_to_logits(w: np.ndarray) -> np.ndarray:
    """Multinomial-logit coordinates of a weight vector (last logit pinned at 0)."""
    w = np.asarray(w, dtype=float)
    return np.log(w[:-1]) - np.log(w[-1])


def logits_to_weights(z: np.ndarray) -> np.ndarray:
    z = np.append(np.asarray(z, dtype=float), 0.0)
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def cov_to_vector(cov: np.ndarray) -> np.ndarray:
    """Pack an SPD matrix as its Cholesky factor, row-major lower triangle, log diagonal."""
    chol = np.linalg.cholesky(np.asarray(cov, dtype=float))
    d = chol.shape[0]
    out = []
    for i in range(d):
        for j in range(i + 1):
            out.append(np.log(chol[i, j]) if i == j else chol[i, j])
    return np.array(out)


def vector_to_cov(vec: np.ndarray, d: int) -> np.ndarray:
    chol = np.zeros((d, d))
    k = 0
    for i in range(d):
        for j in range(i + 1):
            chol[i, j] = np.exp(vec[k]) if i == j else vec[k]
            k += 1
    return chol @ chol.T


def star_discrepancy_1d(points: np.ndarray) -> float:
    """Exact star discrepancy of a 1-D point set (Niederreiter's formula)."""
    x = np.sort(np.asarray(points, dtype=float).reshape(-1))
    n = x.size
    i = np.arange(1, n + 1)
    return float(1.0 / (2 * n) + np.max(np.abs(x - (2 * i - 1) / (2 * n))))
