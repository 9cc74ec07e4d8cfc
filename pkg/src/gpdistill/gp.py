"""Independent multi-output Gaussian processes over stress-deformation data.

Each observed stress component gets one zero-mean GP with a scaled
squared-exponential ARD kernel, trained on every test that observes the
component.  Noise is heteroskedastic: ``max(sigma_min^2, sigma_r^2 P^2)``
per point, with the measured stress as plug-in for the true stress.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .dataset import FunctionGrid, MechanicalTest
from .diffnum import AdamW, Var
from .mechanics import deformation_filter

__all__ = [
    "GpError",
    "KernelParams",
    "ErrorModel",
    "Normalizer",
    "GpPosterior",
    "ComponentFit",
    "kernel",
    "log_marginal_likelihood",
    "lml_and_gradient",
    "fit_hyperparameters",
    "shrink_length_scales",
    "condition",
    "fit_posteriors",
    "sample_stacked",
    "interval_bands",
    "estimated_coverage",
    "posterior_stacked_moments",
    "bands_at_measurements",
    "export_posteriors",
    "Z95",
]

Z95 = 1.959964
LOG_2PI = float(np.log(2.0 * np.pi))
JITTER_START = 1e-8
JITTER_MAX = 1e-4


class GpError(FloatingPointError):
    pass


@dataclass(frozen=True)
class KernelParams:
    length_scales: np.ndarray
    output_scale: float

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.length_scales, dtype=float))
        object.__setattr__(self, "length_scales", ls)
        object.__setattr__(self, "output_scale", float(self.output_scale))
        if not (np.all(np.isfinite(ls)) and np.all(ls > 0)):
            raise GpError(f"length scales must be positive and finite: {ls}")
        if not (np.isfinite(self.output_scale) and self.output_scale > 0):
            raise GpError(f"output scale must be positive and finite: {self.output_scale}")

    def to_dict(self) -> dict:
        return {"length_scales": self.length_scales.tolist(), "output_scale": self.output_scale}


@dataclass(frozen=True)
class ErrorModel:
    sigma_min: float = 0.01
    sigma_r: float = 0.05

    def __post_init__(self):
        if not self.sigma_min > 0:
            raise GpError("sigma_min must be positive")
        if self.sigma_r < 0:
            raise GpError("sigma_r must be non-negative")

    def variance(self, stresses) -> np.ndarray:
        P = np.asarray(stresses, dtype=float)
        return np.maximum(self.sigma_min**2, self.sigma_r**2 * P**2)


@dataclass(frozen=True)
class Normalizer:
    """Per-dimension affine map ``(x - lo) / scale`` onto [0, 1]."""

    lo: np.ndarray
    scale: np.ndarray

    @classmethod
    def from_data(cls, X) -> "Normalizer":
        X = np.atleast_2d(np.asarray(X, dtype=float))
        lo, hi = X.min(axis=0), X.max(axis=0)
        scale = np.where(hi - lo > 0, hi - lo, 1.0)
        return cls(lo, scale)

    def __call__(self, X) -> np.ndarray:
        return (np.atleast_2d(np.asarray(X, dtype=float)) - self.lo) / self.scale

    def to_dict(self) -> dict:
        return {"lo": self.lo.tolist(), "scale": self.scale.tolist()}


def _as_inputs(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    return X[:, None] if X.ndim == 1 else X


def _sqdist_scaled(X1, X2, ls):
    A, B = _as_inputs(X1) / ls, _as_inputs(X2) / ls
    d2 = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    return np.maximum(d2, 0.0)


def kernel(X1, X2, params: KernelParams) -> np.ndarray:
    """``sigma^2 exp(-0.5 sum_d (x_d - x'_d)^2 / l_d^2)`` for all row pairs."""
    X1, X2 = _as_inputs(X1), _as_inputs(X2)
    n = len(params.length_scales)
    if X1.shape[1] != X2.shape[1] or X1.shape[1] != n:
        raise GpError(f"input dimensions {X1.shape[1]}, {X2.shape[1]} do not match {n} length scales")
    return params.output_scale**2 * np.exp(-0.5 * _sqdist_scaled(X1, X2, params.length_scales))


def _cholesky(K: np.ndarray, sigma2: float) -> tuple[np.ndarray, float]:
    """Cholesky with jitter ``1e-8 sigma^2`` escalated x10 up to ``1e-4 sigma^2``."""
    jitter = JITTER_START
    n = K.shape[0]
    while jitter <= JITTER_MAX * (1 + 1e-12):
        try:
            return np.linalg.cholesky(K + jitter * sigma2 * np.eye(n)), jitter * sigma2
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise GpError(f"Cholesky failed with jitter up to {JITTER_MAX} * sigma^2 (n = {n})")


def log_marginal_likelihood(X, y, params: KernelParams, error_model: ErrorModel | None = None, noise=None) -> float:
    """Log evidence of targets ``y`` under the GP prior plus the error model.

    ``noise`` overrides the error-model variances (one per target).
    """
    y = np.asarray(y, dtype=float)
    if y.size < 1:
        raise GpError("need at least one training point")
    noise = _noise(y, error_model, noise)
    K = kernel(X, X, params) + np.diag(noise)
    L, _ = _cholesky(K, params.output_scale**2)
    alpha = cho_solve((L, True), y)
    return float(-0.5 * y @ alpha - np.log(np.diag(L)).sum() - 0.5 * len(y) * LOG_2PI)


def _noise(y, error_model, noise):
    if noise is not None:
        return np.asarray(noise, dtype=float)
    if error_model is None:
        return np.zeros_like(y)
    return error_model.variance(y)


def lml_and_gradient(log_theta: np.ndarray, X, y, noise) -> tuple[float, np.ndarray]:
    """LML and its gradient in ``log_theta = [log l_1..log l_n, log sigma]``."""
    X = _as_inputs(X)
    ls, sigma = np.exp(log_theta[:-1]), float(np.exp(log_theta[-1]))
    params = KernelParams(ls, sigma)
    Kf = kernel(X, X, params)
    L, jitter = _cholesky(Kf + np.diag(noise), sigma**2)
    alpha = cho_solve((L, True), y)
    lml = float(-0.5 * y @ alpha - np.log(np.diag(L)).sum() - 0.5 * len(y) * LOG_2PI)
    Kinv = cho_solve((L, True), np.eye(len(y)))
    W = np.outer(alpha, alpha) - Kinv
    g = np.empty_like(log_theta)
    for d in range(X.shape[1]):
        diff2 = (X[:, d][:, None] - X[:, d][None, :]) ** 2 / ls[d] ** 2
        g[d] = 0.5 * np.sum(W * Kf * diff2)
    # the jitter scales with sigma^2 as well
    g[-1] = 0.5 * np.sum(W * 2.0 * Kf) + jitter * np.trace(W)
    return lml, g


def fit_hyperparameters(
    X,
    y,
    error_model: ErrorModel,
    iterations: int = 200,
    lr: float = 0.2,
    init_length: float = 0.5,
    weight_decay: float = 0.0,
    trace: list | None = None,
) -> KernelParams:
    """Maximize the LML with AdamW in log space; returns the best point seen.

    ``X`` must already be normalized.  If ``trace`` is a list it receives
    the LML at every evaluated point (index 0 is the initial point).
    """
    X = _as_inputs(X)
    y = np.asarray(y, dtype=float)
    noise = error_model.variance(y)
    sd = float(np.std(y))
    sigma0 = sd if sd > 0 else error_model.sigma_min
    theta = Var(np.log(np.r_[np.full(X.shape[1], init_length), sigma0]), requires_grad=True, name="log_theta")
    opt = AdamW([theta], lr=lr, weight_decay=weight_decay)
    best_lml, best = -np.inf, theta.value.copy()
    for it in range(iterations + 1):
        try:
            lml, g = lml_and_gradient(theta.value, X, y, noise)
        except GpError as exc:
            raise GpError(f"LML evaluation failed at iteration {it}, log params {theta.value}: {exc}") from exc
        if not np.isfinite(lml) or not np.all(np.isfinite(g)):
            raise GpError(f"non-finite LML {lml} at iteration {it}, log params {theta.value}")
        if trace is not None:
            trace.append(lml)
        if lml > best_lml:
            best_lml, best = lml, theta.value.copy()
        if it < iterations:
            opt.step([-g])
    return KernelParams(np.exp(best[:-1]), float(np.exp(best[-1])))


def shrink_length_scales(params: KernelParams, factor: float) -> KernelParams:
    if not 0.0 < factor <= 1.0:
        raise GpError(f"length-scale factor must lie in (0, 1], got {factor}")
    return KernelParams(params.length_scales * factor, params.output_scale)


@dataclass(frozen=True)
class GpPosterior:
    """GP conditioned on training data and evaluated on a query grid."""

    component: str
    params: KernelParams
    shrink: float
    normalizer: Normalizer
    train_inputs: np.ndarray  # normalized
    train_targets: np.ndarray
    query_inputs: np.ndarray  # normalized
    mean: np.ndarray
    cov: np.ndarray
    chol: np.ndarray
    jitter: float
    train_noise: np.ndarray

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(np.maximum(np.diag(self.cov), 0.0))

    def predict(self, X_raw) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and marginal std at raw (unnormalized) inputs."""
        Xq = self.normalizer(X_raw)
        return _posterior_moments(self.params, self.train_inputs, self.train_targets, self.train_noise, Xq, diag_only=True)

    def to_dict(self) -> dict:
        return {
            "component": self.component,
            "params": self.params.to_dict(),
            "shrink": self.shrink,
            "normalizer": self.normalizer.to_dict(),
            "query_inputs": self.query_inputs.tolist(),
            "mean": self.mean.tolist(),
            "cov": self.cov.tolist(),
        }


def _posterior_moments(params, Xt, yt, noise, Xq, diag_only=False):
    Kt = kernel(Xt, Xt, params) + np.diag(noise)
    L, _ = _cholesky(Kt, params.output_scale**2)
    Kqt = kernel(Xq, Xt, params)
    mean = Kqt @ cho_solve((L, True), yt)
    V = solve_triangular(L, Kqt.T, lower=True)
    if diag_only:
        var = params.output_scale**2 - (V * V).sum(0)
        return mean, np.sqrt(np.maximum(var, 0.0))
    cov = kernel(Xq, Xq, params) - V.T @ V
    return mean, 0.5 * (cov + cov.T)


def condition(
    params: KernelParams,
    X_train,
    y_train,
    error_model: ErrorModel | None,
    X_query,
    normalizer: Normalizer | None = None,
    component: str = "",
    shrink: float = 1.0,
    noise=None,
) -> GpPosterior:
    """Condition the GP on training data and evaluate it on query inputs.

    Inputs are raw; both sets go through ``normalizer`` (fitted on the
    training inputs when omitted).  Noise enters only the training block.
    """
    X_train, X_query = _as_inputs(X_train), _as_inputs(X_query)
    y_train = np.asarray(y_train, dtype=float)
    normalizer = normalizer or Normalizer.from_data(X_train)
    Xt, Xq = normalizer(X_train), normalizer(X_query)
    nz = _noise(y_train, error_model, noise)
    mean, cov = _posterior_moments(params, Xt, y_train, nz, Xq)
    L, jitter = _cholesky(cov, params.output_scale**2)
    return GpPosterior(component, params, shrink, normalizer, Xt, y_train, Xq, mean, cov, L, jitter, nz)


@dataclass(frozen=True)
class ComponentFit:
    component: str
    params: KernelParams  # after shrinking
    fitted: KernelParams  # marginal-likelihood optimum
    normalizer: Normalizer
    inputs: np.ndarray  # raw
    targets: np.ndarray


def fit_posteriors(
    tests: list[MechanicalTest],
    grid: FunctionGrid,
    error_model: ErrorModel,
    shrink: float = 1.0,
    iterations: int = 200,
    lr: float = 0.2,
) -> tuple[dict[tuple[int, int], GpPosterior], dict[str, ComponentFit]]:
    """One GP per stress component, conditioned and evaluated per (t, q) block."""
    pooled: dict[str, list] = {}
    for t, q, sl, tg, comp in grid.block_info():
        test = tg.test
        X = np.stack([deformation_filter(comp, test.deformation(c)) for c in test.controls])
        pooled.setdefault(comp, []).append((X, test.stresses[:, q]))
    fits = {}
    for comp, parts in pooled.items():
        X = np.concatenate([p[0] for p in parts])
        y = np.concatenate([p[1] for p in parts])
        norm = Normalizer.from_data(X)
        fitted = fit_hyperparameters(norm(X), y, error_model, iterations=iterations, lr=lr)
        fits[comp] = ComponentFit(comp, shrink_length_scales(fitted, shrink), fitted, norm, X, y)
    posteriors = {}
    for t, q, sl, tg, comp in grid.block_info():
        f = fits[comp]
        posteriors[(t, q)] = condition(f.params, f.inputs, f.targets, error_model, tg.inputs[comp], f.normalizer, comp, shrink)
    return posteriors, fits


def sample_stacked(posteriors: dict[tuple[int, int], GpPosterior], grid: FunctionGrid, count: int, rng) -> np.ndarray:
    """``count`` stacked draws, blocks independent, shape ``(count, n_s)``."""
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    out = np.empty((int(count), grid.n_s))
    for t, q, sl in grid.layout:
        post = posteriors[(t, q)]
        n = sl.stop - sl.start
        if post.mean.shape != (n,):
            raise GpError(f"posterior for (t={t}, q={q}) has {post.mean.shape[0]} points, grid block has {n}")
        z = rng.standard_normal((int(count), n))
        out[:, sl] = post.mean + z @ post.chol.T
    return out


def posterior_stacked_moments(posteriors, grid: FunctionGrid) -> tuple[np.ndarray, np.ndarray]:
    mean, std = np.empty(grid.n_s), np.empty(grid.n_s)
    for t, q, sl in grid.layout:
        mean[sl], std[sl] = posteriors[(t, q)].mean, posteriors[(t, q)].std
    return mean, std


def interval_bands(source, grid: FunctionGrid | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stacked ``(mean, lower, upper)`` of centered 95% intervals.

    ``source`` is a dict of posteriors (Gaussian: ``mean +- 1.959964 std``)
    or a sample matrix ``(n, n_s)`` (2.5 / 97.5 percentiles).
    """
    if isinstance(source, dict):
        mean, std = posterior_stacked_moments(source, grid)
        return mean, mean - Z95 * std, mean + Z95 * std
    S = np.asarray(source, dtype=float)
    if S.ndim != 2 or S.shape[0] < 1:
        raise GpError("sample matrix must be (count >= 1, n_s)")
    lo, hi = np.percentile(S, [2.5, 97.5], axis=0)
    return S.mean(axis=0), lo, hi


def _interp_block(grid_controls, values, controls):
    lo, hi = grid_controls[0], grid_controls[-1]
    tol = 1e-12 * max(1.0, abs(hi))
    if np.any(controls < lo - tol) or np.any(controls > hi + tol):
        raise GpError(f"measurement controls outside grid [{lo}, {hi}]")
    return np.interp(controls, grid_controls, values)


def bands_at_measurements(bands, grid: FunctionGrid) -> dict[tuple[int, int], tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Linearly interpolate stacked bands to each test's measurement controls."""
    out = {}
    for t, q, sl, tg, _ in grid.block_info():
        out[(t, q)] = tuple(_interp_block(tg.controls, b[sl], tg.test.controls) for b in bands)
    return out


def estimated_coverage(source, grid: FunctionGrid) -> tuple[dict[tuple[int, int], float], float]:
    """Per-function EC and total EC (mean over tests of per-test means)."""
    if grid.n_f == 0:
        raise GpError("empty dataset")
    at = bands_at_measurements(interval_bands(source, grid), grid)
    per_fn, per_test = {}, {}
    for t, q, sl, tg, _ in grid.block_info():
        _, lo, hi = at[(t, q)]
        y = tg.test.stresses[:, q]
        inside = (y >= lo) & (y <= hi)
        per_fn[(t, q)] = float(inside.mean())
        per_test.setdefault(t, []).append(inside)
    total = float(np.mean([np.concatenate(v).mean() for v in per_test.values()]))
    return per_fn, total


def export_posteriors(posteriors: dict[tuple[int, int], GpPosterior], path) -> None:
    data = {f"{t},{q}": p.to_dict() for (t, q), p in sorted(posteriors.items())}
    Path(path).write_text(json.dumps(data))

