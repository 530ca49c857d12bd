"""Type-II maximum likelihood for the kernel hyperparameters.

Inputs are rescaled to the unit hypercube and outputs standardized before
fitting; the returned kernel is expressed back in the caller's units.  The
constant prior mean is profiled out in closed form.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, cholesky
from scipy.optimize import minimize

from .gp import Dataset, FactorizedMatern, KernelSpec, TrendPlusOffset, _matern52_slope, matern52

LOG_2PI = np.log(2.0 * np.pi)


class HyperparameterWarning(UserWarning):
    """No multi-start ascent improved on the default hyperparameters."""


@dataclass(frozen=True)
class HyperBounds:
    """Box on the normalized hyperparameters (unit-cube inputs, unit-variance outputs)."""

    amplitude: tuple[float, float] = (1e-3, 1e2)
    lengthscale: tuple[float, float] = (0.02, 5.0)
    noise: tuple[float, float] = (1e-6, 1.0)
    state_amplitude: tuple[float, float] = (1e-3, 1e2)
    offset: tuple[float, float] = (1e-3, 1e2)


DEFAULTS = {"amplitude": 1.0, "lengthscale": 0.3, "noise": 0.01, "state_amplitude": 0.3, "offset": 0.1}


def _pairwise(X, ls):
    diff = (X[:, None, :] - X[None, :, :]) / ls
    return diff * diff


class _Objective:
    """Negative log marginal likelihood and gradient over log-parameters."""

    def __init__(self, X, y, family, d_s):
        self.X, self.y, self.family, self.d_s = X, y, family, d_s
        self.n, d = X.shape
        self.d_x = d - d_s
        if family == "matern":
            self.names = ["amplitude"] + ["lengthscale"] * d + ["noise"]
        else:
            self.names = ["amplitude", "state_amplitude", "offset"] + ["lengthscale"] * self.d_x + ["noise"]
            self.same = np.all(X[:, None, :d_s] == X[None, :, :d_s], axis=-1).astype(float)

    def gram(self, theta):
        p = np.exp(theta)
        X, ds = self.X, self.d_s
        if self.family == "matern":
            amp, ls, noise = p[0], p[1:-1], p[-1]
            sq_s = _pairwise(X[:, :ds], ls[:ds])
            sq_x = _pairwise(X[:, ds:], ls[ds:])
            rs = np.sqrt(sq_s.sum(-1))
            rx = np.sqrt(sq_x.sum(-1))
            ms, mx = matern52(rs), matern52(rx)
            K = amp * ms * mx
            grads = [K]
            slope_s = -_matern52_slope(rs) * mx * amp
            slope_x = -_matern52_slope(rx) * ms * amp
            grads += [slope_s * sq_s[..., k] for k in range(ds)]
            grads += [slope_x * sq_x[..., k] for k in range(self.d_x)]
        else:
            amp, samp, off = p[0], p[1], p[2]
            ls, noise = p[3:-1], p[-1]
            sq = _pairwise(X[:, ds:], ls)
            r = np.sqrt(sq.sum(-1))
            m = matern52(r)
            same = self.same
            K = amp * m + same * (samp * m + off)
            grads = [amp * m, same * samp * m, same * off]
            coef = -_matern52_slope(r) * (amp + same * samp)
            grads += [coef * sq[..., k] for k in range(self.d_x)]
        grads.append(noise * np.eye(self.n))
        return K, noise, grads

    def __call__(self, theta):
        K, noise, grads = self.gram(theta)
        Kn = K + noise * np.eye(self.n)
        try:
            L = cholesky(Kn + 1e-10 * np.eye(self.n), lower=True)
        except np.linalg.LinAlgError:
            return 1e25, np.zeros_like(theta)
        ones = np.ones(self.n)
        Ki_y = cho_solve((L, True), self.y)
        Ki_1 = cho_solve((L, True), ones)
        mu0 = (ones @ Ki_y) / (ones @ Ki_1)
        alpha = Ki_y - mu0 * Ki_1
        resid = self.y - mu0
        lml = -0.5 * resid @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * self.n * LOG_2PI
        Kinv = cho_solve((L, True), np.eye(self.n))
        inner = np.outer(alpha, alpha) - Kinv
        g = np.array([0.5 * np.sum(inner * dK) for dK in grads])
        return -lml, -g

    def profiled_mean(self, theta):
        K, noise, _ = self.gram(theta)
        L = cholesky(K + (noise + 1e-10) * np.eye(self.n), lower=True)
        ones = np.ones(self.n)
        return (ones @ cho_solve((L, True), self.y)) / (ones @ cho_solve((L, True), ones))


def fit_hyperparameters(
    data: Dataset,
    family: str = "matern",
    bounds: HyperBounds | None = None,
    *,
    input_bounds: tuple[np.ndarray, np.ndarray] | None = None,
    n_starts: int = 5,
    seed: int = 0,
) -> KernelSpec:
    """Maximize the log marginal likelihood with multi-start L-BFGS-B.

    Args:
        data: training data with at least 3 rows.
        family: ``"matern"`` (factorized Matern) or ``"trend_offset"``.
        bounds: hyperparameter box in normalized units.
        input_bounds: ``(lower, upper)`` box used to rescale inputs; defaults
            to the data range.
        n_starts: the default start plus ``n_starts - 1`` random starts.
        seed: seeds the random starts.

    Returns:
        The kernel in the caller's input and output units.
    """
    if family not in ("matern", "trend_offset"):
        raise ValueError(f"unknown kernel family {family!r}")
    if len(data) < 3:
        raise ValueError("need at least 3 observations to fit hyperparameters")
    bounds = bounds or HyperBounds()
    X = data.inputs
    if input_bounds is None:
        lo, hi = X.min(axis=0), X.max(axis=0)
    else:
        lo, hi = (np.asarray(b, dtype=float) for b in input_bounds)
    width = np.where(hi - lo > 0, hi - lo, 1.0)
    Xn = (X - lo) / width
    y_mean = float(np.mean(data.outputs))
    y_sd = float(np.std(data.outputs))
    if not y_sd > 1e-12 * max(1.0, abs(y_mean)):
        y_sd = 1.0
    yn = (data.outputs - y_mean) / y_sd

    obj = _Objective(Xn, yn, family, data.d_s)
    box = np.log([getattr(bounds, name) for name in obj.names])
    theta0 = np.clip(np.log([DEFAULTS[name] for name in obj.names]), box[:, 0], box[:, 1])
    rng = np.random.default_rng(seed)
    starts = [theta0] + [rng.uniform(box[:, 0], box[:, 1]) for _ in range(n_starts - 1)]

    f0, _ = obj(theta0)
    best_theta, best_f = theta0, f0
    for start in starts:
        res = minimize(obj, start, jac=True, method="L-BFGS-B", bounds=box, options={"maxiter": 200})
        if np.isfinite(res.fun) and res.fun < best_f - 1e-9:
            best_theta, best_f = res.x, res.fun
    if best_theta is theta0:
        warnings.warn("hyperparameter fit did not improve on the defaults", HyperparameterWarning)

    p = np.exp(best_theta)
    mean = y_mean + y_sd * float(obj.profiled_mean(best_theta))
    var_scale = y_sd**2
    ds = data.d_s
    if family == "matern":
        ls = p[1:-1] * width
        return FactorizedMatern(
            amplitude=p[0] * var_scale,
            state_lengthscales=ls[:ds],
            action_lengthscales=ls[ds:],
            noise=p[-1] * var_scale,
            mean=mean,
        )
    return TrendPlusOffset(
        amplitude=p[0] * var_scale,
        state_amplitude=p[1] * var_scale,
        offset=p[2] * var_scale,
        lengthscales=p[3:-1] * width[ds:],
        d_s=ds,
        noise=p[-1] * var_scale,
        mean=mean,
    )


def log_marginal_likelihood(data: Dataset, spec: KernelSpec) -> float:
    """Log marginal likelihood of ``data`` under ``spec`` (mean fixed at ``spec.mean``)."""
    n = len(data)
    K = spec(data.inputs, data.inputs) + spec.noise * np.eye(n)
    L = cholesky(K + 1e-10 * np.eye(n), lower=True)
    r = data.outputs - spec.mean
    a = cho_solve((L, True), r)
    return float(-0.5 * r @ a - np.sum(np.log(np.diag(L))) - 0.5 * n * LOG_2PI)
