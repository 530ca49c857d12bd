"""Gaussian-process regression over the joint state-action space.

Points are rows of a 2-D array whose first ``d_s`` columns hold the state and
whose remaining columns hold the action.  The kernels are written so that the
same code handles problem units or the unit hypercube; the experiment harness
works on the unit hypercube throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular

from ._fast import matern_cross, matern_weighted

SQRT5 = np.sqrt(5.0)

#: Jitter ladder tried (relative to the mean Gram diagonal) when the plain
#: Cholesky factorization fails.
JITTER_LADDER = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)

#: Variances more negative than this are reported instead of clamped.
NEGATIVE_VARIANCE_TOL = 1e-12


class ModelError(RuntimeError):
    """The GP could not be fitted or produced an inconsistent prediction."""


class DegenerateCandidateError(ModelError):
    """A candidate with no predictive variance (noiseless and fully observed)."""


def matern52(r):
    """Matern-5/2 correlation as a function of the scaled distance ``r``."""
    sr = SQRT5 * r
    return (1.0 + sr + sr * sr / 3.0) * np.exp(-sr)


def _matern52_slope(r):
    # (dM/dr) / r, finite at r = 0.
    sr = SQRT5 * r
    return -(5.0 / 3.0) * (1.0 + sr) * np.exp(-sr)


def _scaled_diff(A, B, lengthscales):
    diff = (A[:, None, :] - B[None, :, :]) / lengthscales
    r = np.sqrt(np.sum(diff * diff, axis=-1))
    return diff, r


def _as_array(values) -> np.ndarray:
    arr = np.array(values, dtype=float, ndmin=1)
    return arr


@dataclass(frozen=True)
class JointPoint:
    """A single (state, action) coordinate."""

    state: np.ndarray
    action: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "state", _as_array(self.state))
        object.__setattr__(self, "action", _as_array(self.action))

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.state, self.action])

    @classmethod
    def from_vector(cls, v, d_s: int) -> "JointPoint":
        v = np.asarray(v, dtype=float)
        return cls(v[:d_s], v[d_s:])


PointsLike = Union[JointPoint, np.ndarray, list, tuple]


def as_points(q: PointsLike, dim: int | None = None) -> tuple[np.ndarray, bool]:
    """Return ``(points, single)``: a 2-D array and whether ``q`` was one point."""
    if isinstance(q, JointPoint):
        q = q.vector
    arr = np.asarray(q, dtype=float)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    if dim is not None and arr.shape[1] != dim:
        raise ValueError(f"expected points of dimension {dim}, got {arr.shape[1]}")
    return arr, single


@dataclass(frozen=True)
class Dataset:
    """Training inputs (n, d_s + d_x) and outputs (n,)."""

    inputs: np.ndarray
    outputs: np.ndarray
    d_s: int

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        y = np.asarray(self.outputs, dtype=float).reshape(-1)
        if X.shape[0] != y.shape[0]:
            raise ValueError(f"{X.shape[0]} inputs but {y.shape[0]} outputs")
        if not np.all(np.isfinite(y)):
            raise ValueError("outputs must be finite")
        object.__setattr__(self, "inputs", X)
        object.__setattr__(self, "outputs", y)

    @classmethod
    def empty(cls, d_s: int, d_x: int) -> "Dataset":
        return cls(np.zeros((0, d_s + d_x)), np.zeros(0), d_s)

    def __len__(self) -> int:
        return self.outputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def append(self, inputs, outputs) -> "Dataset":
        X = np.atleast_2d(np.asarray(inputs, dtype=float))
        y = np.asarray(outputs, dtype=float).reshape(-1)
        return Dataset(np.vstack([self.inputs, X]), np.concatenate([self.outputs, y]), self.d_s)


@dataclass(frozen=True)
class FactorizedMatern:
    """``amplitude * M(state; l_s) * M(action; l_x)`` with Matern-5/2 factors."""

    amplitude: float
    state_lengthscales: np.ndarray
    action_lengthscales: np.ndarray
    noise: float = 0.0
    mean: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "state_lengthscales", _as_array(self.state_lengthscales))
        object.__setattr__(self, "action_lengthscales", _as_array(self.action_lengthscales))
        for name in ("amplitude", "noise", "mean"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not self.amplitude > 0:
            raise ValueError("amplitude must be positive")
        if np.any(self.state_lengthscales <= 0) or np.any(self.action_lengthscales <= 0):
            raise ValueError("lengthscales must be positive")
        if self.noise < 0:
            raise ValueError("noise variance must be non-negative")

    @property
    def d_s(self) -> int:
        return self.state_lengthscales.size

    @property
    def d_x(self) -> int:
        return self.action_lengthscales.size

    @property
    def dim(self) -> int:
        return self.d_s + self.d_x

    @property
    def lengthscales(self) -> np.ndarray:
        return np.concatenate([self.state_lengthscales, self.action_lengthscales])

    def _check(self, A, B):
        if A.shape[1] != self.dim or B.shape[1] != self.dim:
            raise ValueError(
                f"kernel expects dimension {self.dim}, got {A.shape[1]} and {B.shape[1]}"
            )

    def __call__(self, A, B) -> np.ndarray:
        A = np.atleast_2d(A)
        B = np.atleast_2d(B)
        self._check(A, B)
        return matern_cross(
            np.ascontiguousarray(A, dtype=float), np.ascontiguousarray(B, dtype=float),
            1.0 / self.lengthscales, self.d_s, self.amplitude,
        )

    def weighted(self, Q, X, W, grad=False):
        """``sum_j k(q_b, x_j) W[b, j]`` for each row of ``Q``, optionally with gradients."""
        W = np.ascontiguousarray(np.broadcast_to(W, (Q.shape[0], X.shape[0])), dtype=float)
        val, g = matern_weighted(
            np.ascontiguousarray(Q, dtype=float), np.ascontiguousarray(X, dtype=float), W,
            1.0 / self.lengthscales, self.d_s, self.amplitude, grad,
        )
        return (val, g) if grad else val

    def diag(self, A) -> np.ndarray:
        return np.full(np.atleast_2d(A).shape[0], self.amplitude)

    def grad(self, A, B) -> np.ndarray:
        """Gradient of ``k(a_i, b_j)`` with respect to ``a_i``; shape (m, n, d)."""
        A = np.atleast_2d(A)
        B = np.atleast_2d(B)
        self._check(A, B)
        ds = self.d_s
        dss, rs = _scaled_diff(A[:, :ds], B[:, :ds], self.state_lengthscales)
        dxx, rx = _scaled_diff(A[:, ds:], B[:, ds:], self.action_lengthscales)
        ms, mx = matern52(rs), matern52(rx)
        gs = _matern52_slope(rs)[..., None] * dss / self.state_lengthscales
        gx = _matern52_slope(rx)[..., None] * dxx / self.action_lengthscales
        return self.amplitude * np.concatenate(
            [gs * mx[..., None], gx * ms[..., None]], axis=-1
        )

    def paired(self, A, B) -> np.ndarray:
        """``k(a_i, b_i)`` row by row; shape (m,)."""
        return self.grad_paired(A, B, value_only=True)

    def grad_paired(self, A, B, value_only=False):
        """Row-paired value and gradient with respect to ``a_i``."""
        ds = self.d_s
        es = (A[:, :ds] - B[:, :ds]) / self.state_lengthscales
        ex = (A[:, ds:] - B[:, ds:]) / self.action_lengthscales
        rs = np.sqrt(np.sum(es * es, axis=-1))
        rx = np.sqrt(np.sum(ex * ex, axis=-1))
        ms, mx = matern52(rs), matern52(rx)
        val = self.amplitude * ms * mx
        if value_only:
            return val
        gs = (_matern52_slope(rs) * mx)[:, None] * es / self.state_lengthscales
        gx = (_matern52_slope(rx) * ms)[:, None] * ex / self.action_lengthscales
        return val, self.amplitude * np.concatenate([gs, gx], axis=-1)


@dataclass(frozen=True)
class TrendPlusOffset:
    """Shared trend plus independent per-state deviation and offset.

    ``k = amplitude * M(x, x') + [s == s'] * (state_amplitude * M(x, x') + offset)``
    with one Matern-5/2 over actions.  Only meaningful for a finite state set.
    """

    amplitude: float
    state_amplitude: float
    offset: float
    lengthscales: np.ndarray
    d_s: int = 1
    noise: float = 0.0
    mean: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "lengthscales", _as_array(self.lengthscales))
        for name in ("amplitude", "state_amplitude", "offset", "noise", "mean"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if min(self.amplitude, self.state_amplitude, self.offset) <= 0:
            raise ValueError("amplitudes must be positive")
        if np.any(self.lengthscales <= 0):
            raise ValueError("lengthscales must be positive")
        if self.noise < 0:
            raise ValueError("noise variance must be non-negative")

    @property
    def d_x(self) -> int:
        return self.lengthscales.size

    @property
    def dim(self) -> int:
        return self.d_s + self.d_x

    def _same_state(self, A, B):
        ds = self.d_s
        return np.all(A[:, None, :ds] == B[None, :, :ds], axis=-1)

    def __call__(self, A, B) -> np.ndarray:
        A = np.atleast_2d(A)
        B = np.atleast_2d(B)
        if A.shape[1] != self.dim or B.shape[1] != self.dim:
            raise ValueError(f"kernel expects dimension {self.dim}")
        _, r = _scaled_diff(A[:, self.d_s:], B[:, self.d_s:], self.lengthscales)
        m = matern52(r)
        same = self._same_state(A, B)
        return self.amplitude * m + same * (self.state_amplitude * m + self.offset)

    def diag(self, A) -> np.ndarray:
        total = self.amplitude + self.state_amplitude + self.offset
        return np.full(np.atleast_2d(A).shape[0], total)

    def grad(self, A, B) -> np.ndarray:
        A = np.atleast_2d(A)
        B = np.atleast_2d(B)
        diff, r = _scaled_diff(A[:, self.d_s:], B[:, self.d_s:], self.lengthscales)
        same = self._same_state(A, B)
        coef = self.amplitude + same * self.state_amplitude
        gx = (coef * _matern52_slope(r))[..., None] * diff / self.lengthscales
        gs = np.zeros(gx.shape[:2] + (self.d_s,))
        return np.concatenate([gs, gx], axis=-1)

    def paired(self, A, B) -> np.ndarray:
        return self.grad_paired(A, B, value_only=True)

    def weighted(self, Q, X, W, grad=False):
        W = np.broadcast_to(W, (Q.shape[0], X.shape[0]))
        val = np.sum(self(Q, X) * W, axis=1)
        if not grad:
            return val
        return val, np.einsum("mnd,mn->md", self.grad(Q, X), W)

    def grad_paired(self, A, B, value_only=False):
        ds = self.d_s
        e = (A[:, ds:] - B[:, ds:]) / self.lengthscales
        r = np.sqrt(np.sum(e * e, axis=-1))
        m = matern52(r)
        same = np.all(A[:, :ds] == B[:, :ds], axis=-1)
        val = self.amplitude * m + same * (self.state_amplitude * m + self.offset)
        if value_only:
            return val
        coef = (self.amplitude + same * self.state_amplitude) * _matern52_slope(r)
        gx = coef[:, None] * e / self.lengthscales
        return val, np.concatenate([np.zeros((A.shape[0], ds)), gx], axis=-1)


KernelSpec = Union[FactorizedMatern, TrendPlusOffset]


def kernel_eval(spec: KernelSpec, a: PointsLike, b: PointsLike) -> float:
    """Prior covariance between two single points."""
    A, _ = as_points(a, spec.dim)
    B, _ = as_points(b, spec.dim)
    return float(spec(A, B)[0, 0])


@dataclass(frozen=True)
class GpPosterior:
    """A fitted GP: data, the cached Cholesky factor and ``K^-1 (Y - mu0)``."""

    kernel: KernelSpec
    data: Dataset
    chol: np.ndarray
    weights: np.ndarray
    jitter: float = 0.0

    @property
    def n(self) -> int:
        return len(self.data)

    @property
    def dim(self) -> int:
        return self.kernel.dim

    @property
    def X(self) -> np.ndarray:
        return self.data.inputs

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """``K^-1 rhs`` where ``K`` includes the noise (and any jitter)."""
        return cho_solve((self.chol, True), rhs)

    def cross(self, Q) -> np.ndarray:
        """Prior covariance ``k0(Q, X)``; shape (m, n)."""
        return self.kernel(Q, self.X)

    def mean(self, q: PointsLike):
        Q, single = as_points(q, self.dim)
        out = np.full(Q.shape[0], float(self.kernel.mean))
        if self.n:
            out = out + self.cross(Q) @ self.weights
        return float(out[0]) if single else out

    def mean_grad(self, q: PointsLike) -> np.ndarray:
        """Gradient of the posterior mean; shape (m, d) (or (d,) for one point)."""
        Q, single = as_points(q, self.dim)
        if not self.n:
            g = np.zeros_like(Q)
        else:
            g = np.einsum("mnd,n->md", self.kernel.grad(Q, self.X), self.weights)
        return g[0] if single else g

    def _half_solve(self, Q) -> np.ndarray:
        # L^-1 k0(X, Q); shape (n, m)
        return solve_triangular(self.chol, self.cross(Q).T, lower=True)

    def cov(self, a: PointsLike, b: PointsLike):
        A, single_a = as_points(a, self.dim)
        B, single_b = as_points(b, self.dim)
        out = self.kernel(A, B)
        if self.n:
            out = out - self._half_solve(A).T @ self._half_solve(B)
        return float(out[0, 0]) if (single_a and single_b) else out

    def var(self, q: PointsLike):
        Q, single = as_points(q, self.dim)
        v = self.kernel.diag(Q).astype(float)
        if self.n:
            V = self._half_solve(Q)
            v = v - np.sum(V * V, axis=0)
        v = _clamp_variance(v, self.kernel.diag(Q))
        return float(v[0]) if single else v

    def lookahead(self, candidate: PointsLike) -> "Lookahead":
        return make_lookahead(self, candidate)


def _clamp_variance(v, prior):
    bad = v < -NEGATIVE_VARIANCE_TOL * np.maximum(1.0, prior)
    if np.any(bad):
        raise ModelError(f"negative posterior variance {v[bad].min():.3e}")
    return np.maximum(v, 0.0)


def _factorize(K: np.ndarray) -> tuple[np.ndarray, float]:
    scale = float(np.mean(np.diag(K))) if K.size else 1.0
    for rel in JITTER_LADDER:
        jitter = rel * scale
        try:
            L = cholesky(K + jitter * np.eye(K.shape[0]), lower=True, check_finite=True)
        except np.linalg.LinAlgError:
            continue
        return L, jitter
    eig = np.linalg.eigvalsh(K)
    raise ModelError(
        "Gram matrix is not positive definite after jitter escalation "
        f"(min eig {eig[0]:.3e}, max eig {eig[-1]:.3e}, n={K.shape[0]})"
    )


def fit_posterior(data: Dataset, spec: KernelSpec) -> GpPosterior:
    """Condition the GP on ``data``; predictions afterwards are O(n) per query."""
    if data.dim != spec.dim:
        raise ValueError(f"data dimension {data.dim} does not match kernel dimension {spec.dim}")
    n = len(data)
    if n == 0:
        return GpPosterior(spec, data, np.zeros((0, 0)), np.zeros(0))
    K = spec(data.inputs, data.inputs) + spec.noise * np.eye(n)
    L, jitter = _factorize(K)
    weights = cho_solve((L, True), data.outputs - spec.mean)
    return GpPosterior(spec, data, L, weights, jitter)


@dataclass(frozen=True)
class Lookahead:
    """Precomputation for sampling one-step-ahead posterior means at a candidate.

    The future mean after observing the candidate is ``mu_n(q) + sigma_tilde(q) * z``
    with ``z`` the standard-normal score of the new observation.
    """

    posterior: GpPosterior
    candidate: np.ndarray
    kvec: np.ndarray  # -K^-1 k0(X, candidate)
    denom: float  # sqrt(k_n(c, c) + noise)
    _inputs: np.ndarray = field(repr=False, default=None)

    def augmented_weights(self, z: float) -> np.ndarray:
        """Weights over ``X`` plus the candidate giving the updated posterior mean."""
        post = self.posterior
        extra = np.append(self.kvec, 1.0) * (z / self.denom)
        return np.append(post.weights, 0.0) + extra

    def sigma_tilde(self, q: PointsLike):
        Q, single = as_points(q, self.posterior.dim)
        k_new = self.posterior.kernel(Q, self.candidate[None, :])[:, 0]
        if self.posterior.n:
            k_new = k_new + self.posterior.cross(Q) @ self.kvec
        out = k_new / self.denom
        return float(out[0]) if single else out

    def mean(self, z: float, q: PointsLike):
        """The sampled future posterior mean at ``q`` for score ``z``."""
        Q, single = as_points(q, self.posterior.dim)
        K = self.posterior.kernel(Q, self._inputs)
        out = self.posterior.kernel.mean + K @ self.augmented_weights(z)
        return float(out[0]) if single else out


def make_lookahead(post: GpPosterior, candidate: PointsLike) -> Lookahead:
    C, _ = as_points(candidate, post.dim)
    c = C[0]
    prior = float(post.kernel.diag(C)[0])
    if post.n:
        kc = post.cross(C)[0]
        kvec = -post.solve(kc)
        var = prior + kc @ kvec
    else:
        kvec = np.zeros(0)
        var = prior
    denom2 = var + post.kernel.noise
    if denom2 < 1e-12:
        raise DegenerateCandidateError(
            f"candidate has predictive variance {denom2:.3e}; it is fully observed"
        )
    inputs = np.vstack([post.X, c[None, :]])
    return Lookahead(post, c, kvec, float(np.sqrt(denom2)), inputs)


LookaheadContext = Lookahead


def posterior_mean(post: GpPosterior, q: PointsLike):
    """``mu0 + k0(q, X) . K^-1 (Y - mu0)``."""
    return post.mean(q)


def posterior_cov(post: GpPosterior, a: PointsLike, b: PointsLike):
    return post.cov(a, b)


def sigma_tilde(post: GpPosterior, ctx: Lookahead, q: PointsLike):
    """Coefficient of ``z`` in the one-step-ahead mean at ``q``."""
    if ctx.posterior is not post:
        raise ValueError("lookahead context belongs to a different posterior")
    return ctx.sigma_tilde(q)


def lookahead_mean(post: GpPosterior, ctx: Lookahead, z: float, q: PointsLike):
    """Posterior mean at ``q`` after observing the candidate with predictive score ``z``."""
    if ctx.posterior is not post:
        raise ValueError("lookahead context belongs to a different posterior")
    return ctx.mean(z, q)
