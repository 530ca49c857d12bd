"""Single-state knowledge-gradient variants and expected improvement.

All knowledge-gradient routines reduce to the expectation of the upper
envelope of linear functions of a standard normal score, computed exactly by
:func:`kg_epigraph`.  The maximizations over actions use :class:`InnerOptimizer`
(random search followed by adaptive gradient ascent) on sampled future
posterior means, which are evaluated in O(n) per point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri

from .gp import DegenerateCandidateError, GpPosterior, Lookahead, PointsLike, as_points

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _pdf(z: float) -> float:
    if math.isinf(z):
        return 0.0
    return _INV_SQRT_2PI * math.exp(-0.5 * z * z)


def _cdf_diff(lo: float, hi: float) -> float:
    # Phi(hi) - Phi(lo) without cancellation in the upper tail.
    if lo > 0:
        return 0.5 * (math.erfc(lo / math.sqrt(2)) - math.erfc(hi / math.sqrt(2)))
    return 0.5 * (math.erfc(-hi / math.sqrt(2)) - math.erfc(-lo / math.sqrt(2)))


def _log_tail(u: float) -> float:
    """``log(phi(u) - u * (1 - Phi(u)))`` for ``u >= 0``."""
    if u < 25.0:
        return math.log(_pdf(u) - u * 0.5 * math.erfc(u / math.sqrt(2)))
    # asymptotic series of the Mills-ratio remainder; relative error below 1e-11 here
    r = 1.0 / (u * u)
    return -0.5 * u * u + math.log(_INV_SQRT_2PI) + math.log(r * (1 - r * (3 - r * (15 - r * (105 - 945 * r)))))


def _sorted_lines(mu: np.ndarray, sigma: np.ndarray):
    """Lines sorted by slope with equal slopes reduced to the larger intercept."""
    order = np.lexsort((mu, sigma))
    s_sig = sigma[order]
    keep = np.ones(mu.size, dtype=bool)
    keep[:-1] = s_sig[1:] != s_sig[:-1]
    return order, order[keep]


def _upper_envelope(a: list, b: list):
    """Indices of the envelope lines and the scores where each takes over."""
    hull = [0]
    cuts = [-math.inf]
    for i in range(1, len(a)):
        while True:
            j = hull[-1]
            z = (a[j] - a[i]) / (b[i] - b[j])
            if z < cuts[-1]:
                hull.pop()
                cuts.pop()
                continue
            break
        hull.append(i)
        cuts.append(z)
    cuts.append(math.inf)
    return hull, cuts


def _epigraph(mu: np.ndarray, sigma: np.ndarray):
    """Envelope sweep; returns (value, d value/d mu, d value/d sigma)."""
    m = mu.size
    top = int(np.argmax(mu))
    mmax = mu[top]
    order, idx = _sorted_lines(mu, sigma)
    s_sig = sigma[order]
    a = (mu[idx] - mmax).tolist()
    b = sigma[idx].tolist()
    hull, cuts = _upper_envelope(a, b)

    value = 0.0
    dmu = np.zeros(m)
    dsig = np.zeros(m)
    for k, i in enumerate(hull):
        lo, hi = cuts[k], cuts[k + 1]
        B = _cdf_diff(lo, hi)
        A = _pdf(hi) - _pdf(lo)
        value += B * a[i] - A * b[i]
        dmu[idx[i]] += B
        dsig[idx[i]] -= A
    dmu[top] -= 1.0
    s_mu = mu[order]
    tol = 1e-12 * max(1.0, float(np.max(np.abs(mu))), float(np.max(np.abs(sigma))))
    dup = (np.abs(np.diff(s_sig)) <= tol) & (np.abs(np.diff(s_mu)) <= tol)
    if dup.any():
        # lines equal up to round-off share their derivative (the symmetric subgradient)
        group = np.concatenate([[0], np.cumsum(~dup)])
        size = np.bincount(group)
        for arr in (dmu, dsig):
            tot = np.bincount(group, weights=arr[order])
            arr[order] = (tot / size)[group]
    return value, dmu, dsig


def kg_epigraph(mu, sigma) -> float:
    """``E[max_i(mu_i + sigma_i Z)] - max_i mu_i`` for ``Z ~ N(0, 1)``, exactly.

    Lines are sorted by slope, dominated lines are pruned from the upper
    envelope, and the Gaussian expectation is summed in closed form over the
    envelope segments.
    """
    mu = np.asarray(mu, dtype=float).reshape(-1)
    sigma = np.asarray(sigma, dtype=float).reshape(-1)
    if mu.shape != sigma.shape or mu.size == 0:
        raise ValueError("mu and sigma must be non-empty and of equal length")
    if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(sigma))):
        raise ValueError("ensemble entries must be finite")
    return _epigraph(mu, sigma)[0]


def log_kg_epigraph(mu, sigma) -> float:
    """Natural log of :func:`kg_epigraph`, accurate where the value underflows.

    Uses the breakpoint form ``sum_k (b_k - b_{k-1}) f(-|c_k|)`` with
    ``f(z) = z Phi(z) + phi(z)``; returns ``-inf`` when the envelope is a
    single line.
    """
    mu = np.asarray(mu, dtype=float).reshape(-1)
    sigma = np.asarray(sigma, dtype=float).reshape(-1)
    if mu.shape != sigma.shape or mu.size == 0:
        raise ValueError("mu and sigma must be non-empty and of equal length")
    _, idx = _sorted_lines(mu, sigma)
    a = mu[idx].tolist()
    b = sigma[idx].tolist()
    hull, cuts = _upper_envelope(a, b)
    terms = [math.log(b[hull[k]] - b[hull[k - 1]]) + _log_tail(abs(cuts[k])) for k in range(1, len(hull))]
    if not terms:
        return -math.inf
    top = max(terms)
    return top + math.log(sum(math.exp(t - top) for t in terms))


def kg_epigraph_grad(mu, sigma):
    """Value and gradients of :func:`kg_epigraph` with respect to ``mu`` and ``sigma``."""
    mu = np.asarray(mu, dtype=float).reshape(-1)
    sigma = np.asarray(sigma, dtype=float).reshape(-1)
    return _epigraph(mu, sigma)


def z_quantiles(n_z: int) -> np.ndarray:
    """Equally spaced standard-normal quantiles ``Phi^-1((2j - 1) / (2 n_z))``.

    ``n_z`` must be odd so that zero is on the grid.
    """
    if n_z < 2 or n_z % 2 == 0:
        raise ValueError(f"n_z must be an odd integer >= 3, got {n_z}")
    z = ndtri((2.0 * np.arange(1, n_z + 1) - 1.0) / (2.0 * n_z))
    z[n_z // 2] = 0.0
    return z


def check_zgrid(zgrid) -> np.ndarray:
    z = np.sort(np.asarray(zgrid, dtype=float))
    if z.size < 2 or not np.any(z == 0.0):
        raise ValueError("a Z grid needs at least two values including 0")
    return z


@dataclass(frozen=True)
class InnerOptimizer:
    """Random search over ``n_random`` points, then ``n_ascent`` ascent steps.

    ``step`` is the initial ascent step as a fraction of the box width; it
    grows after accepted steps and shrinks after rejected ones.
    """

    n_random: int = 40
    n_ascent: int = 20
    step: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.n_random < 1 or self.n_ascent < 0:
            raise ValueError("need n_random >= 1 and n_ascent >= 0")

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)


def sampled_values(post: GpPosterior, Q, W, cand=None, wc=None, grad=False):
    """Evaluate ``mu0 + k0(q, X) . W_b + k0(q, c_b) * wc_b`` row-wise.

    ``Q`` is (B, d); ``W`` is (B, n) or (n,); ``cand``/``wc`` optionally add the
    candidate column of the augmented weights.  Returns values (B,) and, with
    ``grad``, gradients (B, d).
    """
    kern = post.kernel
    B = Q.shape[0]
    val = np.full(B, kern.mean)
    g = np.zeros_like(Q) if grad else None
    if post.n:
        if grad:
            v, gw = kern.weighted(Q, post.X, W, grad=True)
            val = val + v
            g = g + gw
        else:
            val = val + kern.weighted(Q, post.X, W)
    if cand is not None:
        if grad:
            kc, gc = kern.grad_paired(Q, cand)
            g = g + gc * wc[:, None]
        else:
            kc = kern.paired(Q, cand)
        val = val + kc * wc
    return (val, g) if grad else val


def ascend(post, Q, free, lo, hi, W, cand=None, wc=None, n_steps=20, step=0.05, min_step=1e-4):
    """Adaptive normalized-gradient ascent over the ``free`` coordinates of each row.

    Steps are fractions of the box width: grown by 1.5 after an improvement,
    shrunk by 0.4 otherwise; a row stops once its step falls below ``min_step``.
    """
    Q = np.array(Q, dtype=float)
    W = np.broadcast_to(W, (Q.shape[0], post.n))
    width = (hi - lo)[free]
    f, g = sampled_values(post, Q, W, cand, wc, grad=True)
    rate = np.full(Q.shape[0], step)
    for _ in range(n_steps):
        u = g[:, free] * width
        norm = np.linalg.norm(u, axis=1)
        act = np.flatnonzero((norm > 0) & (rate >= min_step))
        if act.size == 0:
            break
        prop = Q[act].copy()
        move = u[act] / norm[act, None] * (rate[act, None] * width)
        prop[:, free] = np.clip(prop[:, free] + move, lo[free], hi[free])
        f_new, g_new = sampled_values(
            post, prop, W[act], None if cand is None else cand[act], None if wc is None else wc[act], grad=True
        )
        better = f_new > f[act]
        idx = act[better]
        Q[idx] = prop[better]
        f[idx] = f_new[better]
        g[idx] = g_new[better]
        rate[act] = np.where(better, rate[act] * 1.5, rate[act] * 0.4)
    return Q, f


def _slice_bounds(post, state, bounds):
    d = post.dim
    if bounds is None:
        lo, hi = np.zeros(d), np.ones(d)
    else:
        lo, hi = (np.asarray(b, dtype=float) for b in bounds)
    free = np.ones(d, dtype=bool)
    if state is not None:
        free[: np.size(state)] = False
    return lo, hi, free


def _base_points(state, lo, hi, free, count, rng):
    pts = np.empty((count, lo.size))
    pts[:, free] = rng.uniform(lo[free], hi[free], size=(count, int(free.sum())))
    if state is not None:
        pts[:, ~free] = np.asarray(state, dtype=float)
    return pts


def _resolve(post, ctx) -> Lookahead | None:
    if ctx is None or isinstance(ctx, Lookahead):
        return ctx
    try:
        return post.lookahead(ctx)
    except DegenerateCandidateError:
        return None


def maximize_sampled_means(post, ctx, z, state, opt: InnerOptimizer, bounds=None, rng=None):
    """Argmax over the free coordinates of ``mu_n + sigma_tilde * z_j`` for each ``z_j``.

    One random-search set is shared by all ``z_j``; each then ascends from its
    own best random point.  Returns points (n_z, d) and values (n_z,).
    """
    z = np.atleast_1d(np.asarray(z, dtype=float))
    lo, hi, free = _slice_bounds(post, state, bounds)
    rng = rng if rng is not None else opt.rng()
    R = _base_points(state, lo, hi, free, opt.n_random, rng)
    mu = post.mean(R)
    sig = ctx.sigma_tilde(R) if ctx is not None else np.zeros(len(R))
    vals = mu[None, :] + z[:, None] * sig[None, :]
    starts = R[np.argmax(vals, axis=1)]
    W = post.weights
    if ctx is not None:
        W = post.weights[None, :] + np.outer(z / ctx.denom, ctx.kvec)
        cand = np.repeat(ctx.candidate[None, :], z.size, axis=0)
        wc = z / ctx.denom
    else:
        cand = wc = None
    return ascend(post, starts, free, lo, hi, W, cand, wc, opt.n_ascent, opt.step)


def kg_d(post: GpPosterior, ctx, state, X_d, bounds=None) -> float:
    """Knowledge gradient over a fixed discretization of actions (or joint points).

    ``state=None`` treats ``X_d`` as full joint points.
    """
    ctx = _resolve(post, ctx)
    if ctx is None:
        return 0.0
    X_d = np.atleast_2d(np.asarray(X_d, dtype=float))
    if state is not None:
        S = np.repeat(np.atleast_2d(np.asarray(state, dtype=float)), len(X_d), axis=0)
        X_d = np.hstack([S, X_d])
    return kg_epigraph(post.mean(X_d), ctx.sigma_tilde(X_d))


def kg_mc(post, ctx, state, n_z: int, opt: InnerOptimizer, rng, bounds=None, z=None) -> float:
    """Monte-Carlo knowledge gradient with numerically maximized sampled means."""
    ctx = _resolve(post, ctx)
    if ctx is None:
        return 0.0
    if z is None:
        z = rng.standard_normal(n_z)
    z = np.asarray(z, dtype=float)
    inner_rng = np.random.default_rng(rng.integers(2**63))
    zz = np.concatenate([[0.0], z])
    _, vals = maximize_sampled_means(post, ctx, zz, state, opt, bounds, inner_rng)
    return float(np.mean(vals[1:]) - vals[0])


def kg_hybrid(post, ctx, state, zgrid, opt: InnerOptimizer, bounds=None, rng=None) -> float:
    """Hybrid knowledge gradient on the discretization of sampled-mean argmaxes."""
    ctx = _resolve(post, ctx)
    if ctx is None:
        return 0.0
    zgrid = check_zgrid(zgrid)
    X_star, _ = maximize_sampled_means(post, ctx, zgrid, state, opt, bounds, rng)
    return kg_epigraph(post.mean(X_star), ctx.sigma_tilde(X_star))


def ei_from_moments(m, v, incumbent):
    """Expected improvement ``E[(m + sqrt(v) Z - incumbent)^+]`` elementwise."""
    m = np.asarray(m, dtype=float)
    v = np.asarray(v, dtype=float)
    diff = m - incumbent
    sd = np.sqrt(np.maximum(v, 0.0))
    out = np.maximum(diff, 0.0)
    ok = v > 1e-12
    u = diff[ok] / sd[ok]
    out[ok] = diff[ok] * ndtr(u) + sd[ok] * np.exp(-0.5 * u * u) * _INV_SQRT_2PI
    return np.maximum(out, 0.0)


def expected_improvement(post: GpPosterior, q: PointsLike, incumbent: float):
    Q, single = as_points(q, post.dim)
    out = ei_from_moments(post.mean(Q), post.var(Q), incumbent)
    return float(out[0]) if single else out


def expected_improvement_grad(post: GpPosterior, Q, incumbent: float):
    """EI values and gradients with respect to the query points; (m,), (m, d)."""
    Q = np.atleast_2d(Q)
    m = post.mean(Q)
    dm = post.mean_grad(Q)
    v = np.asarray(post.kernel.diag(Q), dtype=float)
    dv = np.zeros_like(Q)
    if post.n:
        Kq = post.cross(Q)
        Ki_k = post.solve(Kq.T)  # (n, m)
        v = v - np.sum(Kq.T * Ki_k, axis=0)
        dv = -2.0 * np.einsum("mnd,nm->md", post.kernel.grad(Q, post.X), Ki_k)
    v = np.maximum(v, 0.0)
    sd = np.sqrt(v)
    val = ei_from_moments(m, v, incumbent)
    ok = sd > 1e-6
    g = np.where((m > incumbent)[:, None], dm, 0.0)
    u = (m[ok] - incumbent) / sd[ok]
    # dEI/dm = Phi(u); dEI/dsd = phi(u)
    g[ok] = ndtr(u)[:, None] * dm[ok] + (
        np.exp(-0.5 * u * u) * _INV_SQRT_2PI / (2.0 * sd[ok])
    )[:, None] * dv[ok]
    return val, g
