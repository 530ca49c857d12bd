"""Conditional acquisition: integrating per-state knowledge gradient over states.

The acquisition value of a candidate ``c = (s, x)`` is

    sum_i w_i * KG_c(s_i; c)

where for a continuous state space the ``s_i`` are drawn from a truncated
Gaussian proposal centred on ``s`` with the state lengthscales as standard
deviations and ``w_i = P[s_i] / (n_s q(s_i | s))``; for a finite state space
every state is used with ``w_i = P[s_i]``.  Each ``KG_c`` is a hybrid KG whose
discretization is the set of argmaxes of sampled future posterior means.

Everything here is vectorized over a batch of candidates so that one call
evaluates the whole population of the outer multi-start optimizer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.special import ndtr, ndtri
from scipy.stats import qmc

from .acquisition import (
    InnerOptimizer,
    _epigraph,
    ascend,
    log_kg_epigraph,
    check_zgrid,
    sampled_values,
    z_quantiles,
)
from .gp import GpPosterior, KernelSpec, as_points

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class SamplingError(RuntimeError):
    """Importance sampling found no states with positive density."""


class OptimizationError(RuntimeError):
    """Every acquisition evaluation was non-finite."""


@dataclass(frozen=True)
class StateSpace:
    """Box of states with a density, optionally restricted to a finite set.

    ``density`` maps an (m, d_s) array to (m,) density values; ``sampler``
    draws ``n`` i.i.d. states given a generator.  For a finite set, ``states``
    and ``probs`` replace both.
    """

    lower: np.ndarray
    upper: np.ndarray
    density: Optional[Callable[[np.ndarray], np.ndarray]] = None
    sampler: Optional[Callable[[np.random.Generator, int], np.ndarray]] = None
    states: Optional[np.ndarray] = None
    probs: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "lower", np.atleast_1d(np.asarray(self.lower, dtype=float)))
        object.__setattr__(self, "upper", np.atleast_1d(np.asarray(self.upper, dtype=float)))
        if self.states is not None:
            S = np.atleast_2d(np.asarray(self.states, dtype=float))
            if S.shape[1] != self.lower.size:
                S = S.reshape(-1, self.lower.size)
            p = np.asarray(self.probs if self.probs is not None else np.ones(len(S)), dtype=float)
            object.__setattr__(self, "states", S)
            object.__setattr__(self, "probs", p / p.sum())

    @property
    def d_s(self) -> int:
        return self.lower.size

    @property
    def finite(self) -> bool:
        return self.states is not None

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.finite:
            return self.states[rng.choice(len(self.states), size=n, p=self.probs)]
        if self.sampler is None:
            raise ValueError("state space has no sampler")
        return np.atleast_2d(self.sampler(rng, n)).reshape(n, self.d_s)

    def pdf(self, S) -> np.ndarray:
        S = np.atleast_2d(S)
        if self.finite:
            match = np.all(S[:, None, :] == self.states[None, :, :], axis=-1)
            return match.astype(float) @ self.probs
        return np.asarray(self.density(S), dtype=float)


@dataclass(frozen=True)
class OuterBudget:
    """Multi-start stochastic ascent budget for the acquisition optimizer."""

    n_starts: int = 10
    n_uniform: int = 5
    n_steps: int = 30
    lr: float = 0.05


@dataclass(frozen=True)
class ConboConfig:
    n_s: int = 20
    zgrid: np.ndarray = field(default_factory=lambda: z_quantiles(5))
    inner: InnerOptimizer = InnerOptimizer()
    outer: OuterBudget = OuterBudget()
    #: finite action set; when given, each per-state KG is computed exactly
    #: over it instead of on an optimized discretization
    action_set: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.n_s < 1:
            raise ValueError("n_s must be >= 1")
        object.__setattr__(self, "zgrid", check_zgrid(self.zgrid))


# --------------------------------------------------------------------------
# Policy and its lookup table
# --------------------------------------------------------------------------


class PolicyCache:
    """Lookup table of (state, action, value) triples for one posterior.

    A query within ``rho_exact`` of a stored state reuses its action; within
    ``rho_warm`` the stored action seeds a fresh ascent.
    """

    def __init__(self, d_s: int, rho_exact: float = 1e-3, rho_warm: float = 0.1):
        if not rho_exact < rho_warm:
            raise ValueError("rho_exact must be smaller than rho_warm")
        self.rho_exact = rho_exact
        self.rho_warm = rho_warm
        self.d_s = d_s
        self.clear()

    def clear(self):
        self.states = np.zeros((0, self.d_s))
        self.actions = None
        self.values = np.zeros(0)

    def __len__(self):
        return len(self.values)

    def lookup(self, S: np.ndarray):
        """Return (nearest index or -1, distance) for each query state."""
        S = np.atleast_2d(S)
        if not len(self):
            return np.full(len(S), -1), np.full(len(S), np.inf)
        d2 = np.sum((S[:, None, :] - self.states[None, :, :]) ** 2, axis=-1)
        idx = np.argmin(d2, axis=1)
        return idx, np.sqrt(d2[np.arange(len(S)), idx])

    def insert(self, S, A, values):
        S = np.atleast_2d(S)
        A = np.atleast_2d(A)
        self.states = np.vstack([self.states, S])
        self.actions = A.copy() if self.actions is None else np.vstack([self.actions, A])
        self.values = np.concatenate([self.values, np.atleast_1d(values)])


def _action_box(bounds, d_s):
    lo, hi = (np.asarray(b, dtype=float) for b in bounds)
    return lo, hi


def policy_actions(post: GpPosterior, states, cache: Optional[PolicyCache], inner: InnerOptimizer,
                   bounds, rng=None, action_set=None):
    """Maximize the posterior mean over actions for each state; returns (actions, values)."""
    S = np.atleast_2d(np.asarray(states, dtype=float))
    d_s = S.shape[1]
    lo, hi = _action_box(bounds, d_s)
    m = len(S)
    if action_set is not None:
        A = np.atleast_2d(action_set)
        Q = np.hstack([np.repeat(S, len(A), axis=0), np.tile(A, (m, 1))])
        mu = post.mean(Q).reshape(m, len(A))
        best = np.argmax(mu, axis=1)
        return A[best], mu[np.arange(m), best]
    rng = rng if rng is not None else inner.rng()
    actions = np.empty((m, lo.size - d_s))
    values = np.empty(m)
    todo = np.ones(m, dtype=bool)
    warm = np.zeros(m, dtype=bool)
    starts = np.empty((m, lo.size))
    starts[:, :d_s] = S
    if cache is not None and len(cache):
        idx, dist = cache.lookup(S)
        exact = dist <= cache.rho_exact
        actions[exact] = cache.actions[idx[exact]]
        values[exact] = cache.values[idx[exact]]
        todo = ~exact
        warm = todo & (dist <= cache.rho_warm)
        starts[warm, d_s:] = cache.actions[idx[warm]]
    cold = todo & ~warm
    if np.any(cold):
        nc = int(cold.sum())
        R = rng.uniform(lo[d_s:], hi[d_s:], size=(nc, inner.n_random, lo.size - d_s))
        Q = np.concatenate([np.repeat(S[cold][:, None, :], inner.n_random, axis=1), R], axis=-1)
        mu = post.mean(Q.reshape(-1, lo.size)).reshape(nc, inner.n_random)
        starts[cold, d_s:] = R[np.arange(nc), np.argmax(mu, axis=1)]
    if np.any(todo):
        free = np.zeros(lo.size, dtype=bool)
        free[d_s:] = True
        Q, f = ascend(post, starts[todo], free, lo, hi, post.weights, n_steps=inner.n_ascent, step=inner.step)
        actions[todo] = Q[:, d_s:]
        values[todo] = f
        if cache is not None:
            cache.insert(S[todo], Q[:, d_s:], f)
    return actions, values


def policy_action(post, state, cache, inner, bounds, rng=None):
    """The action maximizing the posterior mean in ``state``."""
    A, _ = policy_actions(post, np.atleast_2d(state), cache, inner, bounds, rng)
    return A[0]


# --------------------------------------------------------------------------
# Importance sampling of states
# --------------------------------------------------------------------------


def _truncnorm_logq(S, center, scale, lo, hi):
    """Log density of the box-truncated diagonal Gaussian and d/d center."""
    a = (lo - center) / scale
    b = (hi - center) / scale
    mass = ndtr(b) - ndtr(a)
    u = (S - center) / scale
    logq = np.sum(-0.5 * u * u - np.log(scale * math.sqrt(2 * math.pi)) - np.log(mass), axis=-1)
    pdf = lambda t: np.exp(-0.5 * t * t) * _INV_SQRT_2PI  # noqa: E731
    dlogmass = (-pdf(b) + pdf(a)) / scale / mass
    dlogq = u / scale - dlogmass
    return logq, dlogq


def _truncnorm_sample(center, scale, lo, hi, size, rng):
    a = (lo - center) / scale
    b = (hi - center) / scale
    # sample in whichever tail keeps precision
    flip = a > 0
    a2 = np.where(flip, -b, a)
    b2 = np.where(flip, -a, b)
    u = rng.uniform(size=size + center.shape[-1:])
    t = ndtri(ndtr(a2) + u * (ndtr(b2) - ndtr(a2)))
    t = np.where(flip, -t, t)
    return np.clip(center + scale * t, lo, hi)


def sample_mc_states(center, l_s, n_s: int, space: StateSpace, rng, max_tries: int = 1000):
    """Draw ``n_s`` states around ``center`` and their importance weights.

    Returns ``(states, weights)`` with ``weights = P[s] / q(s | center)``; the
    mean of ``weights * g(states)`` estimates the integral of ``g`` against ``P``.
    A finite state space returns all states with weights ``P[s]``.
    """
    if space.finite:
        return space.states.copy(), space.probs.copy()
    center = np.atleast_1d(np.asarray(center, dtype=float))
    scale = np.atleast_1d(np.asarray(l_s, dtype=float))
    for _ in range(max_tries):
        S = _truncnorm_sample(center, scale, space.lower, space.upper, (n_s,), rng)
        logq, _ = _truncnorm_logq(S, center, scale, space.lower, space.upper)
        w = space.pdf(S) * np.exp(-logq)
        if np.any(w > 0):
            return S, w
    raise SamplingError("state density is zero everywhere the proposal reaches")


# --------------------------------------------------------------------------
# Batched knowledge-gradient machinery
# --------------------------------------------------------------------------


@dataclass
class _Lookaheads:
    C: np.ndarray
    kvec: np.ndarray  # (C, n)
    denom: np.ndarray  # (C,)
    ok: np.ndarray  # (C,) non-degenerate

    @classmethod
    def build(cls, post: GpPosterior, C):
        C = np.atleast_2d(C)
        prior = post.kernel.diag(C).astype(float)
        if post.n:
            Kc = post.cross(C)
            KiKc = post.solve(Kc.T).T
            var = prior - np.sum(Kc * KiKc, axis=1)
            kvec = -KiKc
        else:
            var = prior
            kvec = np.zeros((len(C), 0))
        denom2 = var + post.kernel.noise
        ok = denom2 >= 1e-12
        denom = np.sqrt(np.where(ok, denom2, 1.0))
        return cls(C, kvec, denom, ok)


def _sigma_tilde_rows(post, la: _Lookaheads, Q, cidx):
    """sigma_tilde for rows of ``Q`` (m, d) against candidates ``cidx`` (m,)."""
    kc = post.kernel.paired(Q, la.C[cidx])
    if post.n:
        kc = kc + np.sum(post.cross(Q) * la.kvec[cidx], axis=1)
    return kc / la.denom[cidx]


@dataclass
class FrozenDiscretization:
    """The randomness of one batched acquisition evaluation, held fixed.

    ``points`` has shape (C, S, m, d): for candidate c and state slot i the
    discretization used by that state's KG.  ``states`` (C, S, d_s) and
    ``base_weights`` (C, S) hold the states and their density values (or
    probabilities); ``importance`` says whether weights are divided by the
    proposal density.
    """

    points: np.ndarray
    states: Optional[np.ndarray]
    base_weights: np.ndarray
    importance: bool
    n_s: int


def _slice_weights(frozen: FrozenDiscretization, C, scale, space, grad):
    """Effective per-slice weights (C, S) and their gradient wrt the candidate state."""
    base = frozen.base_weights
    if not frozen.importance:
        return base, None
    d_s = frozen.states.shape[-1]
    center = C[:, None, :d_s]
    logq, dlogq = _truncnorm_logq(frozen.states, center, scale, space.lower, space.upper)
    w = base * np.exp(-logq) / frozen.n_s
    return w, (-w[..., None] * dlogq if grad else None)


def _frozen_moments(post, la: _Lookaheads, frozen: FrozenDiscretization):
    """Current means and sigma_tilde at every discretization point, plus shared pieces."""
    P = frozen.points
    Cn, Sn, m, d = P.shape
    flat = P.reshape(-1, d)
    cidx = np.repeat(np.arange(Cn), Sn * m)
    Kq = post.cross(flat) if post.n else np.zeros((len(flat), 0))
    mu = post.kernel.mean + (Kq @ post.weights if post.n else 0.0)
    kc = post.kernel.paired(flat, la.C[cidx])
    kn = kc + (np.sum(Kq * la.kvec[cidx], axis=1) if post.n else 0.0)
    denom = la.denom[cidx]
    sig = kn / denom
    mu = np.broadcast_to(mu, sig.shape).reshape(Cn, Sn, m)
    return mu, sig.reshape(Cn, Sn, m), (flat, cidx, Kq, kn, denom)


def frozen_log_values(post, la: _Lookaheads, frozen: FrozenDiscretization, scale=None, space=None):
    """Natural log of :func:`frozen_values`, exact where the values underflow to zero."""
    mu, sig, _ = _frozen_moments(post, la, frozen)
    w, _ = _slice_weights(frozen, la.C, scale, space, False)
    out = np.full(len(la.C), -np.inf)
    for c in range(len(la.C)):
        if not la.ok[c]:
            continue
        terms = [math.log(w[c, i]) + log_kg_epigraph(mu[c, i], sig[c, i])
                 for i in range(mu.shape[1]) if w[c, i] > 0.0]
        terms = [t for t in terms if t > -math.inf]
        if terms:
            top = max(terms)
            out[c] = top + math.log(sum(math.exp(t - top) for t in terms))
    return out


def frozen_values(post, la: _Lookaheads, frozen: FrozenDiscretization, scale=None, space=None,
                  grad=False):
    """Acquisition values (and candidate gradients) on a frozen discretization."""
    Cn, Sn, m, d = frozen.points.shape
    C = la.C
    mu, sig, (flat, cidx, Kq, kn, denom) = _frozen_moments(post, la, frozen)
    w, dw = _slice_weights(frozen, C, scale, space, grad)

    kg = np.zeros((Cn, Sn))
    dsig = np.zeros((Cn, Sn, m)) if grad else None
    for c in range(Cn):
        if not la.ok[c]:
            continue
        for i in range(Sn):
            if w[c, i] == 0.0 and not grad:
                continue
            val, _, ds_ = _epigraph(mu[c, i], sig[c, i])
            kg[c, i] = val
            if grad:
                dsig[c, i] = ds_
    values = np.where(la.ok, np.sum(w * kg, axis=1), 0.0)
    if not grad:
        return values, None

    # d sigma_tilde(q; c) / d c for every discretization point
    dk0 = post.kernel.grad_paired(C[cidx], flat)[1]  # d k0(c, q) / d c
    if post.n:
        H = post.solve(Kq.T).T  # K^-1 k0(X, q), (M, n)
        G = post.kernel.grad(C, post.X)  # (C, n, d): d k0(c, x_i) / d c
        dkn = dk0 - np.einsum("mn,mnd->md", H, G[cidx])
        ddenom2 = 2.0 * np.einsum("cn,cnd->cd", la.kvec, G)
    else:
        dkn = dk0
        ddenom2 = np.zeros((Cn, d))
    dsig_dc = dkn / denom[:, None] - (kn / (2.0 * denom**3))[:, None] * ddenom2[cidx]
    dsig_dc = dsig_dc.reshape(Cn, Sn, m, d)
    grads = np.einsum("cs,csm,csmd->cd", w, dsig, dsig_dc)
    if dw is not None:
        d_s = dw.shape[-1]
        grads[:, :d_s] += np.einsum("cs,csk->ck", kg, dw)
    grads[~la.ok] = 0.0
    return values, grads


def _hybrid_points(post, la: _Lookaheads, states, zgrid, inner: InnerOptimizer, bounds, rng,
                   cache: Optional[PolicyCache], action_set=None):
    """Optimized discretizations (C, S, n_z, d) for every candidate and state slot.

    ``states=None`` means the global problem: maximize over every coordinate.
    """
    lo, hi = (np.asarray(b, dtype=float) for b in bounds)
    d = lo.size
    Cn = len(la.C)
    zgrid = np.asarray(zgrid, dtype=float)
    nz = zgrid.size
    if states is None:
        d_s = 0
        Sn = 1
        S_flat = np.zeros((Cn, 0))
    else:
        Sn, d_s = states.shape[1], states.shape[2]
        S_flat = states.reshape(-1, d_s)
    Pn = Cn * Sn
    cidx = np.repeat(np.arange(Cn), Sn)

    if action_set is not None:
        A = np.atleast_2d(action_set)
        pts = np.concatenate(
            [np.repeat(S_flat[:, None, :], len(A), axis=1), np.broadcast_to(A, (Pn,) + A.shape)], axis=-1
        )
        return pts.reshape(Cn, Sn, len(A), d)

    R = inner.n_random
    rand = rng.uniform(lo[d_s:], hi[d_s:], size=(Pn, R, d - d_s))
    Q = np.concatenate([np.repeat(S_flat[:, None, :], R, axis=1), rand], axis=-1).reshape(-1, d)
    qidx = np.repeat(cidx, R)
    Kq = post.cross(Q) if post.n else None
    mu = post.kernel.mean + (Kq @ post.weights if post.n else np.zeros(len(Q)))
    kn = post.kernel.paired(Q, la.C[qidx])
    if post.n:
        kn = kn + np.sum(Kq * la.kvec[qidx], axis=1)
    sig = (kn / la.denom[qidx]).reshape(Pn, R)
    mu = mu.reshape(Pn, R)
    scores = mu[:, None, :] + zgrid[None, :, None] * sig[:, None, :]  # (P, nz, R)
    best = np.argmax(scores, axis=2)
    starts = rand[np.arange(Pn)[:, None], best]  # (P, nz, d - d_s)

    # the z = 0 argmax is the policy action; consult and feed the cache
    zero = int(np.flatnonzero(zgrid == 0.0)[0])
    skip = np.zeros((Pn, nz), dtype=bool)
    fixed_zero = None
    if cache is not None and states is not None and len(cache):
        idx, dist = cache.lookup(S_flat)
        exact = dist <= cache.rho_exact
        warm = ~exact & (dist <= cache.rho_warm)
        starts[warm, zero] = cache.actions[idx[warm]]
        skip[exact, zero] = True
        fixed_zero = (exact, cache.actions[idx[exact]])

    pts = np.empty((Pn, nz, d))
    pts[..., :d_s] = S_flat[:, None, :]
    pts[..., d_s:] = starts
    run = ~skip
    inst = pts[run]
    pidx = np.broadcast_to(np.arange(Pn)[:, None], (Pn, nz))[run]
    zval = np.broadcast_to(zgrid[None, :], (Pn, nz))[run]
    ci = cidx[pidx]
    scale = zval / la.denom[ci]
    W = post.weights[None, :] + scale[:, None] * la.kvec[ci] if post.n else np.zeros((len(inst), 0))
    free = np.zeros(d, dtype=bool)
    free[d_s:] = True
    opt_pts, opt_vals = ascend(post, inst, free, lo, hi, W, la.C[ci], scale, inner.n_ascent, inner.step)
    pts[run] = opt_pts
    if fixed_zero is not None:
        exact, acts = fixed_zero
        pts[exact, zero, d_s:] = acts
    if cache is not None and states is not None:
        fresh = run[:, zero]
        if fresh.any():
            zero_rows = (np.flatnonzero(run.reshape(-1)) % nz) == zero
            cache.insert(S_flat[fresh], opt_pts[zero_rows][:, d_s:], opt_vals[zero_rows])
    return pts.reshape(Cn, Sn, nz, d)


class ConditionalAcquisition:
    """ConBO acquisition for one posterior, evaluated in candidate batches.

    Holds the policy cache for this posterior, so one instance should be used
    per iteration of the outer loop.
    """

    def __init__(self, post: GpPosterior, cfg: ConboConfig, space: StateSpace, bounds,
                 cache: Optional[PolicyCache] = None, global_mode: bool = False):
        self.post = post
        self.cfg = cfg
        self.space = space
        self.bounds = tuple(np.asarray(b, dtype=float) for b in bounds)
        self.d_s = space.d_s
        self.global_mode = global_mode
        self.cache = cache if cache is not None else PolicyCache(space.d_s)
        kern = post.kernel
        self.scale = getattr(kern, "state_lengthscales", None)

    def discretize(self, C, rng):
        """Sample states and optimized discretizations for candidates ``C``."""
        C = np.atleast_2d(C)
        la = _Lookaheads.build(self.post, C)
        cfg = self.cfg
        if self.global_mode:
            pts = _hybrid_points(self.post, la, None, cfg.zgrid, cfg.inner, self.bounds, rng, None)
            frozen = FrozenDiscretization(pts, None, np.ones((len(C), 1)), False, 1)
            return la, frozen
        if self.space.finite:
            S = np.broadcast_to(self.space.states, (len(C),) + self.space.states.shape).copy()
            base = np.broadcast_to(self.space.probs, (len(C), len(self.space.probs))).copy()
            importance = False
        else:
            S = np.empty((len(C), cfg.n_s, self.d_s))
            base = np.empty((len(C), cfg.n_s))
            for c in range(len(C)):
                S[c], _ = sample_mc_states(C[c, : self.d_s], self.scale, cfg.n_s, self.space, rng)
                base[c] = self.space.pdf(S[c])
            importance = True
        pts = _hybrid_points(self.post, la, S, cfg.zgrid, cfg.inner, self.bounds, rng, self.cache,
                             cfg.action_set)
        return la, FrozenDiscretization(pts, S, base, importance, cfg.n_s)

    def values_and_grads(self, C, rng, grad=True):
        la, frozen = self.discretize(C, rng)
        return frozen_values(self.post, la, frozen, self.scale, self.space, grad=grad)

    def log_values(self, C, rng):
        """Log acquisition values; keeps the ranking of candidates whose values underflow."""
        la, frozen = self.discretize(C, rng)
        return frozen_log_values(self.post, la, frozen, self.scale, self.space)

    def frozen(self, C, frozen: FrozenDiscretization, grad=False):
        la = _Lookaheads.build(self.post, np.atleast_2d(C))
        return frozen_values(self.post, la, frozen, self.scale, self.space, grad=grad)


def conbo_value(post, candidate, cfg: ConboConfig, space: StateSpace, bounds, rng,
                cache: Optional[PolicyCache] = None) -> float:
    """ConBO acquisition value at one candidate."""
    C, _ = as_points(candidate, post.dim)
    acq = ConditionalAcquisition(post, cfg, space, bounds, cache)
    vals, _ = acq.values_and_grads(C, rng, grad=False)
    return float(vals[0])


def conbo_gradient(post, candidate, frozen: FrozenDiscretization, cfg: ConboConfig, space, bounds):
    """Gradient of the frozen-discretization ConBO value with respect to the candidate."""
    C, _ = as_points(candidate, post.dim)
    acq = ConditionalAcquisition(post, cfg, space, bounds)
    _, g = acq.frozen(C, frozen, grad=True)
    return g[0]


# --------------------------------------------------------------------------
# REVI: knowledge gradient on a fixed state x action grid
# --------------------------------------------------------------------------


def revi_discretization(n: int, space: StateSpace, bounds, rng, n_states=None, n_actions=None):
    """States from ``P[s]`` and Latin-hypercube actions, ``ceil(sqrt(2 n))`` each."""
    size = int(math.ceil(math.sqrt(2 * max(n, 1))))
    n_states = n_states or size
    n_actions = n_actions or size
    lo, hi = (np.asarray(b, dtype=float) for b in bounds)
    d_s = space.d_s
    if space.finite:
        S = space.states
        probs = space.probs
    else:
        S = space.sample(rng, n_states)
        probs = np.full(len(S), 1.0 / len(S))
    lhs = qmc.LatinHypercube(d=lo.size - d_s, seed=rng).random(n_actions)
    A = lo[d_s:] + lhs * (hi[d_s:] - lo[d_s:])
    return S, probs, A


def revi_values(post, C, discretization, grad=False):
    S, probs, A = discretization
    C = np.atleast_2d(C)
    la = _Lookaheads.build(post, C)
    pts = np.concatenate(
        [np.repeat(S[:, None, :], len(A), axis=1), np.broadcast_to(A, (len(S),) + A.shape)], axis=-1
    )
    pts = np.broadcast_to(pts, (len(C),) + pts.shape)
    frozen = FrozenDiscretization(pts, None, np.broadcast_to(probs, (len(C), len(S))), False, len(S))
    return frozen_values(post, la, frozen, grad=grad)


def revi_value(post, candidate, n: int, space: StateSpace, bounds, rng) -> float:
    disc = revi_discretization(n, space, bounds, rng)
    vals, _ = revi_values(post, as_points(candidate, post.dim)[0], disc)
    return float(vals[0])


# --------------------------------------------------------------------------
# Outer optimization and batch construction
# --------------------------------------------------------------------------


@dataclass
class AcquisitionHistory:
    points: np.ndarray
    values: np.ndarray

    def __len__(self):
        return len(self.values)

    def top(self, k: int, min_dist: float = 1e-3) -> np.ndarray:
        """Up to ``k`` best distinct points."""
        chosen = []
        for i in np.argsort(-self.values, kind="stable"):
            p = self.points[i]
            if all(np.linalg.norm(p - q) > min_dist for q in chosen):
                chosen.append(p)
            if len(chosen) == k:
                break
        return np.array(chosen).reshape(-1, self.points.shape[1])


def optimize_acquisition(value_fn, bounds, budget: OuterBudget, rng, *, use_grad=True,
                         previous=None, state_choices=None, d_s: int = 0):
    """Multi-start stochastic ascent of a batched acquisition function.

    ``value_fn(C, rng)`` returns ``(values, grads_or_None)`` for a (k, d) batch.
    Starts are ``budget.n_uniform`` uniform draws plus previous peaks (topped
    up with uniform draws).  With ``state_choices`` every start takes one of
    the given states and only action coordinates move.  Gradient ascent uses
    Adam with a decaying rate in units of the box width; without gradients a
    (1+1) evolution strategy is used.  Returns the best evaluated point and
    the full history.
    """
    lo, hi = (np.asarray(b, dtype=float) for b in bounds)
    width = hi - lo
    d = lo.size
    k = budget.n_starts
    X = lo + rng.uniform(size=(k, d)) * width
    if previous is not None and len(previous):
        prev = np.atleast_2d(previous)[: k - budget.n_uniform]
        X[budget.n_uniform: budget.n_uniform + len(prev)] = prev
    movable = np.ones(d, dtype=bool)
    if state_choices is not None:
        choices = np.atleast_2d(state_choices)
        snap = ~np.any(np.all(X[:, None, :d_s] == choices[None], axis=-1), axis=1)
        X[snap, :d_s] = choices[rng.integers(len(choices), size=int(snap.sum()))]
        movable[:d_s] = False

    hist_p, hist_v = [], []

    def evaluate(P):
        v, g = value_fn(P, rng)
        v = np.asarray(v, dtype=float)
        hist_p.append(P.copy())
        hist_v.append(v.copy())
        return v, g

    vals, grads = evaluate(X)
    if use_grad:
        m1 = np.zeros((k, d))
        m2 = np.zeros((k, d))
        b1, b2, eps = 0.9, 0.999, 1e-12
        for t in range(1, budget.n_steps + 1):
            g = np.where(np.isfinite(grads), grads, 0.0) * width
            g[:, ~movable] = 0.0
            m1 = b1 * m1 + (1 - b1) * g
            m2 = b2 * m2 + (1 - b2) * g * g
            mhat = m1 / (1 - b1**t)
            vhat = m2 / (1 - b2**t)
            lr = budget.lr * 0.5 * (1 + math.cos(math.pi * (t - 1) / budget.n_steps))
            lr = max(lr, 0.02 * budget.lr)
            step = np.where(vhat > 0, mhat / (np.sqrt(vhat) + eps), 0.0)
            X = np.clip(X + lr * step * width, lo, hi)
            vals, grads = evaluate(X)
    else:
        sigma = np.full(k, 0.1)
        for _ in range(budget.n_steps):
            prop = X + sigma[:, None] * rng.standard_normal((k, d)) * width * movable
            prop = np.clip(prop, lo, hi)
            pv, _ = evaluate(prop)
            better = pv > vals
            X[better] = prop[better]
            vals[better] = pv[better]
            sigma = np.where(better, sigma * 1.5, sigma * 0.7)

    points = np.vstack(hist_p)
    values = np.concatenate(hist_v)
    finite = np.isfinite(values)
    if not np.any(finite):
        raise OptimizationError("all acquisition evaluations were non-finite")
    values = np.where(finite, values, -np.inf)
    best = points[int(np.argmax(values))]
    return best, AcquisitionHistory(points[finite], values[finite])


def penalizer(q, chosen, spec: KernelSpec) -> np.ndarray:
    """``1 - k0(q, chosen) / k0(chosen, chosen)``; zero at ``chosen``, one far away."""
    Q = np.atleast_2d(q)
    c = np.atleast_2d(chosen)
    k = spec(Q, c)[:, 0]
    out = 1.0 - k / spec.diag(c)[0]
    return float(out[0]) if np.ndim(q) == 1 else out


def construct_batch(history: AcquisitionHistory, q: int, spec: KernelSpec) -> np.ndarray:
    """Pick ``q`` points from the history by sequential kernel penalization."""
    if q < 1:
        raise ValueError("batch size must be >= 1")
    if q > len(history):
        raise ValueError(f"batch size {q} exceeds history length {len(history)}")
    scores = np.asarray(history.values, dtype=float).copy()
    chosen = []
    for _ in range(q):
        i = int(np.argmax(scores))
        chosen.append(history.points[i])
        scores = scores * penalizer(history.points, history.points[i], spec)
        scores[i] = 0.0 if scores[i] >= 0 else scores[i]
    return np.array(chosen)
