"""Event clocks: refreshment, bounce (inverse transform or thinning), wall hits."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .flows import QuadraticFlow, Regime, UnivariateFlow
from .model import ConstraintSet, GuideField, TargetModel, evaluate_guide

Vector = NDArray[np.float64]

# Roots closer than this to the segment start belong to the wall just left.
ROOT_SKIP = 1e-12
# Relative slack before an observed rate counts as a thinning-bound violation.
BOUND_SLACK = 1e-9
THINNING_CAP = 1e6


class BoundViolation(RuntimeError):
    """The thinning bound was exceeded; the bound derivation or its inputs are wrong."""


def sample_refresh_time(lambda0: float, rng: np.random.Generator) -> float:
    if lambda0 < 0:
        raise ValueError("refreshment rate must be non-negative")
    if lambda0 == 0:
        return math.inf
    return float(rng.exponential(1.0 / lambda0))


# ------------------------------------------------------------ inverse transform


def linear_rate_inverse(b: float, c: float, budget: float) -> float:
    """First t >= 0 with  int_0^t (b + c s)_+ ds = budget;  +inf if never reached."""
    if budget <= 0:
        if b > 0:
            return 0.0
        return -b / c if c > 0 else math.inf
    if c == 0:
        return budget / b if b > 0 else math.inf
    if c > 0 and b < 0:
        # rate is zero until t0 = -b / c, then grows like c (t - t0)
        return -b / c + math.sqrt(2.0 * budget / c)
    if c < 0 and b <= 0:
        return math.inf  # rate is zero from the start
    disc = b * b + 2.0 * c * budget
    if disc < 0:
        return math.inf  # c < 0: total mass b^2 / 2|c| is below the budget
    # c t^2 / 2 + b t = budget; stable root
    return 2.0 * budget / (b + math.sqrt(disc))


def bounce_time_univariate(flow: UnivariateFlow, u: float) -> float:
    """Exact first arrival of the Poisson process with rate (a x_t x'_t)_+.

    ``u`` is a Unif(0, 1) draw.  The rate is the time derivative of
    F(t) = a x_t^2 / 2, so the cumulative hazard is the positive variation of
    F, which is inverted in closed form for each regime.
    """
    if not 0.0 < u <= 1.0:
        raise ValueError("u must lie in (0, 1]")
    budget = -math.log(u)
    a = flow.a
    if a == 0.0:
        return math.inf
    if flow.regime is Regime.TRIGONOMETRIC:
        return _trig_bounce(flow, budget)
    if flow.regime is Regime.LINEAR:
        # rate = a C1 (C1 t + C2): linear in t with slope a C1^2 > 0
        C1, C2 = flow.C1, flow.C2
        if C1 == 0.0:
            return math.inf
        return linear_rate_inverse(a * C1 * C2, a * C1 * C1, budget)
    return _hyperbolic_bounce(flow, budget)


def _trig_bounce(flow: UnivariateFlow, budget: float) -> float:
    # F(t) = a x_t^2 / 2 = const - b cos(theta(t)), theta = 2c + 2wt (+pi when a > 0)
    r = flow.r
    if r == 0.0:
        return math.inf
    a, w = flow.a, flow.rate
    b = abs(a) * r * r / 4.0
    theta0 = 2.0 * flow.c + (math.pi if a > 0 else 0.0)
    # positive variation of -b cos over [0, theta] per full turn is 2b = |a| r^2 / 2
    k0 = math.floor(theta0 / (2.0 * math.pi))
    phi0 = theta0 - 2.0 * math.pi * k0
    spent0 = b - b * math.cos(phi0) if phi0 <= math.pi else 2.0 * b
    target = spent0 + budget
    n = math.floor(target / (2.0 * b))
    rem = target - 2.0 * b * n
    if rem <= 0.0:
        # exactly a whole number of periods: earliest point of the flat stretch
        theta = 2.0 * math.pi * (n - 1 + k0) + math.pi
    else:
        phi = math.acos(min(1.0, max(-1.0, 1.0 - rem / b)))
        theta = 2.0 * math.pi * (n + k0) + phi
    return max(0.0, (theta - theta0) / (2.0 * w))


def _hyperbolic_bounce(flow: UnivariateFlow, budget: float) -> float:
    # x^2 = C1^2 z + C2^2 / z + 2 C1 C2 with z = exp(2 s t); convex in log z
    C1, C2, s, a = flow.C1, flow.C2, flow.rate, flow.a
    if C1 == 0.0:
        return math.inf  # x decays monotonically, rate stays zero
    t0 = 0.0 if C2 == 0.0 else math.log(abs(C2 / C1)) / (2.0 * s)
    start = max(t0, 0.0)
    xs = C1 * math.exp(s * start) + C2 * math.exp(-s * start)
    X2 = xs * xs + 2.0 * budget / a
    B = X2 - 2.0 * C1 * C2  # = C1^2 z + C2^2 / z > 0
    disc = X2 * (X2 - 4.0 * C1 * C2)
    z = (B + math.sqrt(max(disc, 0.0))) / (2.0 * C1 * C1)
    return max(start, math.log(z) / (2.0 * s))


# ------------------------------------------------------------ thinning


@dataclass(frozen=True)
class ThinningBound:
    Lambda: float


def spectral_norm(M: ArrayLike, rtol: float = 1e-10, max_iter: int = 10_000) -> float:
    """Largest singular value by power iteration on M^T M."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if not np.any(M):
        return 0.0
    G = M.T @ M
    x = np.ones(G.shape[0]) / math.sqrt(G.shape[0]) + 1e-3 * np.arange(G.shape[0])
    x /= np.linalg.norm(x)
    est = 0.0
    for _ in range(max_iter):
        y = G @ x
        ny = np.linalg.norm(y)
        if ny == 0.0:
            break
        new = float(x @ y)
        x = y / ny
        if abs(new - est) <= rtol * abs(new):
            est = new
            break
        est = new
    else:
        # slow convergence from nearly tied singular values; fall back to SVD
        return float(np.linalg.norm(M, 2))
    return math.sqrt(max(est, 0.0))


def constant_thinning_bound(flow: QuadraticFlow, A: ArrayLike | None = None) -> ThinningBound:
    """Time-independent bound on (g(x_t) . v_t)_+ along an oscillatory quadratic flow."""
    sysm = flow.system
    a = sysm.a
    if np.any(a >= 0):
        raise ValueError("constant thinning bound needs every a_k < 0")
    if A is None:
        M = sysm.rate_matrix
    else:
        A = np.atleast_2d(np.asarray(A, dtype=float))
        M = sysm.P_inv.T @ A.T @ sysm.P_inv
    norm = _cached_norm(sysm, M)
    if norm == 0.0:
        return ThinningBound(0.0)
    C1, C2 = flow.C1, flow.C2
    B = np.maximum(np.abs(C1), np.abs(C2)) ** 2 + np.abs(C1 * C2)
    o = np.abs(sysm.offset / a)
    y_sq = np.sum(B + 2.0 * np.sqrt(B) * o + o * o)
    yd_sq = np.sum(-a * B)
    return ThinningBound(math.sqrt(y_sq) * norm * math.sqrt(yd_sq))


def _cached_norm(sysm, M: Vector) -> float:
    cache = sysm.__dict__.setdefault("_norm_cache", {})
    key = M.tobytes()
    if key not in cache:
        cache[key] = spectral_norm(M)
    return cache[key]


class RateFunction:
    """t -> (g(x_t) . v_t)_+ along a fixed flow; vectorised over time arrays.

    Quadratic and univariate flows use their own guide (``A x`` and ``a x``);
    other flows need the guide field and target passed explicitly.
    """

    def __init__(self, flow, guide: GuideField | None = None, target: TargetModel | None = None):
        self.flow = flow
        self.guide = guide
        self.target = target

    def __call__(self, t):
        flow = self.flow
        if isinstance(flow, QuadraticFlow) and self.guide is None:
            y, yd = flow.evaluate_y(t)
            val = np.einsum("...i,ij,...j->...", y, flow.system.rate_matrix, yd)
        elif isinstance(flow, UnivariateFlow) and self.guide is None:
            x, v = flow.evaluate(t)
            val = flow.a * np.asarray(x) * v
        else:
            x, v = flow.evaluate(t)
            if np.ndim(t) == 0:
                val = np.dot(evaluate_guide(self.guide, self.target, x), v)
            else:
                g = np.array([evaluate_guide(self.guide, self.target, xi) for xi in x])
                val = np.einsum("ij,ij->i", g, v)
        if np.ndim(val) == 0:
            return max(float(val), 0.0)
        return np.maximum(val, 0.0)


def sample_bounce_thinning(
    rate: RateFunction,
    bound: ThinningBound,
    horizon: float,
    rng: np.random.Generator,
    batch: int = 8,
) -> float:
    """First accepted candidate of a rate-``Lambda`` proposal; +inf past ``horizon``.

    Candidates are drawn ``batch`` at a time so the rate is evaluated in
    vectorised form; draws past the accepted one are discarded.
    """
    lam = bound.Lambda
    if lam <= 0.0:
        return math.inf
    horizon = min(horizon, THINNING_CAP / lam)
    t = 0.0
    while True:
        ts = t + np.cumsum(rng.exponential(1.0 / lam, size=batch))
        us = rng.random(batch)
        inside = ts <= horizon
        vals = rate(ts[inside])
        over = vals > lam * (1.0 + BOUND_SLACK)
        accept = us[: vals.shape[0]] * lam < vals
        hits = np.flatnonzero(accept | over)
        if hits.size:
            k = int(hits[0])
            if over[k]:
                raise BoundViolation(
                    f"rate {vals[k]!r} exceeds thinning bound {lam!r} at t={ts[k]!r}"
                )
            return float(ts[k])
        if not inside.all():
            return math.inf
        t = float(ts[-1])


# ------------------------------------------------------------ walls


@dataclass(frozen=True)
class WallHit:
    tau_bb: float
    wall_index: int | None
    u: Vector = field(repr=False)
    phi: Vector = field(repr=False)
    q: Vector = field(repr=False)
    reachable: Vector = field(repr=False)
    freq: float = 0.0

    def constraint_values(self, t) -> Vector:
        """Constraint values u_j cos(w t + phi_j) + q_j; rows index time for array t."""
        t = np.asarray(t, dtype=float)
        return self.u * np.cos(self.freq * t[..., None] + self.phi) + self.q


def wall_hit_time(
    flow: QuadraticFlow, constraints: ConstraintSet, tol: float = 1e-10
) -> WallHit:
    """First time the oscillatory flow leaves the polytope F^T x + h >= 0."""
    sysm = flow.system
    a = sysm.a
    if np.any(a >= 0) or np.ptp(a) > 1e-12 * abs(a[0]):
        raise ValueError("wall hits need a_1 = ... = a_d = a < 0")
    m = constraints.m
    empty = np.zeros(0)
    if m == 0:
        return WallHit(math.inf, None, empty, empty, empty, np.zeros(0, dtype=bool))
    start = constraints.values(flow.x0)
    if np.min(start) < -tol:
        raise ValueError(f"initial point violates constraint {int(np.argmin(start))}")
    w = math.sqrt(-a[0])
    K = sysm.P_inv.T @ constraints.F  # columns K_j
    alpha = K.T @ flow.C1
    beta = K.T @ flow.C2
    u = np.hypot(alpha, beta)
    phi = np.arctan2(-beta, alpha)
    q = constraints.h - K.T @ sysm.o
    reachable = u > np.abs(q)
    best, arg = math.inf, None
    two_pi = 2.0 * math.pi
    for j in np.flatnonzero(reachable):
        # leaving crossings of u cos(theta) + q: theta = arccos(-q/u) (mod 2 pi)
        theta = math.acos(-q[j] / u[j])
        t = ((theta - phi[j]) % two_pi) / w
        if t <= ROOT_SKIP:
            t += two_pi / w
        if t < best:
            best, arg = t, int(j)
    return WallHit(best, arg, u, phi, q, reachable, w)
