"""Event-driven samplers: BHS, QBHS, coordinate BHS, and a Gibbs baseline."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.special import log_ndtr, ndtr, ndtri, ndtri_exp

from . import event_times as et
from .flows import (
    DecoupledDynamics,
    LinearDynamics,
    QuadraticDynamics,
    QuadraticSystem,
    UnivariateDynamics,
)
from .kernels import (
    BounceKernelSpec,
    BounceVariant,
    bounce_deterministic,
    bounce_stochastic,
    coordinate_flip,
    refresh_partial,
    wall_reflect,
)
from .model import (
    CONSTRAINT_TOL,
    ConstraintSet,
    GaussianTarget,
    GuideField,
    GuideKind,
    State,
    TargetModel,
    evaluate_guide,
)

Vector = NDArray[np.float64]


class UnsupportedInstance(ValueError):
    """No closed-form flow or exact event clock exists for the requested pair."""


class Corruption(enum.Enum):
    """Deliberate defects used to check that diagnostics catch a broken sampler."""

    NONE = "none"
    NO_FLIP = "no_flip"  # bounce events leave the velocity unchanged


@dataclass(frozen=True)
class SamplerConfig:
    lambda0: float = 1.0
    T_total: float = 100.0
    delta: float = 0.1
    seed: int = 0
    bounce_kernel: BounceKernelSpec = field(default_factory=BounceKernelSpec)
    guide: GuideField = field(default_factory=GuideField.zero)
    cbhs_gamma: tuple[float, ...] | None = None
    corrupt: Corruption = Corruption.NONE

    def __post_init__(self) -> None:
        if not self.T_total > 0:
            raise ValueError("T_total must be positive")
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if self.lambda0 < 0:
            raise ValueError("lambda0 must be non-negative")
        if self.cbhs_gamma is not None and any(g < 0 for g in self.cbhs_gamma):
            raise ValueError("cbhs_gamma entries must be non-negative")

    @property
    def refresh_angle(self) -> float:
        return self.bounce_kernel.refresh_angle


def randomized_hmc(**kwargs) -> SamplerConfig:
    """g = 0: Hamiltonian flow with exponential durations, no bounces."""
    return SamplerConfig(guide=GuideField.zero(), **kwargs)


def bouncy_particle(**kwargs) -> SamplerConfig:
    """g = grad U: straight-line motion with bounces off energy gradients."""
    return SamplerConfig(guide=GuideField.grad_u(), **kwargs)


class EventKind(enum.Enum):
    START = "start"
    BOUNCE = "bounce"
    REFRESH = "refresh"
    WALL_HIT = "wall_hit"
    COORD_FLIP = "coord_flip"
    END = "end"


@dataclass(frozen=True)
class EventRecord:
    time: float
    position: Vector
    velocity: Vector  # after the event
    kind: EventKind
    index: int | None = None  # coordinate (flip) or wall (wall hit), 0-based

    @property
    def label(self) -> str:
        if self.kind is EventKind.COORD_FLIP:
            return f"coord_flip:{self.index + 1}"
        if self.kind is EventKind.WALL_HIT:
            return f"wall_hit:{self.index + 1}"
        return self.kind.value


@dataclass(frozen=True)
class Skeleton:
    """Event records plus the dynamics that reproduce the path between them."""

    events: tuple[EventRecord, ...]
    dynamics: object
    config: SamplerConfig
    dim: int
    constraints: ConstraintSet | None = None
    sampler: str = "bhs"
    guide: GuideField | None = None  # effective guide, e.g. A x implied by QBHS

    @property
    def times(self) -> Vector:
        return np.array([e.time for e in self.events])

    @property
    def T_total(self) -> float:
        return self.events[-1].time

    def counts(self) -> dict[str, int]:
        out = {k.value: 0 for k in EventKind}
        for e in self.events:
            out[e.kind.value] += 1
        return out

    def segment_flow(self, k: int):
        e = self.events[k]
        return self.dynamics.solve(e.position, e.velocity)

    def state_at(self, t: ArrayLike) -> tuple[Vector, Vector]:
        """Exact (x_t, v_t) for a sorted array of times in [0, T_total]."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        times = self.times
        seg = np.searchsorted(times[:-1], t, side="right") - 1
        seg = np.clip(seg, 0, len(self.events) - 2)
        x = np.empty((t.shape[0], self.dim))
        v = np.empty((t.shape[0], self.dim))
        bounds = np.flatnonzero(np.diff(seg)) + 1
        for lo, hi in zip(np.r_[0, bounds], np.r_[bounds, t.shape[0]]):
            if lo == hi:
                continue
            k = int(seg[lo])
            xs, vs = self.segment_flow(k).evaluate(t[lo:hi] - times[k])
            x[lo:hi] = xs
            v[lo:hi] = vs
        return x, v


# ------------------------------------------------------------------ helpers


class _Recorder:
    def __init__(self, x: Vector, v: Vector) -> None:
        self.events = [EventRecord(0.0, x.copy(), v.copy(), EventKind.START)]

    def add(self, t, x, v, kind, index=None) -> None:
        self.events.append(EventRecord(float(t), np.array(x), np.array(v), kind, index))


def _bounce(v: Vector, gx: Vector, config: SamplerConfig, rng) -> Vector:
    if config.corrupt is Corruption.NO_FLIP:
        return v.copy()
    if config.bounce_kernel.variant is BounceVariant.STOCHASTIC:
        return bounce_stochastic(v, gx, rng)
    return bounce_deterministic(v, gx)


def _uniform(rng: np.random.Generator) -> float:
    return 1.0 - rng.random()  # (0, 1]


def _initial(initial: State, dim: int) -> tuple[Vector, Vector]:
    x = np.array(initial.position, dtype=float)
    v = np.array(initial.velocity, dtype=float)
    if x.shape != (dim,):
        raise ValueError(f"initial position has shape {x.shape}, target dim is {dim}")
    return x, v


def _pick(candidates: Sequence[tuple[float, int, EventKind]]):
    # ties: wall hit > bounce > refresh (the middle entry is the priority)
    return min(candidates, key=lambda c: (c[0], c[1]))


# ------------------------------------------------------------------ BHS


def run_bhs(target: TargetModel, config: SamplerConfig, initial: State) -> Skeleton:
    """Bouncy Hybrid Sampler with exact flows and exact event clocks."""
    plan = _plan_bhs(target, config.guide)
    rng = np.random.default_rng(config.seed)
    x, v = _initial(initial, target.dim)
    rec = _Recorder(x, v)
    t, T = 0.0, config.T_total
    while True:
        flow = plan.dynamics.solve(x, v)
        remaining = T - t
        tau_r = et.sample_refresh_time(config.lambda0, rng)
        tau_b = plan.bounce_time(flow, x, v, min(tau_r, remaining), rng)
        tau, _, kind = _pick([(tau_b, 1, EventKind.BOUNCE), (tau_r, 2, EventKind.REFRESH)])
        if tau >= remaining:
            x, v = flow.evaluate(remaining)
            rec.add(T, x, v, EventKind.END)
            break
        x, v = flow.evaluate(tau)
        t += tau
        if kind is EventKind.BOUNCE:
            v = _bounce(v, plan.guide_at(x), config, rng)
        else:
            v = refresh_partial(v, config.refresh_angle, rng)
        rec.add(t, x, v, kind)
    return Skeleton(tuple(rec.events), plan.dynamics, config, target.dim, guide=config.guide)


@dataclass
class _BhsPlan:
    dynamics: object
    bounce_time: Callable
    guide_at: Callable[[Vector], Vector]


def _plan_bhs(target: TargetModel, guide: GuideField) -> _BhsPlan:
    if guide.kind is GuideKind.CUSTOM:
        raise UnsupportedInstance("custom guide fields have no closed-form flow")
    if not isinstance(target, GaussianTarget):
        raise UnsupportedInstance(
            "exact flows and bounce clocks are available only for Gaussian targets"
        )
    Q = target.precision

    if guide.kind is GuideKind.GRAD_U:

        def linear_bounce(flow, x, v, horizon, rng):
            u = _uniform(rng)
            b = float(v @ (Q @ (x - target.mean)))
            c = float(v @ Q @ v)
            return et.linear_rate_inverse(b, c, -math.log(u))

        return _BhsPlan(LinearDynamics(), linear_bounce, target.grad_potential)

    A = np.zeros((target.dim, target.dim)) if guide.kind is GuideKind.ZERO else guide.matrix
    if A.shape != (target.dim, target.dim):
        raise ValueError("guide matrix does not match target dimension")

    def linear_guide(x):
        return A @ x

    if target.dim == 1 and target.mean[0] == 0.0:
        a = float(A[0, 0])

        def inverse_transform(flow, x, v, horizon, rng):
            return et.bounce_time_univariate(flow.flow, _uniform(rng))

        return _BhsPlan(UnivariateDynamics(a, float(Q[0, 0])), inverse_transform, linear_guide)

    try:
        system = QuadraticSystem.from_guide_matrix(target, A)
    except ValueError as exc:
        raise UnsupportedInstance(f"no closed-form quadratic flow: {exc}") from exc
    if np.any(system.a > 0) and np.any(A):
        raise UnsupportedInstance(
            "quadratic flow with a_k > 0 has no constant thinning bound; "
            "choose A with Sigma^{-1} - A positive definite"
        )
    no_bounce = not np.any(A)

    def thinning(flow, x, v, horizon, rng):
        if no_bounce:
            return math.inf
        bound = et.constant_thinning_bound(flow)
        return et.sample_bounce_thinning(et.RateFunction(flow), bound, horizon, rng)

    return _BhsPlan(QuadraticDynamics(system), thinning, linear_guide)


# ------------------------------------------------------------------ QBHS


def run_qbhs(
    target: GaussianTarget,
    constraints: ConstraintSet,
    P: ArrayLike,
    a: float,
    config: SamplerConfig,
    initial: State,
) -> Skeleton:
    """Quadratic BHS for N(mu, Sigma) truncated to F^T x + h >= 0.

    The guide is g(x) = A x with Sigma^{-1} - A = -P^{-1} (a I) P, so
    A = Sigma^{-1} + a I; ``config.guide`` is ignored.
    """
    a_arr = np.asarray(a, dtype=float).reshape(-1)
    if np.ptp(a_arr) != 0 or a_arr[0] >= 0:
        raise ValueError("QBHS needs a_1 = ... = a_d = a < 0")
    if constraints.dim != target.dim:
        raise ValueError("constraint dimension does not match target")
    system = QuadraticSystem(target, P, np.full(target.dim, a_arr[0]))
    dynamics = QuadraticDynamics(system)
    A = system.A
    rng = np.random.default_rng(config.seed)
    x, v = _initial(initial, target.dim)
    if not constraints.satisfied(x):
        raise ValueError("initial position violates the constraints")
    v = _point_inward(x, v, constraints)
    rec = _Recorder(x, v)
    t, T = 0.0, config.T_total
    while True:
        flow = dynamics.solve(x, v)
        remaining = T - t
        wall = et.wall_hit_time(flow, constraints)
        tau_r = et.sample_refresh_time(config.lambda0, rng)
        bound = et.constant_thinning_bound(flow)
        horizon = min(tau_r, wall.tau_bb, remaining)
        tau_b = et.sample_bounce_thinning(et.RateFunction(flow), bound, horizon, rng)
        tau, _, kind = _pick(
            [
                (wall.tau_bb, 0, EventKind.WALL_HIT),
                (tau_b, 1, EventKind.BOUNCE),
                (tau_r, 2, EventKind.REFRESH),
            ]
        )
        if tau >= remaining:
            x, v = flow.evaluate(remaining)
            rec.add(T, x, v, EventKind.END)
            break
        x, v = flow.evaluate(tau)
        t += tau
        index = None
        if kind is EventKind.WALL_HIT:
            index = wall.wall_index
            v = wall_reflect(v, constraints.F[:, index])
        elif kind is EventKind.BOUNCE:
            v = _bounce(v, A @ x, config, rng)
        else:
            v = refresh_partial(v, config.refresh_angle, rng)
        rec.add(t, x, v, kind, index)
    return Skeleton(
        tuple(rec.events), dynamics, config, target.dim, constraints, "qbhs", GuideField.linear(A)
    )


def _point_inward(x: Vector, v: Vector, constraints: ConstraintSet, tol: float = 1e-10) -> Vector:
    """Reflect v off every active wall it points out of (an immediate wall hit at t = 0)."""
    for _ in range(max(constraints.m, 1) * 4):
        active = constraints.values(x) <= tol
        outward = active & (v @ constraints.F < -tol)
        if not outward.any():
            return v
        v = wall_reflect(v, constraints.F[:, int(np.flatnonzero(outward)[0])])
    raise ValueError("cannot point the initial velocity into the feasible region")


# ------------------------------------------------------------------ CBHS


def run_cbhs(target: TargetModel, config: SamplerConfig, initial: State) -> Skeleton:
    """Coordinate BHS: each event flips a single velocity coordinate.

    Supported: g = grad U on a Gaussian (Zig-Zag, straight lines) and a linear
    guide with diagonal A on a zero-mean Gaussian with diagonal covariance
    (independent oscillators).  ``cbhs_gamma`` adds a constant flip rate per
    coordinate; ``lambda0 > 0`` adds velocity refreshments.
    """
    d = target.dim
    gamma = np.zeros(d) if config.cbhs_gamma is None else np.asarray(config.cbhs_gamma, float)
    if gamma.shape != (d,):
        raise ValueError(f"cbhs_gamma needs {d} entries")
    step = _plan_cbhs(target, config.guide)
    rng = np.random.default_rng(config.seed)
    x, v = _initial(initial, d)
    rec = _Recorder(x, v)
    t, T = 0.0, config.T_total
    while True:
        flow = step.dynamics.solve(x, v)
        remaining = T - t
        tau_r = et.sample_refresh_time(config.lambda0, rng)
        taus = step.flip_times(flow, x, v, rng)
        for i in range(d):
            if gamma[i] > 0:
                taus[i] = min(taus[i], rng.exponential(1.0 / gamma[i]))
        i0 = int(np.argmin(taus))
        tau, _, kind = _pick([(taus[i0], 1, EventKind.COORD_FLIP), (tau_r, 2, EventKind.REFRESH)])
        if tau >= remaining:
            x, v = flow.evaluate(remaining)
            rec.add(T, x, v, EventKind.END)
            break
        x, v = flow.evaluate(tau)
        t += tau
        if kind is EventKind.COORD_FLIP:
            if config.corrupt is not Corruption.NO_FLIP:
                v = coordinate_flip(v, i0)
            rec.add(t, x, v, kind, i0)
        else:
            v = refresh_partial(v, config.refresh_angle, rng)
            rec.add(t, x, v, kind)
    return Skeleton(tuple(rec.events), step.dynamics, config, d, None, "cbhs", config.guide)


@dataclass
class _CbhsPlan:
    dynamics: object
    flip_times: Callable


def _plan_cbhs(target: TargetModel, guide: GuideField) -> _CbhsPlan:
    if not isinstance(target, GaussianTarget):
        raise UnsupportedInstance("coordinate BHS needs a Gaussian target")
    Q = target.precision
    if guide.kind is GuideKind.GRAD_U:

        def zigzag(flow, x, v, rng):
            # lambda_i(t) = (v_i dU/dx_i(x + t v))_+ is affine in t
            b = v * (Q @ (x - target.mean))
            c = v * (Q @ v)
            return np.array(
                [et.linear_rate_inverse(bi, ci, -math.log(_uniform(rng))) for bi, ci in zip(b, c)]
            )

        return _CbhsPlan(LinearDynamics(), zigzag)

    if guide.kind in (GuideKind.ZERO, GuideKind.LINEAR):
        d = target.dim
        A = np.zeros((d, d)) if guide.kind is GuideKind.ZERO else guide.matrix
        off_diag = lambda M: M - np.diag(np.diag(M))  # noqa: E731
        if np.any(off_diag(A)) or np.any(off_diag(target.covariance)) or np.any(target.mean):
            raise UnsupportedInstance(
                "coordinate BHS with a linear guide needs diagonal A, diagonal covariance "
                "and zero mean"
            )
        dyn = DecoupledDynamics(np.diag(A), np.diag(Q))

        def oscillators(flow, x, v, rng):
            return np.array([et.bounce_time_univariate(f, _uniform(rng)) for f in flow.parts])

        return _CbhsPlan(dyn, oscillators)

    raise UnsupportedInstance("coordinate BHS supports g = grad U or a diagonal linear guide")


# ------------------------------------------------------------------ Gibbs


def truncated_standard_normal(lo: float, hi: float, rng: np.random.Generator) -> float:
    """Inverse-CDF draw from N(0, 1) restricted to [lo, hi].

    Tails are handled in log space on the side away from the mode so that
    intervals many standard deviations out do not lose precision.
    """
    if not lo <= hi:
        raise ValueError(f"empty interval [{lo}, {hi}]")
    if lo == hi:
        return lo
    if hi <= 0:
        return -truncated_standard_normal(-hi, -lo, rng)
    u = rng.random()
    if lo >= 0:
        log_slo = log_ndtr(-lo)
        log_shi = log_ndtr(-hi) if math.isfinite(hi) else -math.inf
        ratio = math.exp(log_shi - log_slo)
        log_p = log_slo + math.log1p(u * (ratio - 1.0))
        z = -float(ndtri_exp(log_p))
    else:
        plo = float(ndtr(lo)) if math.isfinite(lo) else 0.0
        phi = float(ndtr(hi)) if math.isfinite(hi) else 1.0
        z = float(ndtri(plo + u * (phi - plo)))
    return min(max(z, lo), hi)


def gibbs_interval(
    constraints: ConstraintSet, x: Vector, i: int, tol: float = CONSTRAINT_TOL
) -> tuple[float, float]:
    """Feasible range of x_i with the other coordinates held fixed."""
    lo, hi = -math.inf, math.inf
    if constraints.m == 0:
        return lo, hi
    Fi = constraints.F[i]
    rest = x @ constraints.F + constraints.h - Fi * x[i]
    for f, r in zip(Fi, rest):
        if f > 0:
            lo = max(lo, -r / f)
        elif f < 0:
            hi = min(hi, -r / f)
        elif r < -tol:
            raise ValueError("infeasible state: a constraint not involving x_i is violated")
    if lo > hi:
        if lo - hi <= tol * max(1.0, abs(lo)):
            mid = 0.5 * (lo + hi)
            return mid, mid
        raise ValueError(f"empty conditional interval for coordinate {i}: [{lo}, {hi}]")
    return lo, hi


def run_gibbs_truncated_mvn(
    target: GaussianTarget,
    constraints: ConstraintSet,
    n_samples: int,
    seed: int,
    initial: ArrayLike,
) -> Vector:
    """Systematic-scan Gibbs; returns an (n_samples, d) array, one row per sweep."""
    d = target.dim
    x = np.array(initial, dtype=float).reshape(-1)
    if x.shape != (d,):
        raise ValueError(f"initial point must have {d} coordinates")
    if not constraints.satisfied(x):
        raise ValueError("initial point violates the constraints")
    rng = np.random.default_rng(seed)
    Q = target.precision
    mu = target.mean
    sd = 1.0 / np.sqrt(np.diag(Q))
    out = np.empty((n_samples, d))
    for n in range(n_samples):
        for i in range(d):
            r = x - mu
            cond_mean = mu[i] - (Q[i] @ r - Q[i, i] * r[i]) / Q[i, i]
            lo, hi = gibbs_interval(constraints, x, i)
            z = truncated_standard_normal((lo - cond_mean) / sd[i], (hi - cond_mean) / sd[i], rng)
            x[i] = min(max(cond_mean + sd[i] * z, lo), hi)
        out[n] = x
    return out


def with_seed(config: SamplerConfig, seed: int) -> SamplerConfig:
    return replace(config, seed=int(seed))


__all__ = [
    "Corruption",
    "EventKind",
    "EventRecord",
    "SamplerConfig",
    "Skeleton",
    "UnsupportedInstance",
    "bouncy_particle",
    "evaluate_guide",
    "gibbs_interval",
    "randomized_hmc",
    "run_bhs",
    "run_cbhs",
    "run_gibbs_truncated_mvn",
    "run_qbhs",
    "truncated_standard_normal",
    "with_seed",
]
