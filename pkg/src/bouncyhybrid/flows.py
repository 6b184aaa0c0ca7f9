"""Closed-form solutions of  x' = v,  v' = -grad U(x) + g(x)  for solvable instances.

Every flow object is immutable and exposes ``evaluate(t)`` which accepts a
scalar time (returns two length-d vectors, or two floats for the univariate
flow) or a 1-D array of times (returns arrays with a leading time axis).

A *dynamics* object is the factory that the samplers store in a skeleton: it
re-solves the flow from any event state, which is how trajectories are
reconstructed exactly between events.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .model import GaussianTarget

Vector = NDArray[np.float64]


class Regime(enum.Enum):
    HYPERBOLIC = "hyperbolic"
    TRIGONOMETRIC = "trigonometric"
    LINEAR = "linear"


# ---------------------------------------------------------------- univariate


@dataclass(frozen=True)
class UnivariateFlow:
    """Flow of x'' = (a - p) x, i.e. U(x) = p x^2 / 2 with guide g(x) = a x.

    ``p`` is the precision of the zero-mean Gaussian target (1 for N(0, 1)).
    """

    a: float
    x0: float
    v0: float
    regime: Regime
    C1: float
    C2: float
    rate: float  # sqrt(|a - p|); 0 in the linear regime
    precision: float = 1.0

    @property
    def r(self) -> float:
        """Amplitude in the trigonometric regime."""
        return math.hypot(self.C1, self.C2)

    @property
    def c(self) -> float:
        """Phase with cos c = C1 / r and sin c = -C2 / r."""
        return math.atan2(-self.C2, self.C1)

    def evaluate(self, t):
        return evaluate_univariate(self, t)


def solve_univariate(a: float, x0: float, v0: float, precision: float = 1.0) -> UnivariateFlow:
    if precision <= 0:
        raise ValueError("precision must be positive")
    a, x0, v0 = float(a), float(x0), float(v0)
    k = a - precision
    # exact comparison: both neighbouring branches are continuous at k = 0
    if k > 0:
        s = math.sqrt(k)
        return UnivariateFlow(
            a, x0, v0, Regime.HYPERBOLIC, 0.5 * (x0 + v0 / s), 0.5 * (x0 - v0 / s), s, precision
        )
    if k < 0:
        w = math.sqrt(-k)
        return UnivariateFlow(a, x0, v0, Regime.TRIGONOMETRIC, x0, v0 / w, w, precision)
    return UnivariateFlow(a, x0, v0, Regime.LINEAR, v0, x0, 0.0, precision)


def evaluate_univariate(f: UnivariateFlow, t):
    t = np.asarray(t, dtype=float)
    if f.regime is Regime.HYPERBOLIC:
        s = f.rate
        ep, em = np.exp(s * t), np.exp(-s * t)
        x = f.C1 * ep + f.C2 * em
        v = s * (f.C1 * ep - f.C2 * em)
    elif f.regime is Regime.TRIGONOMETRIC:
        w = f.rate
        cs, sn = np.cos(w * t), np.sin(w * t)
        x = f.C1 * cs + f.C2 * sn
        v = w * (-f.C1 * sn + f.C2 * cs)
    else:
        x = f.C1 * t + f.C2
        v = f.C1 + 0.0 * t
    if x.ndim == 0:
        return float(x), float(v)
    return x, v


# ---------------------------------------------------------------- linear


@dataclass(frozen=True)
class LinearFlow:
    x0: Vector
    v0: Vector

    def evaluate(self, t):
        return evaluate_linear(self, t)


def evaluate_linear(f: LinearFlow, t):
    t = np.asarray(t, dtype=float)
    if t.ndim == 0:
        return f.x0 + float(t) * f.v0, f.v0.copy()
    x = f.x0[None, :] + t[:, None] * f.v0[None, :]
    return x, np.broadcast_to(f.v0, x.shape).copy()


# ---------------------------------------------------------------- quadratic


class QuadraticSystem:
    """Gaussian target with linear guide g(x) = A x, diagonalised.

    ``Sigma^{-1} - A = -P^{-1} A_d P`` with ``A_d = diag(a)``, all ``a_k != 0``.
    Built once per chain; ``solve`` is called at every event.
    """

    def __init__(
        self,
        target: GaussianTarget,
        P: ArrayLike,
        a: ArrayLike,
        A: ArrayLike | None = None,
    ) -> None:
        d = target.dim
        P = np.atleast_2d(np.asarray(P, dtype=float))
        a = np.asarray(a, dtype=float).reshape(-1)
        if a.ndim == 1 and a.shape[0] == 1 and d > 1:
            a = np.full(d, a[0])
        if P.shape != (d, d) or a.shape != (d,):
            raise ValueError(f"P must be {d}x{d} and A_d must have {d} diagonal entries")
        if np.any(a == 0):
            raise ValueError("diagonal entries of A_d must be non-zero")
        if not np.all(np.isfinite(P)) or np.linalg.cond(P) > 1e12:
            raise ValueError("P is singular")
        P_inv = np.linalg.inv(P)
        implied_A = target.precision + P_inv @ (a[:, None] * P)
        if A is not None:
            A = np.atleast_2d(np.asarray(A, dtype=float))
            lhs = target.precision - A
            rhs = -P_inv @ (a[:, None] * P)
            if not np.allclose(lhs, rhs, rtol=0, atol=1e-8):
                raise ValueError("Sigma^{-1} - A != -P^{-1} A_d P")
        else:
            A = implied_A
        self.target = target
        self.P = P
        self.P_inv = P_inv
        self.a = a
        self.A = A
        self.offset = P @ target.precision_mean  # P Sigma^{-1} mu
        self.o = self.offset / a
        self.neg = a < 0
        self.all_neg = bool(self.neg.all())
        self.freq = np.sqrt(np.abs(a))
        # rate = (y^T M ydot)_+ with M = P^{-T} A^T P^{-1}
        self.rate_matrix = P_inv.T @ A.T @ P_inv

    @classmethod
    def from_guide_matrix(cls, target: GaussianTarget, A: ArrayLike) -> "QuadraticSystem":
        """Diagonalise Sigma^{-1} - A; symmetric inputs use ``eigh``."""
        A = np.atleast_2d(np.asarray(A, dtype=float))
        M = target.precision - A
        scale = max(1.0, float(np.abs(M).max()))
        if np.allclose(M, M.T, rtol=0, atol=1e-12 * scale):
            lam, Q = np.linalg.eigh(0.5 * (M + M.T))
            P = Q.T
        else:
            lam, V = np.linalg.eig(M)
            if np.any(np.abs(lam.imag) > 1e-12 * scale) or np.linalg.cond(V) > 1e8:
                raise ValueError("Sigma^{-1} - A is not diagonalisable over the reals")
            lam, V = lam.real, V.real
            P = np.linalg.inv(V)
        if np.any(np.abs(lam) <= 1e-12 * scale):
            raise ValueError("Sigma^{-1} - A is singular: a diagonal entry of A_d would be zero")
        return cls(target, P, -lam, A)

    def solve(self, x0: ArrayLike, v0: ArrayLike) -> "QuadraticFlow":
        x0 = np.asarray(x0, dtype=float)
        v0 = np.asarray(v0, dtype=float)
        y0 = self.P @ x0
        yd0 = self.P @ v0
        base = y0 + self.o
        C1 = np.empty_like(base)
        C2 = np.empty_like(base)
        n = self.neg
        C1[n] = base[n]
        C2[n] = yd0[n] / self.freq[n]
        p = ~n
        C1[p] = 0.5 * (base[p] + yd0[p] / self.freq[p])
        C2[p] = 0.5 * (base[p] - yd0[p] / self.freq[p])
        return QuadraticFlow(self, x0, v0, C1, C2)


@dataclass(frozen=True)
class QuadraticFlow:
    system: QuadraticSystem
    x0: Vector
    v0: Vector
    C1: Vector
    C2: Vector

    @property
    def P(self) -> Vector:
        return self.system.P

    @property
    def a(self) -> Vector:
        return self.system.a

    @property
    def o(self) -> Vector:
        return self.system.o

    @property
    def offset(self) -> Vector:
        return self.system.offset

    def evaluate_y(self, t):
        """Diagonal coordinates (y_t, ydot_t); rows index time for array input."""
        sysm = self.system
        t = np.asarray(t, dtype=float)
        w = sysm.freq
        arg = w * t[..., None]
        if sysm.all_neg:
            cs, sn = np.cos(arg), np.sin(arg)
            return self.C1 * cs + self.C2 * sn - sysm.o, w * (self.C2 * cs - self.C1 * sn)
        cs, sn = np.cos(arg), np.sin(arg)
        ep, em = np.exp(np.where(sysm.neg, 0.0, arg)), np.exp(np.where(sysm.neg, 0.0, -arg))
        y = np.where(sysm.neg, self.C1 * cs + self.C2 * sn, self.C1 * ep + self.C2 * em) - sysm.o
        yd = np.where(
            sysm.neg, w * (-self.C1 * sn + self.C2 * cs), w * (self.C1 * ep - self.C2 * em)
        )
        return y, yd

    def evaluate(self, t):
        return evaluate_quadratic(self, t)


def solve_quadratic(
    target: GaussianTarget, P: ArrayLike, A_d: ArrayLike, x0: ArrayLike, v0: ArrayLike
) -> QuadraticFlow:
    A_d = np.asarray(A_d, dtype=float)
    diag = np.diag(A_d) if A_d.ndim == 2 else A_d
    return QuadraticSystem(target, P, diag).solve(x0, v0)


def evaluate_quadratic(f: QuadraticFlow, t):
    y, yd = f.evaluate_y(t)
    Pinv = f.system.P_inv
    return y @ Pinv.T, yd @ Pinv.T


# ---------------------------------------------------------------- decoupled


@dataclass(frozen=True)
class DecoupledFlow:
    """Independent univariate oscillators, one per coordinate."""

    parts: tuple[UnivariateFlow, ...]

    def evaluate(self, t):
        t = np.asarray(t, dtype=float)
        xs, vs = zip(*(evaluate_univariate(f, t) for f in self.parts))
        if t.ndim == 0:
            return np.array(xs), np.array(vs)
        return np.stack(xs, axis=-1), np.stack(vs, axis=-1)


# ---------------------------------------------------------------- dynamics


class LinearDynamics:
    tag = "linear"

    def solve(self, x: Vector, v: Vector) -> LinearFlow:
        return LinearFlow(np.array(x, dtype=float), np.array(v, dtype=float))


class UnivariateDynamics:
    tag = "univariate"

    def __init__(self, a: float, precision: float = 1.0) -> None:
        self.a = float(a)
        self.precision = float(precision)

    def solve(self, x: Vector, v: Vector) -> "_VectorisedUnivariate":
        return _VectorisedUnivariate(solve_univariate(self.a, x[0], v[0], self.precision))


@dataclass(frozen=True)
class _VectorisedUnivariate:
    flow: UnivariateFlow

    def evaluate(self, t):
        x, v = evaluate_univariate(self.flow, t)
        if np.ndim(x) == 0:
            return np.array([x]), np.array([v])
        return x[:, None], v[:, None]


class QuadraticDynamics:
    tag = "quadratic"

    def __init__(self, system: QuadraticSystem) -> None:
        self.system = system

    def solve(self, x: Vector, v: Vector) -> QuadraticFlow:
        return self.system.solve(x, v)


class DecoupledDynamics:
    tag = "decoupled"

    def __init__(self, a: ArrayLike, precision: ArrayLike) -> None:
        self.a = np.asarray(a, dtype=float)
        self.precision = np.asarray(precision, dtype=float)

    def solve(self, x: Vector, v: Vector) -> DecoupledFlow:
        return DecoupledFlow(
            tuple(
                solve_univariate(ai, xi, vi, pi)
                for ai, xi, vi, pi in zip(self.a, x, v, self.precision)
            )
        )
