"""Targets, guide fields, states and affine constraint sets."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.typing import ArrayLike, NDArray

# Wall-hit times land exactly on the boundary; rounding must not flip feasibility.
CONSTRAINT_TOL = 1e-10

Vector = NDArray[np.float64]


class TargetKind(enum.Enum):
    GENERAL_SMOOTH = "general_smooth"
    GAUSSIAN = "gaussian"


def _as_vector(x: ArrayLike, dim: int | None = None, name: str = "x") -> Vector:
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be a vector, got shape {arr.shape}")
    if dim is not None and arr.shape[0] != dim:
        raise ValueError(f"{name} has length {arr.shape[0]}, expected {dim}")
    return arr


class TargetModel:
    """A smooth target density known through U = -log pi up to a constant."""

    kind = TargetKind.GENERAL_SMOOTH

    def __init__(
        self,
        dim: int,
        potential: Callable[[Vector], float],
        grad_potential: Callable[[Vector], Vector],
    ) -> None:
        if dim < 1:
            raise ValueError("dim must be positive")
        self.dim = int(dim)
        self._potential = potential
        self._grad = grad_potential

    def potential(self, x: ArrayLike) -> float:
        return float(self._potential(_as_vector(x, self.dim)))

    def grad_potential(self, x: ArrayLike) -> Vector:
        return np.asarray(self._grad(_as_vector(x, self.dim)), dtype=float)


class GaussianTarget(TargetModel):
    """N(mean, covariance); the precision is formed once via Cholesky."""

    kind = TargetKind.GAUSSIAN

    def __init__(self, mean: ArrayLike, covariance: ArrayLike) -> None:
        mean = _as_vector(mean, name="mean")
        cov = np.atleast_2d(np.asarray(covariance, dtype=float))
        d = mean.shape[0]
        if cov.shape != (d, d):
            raise ValueError(f"covariance has shape {cov.shape}, expected {(d, d)}")
        if not np.allclose(cov, cov.T, rtol=0, atol=1e-12 * max(1.0, np.abs(cov).max())):
            raise ValueError("covariance must be symmetric")
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise ValueError("covariance must be positive definite") from exc
        chol_inv = np.linalg.solve(chol, np.eye(d))
        precision = chol_inv.T @ chol_inv
        precision = 0.5 * (precision + precision.T)

        self.dim = d
        self.mean = mean
        self.covariance = cov
        self.precision = precision
        self.chol = chol
        self._precision_mean = precision @ mean

    @classmethod
    def standard(cls, dim: int) -> "GaussianTarget":
        return cls(np.zeros(dim), np.eye(dim))

    def potential(self, x: ArrayLike) -> float:
        r = _as_vector(x, self.dim) - self.mean
        return 0.5 * float(r @ self.precision @ r)

    def grad_potential(self, x: ArrayLike) -> Vector:
        return self.precision @ (_as_vector(x, self.dim) - self.mean)

    @property
    def precision_mean(self) -> Vector:
        """Sigma^{-1} mu."""
        return self._precision_mean


class GuideKind(enum.Enum):
    ZERO = "zero"
    GRAD_U = "grad"
    LINEAR = "linear"
    CUSTOM = "custom"


@dataclass(frozen=True)
class GuideField:
    """The vector field g(x) that picks a sampler out of the family.

    Use the constructors: ``GuideField.zero()``, ``GuideField.grad_u()``,
    ``GuideField.linear(A)`` or ``GuideField.custom(fn)``.
    """

    kind: GuideKind
    matrix: Vector | None = None
    fn: Callable[[Vector], Vector] | None = field(default=None, compare=False)

    @classmethod
    def zero(cls) -> "GuideField":
        return cls(GuideKind.ZERO)

    @classmethod
    def grad_u(cls) -> "GuideField":
        return cls(GuideKind.GRAD_U)

    @classmethod
    def linear(cls, matrix: ArrayLike) -> "GuideField":
        A = np.atleast_2d(np.asarray(matrix, dtype=float))
        if A.shape[0] != A.shape[1]:
            raise ValueError("linear guide matrix must be square")
        A.setflags(write=False)
        return cls(GuideKind.LINEAR, matrix=A)

    @classmethod
    def custom(cls, fn: Callable[[Vector], Vector]) -> "GuideField":
        return cls(GuideKind.CUSTOM, fn=fn)

    def __call__(self, target: TargetModel, x: ArrayLike) -> Vector:
        return evaluate_guide(self, target, x)


def evaluate_guide(g: GuideField, target: TargetModel, x: ArrayLike) -> Vector:
    x = _as_vector(x, target.dim)
    if g.kind is GuideKind.ZERO:
        return np.zeros(target.dim)
    if g.kind is GuideKind.GRAD_U:
        return target.grad_potential(x)
    if g.kind is GuideKind.LINEAR:
        if g.matrix.shape[0] != target.dim:
            raise ValueError(
                f"guide matrix is {g.matrix.shape[0]}x{g.matrix.shape[0]}, target dim {target.dim}"
            )
        return g.matrix @ x
    out = np.asarray(g.fn(x), dtype=float)
    if out.shape != (target.dim,):
        raise ValueError(f"custom guide returned shape {out.shape}, expected {(target.dim,)}")
    return out


def linear_guide_matrix(g: GuideField, target: TargetModel) -> Vector | None:
    """Matrix A with g(x) = A x when the guide is linear in x, else None."""
    if g.kind is GuideKind.ZERO:
        return np.zeros((target.dim, target.dim))
    if g.kind is GuideKind.LINEAR:
        return np.asarray(g.matrix)
    if g.kind is GuideKind.GRAD_U and isinstance(target, GaussianTarget):
        if np.any(target.mean != 0):
            return None
        return target.precision
    return None


@dataclass
class State:
    position: Vector
    velocity: Vector
    time: float = 0.0

    def __post_init__(self) -> None:
        self.position = _as_vector(self.position, name="position")
        self.velocity = _as_vector(self.velocity, self.position.shape[0], name="velocity")
        if self.time < 0:
            raise ValueError("time must be non-negative")


class ConstraintSet:
    """Affine constraints F^T x + h >= 0 with F of shape (d, m)."""

    def __init__(self, F: ArrayLike, h: ArrayLike) -> None:
        F = np.asarray(F, dtype=float)
        h = np.asarray(h, dtype=float).reshape(-1)
        if F.ndim == 1:
            F = F.reshape(-1, 1) if h.shape[0] == 1 else F.reshape(1, -1)
        if F.ndim != 2 or F.shape[1] != h.shape[0]:
            raise ValueError(f"F has shape {F.shape} but h has {h.shape[0]} entries")
        self.F = F
        self.h = h

    @classmethod
    def empty(cls, dim: int) -> "ConstraintSet":
        return cls(np.zeros((dim, 0)), np.zeros(0))

    @property
    def dim(self) -> int:
        return self.F.shape[0]

    @property
    def m(self) -> int:
        return self.F.shape[1]

    def values(self, x: ArrayLike) -> Vector:
        """F^T x + h; accepts a single point or an (n, d) batch."""
        x = np.asarray(x, dtype=float)
        return x @ self.F + self.h

    def satisfied(self, x: ArrayLike, tol: float = CONSTRAINT_TOL) -> bool:
        return constraints_satisfied(self, x, tol)


def constraints_satisfied(c: ConstraintSet, x: ArrayLike, tol: float = CONSTRAINT_TOL) -> bool:
    x = _as_vector(x, c.dim)
    if c.m == 0:
        return True
    return bool(np.min(c.values(x)) >= -tol)


def draw_standard_normal_velocity(dim: int, rng: np.random.Generator) -> Vector:
    if dim < 1:
        raise ValueError("dim must be positive")
    return rng.standard_normal(dim)
