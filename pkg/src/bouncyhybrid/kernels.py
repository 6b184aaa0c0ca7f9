"""Velocity updates applied at event times."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray

Vector = NDArray[np.float64]

# Below this norm the reflection hyperplane is undefined.
MIN_GUIDE_NORM = 1e-14


class BounceVariant(enum.Enum):
    DETERMINISTIC = "deterministic"
    STOCHASTIC = "stochastic"


@dataclass(frozen=True)
class BounceKernelSpec:
    variant: BounceVariant = BounceVariant.DETERMINISTIC
    refresh_angle: float = math.pi / 2

    def __post_init__(self) -> None:
        _check_angle(self.refresh_angle)


def _check_angle(phi: float) -> None:
    if not (0.0 < phi <= math.pi / 2):
        raise ValueError(f"refresh angle must lie in (0, pi/2], got {phi!r}")


def _unit(gx: Vector) -> tuple[Vector, float]:
    gx = np.asarray(gx, dtype=float)
    n = float(np.linalg.norm(gx))
    if n <= MIN_GUIDE_NORM:
        raise ValueError("bounce with vanishing guide field: reflection undefined")
    return gx, n


def bounce_deterministic(v: ArrayLike, gx: ArrayLike) -> Vector:
    """Reflect v in the hyperplane orthogonal to g(x)."""
    v = np.asarray(v, dtype=float)
    gx, n = _unit(gx)
    return v - (2.0 * float(v @ gx) / (n * n)) * gx


def orthogonal_complement(gx: ArrayLike) -> Vector:
    """Orthonormal basis (d, d-1) of the complement of gx, via a Householder matrix."""
    gx, n = _unit(gx)
    d = gx.shape[0]
    e = gx / n
    # H = I - 2 w w^T maps e to +-e_1; its other columns span e-perp
    w = e.copy()
    w[0] += math.copysign(1.0, e[0]) if e[0] != 0 else 1.0
    w /= np.linalg.norm(w)
    H = np.eye(d) - 2.0 * np.outer(w, w)
    return H[:, 1:]


def bounce_stochastic(v: ArrayLike, gx: ArrayLike, rng: np.random.Generator) -> Vector:
    """Flip the component along g(x) and redraw the orthogonal part as N(0, I)."""
    v = np.asarray(v, dtype=float)
    gx, n = _unit(gx)
    v_par = (float(v @ gx) / (n * n)) * gx
    if v.shape[0] == 1:
        return -v_par
    B = orthogonal_complement(gx)
    return -v_par + B @ rng.standard_normal(B.shape[1])


def wall_reflect(v: ArrayLike, wall_normal: ArrayLike) -> Vector:
    v = np.asarray(v, dtype=float)
    nrm = np.asarray(wall_normal, dtype=float)
    nn = float(nrm @ nrm)
    if nn == 0.0:
        raise ValueError("wall normal must be non-zero")
    return v - (2.0 * float(v @ nrm) / nn) * nrm


def refresh_partial(v: ArrayLike, phi: float, rng: np.random.Generator) -> Vector:
    """cos(phi) v + sin(phi) xi; phi = pi/2 is a full refreshment."""
    _check_angle(phi)
    v = np.asarray(v, dtype=float)
    xi = rng.standard_normal(v.shape[0])
    if phi == math.pi / 2:
        return xi
    return math.cos(phi) * v + math.sin(phi) * xi


def coordinate_flip(v: ArrayLike, i: int) -> Vector:
    """Negate coordinate ``i`` (0-based)."""
    v = np.array(v, dtype=float)
    if not 0 <= i < v.shape[0]:
        raise IndexError(f"coordinate {i} out of range for dimension {v.shape[0]}")
    v[i] = -v[i]
    return v
