"""Estimators, reference values and stationarity diagnostics."""

from __future__ import annotations

import itertools
import math
import re
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import stats
from scipy.special import ndtr

from .flows import QuadraticDynamics
from .kernels import BounceVariant, orthogonal_complement
from .model import ConstraintSet, GaussianTarget, GuideField, GuideKind, TargetModel
from .samplers import Skeleton

Vector = NDArray[np.float64]

BURN_IN = 0.1


# ------------------------------------------------------------------ discretisation


@dataclass(frozen=True)
class DiscretizedChain:
    delta: float
    times: Vector
    positions: Vector  # (N, d)
    velocities: Vector  # (N, d)

    def __len__(self) -> int:
        return self.times.shape[0]

    def after_burn_in(self, fraction: float = BURN_IN) -> "DiscretizedChain":
        """Drop samples with t < fraction * T."""
        if len(self) == 0:
            return self
        cut = fraction * (self.times[-1] if len(self) else 0.0)
        keep = self.times >= cut
        return DiscretizedChain(self.delta, self.times[keep], self.positions[keep], self.velocities[keep])


def grid_size(T_total: float, delta: float) -> int:
    """floor(T / delta), robust to T / delta landing a hair below an integer."""
    ratio = T_total / delta
    n = math.floor(ratio)
    if math.isclose(ratio, n + 1, rel_tol=1e-12, abs_tol=0.0):
        n += 1
    return n


def discretize(skeleton: Skeleton, delta: float, allow_coarse: bool = False) -> DiscretizedChain:
    """States at t = i delta, i = 1..floor(T / delta), by exact interpolation."""
    if not delta > 0:
        raise ValueError("delta must be positive")
    T = skeleton.T_total
    n = grid_size(T, delta)
    if n == 0:
        if not allow_coarse:
            raise ValueError(f"delta={delta} exceeds T_total={T}: no samples")
        times = np.array([T])
    else:
        times = delta * np.arange(1, n + 1)
        times[-1] = min(times[-1], T)
    x, v = skeleton.state_at(times)
    return DiscretizedChain(delta, times, x, v)


def time_average(chain: DiscretizedChain | Vector, f: Callable[[Vector], float]) -> float:
    xs = chain.positions if isinstance(chain, DiscretizedChain) else np.asarray(chain)
    if len(xs) == 0:
        raise ValueError("empty chain")
    return float(np.mean([f(x) for x in xs]))


# ------------------------------------------------------------------ moments


@dataclass(frozen=True)
class MomentReport:
    mean: Vector
    var: Vector
    ref_mean: Vector | None = None
    ref_var: Vector | None = None

    def __post_init__(self) -> None:
        if np.any(np.asarray(self.var) < 0):
            raise ValueError("variance estimates must be non-negative")

    def with_reference(self, truth: "MomentReport") -> "MomentReport":
        return MomentReport(self.mean, self.var, truth.mean, truth.var)

    @property
    def squared_error(self) -> dict[str, float] | None:
        if self.ref_mean is None:
            return None
        return _moment_dict((self.mean - self.ref_mean) ** 2, (self.var - self.ref_var) ** 2)

    def as_dict(self) -> dict[str, float]:
        return _moment_dict(self.mean, self.var)


def _moment_dict(mean: Vector, var: Vector) -> dict[str, float]:
    out = {}
    for i, m in enumerate(mean, 1):
        out[f"mu{i}"] = float(m)
    for i, s in enumerate(var, 1):
        out[f"var{i}"] = float(s)
    return out


def moment_report(samples: DiscretizedChain | ArrayLike) -> MomentReport:
    xs = samples.positions if isinstance(samples, DiscretizedChain) else np.asarray(samples, float)
    if xs.ndim == 1:
        xs = xs[:, None]
    if len(xs) == 0:
        raise ValueError("no samples")
    return MomentReport(xs.mean(axis=0), xs.var(axis=0))


def mse_report(estimates: Sequence[MomentReport], truth: MomentReport) -> dict[str, float]:
    """Mean over replications of the squared error of each mean and variance."""
    if len(estimates) < 2:
        raise ValueError("need at least two replications")
    d = np.asarray(truth.mean).shape[0]
    sq = []
    for est in estimates:
        if np.asarray(est.mean).shape != (d,) or np.asarray(est.var).shape != (d,):
            raise ValueError("estimate shape does not match the reference")
        sq.append(est.with_reference(truth).squared_error)
    return {k: float(np.mean([s[k] for s in sq])) for k in sq[0]}


# ------------------------------------------------------------------ quadrature oracle

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(20)


class QuadratureError(RuntimeError):
    pass


def quadrature_truth_truncated_mvn(
    target: GaussianTarget,
    constraints: ConstraintSet,
    resolution: int = 4,
    tol: float = 1e-6,
    max_resolution: int = 4096,
    width: float = 8.0,
) -> MomentReport:
    """Means and variances of a 2-D Gaussian restricted to a polytope.

    The inner integral over x2 given x1 is the closed-form truncated normal
    moment; the outer integral over x1 uses composite Gauss-Legendre on panels
    between the x1-coordinates where the feasible x2-interval changes form.
    The panel count doubles until successive answers agree to ``tol``.
    """
    if target.dim != 2:
        raise ValueError("quadrature oracle is two-dimensional")
    mu, S = target.mean, target.covariance
    sd = np.sqrt(np.diag(S))
    lo1, hi1 = mu[0] - width * sd[0], mu[0] + width * sd[0]
    box2 = (mu[1] - width * sd[1], mu[1] + width * sd[1])
    lines = _x2_bounds(constraints)
    cuts = _breakpoints(constraints, lines, box2, lo1, hi1)

    def moments(n_panels: int) -> Vector:
        total = np.zeros(5)
        for a, b in zip(cuts[:-1], cuts[1:]):
            edges = np.linspace(a, b, n_panels + 1)
            half = 0.5 * np.diff(edges)
            mid = 0.5 * (edges[1:] + edges[:-1])
            x1 = (mid[:, None] + half[:, None] * _GL_NODES[None, :]).ravel()
            w = (half[:, None] * _GL_WEIGHTS[None, :]).ravel()
            total += _slice_moments(x1, target, lines, box2, constraints) @ w
        z, s1, s11, s2, s22 = total
        if z <= 0:
            raise QuadratureError("feasible region has no mass inside the integration box")
        m1, m2 = s1 / z, s2 / z
        return np.array([m1, m2, s11 / z - m1 * m1, s22 / z - m2 * m2])

    n = resolution
    prev = moments(n)
    while True:
        n *= 2
        cur = moments(n)
        err = float(np.max(np.abs(cur - prev)))
        if err <= tol:
            return MomentReport(cur[:2], cur[2:])
        if n >= max_resolution:
            raise QuadratureError(f"no convergence: resolution doubling changed moments by {err:.3g}")
        prev = cur


def _x2_bounds(constraints: ConstraintSet):
    """Each constraint F1 x1 + F2 x2 + h >= 0 as (kind, slope, intercept) in x2."""
    out = []
    for f1, f2, h in zip(constraints.F[0], constraints.F[1], constraints.h):
        if f2 > 0:
            out.append(("lo", -f1 / f2, -h / f2))
        elif f2 < 0:
            out.append(("hi", -f1 / f2, -h / f2))
        else:
            out.append(("x1", f1, h))  # f1 x1 + h >= 0
    return out


def _breakpoints(constraints, lines, box2, lo1, hi1) -> Vector:
    pts = {lo1, hi1}
    sloped = [(s, c) for kind, s, c in lines if kind != "x1"] + [(0.0, box2[0]), (0.0, box2[1])]
    for (s1, c1), (s2, c2) in itertools.combinations(sloped, 2):
        if s1 != s2:
            pts.add((c2 - c1) / (s1 - s2))
    for kind, f1, h in lines:
        if kind == "x1" and f1 != 0:
            pts.add(-h / f1)
    return np.array(sorted(p for p in pts if lo1 <= p <= hi1))


def _slice_moments(x1, target, lines, box2, constraints) -> Vector:
    """Rows: p(x1) * [Z, x1 Z, x1^2 Z, int x2, int x2^2] over the feasible x2 range."""
    mu, S = target.mean, target.covariance
    lo = np.full_like(x1, box2[0])
    hi = np.full_like(x1, box2[1])
    ok = np.ones_like(x1, dtype=bool)
    for kind, s, c in lines:
        if kind == "lo":
            lo = np.maximum(lo, s * x1 + c)
        elif kind == "hi":
            hi = np.minimum(hi, s * x1 + c)
        else:
            ok &= s * x1 + c >= 0
    ok &= hi > lo
    m = mu[1] + S[0, 1] / S[0, 0] * (x1 - mu[0])
    s = math.sqrt(S[1, 1] - S[0, 1] ** 2 / S[0, 0])
    al = (lo - m) / s
    be = (hi - m) / s
    # stable Phi(be) - Phi(al) on whichever side of the mode the interval sits
    z = np.where(al > 0, ndtr(-al) - ndtr(-be), ndtr(be) - ndtr(al))
    pa, pb = stats.norm.pdf(al), stats.norm.pdf(be)
    e1 = m * z + s * (pa - pb)
    e2 = (m * m + s * s) * z + 2 * m * s * (pa - pb) + s * s * (al * pa - be * pb)
    dens = stats.norm.pdf(x1, mu[0], math.sqrt(S[0, 0]))
    z, e1, e2 = (np.where(ok, q, 0.0) * dens for q in (z, e1, e2))
    return np.vstack([z, x1 * z, x1 * x1 * z, e1, e2])


# ------------------------------------------------------------------ chain diagnostics


def batch_means(series: ArrayLike, n_batches: int = 50) -> tuple[float, float]:
    """Mean and batch-means standard error of a correlated series."""
    x = np.asarray(series, dtype=float)
    size = x.shape[0] // n_batches
    if size < 1:
        raise ValueError(f"need at least {n_batches} values for {n_batches} batches")
    x = x[x.shape[0] - size * n_batches :]
    means = x.reshape(n_batches, size).mean(axis=1)
    return float(means.mean()), float(means.std(ddof=1) / math.sqrt(n_batches))


def autocorrelation(series: ArrayLike, max_lag: int | None = None) -> Vector:
    x = np.asarray(series, dtype=float)
    x = x - x.mean()
    n = x.shape[0]
    nfft = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, nfft)
    acf = np.fft.irfft(f * np.conj(f), nfft)[:n]
    acf /= acf[0]
    return acf if max_lag is None else acf[: max_lag + 1]


def decorrelation_lag(series: ArrayLike, threshold: float = 0.1) -> int:
    """Smallest lag k >= 1 whose autocorrelation falls below ``threshold``."""
    acf = autocorrelation(series)
    below = np.flatnonzero(acf[1:] < threshold)
    if below.size == 0:
        raise ValueError("series never decorrelates")
    return int(below[0]) + 1


def thin_for_independence(series: ArrayLike, threshold: float = 0.1) -> Vector:
    x = np.asarray(series, dtype=float)
    return x[:: decorrelation_lag(x, threshold)]


def ks_standard_normal(samples: ArrayLike) -> float:
    return float(stats.kstest(np.asarray(samples, dtype=float), "norm").statistic)


# ------------------------------------------------------------------ polynomial test functions

_FACTOR = re.compile(r"^([xv])(\d+)(?:\^(\d+))?$")


@dataclass(frozen=True)
class TestFunction:
    """Polynomial sum_k coef_k * prod_i x_i^a_ki * prod_i v_i^b_ki of degree <= 4."""

    __test__ = False  # not a pytest class

    terms: tuple[tuple[float, tuple[int, ...], tuple[int, ...]], ...]
    dim: int
    name: str = ""

    def __post_init__(self) -> None:
        for coef, ax, bv in self.terms:
            if len(ax) != self.dim or len(bv) != self.dim:
                raise ValueError("exponent vectors must match the dimension")
            if sum(ax) + sum(bv) > 4:
                raise ValueError("test functions are limited to total degree 4")

    @classmethod
    def parse(cls, text: str, dim: int) -> "TestFunction":
        """Parse ``"2*x1^2*v2 + v1"``; indices are 1-based."""
        terms = []
        for raw in text.replace("-", "+-").split("+"):
            raw = raw.strip()
            if not raw:
                continue
            coef = 1.0
            ax, bv = [0] * dim, [0] * dim
            for factor in raw.split("*"):
                factor = factor.strip()
                sign = 1.0
                if factor.startswith("-"):
                    sign, factor = -1.0, factor[1:].strip()
                coef *= sign
                m = _FACTOR.match(factor)
                if m is None:
                    try:
                        coef *= float(factor)
                    except ValueError:
                        raise ValueError(f"cannot parse factor {factor!r} in {text!r}") from None
                    continue
                idx = int(m.group(2)) - 1
                if not 0 <= idx < dim:
                    raise ValueError(f"coordinate index in {factor!r} exceeds dimension {dim}")
                power = int(m.group(3) or 1)
                (ax if m.group(1) == "x" else bv)[idx] += power
            terms.append((coef, tuple(ax), tuple(bv)))
        if not terms:
            raise ValueError(f"empty test function {text!r}")
        return cls(tuple(terms), dim, text.strip())

    def value(self, X: Vector, V: Vector) -> Vector:
        out = np.zeros(X.shape[0])
        for coef, ax, bv in self.terms:
            out += coef * _mono(X, ax) * _mono(V, bv)
        return out

    def grad_x(self, X: Vector, V: Vector) -> Vector:
        return self._grad(X, V, wrt_x=True)

    def grad_v(self, X: Vector, V: Vector) -> Vector:
        return self._grad(X, V, wrt_x=False)

    def _grad(self, X, V, wrt_x: bool) -> Vector:
        out = np.zeros_like(X)
        for coef, ax, bv in self.terms:
            e = ax if wrt_x else bv
            for i in range(self.dim):
                if e[i] == 0:
                    continue
                de = list(e)
                de[i] -= 1
                if wrt_x:
                    out[:, i] += coef * e[i] * _mono(X, de) * _mono(V, bv)
                else:
                    out[:, i] += coef * e[i] * _mono(X, ax) * _mono(V, de)
        return out

    def gaussian_average(self, X: Vector, mean: Vector, cov) -> Vector:
        """E f(x, V) for V ~ N(mean, cov); ``cov`` is a scalar (times I) or (N, d, d)."""
        out = np.zeros(X.shape[0])
        for coef, ax, bv in self.terms:
            idx = [i for i in range(self.dim) for _ in range(bv[i])]
            out += coef * _mono(X, ax) * _gaussian_moment(idx, mean, cov)
        return out


def _mono(X: Vector, e: Sequence[int]) -> Vector:
    out = np.ones(X.shape[0])
    for i, p in enumerate(e):
        if p:
            out = out * X[:, i] ** p
    return out


def _cov_entry(cov, i: int, j: int):
    if np.ndim(cov) == 0:
        return cov if i == j else 0.0
    return cov[:, i, j]


def _pairings(items: list[int]):
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for k in range(len(rest)):
        for tail in _pairings(rest[:k] + rest[k + 1 :]):
            yield [(first, rest[k])] + tail


def _gaussian_moment(idx: list[int], mean: Vector, cov) -> Vector:
    """E prod_k V_{idx_k} for V ~ N(mean, cov), by Isserlis on the centred part."""
    n = len(idx)
    total = np.zeros(mean.shape[0])
    for r in range(n + 1):
        for centred in itertools.combinations(range(n), r):
            if r % 2:
                continue
            fixed = [idx[k] for k in range(n) if k not in centred]
            term = np.ones(mean.shape[0])
            for i in fixed:
                term = term * mean[:, i]
            if r:
                pair_sum = 0.0
                for pairing in _pairings([idx[k] for k in centred]):
                    prod = 1.0
                    for i, j in pairing:
                        prod = prod * _cov_entry(cov, i, j)
                    pair_sum = pair_sum + prod
                term = term * pair_sum
            total += term
    return total


def default_suite(dim: int) -> list[TestFunction]:
    """Ten low-degree monomials whose generator averages are informative."""
    if dim == 1:
        texts = ["v1", "x1*v1", "x1^2*v1", "x1^3*v1", "v1^3", "x1*v1^3", "x1^2", "v1^2",
                 "x1^2*v1^2", "x1*v1^2"]
    else:
        texts = ["v1", "v2", "x1*v1", "x2*v2", "x1*v2", "x2*v1", "x1^2*v1", "x1*x2*v2",
                 "x1*v1^3", "x2^2*v1*v2"]
    return [TestFunction.parse(t, dim) for t in texts]


# ------------------------------------------------------------------ generator test


@dataclass(frozen=True)
class GeneratorResult:
    name: str
    mean: float
    stderr: float
    z: float


def generator_values(
    skeleton: Skeleton,
    target: TargetModel,
    fn: TestFunction,
    X: Vector,
    V: Vector,
    guide: GuideField | None = None,
) -> Vector:
    """Pointwise infinitesimal generator of the sampler applied to ``fn``."""
    if skeleton.constraints is not None and skeleton.constraints.m > 0:
        raise ValueError("generator test does not cover reflecting walls")
    config = skeleton.config
    guide = guide or skeleton.guide or config.guide
    grad_u = _batch_grad(target, X)
    g = _batch_guide(guide, target, X, grad_u)
    lam0 = config.lambda0
    phi = config.refresh_angle

    out = np.einsum("ij,ij->i", fn.grad_x(X, V), V)
    out += np.einsum("ij,ij->i", fn.grad_v(X, V), g - grad_u)
    f0 = fn.value(X, V)
    if lam0 > 0:
        c, s = math.cos(phi), math.sin(phi)
        refreshed = fn.gaussian_average(X, c * V if phi != math.pi / 2 else 0 * V, s * s)
        out += lam0 * (refreshed - f0)

    if skeleton.sampler == "cbhs":
        gamma = np.zeros(skeleton.dim) if config.cbhs_gamma is None else np.asarray(config.cbhs_gamma)
        for i in range(skeleton.dim):
            rate = np.maximum(V[:, i] * g[:, i], 0.0) + gamma[i]
            Vf = V.copy()
            Vf[:, i] = -Vf[:, i]
            out += rate * (fn.value(X, Vf) - f0)
        return out

    vg = np.einsum("ij,ij->i", V, g)
    rate = np.maximum(vg, 0.0)
    active = rate > 0
    bounced = f0.copy()
    if np.any(active):
        Xa, Va, ga = X[active], V[active], g[active]
        gg = np.einsum("ij,ij->i", ga, ga)
        v_par = (vg[active] / gg)[:, None] * ga
        if config.bounce_kernel.variant is BounceVariant.STOCHASTIC:
            cov = np.array([_complement_cov(gi) for gi in ga])
            bounced[active] = fn.gaussian_average(Xa, -v_par, cov)
        else:
            bounced[active] = fn.value(Xa, Va - 2.0 * v_par)
    out += rate * (bounced - f0)
    return out


def _complement_cov(gx: Vector) -> Vector:
    B = orthogonal_complement(gx)
    return B @ B.T


def _batch_grad(target: TargetModel, X: Vector) -> Vector:
    if isinstance(target, GaussianTarget):
        return (X - target.mean) @ target.precision.T
    return np.array([target.grad_potential(x) for x in X])


def _batch_guide(guide: GuideField, target, X: Vector, grad_u: Vector) -> Vector:
    if guide.kind is GuideKind.ZERO:
        return np.zeros_like(X)
    if guide.kind is GuideKind.GRAD_U:
        return grad_u
    if guide.kind is GuideKind.LINEAR:
        return X @ guide.matrix.T
    return np.array([guide(target, x) for x in X])


def generator_invariance_test(
    skeleton: Skeleton,
    target: TargetModel,
    test_fns: Sequence[TestFunction],
    delta: float | None = None,
    burn_in: float = BURN_IN,
    n_batches: int = 50,
) -> list[GeneratorResult]:
    """z-scores of the stationary average of the generator applied to each function."""
    if not test_fns:
        raise ValueError("no test functions given")
    chain = discretize(skeleton, delta or skeleton.config.delta).after_burn_in(burn_in)
    X, V = chain.positions, chain.velocities
    results = []
    for fn in test_fns:
        vals = generator_values(skeleton, target, fn, X, V)
        if not np.any(vals):
            results.append(GeneratorResult(fn.name, 0.0, 0.0, 0.0))
            continue
        mean, se = batch_means(vals, n_batches)
        if se == 0.0:
            raise ValueError(f"zero batch-means variance for {fn.name!r}")
        results.append(GeneratorResult(fn.name, mean, se, mean / se))
    return results


def is_quadratic(skeleton: Skeleton) -> bool:
    return isinstance(skeleton.dynamics, QuadraticDynamics)
