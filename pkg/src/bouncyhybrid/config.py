"""Experiment configuration: TOML parsing, validation and serialisation.

Every section is optional except ``[target]``.  Unknown keys are rejected so
that typos fail loudly; every error names the offending ``section.key``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import numpy as np
import tomli
import tomli_w

from .kernels import BounceKernelSpec, BounceVariant
from .model import ConstraintSet, GaussianTarget, GuideField, State
from .samplers import Corruption, SamplerConfig

SAMPLERS = ("bhs", "qbhs", "cbhs", "gibbs")
GUIDES = ("zero", "grad_u", "linear")


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------ sections


@dataclass(frozen=True)
class ExperimentSection:
    sampler: str = "bhs"
    seed: int = 0
    replications: int = 1
    burn_in: float = 0.1


@dataclass(frozen=True)
class TargetSection:
    mean: tuple[float, ...] = (0.0,)
    covariance: tuple[tuple[float, ...], ...] = ((1.0,),)


@dataclass(frozen=True)
class GuideSection:
    kind: str = "zero"
    matrix: tuple[tuple[float, ...], ...] = ()


@dataclass(frozen=True)
class ConstraintsSection:
    # one entry per constraint: the column F_j, so the constraint is F_j . x + h_j >= 0
    columns: tuple[tuple[float, ...], ...] = ()
    h: tuple[float, ...] = ()


@dataclass(frozen=True)
class QbhsSection:
    a: float = -1.0
    P: tuple[tuple[float, ...], ...] = ()  # empty means identity


@dataclass(frozen=True)
class SamplerSection:
    lambda0: float = 1.0
    T_total: float = 100.0
    delta: float = 0.1
    bounce_kernel: str = "deterministic"
    refresh_angle: float = math.pi / 2
    cbhs_gamma: tuple[float, ...] = ()
    initial_position: tuple[float, ...] = ()  # empty means the target mean
    initial_velocity: tuple[float, ...] = ()  # empty means a N(0, I) draw from the seed


@dataclass(frozen=True)
class GibbsSection:
    n_samples: int = 12000


@dataclass(frozen=True)
class OutputSection:
    dir: str = "out"
    histogram_bins: int = 50
    histogram_range: tuple[float, float] = (-5.0, 5.0)


@dataclass(frozen=True)
class GentestSection:
    functions: tuple[str, ...] | None = None  # None means the default suite
    threshold: float = 5.0
    corrupt: str = "none"


_SECTIONS = {
    "experiment": ExperimentSection,
    "target": TargetSection,
    "guide": GuideSection,
    "constraints": ConstraintsSection,
    "qbhs": QbhsSection,
    "sampler": SamplerSection,
    "gibbs": GibbsSection,
    "output": OutputSection,
    "gentest": GentestSection,
}


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    target: TargetSection = field(default_factory=TargetSection)
    guide: GuideSection = field(default_factory=GuideSection)
    constraints: ConstraintsSection = field(default_factory=ConstraintsSection)
    qbhs: QbhsSection = field(default_factory=QbhsSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    gibbs: GibbsSection = field(default_factory=GibbsSection)
    output: OutputSection = field(default_factory=OutputSection)
    gentest: GentestSection = field(default_factory=GentestSection)

    @property
    def dim(self) -> int:
        return len(self.target.mean)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, experiment=replace(self.experiment, seed=int(seed)))

    def with_out_dir(self, path: str) -> "ExperimentConfig":
        return replace(self, output=replace(self.output, dir=str(path)))

    # -------------------------------------------------------------- builders

    def build_target(self) -> GaussianTarget:
        return GaussianTarget(np.array(self.target.mean), np.array(self.target.covariance))

    def build_guide(self) -> GuideField:
        kind = self.guide.kind
        if kind == "zero":
            return GuideField.zero()
        if kind == "grad_u":
            return GuideField.grad_u()
        return GuideField.linear(np.array(self.guide.matrix))

    def build_constraints(self) -> ConstraintSet:
        if not self.constraints.columns:
            return ConstraintSet.empty(self.dim)
        return ConstraintSet(np.array(self.constraints.columns).T, np.array(self.constraints.h))

    def build_P(self) -> np.ndarray:
        return np.array(self.qbhs.P) if self.qbhs.P else np.eye(self.dim)

    def sampler_config(self, seed: int | None = None) -> SamplerConfig:
        s = self.sampler
        gamma = tuple(s.cbhs_gamma) if s.cbhs_gamma else None
        return SamplerConfig(
            lambda0=s.lambda0,
            T_total=s.T_total,
            delta=s.delta,
            seed=self.experiment.seed if seed is None else int(seed),
            bounce_kernel=BounceKernelSpec(BounceVariant(s.bounce_kernel), s.refresh_angle),
            guide=self.build_guide(),
            cbhs_gamma=gamma,
            corrupt=Corruption(self.gentest.corrupt),
        )

    def initial_state(self, seed: int | None = None) -> State:
        seed = self.experiment.seed if seed is None else int(seed)
        s = self.sampler
        x = np.array(s.initial_position) if s.initial_position else np.array(self.target.mean)
        if s.initial_velocity:
            v = np.array(s.initial_velocity)
        else:
            # separate stream so the sampler's own draws do not depend on this one
            v = np.random.default_rng([seed, 1]).standard_normal(self.dim)
        return State(x, v)


# ------------------------------------------------------------------ parsing


def _err(where: str, msg: str) -> ConfigError:
    return ConfigError(f"{where}: {msg}")


def _number(where: str, value: Any) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise _err(where, f"expected a number, got {value!r}")
    value = float(value)
    if not math.isfinite(value):
        raise _err(where, "must be finite")
    return value


def _integer(where: str, value: Any) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise _err(where, f"expected an integer, got {value!r}")
    return int(value)


def _string(where: str, value: Any) -> str:
    if not isinstance(value, str):
        raise _err(where, f"expected a string, got {value!r}")
    return value


def _vector(where: str, value: Any) -> tuple[float, ...]:
    if not isinstance(value, list):
        raise _err(where, f"expected a list of numbers, got {value!r}")
    return tuple(_number(f"{where}[{i}]", v) for i, v in enumerate(value))


def _matrix(where: str, value: Any) -> tuple[tuple[float, ...], ...]:
    if not isinstance(value, list):
        raise _err(where, f"expected a list of rows, got {value!r}")
    rows = tuple(_vector(f"{where}[{i}]", r) for i, r in enumerate(value))
    if rows and len({len(r) for r in rows}) != 1:
        raise _err(where, "rows have different lengths")
    return rows


def _strings(where: str, value: Any) -> tuple[str, ...]:
    if not isinstance(value, list):
        raise _err(where, f"expected a list of strings, got {value!r}")
    return tuple(_string(f"{where}[{i}]", v) for i, v in enumerate(value))


_CONVERTERS = {
    "str": _string,
    "int": _integer,
    "float": _number,
    "tuple[float, ...]": _vector,
    "tuple[float, float]": _vector,
    "tuple[tuple[float, ...], ...]": _matrix,
    "tuple[str, ...] | None": _strings,
}


def _section_from_dict(name: str, cls, data: Any):
    if not isinstance(data, dict):
        raise _err(name, "expected a table")
    known = {f.name: f for f in fields(cls)}
    for key in data:
        if key not in known:
            raise _err(f"{name}.{key}", "unknown key")
    kwargs = {}
    for key, value in data.items():
        kwargs[key] = _CONVERTERS[known[key].type](f"{name}.{key}", value)
    return cls(**kwargs)


def config_from_dict(data: dict) -> ExperimentConfig:
    for key in data:
        if key not in _SECTIONS:
            raise _err(key, "unknown section")
    if "target" not in data:
        raise _err("target", "section is required")
    parts = {name: _section_from_dict(name, cls, data[name]) for name, cls in _SECTIONS.items() if name in data}
    cfg = ExperimentConfig(**parts)
    validate(cfg)
    return cfg


def parse_config(text: str) -> ExperimentConfig:
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"TOML syntax error: {exc}") from None
    return config_from_dict(data)


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    try:
        return parse_config(text)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def config_to_dict(cfg: ExperimentConfig) -> dict:
    out = {}
    for name in _SECTIONS:
        section = getattr(cfg, name)
        table = {}
        for f in fields(section):
            value = getattr(section, f.name)
            if value is None:
                continue
            if isinstance(value, tuple):
                if not value:
                    continue  # empty tuples mean "default"; TOML has no null
                value = [list(v) if isinstance(v, tuple) else v for v in value]
            table[f.name] = value
        out[name] = table
    return out


def serialize_config(cfg: ExperimentConfig) -> str:
    return tomli_w.dumps(config_to_dict(cfg))


# ------------------------------------------------------------------ validation


def validate(cfg: ExperimentConfig) -> None:
    """Check every precondition the samplers would otherwise hit mid-run."""
    e, s, d = cfg.experiment, cfg.sampler, cfg.dim
    if e.sampler not in SAMPLERS:
        raise _err("experiment.sampler", f"must be one of {', '.join(SAMPLERS)}")
    if e.replications < 1:
        raise _err("experiment.replications", "must be at least 1")
    if not 0.0 <= e.burn_in < 1.0:
        raise _err("experiment.burn_in", "must lie in [0, 1)")
    if e.seed < 0:
        raise _err("experiment.seed", "must be non-negative")

    if d < 1:
        raise _err("target.mean", "must have at least one entry")
    cov = np.array(cfg.target.covariance)
    if cov.shape != (d, d):
        raise _err("target.covariance", f"must be {d}x{d}")
    if not np.allclose(cov, cov.T):
        raise _err("target.covariance", "must be symmetric")
    if np.linalg.eigvalsh(0.5 * (cov + cov.T)).min() <= 0:
        raise _err("target.covariance", "must be positive definite")

    if cfg.guide.kind not in GUIDES:
        raise _err("guide.kind", f"must be one of {', '.join(GUIDES)}")
    if cfg.guide.kind == "linear" and np.array(cfg.guide.matrix).shape != (d, d):
        raise _err("guide.matrix", f"must be {d}x{d} for a linear guide")

    cols, h = cfg.constraints.columns, cfg.constraints.h
    if len(cols) != len(h):
        raise _err("constraints.h", f"needs one entry per column ({len(cols)})")
    if cols and len(cols[0]) != d:
        raise _err("constraints.columns", f"each column must have {d} entries")

    if cfg.qbhs.a >= 0:
        raise _err("qbhs.a", "must be negative")
    if cfg.qbhs.P:
        P = np.array(cfg.qbhs.P)
        if P.shape != (d, d):
            raise _err("qbhs.P", f"must be {d}x{d}")
        if np.linalg.cond(P) > 1e12:
            raise _err("qbhs.P", "must be invertible")

    if s.lambda0 < 0:
        raise _err("sampler.lambda0", "must be non-negative")
    if s.T_total <= 0:
        raise _err("sampler.T_total", "must be positive")
    if s.delta <= 0:
        raise _err("sampler.delta", "must be positive")
    if s.delta > s.T_total:
        raise _err("sampler.delta", "must not exceed T_total")
    if s.bounce_kernel not in {v.value for v in BounceVariant}:
        raise _err("sampler.bounce_kernel", "must be 'deterministic' or 'stochastic'")
    if not 0.0 < s.refresh_angle <= math.pi / 2 + 1e-15:
        raise _err("sampler.refresh_angle", "must lie in (0, pi/2]")
    if s.cbhs_gamma and (len(s.cbhs_gamma) != d or min(s.cbhs_gamma) < 0):
        raise _err("sampler.cbhs_gamma", f"must have {d} non-negative entries")
    for key in ("initial_position", "initial_velocity"):
        value = getattr(s, key)
        if value and len(value) != d:
            raise _err(f"sampler.{key}", f"must have {d} entries")
    if e.sampler in ("qbhs", "gibbs"):
        x0 = np.array(s.initial_position) if s.initial_position else np.array(cfg.target.mean)
        if not cfg.build_constraints().satisfied(x0):
            raise _err("sampler.initial_position", "violates the constraints")

    if cfg.gibbs.n_samples < 1:
        raise _err("gibbs.n_samples", "must be at least 1")
    if cfg.output.histogram_bins < 1:
        raise _err("output.histogram_bins", "must be at least 1")
    lo_hi = cfg.output.histogram_range
    if len(lo_hi) != 2 or not lo_hi[0] < lo_hi[1]:
        raise _err("output.histogram_range", "must be [lo, hi] with lo < hi")
    if cfg.gentest.functions is not None and not cfg.gentest.functions:
        raise _err("gentest.functions", "must list at least one test function (omit it for the default suite)")
    if cfg.gentest.threshold <= 0:
        raise _err("gentest.threshold", "must be positive")
    if cfg.gentest.corrupt not in {c.value for c in Corruption}:
        raise _err("gentest.corrupt", f"must be one of {', '.join(c.value for c in Corruption)}")
