import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from bouncyhybrid.analysis import discretize
from bouncyhybrid.kernels import BounceKernelSpec, BounceVariant
from bouncyhybrid.model import ConstraintSet, GaussianTarget, GuideField, State, TargetModel
from bouncyhybrid.samplers import (
    EventKind,
    SamplerConfig,
    UnsupportedInstance,
    bouncy_particle,
    gibbs_interval,
    randomized_hmc,
    run_bhs,
    run_cbhs,
    run_gibbs_truncated_mvn,
    run_qbhs,
    truncated_standard_normal,
    with_seed,
)

CORR = GaussianTarget([0.5, -1.0], [[1.0, 0.5], [0.5, 2.0]])


def start(d, v=None):
    return State(np.zeros(d), np.ones(d) if v is None else np.asarray(v, float))


def check_skeleton(sk, tol=1e-10):
    times = sk.times
    assert sk.events[0].kind is EventKind.START and times[0] == 0.0
    assert sk.events[-1].kind is EventKind.END and times[-1] == pytest.approx(sk.config.T_total)
    assert np.all(np.diff(times) > 0)
    # position is continuous across every event
    for k in range(len(sk.events) - 1):
        x_end, _ = sk.segment_flow(k).evaluate(times[k + 1] - times[k])
        pos = sk.events[k + 1].position
        assert np.allclose(x_end, pos, atol=tol * (1 + np.abs(pos).max()))


# ------------------------------------------------------------------ config


def test_sampler_config_validation():
    with pytest.raises(ValueError):
        SamplerConfig(T_total=0)
    with pytest.raises(ValueError):
        SamplerConfig(delta=-1)
    with pytest.raises(ValueError):
        SamplerConfig(lambda0=-0.1)
    with pytest.raises(ValueError):
        SamplerConfig(cbhs_gamma=(-1.0,))
    assert with_seed(SamplerConfig(seed=1), 9).seed == 9


# ------------------------------------------------------------------ BHS


def test_randomized_hmc_never_bounces():
    sk = run_bhs(CORR, randomized_hmc(T_total=200.0, seed=1), start(2))
    counts = sk.counts()
    assert counts["bounce"] == 0
    assert counts["refresh"] > 100
    check_skeleton(sk)


def test_bouncy_particle_moves_in_straight_lines():
    sk = run_bhs(CORR, bouncy_particle(T_total=200.0, seed=2), start(2))
    assert sk.counts()["bounce"] > 0
    times = sk.times
    for k in range(len(times) - 1):
        ts = np.linspace(0, times[k + 1] - times[k], 7)
        _, v = sk.segment_flow(k).evaluate(ts)
        assert np.max(np.abs(v - sk.events[k].velocity)) < 1e-12
    check_skeleton(sk)


@pytest.mark.parametrize("a", [-1.0, 1.0, 0.5])
def test_univariate_bhs_moments(a):
    target = GaussianTarget([0.0], [[1.0]])
    cfg = SamplerConfig(T_total=3000.0, guide=GuideField.linear([[a]]), seed=4)
    sk = run_bhs(target, cfg, State(np.array([0.0]), np.array([1.0])))
    check_skeleton(sk)
    x = discretize(sk, 0.1).after_burn_in().positions[:, 0]
    assert abs(x.mean()) < 0.1
    assert abs(x.var() - 1.0) < 0.1


def test_linear_guide_bhs_moments_two_dimensions():
    cfg = SamplerConfig(T_total=3000.0, guide=GuideField.linear([[-0.5, 0.2], [0.2, -0.3]]), seed=1)
    sk = run_bhs(CORR, cfg, start(2))
    check_skeleton(sk, tol=1e-9)
    x = discretize(sk, 0.1).after_burn_in().positions
    assert np.allclose(x.mean(axis=0), CORR.mean, atol=0.2)
    assert np.allclose(np.cov(x.T), CORR.covariance, atol=0.2)


def test_stochastic_bounce_and_partial_refresh_run():
    cfg = SamplerConfig(
        T_total=3000.0,
        guide=GuideField.grad_u(),
        bounce_kernel=BounceKernelSpec(BounceVariant.STOCHASTIC, refresh_angle=0.5),
        seed=6,
    )
    sk = run_bhs(CORR, cfg, start(2))
    check_skeleton(sk)
    x = discretize(sk, 0.1).after_burn_in().positions
    assert np.allclose(x.mean(axis=0), CORR.mean, atol=0.15)
    assert np.allclose(np.diag(np.cov(x.T)), np.diag(CORR.covariance), atol=0.25)


def test_bhs_deterministic_replay():
    cfg = SamplerConfig(T_total=100.0, guide=GuideField.linear([[-0.5, 0.0], [0.0, -0.5]]), seed=8)
    a, b = run_bhs(CORR, cfg, start(2)), run_bhs(CORR, cfg, start(2))
    assert len(a.events) == len(b.events)
    for ea, eb in zip(a.events, b.events):
        assert ea.time == eb.time and ea.kind is eb.kind
        assert np.array_equal(ea.position, eb.position) and np.array_equal(ea.velocity, eb.velocity)


def test_bhs_unsupported_instances():
    custom = SamplerConfig(guide=GuideField.custom(lambda x: -x))
    with pytest.raises(UnsupportedInstance):
        run_bhs(CORR, custom, start(2))
    generic = TargetModel(1, lambda x: float(x[0] ** 4), lambda x: 4 * x**3)
    with pytest.raises(UnsupportedInstance):
        run_bhs(generic, SamplerConfig(), start(1))
    # A with Sigma^-1 - A indefinite has hyperbolic directions and no constant bound
    with pytest.raises(UnsupportedInstance):
        run_bhs(CORR, SamplerConfig(guide=GuideField.linear(np.eye(2) * 3)), start(2))


def test_state_at_matches_event_states():
    sk = run_bhs(CORR, bouncy_particle(T_total=50.0, seed=3), start(2))
    x, _ = sk.state_at(sk.times)
    for e, xi in zip(sk.events, x):
        assert np.allclose(e.position, xi, atol=1e-10)


# ------------------------------------------------------------------ QBHS


def test_qbhs_without_constraints_has_no_wall_hits():
    sk = run_qbhs(CORR, ConstraintSet.empty(2), np.eye(2), -0.5, SamplerConfig(T_total=200.0), start(2))
    assert sk.counts()["wall_hit"] == 0
    assert sk.counts()["bounce"] > 0
    assert sk.guide is not None and np.allclose(sk.guide.matrix, CORR.precision - 0.5 * np.eye(2))
    check_skeleton(sk)


def test_qbhs_benchmark_feasible(benchmark_target, benchmark_constraints):
    cfg = SamplerConfig(T_total=500.0, lambda0=1.0, seed=11)
    sk = run_qbhs(
        benchmark_target, benchmark_constraints, np.eye(2), -0.5, cfg,
        State(np.array([1.0, 1.1]), np.zeros(2)),
    )
    counts = sk.counts()
    assert counts["wall_hit"] > 0 and counts["bounce"] > 0 and counts["refresh"] > 0
    for e in sk.events:
        assert benchmark_constraints.satisfied(e.position, tol=1e-8)
    grid = discretize(sk, 0.01).positions
    assert benchmark_constraints.values(grid).min() >= -1e-8
    check_skeleton(sk, tol=1e-9)


def test_qbhs_orbit_only_wall_hits(benchmark_target, benchmark_constraints):
    # a = -1 with Sigma = I gives A = 0, hence Lambda = 0: no bounces, and lambda0 = 0
    cfg = SamplerConfig(T_total=200.0, lambda0=0.0, seed=0)
    sk = run_qbhs(
        benchmark_target, benchmark_constraints, np.eye(2), -1.0, cfg,
        State(np.array([1.0, 1.1]), np.array([0.3, 0.5])),
    )
    counts = sk.counts()
    assert counts["bounce"] == 0 and counts["refresh"] == 0 and counts["wall_hit"] > 10
    for k, e in enumerate(sk.events[1:-1], start=1):
        # speed just before the reflection equals speed just after
        _, v_before = sk.segment_flow(k - 1).evaluate(e.time - sk.events[k - 1].time)
        assert np.linalg.norm(v_before) == pytest.approx(np.linalg.norm(e.velocity), rel=1e-10)


@given(st.floats(0, 2 * math.pi), st.integers(0, 10_000))
def test_qbhs_starting_on_a_wall_stays_feasible(angle, seed):
    target = GaussianTarget([4.0, 4.0], np.eye(2))
    walls = ConstraintSet([[-1.0, 1.1, 1.0, 0.0], [1.0, -1.0, 0.0, 1.0]], np.zeros(4))
    v0 = np.array([math.cos(angle), math.sin(angle)])
    sk = run_qbhs(target, walls, np.eye(2), -1.0, SamplerConfig(T_total=5.0, seed=seed), State(np.array([1.0, 1.1]), v0))
    assert walls.values(sk.events[0].velocity[None, :] * 1e-6 + [1.0, 1.1]).min() >= -1e-12
    assert all(walls.satisfied(e.position, tol=1e-8) for e in sk.events)


def test_qbhs_rejects_bad_inputs(benchmark_target, benchmark_constraints):
    cfg = SamplerConfig(T_total=10.0)
    ok = State(np.array([1.0, 1.1]), np.zeros(2))
    with pytest.raises(ValueError):
        run_qbhs(benchmark_target, benchmark_constraints, np.eye(2), 0.5, cfg, ok)
    with pytest.raises(ValueError):
        run_qbhs(benchmark_target, benchmark_constraints, np.eye(2), [-1.0, -0.5], cfg, ok)
    with pytest.raises(ValueError):
        run_qbhs(benchmark_target, benchmark_constraints, np.eye(2), -1.0, cfg, State(np.array([1.0, 2.0]), np.zeros(2)))


# ------------------------------------------------------------------ CBHS


def test_zigzag_flips_one_coordinate_per_event():
    target = GaussianTarget.standard(2)
    sk = run_cbhs(target, SamplerConfig(T_total=200.0, lambda0=0.0, guide=GuideField.grad_u()), start(2))
    events = sk.events
    assert all(e.kind is EventKind.COORD_FLIP for e in events[1:-1])
    for prev, cur in zip(events[:-2], events[1:-1]):
        changed = np.flatnonzero(prev.velocity != cur.velocity)
        assert changed.tolist() == [cur.index]
        assert cur.velocity[cur.index] == -prev.velocity[cur.index]
    check_skeleton(sk)


def test_one_dimensional_zigzag_alternates():
    target = GaussianTarget([0.0], [[1.0]])
    sk = run_cbhs(target, SamplerConfig(T_total=100.0, lambda0=0.0, guide=GuideField.grad_u()), start(1))
    signs = np.sign([e.velocity[0] for e in sk.events[:-1]])
    assert np.all(signs[1:] == -signs[:-1])


def test_one_dimensional_oscillator_flip_negates_velocity():
    target = GaussianTarget([0.0], [[1.0]])
    sk = run_cbhs(target, SamplerConfig(T_total=100.0, lambda0=0.0, guide=GuideField.linear([[-1.0]])), start(1))
    ev = sk.events
    assert len(ev) > 5
    for k in range(1, len(ev) - 1):
        _, v_before = sk.segment_flow(k - 1).evaluate(ev[k].time - ev[k - 1].time)
        assert ev[k].velocity[0] == pytest.approx(-v_before[0], abs=1e-10)


def test_cbhs_constant_gamma_keeps_stationary_law():
    target = GaussianTarget.standard(2)
    base = SamplerConfig(T_total=4000.0, lambda0=0.0, guide=GuideField.grad_u(), seed=1)
    plain = run_cbhs(target, base, start(2))
    extra = run_cbhs(target, SamplerConfig(**{**base.__dict__, "cbhs_gamma": (0.7, 0.7), "seed": 2}), start(2))
    assert extra.counts()["coord_flip"] > plain.counts()["coord_flip"]
    a = discretize(plain, 1.0).after_burn_in().positions[:, 0]
    b = discretize(extra, 1.0).after_burn_in().positions[:, 0]
    assert stats.ks_2samp(a, b).statistic < 0.06
    assert abs(b.var() - 1.0) < 0.1


def test_cbhs_diagonal_oscillators():
    target = GaussianTarget([0.0, 0.0], np.diag([1.0, 4.0]))
    cfg = SamplerConfig(T_total=3000.0, lambda0=0.5, guide=GuideField.linear(np.diag([-0.5, 0.1])), seed=3)
    sk = run_cbhs(target, cfg, start(2))
    x = discretize(sk, 0.1).after_burn_in().positions
    assert np.allclose(x.var(axis=0), [1.0, 4.0], rtol=0.15)


def test_cbhs_unsupported():
    with pytest.raises(UnsupportedInstance):
        run_cbhs(CORR, SamplerConfig(guide=GuideField.linear(np.eye(2) * -0.5)), start(2))
    with pytest.raises(UnsupportedInstance):
        run_cbhs(CORR, SamplerConfig(guide=GuideField.custom(lambda x: x)), start(2))


# ------------------------------------------------------------------ Gibbs


@given(st.floats(-40, 40), st.floats(0.0, 5.0), st.integers(0, 1000))
def test_truncated_normal_stays_in_interval(lo, width, seed):
    hi = lo + width
    z = truncated_standard_normal(lo, hi, np.random.default_rng(seed))
    assert lo <= z <= hi and math.isfinite(z)


def test_truncated_normal_far_tail_distribution():
    rng = np.random.default_rng(0)
    z = np.array([truncated_standard_normal(8.0, math.inf, rng) for _ in range(20_000)])
    # above 8 sigma the tail is close to 8 + Exp(8)
    assert np.all(z >= 8.0)
    assert abs((z - 8.0).mean() - 1 / 8.0) < 0.01
    ref = stats.truncnorm(8.0, np.inf)
    assert stats.kstest(z, ref.cdf).statistic < 0.02


def test_truncated_normal_interval_mean():
    rng = np.random.default_rng(1)
    z = np.array([truncated_standard_normal(-0.5, 2.0, rng) for _ in range(50_000)])
    assert abs(z.mean() - stats.truncnorm(-0.5, 2.0).mean()) < 0.01


def test_gibbs_interval(benchmark_constraints):
    lo, hi = gibbs_interval(benchmark_constraints, np.array([1.0, 1.05]), 1)
    assert (lo, hi) == pytest.approx((1.0, 1.1))
    lo, hi = gibbs_interval(benchmark_constraints, np.array([1.0, 1.05]), 0)
    assert lo == pytest.approx(1.05 / 1.1) and hi == pytest.approx(1.05)


def test_gibbs_unconstrained_moments():
    x = run_gibbs_truncated_mvn(CORR, ConstraintSet.empty(2), 40_000, 0, np.zeros(2))
    assert np.allclose(x.mean(axis=0), CORR.mean, atol=0.05)
    assert np.allclose(np.cov(x.T), CORR.covariance, atol=0.08)


def test_gibbs_benchmark_feasible(benchmark_target, benchmark_constraints):
    x = run_gibbs_truncated_mvn(benchmark_target, benchmark_constraints, 2000, 1, [1.0, 1.1])
    assert x.shape == (2000, 2)
    assert benchmark_constraints.values(x).min() >= -1e-10


def test_gibbs_edge_cases(benchmark_target, benchmark_constraints):
    assert run_gibbs_truncated_mvn(benchmark_target, benchmark_constraints, 0, 1, [1.0, 1.1]).shape == (0, 2)
    with pytest.raises(ValueError):
        run_gibbs_truncated_mvn(benchmark_target, benchmark_constraints, 10, 1, [1.0, 2.0])
