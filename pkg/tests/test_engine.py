import math

import numpy as np
import pytest
from scipy import integrate, special, stats

from qnetvi.meanfield import (EngineSettings, RatePosterior, TimeGrid, check_slackness,
                              evaluate_elbo, expected_generator, expected_log_generator,
                              forward_master, initialize, queue_length_distribution,
                              run_coordinate_ascent, update_rate_posteriors)
from qnetvi.meanfield.distributions import total_variation
from qnetvi.meanfield.engine import (LoadStats, SupportError, backward_log_r,
                                     intensities_from_log_r, load_stats, negative_mass)
from qnetvi.meanfield.posteriors import gamma_kl
from qnetvi import baselines as bl
from qnetvi.netmodel import Discipline, JobClass, NetworkKind, NetworkSpec, StationSpec
from qnetvi.observations import ObservationKind, ObservationModel, ObservationSet
from qnetvi.simulate import gillespie_sample, sample_observations

from conftest import closed_loop, open_tandem, priority_pair, tiny_loop_data


def source_loop():
    """Open network whose only direction is node 0 back to itself (unit load)."""
    return NetworkSpec((StationSpec(0, Discipline.SOURCE_SINK),), (JobClass("a"),),
                       np.ones((1, 1, 1)), NetworkKind.OPEN)


# -------------------------------------------------------------- master equation

def test_constant_rate_gives_poisson():
    T, c = 10.0, 1.7
    grid = TimeGrid.build(T, 2000)
    phi, shed = forward_master(np.full((len(grid), 60), c), grid)
    for s in (200, 1000, len(grid) - 1):
        ref = stats.poisson.pmf(np.arange(60), c * grid.times[s])
        assert total_variation(phi[s], ref) < 1e-4
    assert shed < 1e-6


def test_zero_rate_keeps_point_mass():
    grid = TimeGrid.build(5.0, 100)
    phi, _ = forward_master(np.zeros((len(grid), 4)), grid)
    assert np.all(phi[:, 0] == 1.0)


def test_loop_queue_is_skellam():
    spec = closed_loop(N=500)
    grid = TimeGrid.build(8.0, 800)
    state = initialize(spec, [RatePosterior.fixed_at(0.1), RatePosterior(5, 2, 5, 2)], None,
                       grid, EngineSettings(init_intensity=1.0))
    state.phi[0] = forward_master(np.full((len(grid), 60), 2.0), grid)[0]
    state.phi[1] = forward_master(np.full((len(grid), 60), 1.5), grid)[0]
    dist = queue_length_distribution(state, 1, 0)
    for s in (100, len(grid) - 1):
        t = grid.times[s]
        ref = stats.skellam.pmf(dist.support, 2.0 * t, 1.5 * t)
        assert total_variation(dist.p[s], ref) < 1e-4
    assert negative_mass(dist)[-1] == pytest.approx(stats.skellam.cdf(-1, 16.0, 12.0), abs=1e-4)
    assert np.abs(dist.p[0][dist.support != 0]).max() < 1e-12


# -------------------------------------------------------------- initialisation

def test_initial_fields():
    spec, obs, _, T, priors = tiny_loop_data()
    state = initialize(spec, priors, obs, TimeGrid.build(T, 300, obs.times), EngineSettings())
    for k in range(2):
        assert np.all(state.logr[k] == 0) and np.all(state.kappa[k] == 0)
        assert np.allclose(state.phi[k].sum(axis=1), 1.0)
    assert state.posteriors == priors


def test_support_cap_raises():
    grid = TimeGrid.build(10.0, 100)
    with pytest.raises(SupportError, match="ymax_cap"):
        initialize(open_tandem(), [RatePosterior(1, 1, 1, 1)] * 5, None, grid,
                   EngineSettings(init_intensity=20.0, ymax_cap=30))


# -------------------------------------------------------------- load statistics

def _loop_state(N=3, a=1.2):
    spec = closed_loop(N=N)
    grid = TimeGrid.build(4.0, 400)
    post = [RatePosterior.fixed_at(0.5), RatePosterior(5.0, 2.0, 5.0, 2.0)]
    state = initialize(spec, post, None, grid, EngineSettings(init_intensity=a))
    return state, grid


def test_station_direction_uses_busy_probability():
    state, grid = _loop_state()
    s, t = len(grid) - 1, grid.times[-1]
    delta = state.delta
    for y in range(4):
        busy = stats.poisson.sf(y, 1.2 * t)          # P(Y01 > y)
        assert expected_generator(state, 1, y, s) == pytest.approx(delta + 2.5 * busy, rel=1e-4)
        ref = busy * (special.digamma(5.0) - math.log(2.0)) + (1 - busy) * math.log(delta)
        assert expected_log_generator(state, 1, y, s) == pytest.approx(ref, rel=1e-4)


def test_delay_direction_uses_occupancy():
    state, grid = _loop_state(N=40)
    s, t = len(grid) - 1, grid.times[-1]
    for y in (0, 3):
        ref = 0.5 * (40 + 1.2 * t - y)               # E[(N + Y10 - y)+], no clipping here
        assert expected_generator(state, 0, y, s) == pytest.approx(state.delta + ref, rel=1e-6)


def test_point_masses_reduce_to_generator():
    from qnetvi.netmodel import generator_rate
    spec = priority_pair()
    grid = TimeGrid.build(1.0, 10)
    posts = [RatePosterior.fixed_at(v) for v in (0.5, 1.0, 1.5, 2.0)]
    state = initialize(spec, posts, None, grid, EngineSettings(init_intensity=1.0))
    y = [2, 3, 0, 1]
    for k in range(4):
        phi = np.zeros_like(state.phi[k])
        phi[:, y[k]] = 1.0
        state.phi[k] = phi
    rates = np.array([0.5, 1.0, 1.5, 2.0])
    for k in range(4):
        got = expected_generator(state, k, y[k], 5)
        assert got == pytest.approx(generator_rate(y, k, rates, state.delta, spec), rel=1e-9)


def test_source_direction_has_unit_load():
    spec = open_tandem()
    grid = TimeGrid.build(2.0, 20)
    posts = [RatePosterior(3.0, 2.0, 3.0, 2.0)] * 5
    state = initialize(spec, posts, None, grid, EngineSettings(init_intensity=0.5))
    st = load_stats(state, 0)
    assert np.all(st.load == 1) and np.all(st.logload == 0)
    assert expected_generator(state, 0, 1, 3) == pytest.approx(state.delta + 1.5)


def test_log_generator_deterministic_limit():
    post = RatePosterior(2.0 * 3.0 * 1e8, 2.0 * 1e8, 1.0, 1.0)
    one = np.ones((1, 1))
    st = LoadStats(one, one, np.zeros((1, 1)))
    assert st.expected_log_generator(post, 1e-6)[0, 0] == pytest.approx(math.log(3.0), abs=1e-6)
    zero = LoadStats(0 * one, 0 * one, 0 * one)
    assert zero.expected_log_generator(post, 1e-6)[0, 0] == pytest.approx(math.log(1e-6))


# -------------------------------------------------------------- backward pass

def test_unit_r_solves_prior_process():
    grid = TimeGrid.build(5.0, 200)
    lam = 1.3
    A = np.full((len(grid), 6), lam)
    B = np.full((len(grid), 6), math.log(lam))
    L, clamped = backward_log_r(A, B, np.zeros((0, 6)), grid, 50.0)
    assert np.abs(L).max() < 1e-8 and not clamped
    nu, kappa = intensities_from_log_r(L, B, np.ones_like(L), 50.0)
    assert np.allclose(nu, lam, atol=1e-8) and np.all(kappa == 0)


def test_cap_and_slack():
    L = np.zeros((1, 3))
    B = np.full((1, 3), math.log(2 * 50.0))
    phi = np.array([[0.2, 0.5, 0.3]])
    nu, kappa = intensities_from_log_r(L, B, phi, 50.0)
    assert np.all(nu == 50.0)
    assert np.allclose(kappa, phi * math.log(2))
    assert np.all(kappa * (nu - 50.0) == 0)


def test_observation_jumps_bounded():
    spec, obs, _, T, priors = tiny_loop_data()
    state = initialize(spec, priors, obs, TimeGrid.build(T, 300, obs.times), EngineSettings())
    from qnetvi.meanfield.engine import observation_jumps
    eps, S = 1e-3, obs.support
    for k in range(2):
        J = observation_jumps(state, k)
        assert np.all(J <= 1e-12) and np.all(J >= math.log(eps / S) - 1e-12)


# -------------------------------------------------------------- rates and bound

def test_conjugate_update_hand_value():
    assert RatePosterior(5, 2, 5, 2).updated(40, 80) == RatePosterior(45, 82, 5, 2)


def test_zero_length_window_keeps_prior():
    spec = closed_loop(N=3)
    grid = TimeGrid.build(1e-9, 1)
    posts = [RatePosterior.fixed_at(0.5), RatePosterior(5, 2, 5, 2)]
    state = initialize(spec, posts, None, grid, EngineSettings(init_intensity=1.0))
    new = update_rate_posteriors(state)
    assert new[1].shape == pytest.approx(5, abs=1e-6) and new[1].rate == pytest.approx(2, abs=1e-6)


def test_gamma_kl_against_quadrature():
    a1, b1, a0, b0 = 4.0, 3.0, 2.0, 0.5
    f = lambda x: stats.gamma.pdf(x, a1, scale=1 / b1) * (
        stats.gamma.logpdf(x, a1, scale=1 / b1) - stats.gamma.logpdf(x, a0, scale=1 / b0))
    ref = integrate.quad(f, 0, 50, limit=200)[0]
    assert gamma_kl(a1, b1, a0, b0) == pytest.approx(ref, rel=1e-8)
    assert gamma_kl(a0, b0, a0, b0) == 0.0


def test_prior_process_has_zero_bound():
    grid = TimeGrid.build(5.0, 100)
    state = initialize(source_loop(), [RatePosterior.fixed_at(1.7)], None, grid,
                       EngineSettings(init_intensity=1.7, delta=1e-9))
    elbo = evaluate_elbo(state)
    assert abs(elbo.total) < 1e-6 and elbo.kl == 0 and elbo.observation == 0


def test_bound_below_exact_evidence():
    spec, obs, mu0, T, priors = tiny_loop_data()
    res = run_coordinate_ascent(spec, priors, obs, EngineSettings(tol=1e-8), T, 1500)
    prior = priors[1]
    grid = np.linspace(1e-4, 15.0, 3000)
    ll = np.array([bl.transient_log_likelihood(l, obs, mu0, 2) for l in grid])
    integrand = np.exp(stats.gamma.logpdf(grid, prior.shape, scale=1 / prior.rate) + ll)
    log_evidence = math.log(np.trapezoid(integrand, grid))
    elbo = res.elbo_trace[-1]
    assert math.isfinite(elbo)
    assert elbo <= log_evidence + 1e-3


def test_no_observations_keeps_prior_means():
    # busy station: the log-delta branch of the bound has negligible weight
    spec = closed_loop(N=5)
    posts = [RatePosterior.fixed_at(2.0), RatePosterior(5, 2, 5, 2)]
    res = run_coordinate_ascent(spec, posts, None, EngineSettings(max_iters=20), 20.0, 400)
    assert abs(res.posteriors[1].mean - 2.5) / 2.5 < 0.05


def test_snapshot_band_coverage():
    from qnetvi.meanfield.summary import credible_bands
    spec = closed_loop(N=6)
    model = ObservationModel(ObservationKind.EXACT_SNAPSHOT, 0.0, inference_epsilon=1e-3)
    traj = gillespie_sample(spec, [0.3, 1.0], 30.0, 0.0, 7)
    times = np.linspace(1.5, 30.0, 20)
    obs = sample_observations(traj, times, model, spec, 8, stations=[1])
    posts = [RatePosterior.fixed_at(0.3), RatePosterior(5, 2, 5, 2)]
    res = run_coordinate_ascent(spec, posts, obs, EngineSettings(), 30.0, 1200)
    rows = [r for r in credible_bands(res.state) if r[1] == "node1_jobs"]
    t = np.array([r[0] for r in rows])
    covered = 0
    for tk, o in zip(obs.times, obs.values[:, 0]):
        r = rows[int(np.argmin(np.abs(t - tk)))]
        covered += r[3] <= o <= r[5]
    assert covered / len(obs) >= 0.9


def test_slackness_after_each_iteration():
    spec, obs, _, T, priors = tiny_loop_data()
    seen = []

    def check(it, state):
        w = check_slackness(state)
        seen.append(it)
        assert w["kappa_min"] >= 0 and w["nu_excess"] <= 0
        assert w["complementarity"] == 0.0
        assert w["mass_low"] <= 1e-6 and w["mass_high"] <= 1e-12

    run_coordinate_ascent(spec, priors, obs, EngineSettings(nu_bar=5.0), T, 600, callback=check)
    assert seen[0] == 0 and len(seen) > 2


def test_settings_validation():
    with pytest.raises(ValueError, match="delta"):
        EngineSettings(delta=0.0)
    with pytest.raises(ValueError):
        EngineSettings(nu_bar=0.0)
