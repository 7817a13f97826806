import math

import numpy as np
import pytest
from scipy import stats

from qnetvi import baselines as bl
from qnetvi.config import load_experiment
from qnetvi.meanfield import RatePosterior
from qnetvi.netmodel import (ConfigError, Discipline, JobClass, NetworkKind, NetworkSpec,
                             StationSpec)
from qnetvi.observations import ObservationKind, ObservationModel, ObservationSet
from qnetvi.simulate import Trajectory, simulate_experiment

from conftest import EXAMPLE1, EXAMPLE2, closed_loop

PRIOR = RatePosterior(5.0, 2.0, 5.0, 2.0)


def snapshot_obs(times, values, support, eps=1e-9):
    model = ObservationModel(ObservationKind.EXACT_SNAPSHOT, 0.0, inference_epsilon=eps)
    return ObservationSet(times, ((1, 0),), np.array(values).reshape(-1, 1), model, support)


def test_stationary_single_job():
    assert bl.stationary_distribution(3.0, 0.7, 1)[1] == pytest.approx(0.7 / 3.7, rel=1e-12)


def test_stationary_limits():
    pi = bl.stationary_distribution(2.0, 0.1, 50)
    assert pi.sum() == pytest.approx(1.0, abs=1e-12)
    fast = bl.stationary_distribution(1e8 * 0.1 * 50, 0.1, 50)
    assert 0.5 * (abs(fast[0] - 1) + fast[1:].sum()) < 1e-6
    with pytest.raises(ValueError):
        bl.stationary_distribution(0.0, 0.1, 5)


def test_stationary_matches_generator_null_space():
    Q = bl.closed_loop_generator(1.3, 0.4, 6)
    assert np.allclose(bl.stationary_distribution(1.3, 0.4, 6) @ Q, 0, atol=1e-12)


def test_stationary_likelihood_edge_cases():
    empty = snapshot_obs([], [], 10)
    assert bl.stationary_log_likelihood(2.0, empty, 0.5, 10) == 0.0
    obs = snapshot_obs([1, 2, 3], [4, 4, 4], 10)
    pi = bl.stationary_distribution(2.0, 0.5, 10)
    assert bl.stationary_log_likelihood(2.0, obs, 0.5, 10) == pytest.approx(
        3 * math.log(pi[4]), abs=1e-6)


def test_stationary_likelihood_symmetry_and_vectorisation():
    obs = snapshot_obs([1, 2, 3, 4], [1, 5, 2, 2], 10, eps=0.1)
    perm = snapshot_obs([1, 2, 3, 4], [2, 1, 2, 5], 10, eps=0.1)
    lams = np.array([0.5, 1.0, 3.0])
    a = bl.stationary_log_likelihood(lams, obs, 0.5, 10)
    assert np.allclose(a, bl.stationary_log_likelihood(lams, perm, 0.5, 10), atol=1e-12)
    assert a[1] == pytest.approx(bl.stationary_log_likelihood(1.0, obs, 0.5, 10))


def test_delay_node_reading_is_complement():
    model = ObservationModel(ObservationKind.EXACT_SNAPSHOT, 0.0, inference_epsilon=1e-9)
    both = ObservationSet([1.0], ((0, 0), (1, 0)), [[7, 3]], model, 10)
    pi = bl.stationary_distribution(2.0, 0.5, 10)
    assert bl.stationary_log_likelihood(2.0, both, 0.5, 10) == pytest.approx(
        math.log(pi[3]), abs=1e-6)


def test_transient_posterior_without_data_is_prior():
    grid = np.linspace(0.0, 40.0, 200_001)
    lam, dens = bl.exact_transient_posterior(PRIOR, snapshot_obs([], [], 3), 0.5, 3, grid)
    assert np.abs(dens - stats.gamma.pdf(lam, 5, scale=0.5)).max() < 1e-8


def test_late_observation_reaches_stationarity():
    obs = snapshot_obs([200.0], [2], 5)
    grid, exact = bl.exact_transient_posterior(PRIOR, obs, 0.5, 5)
    ll = bl.stationary_log_likelihood(grid, obs, 0.5, 5)
    st = np.exp(stats.gamma.logpdf(grid, 5, scale=0.5) + ll - ll.max())
    st /= np.trapezoid(st, grid)
    assert bl.grid_total_variation(grid, exact, st) < 0.01


def test_transient_likelihood_size_guard():
    with pytest.raises(ValueError, match="states"):
        bl.transient_log_likelihood(1.0, snapshot_obs([1.0], [1], 30), 0.5, 30)


def test_transient_likelihood_single_job_closed_form():
    # two-state chain started empty: P(x_t = 1) = a/(a+l) (1 - exp(-(a+l) t))
    a, l, t = 0.7, 1.9, 0.8
    p1 = a / (a + l) * (1 - math.exp(-(a + l) * t))
    obs = snapshot_obs([t], [1], 1)
    assert bl.transient_log_likelihood(l, obs, a, 1) == pytest.approx(math.log(p1), abs=1e-7)


def test_mh_flat_likelihood_recovers_prior():
    N = 10
    model = ObservationModel(ObservationKind.REGULARIZED_COUNT, N / (N + 1))
    obs = ObservationSet(np.arange(1.0, 21.0), ((1, 0),), np.arange(20) % 7, model, N)
    res = bl.metropolis_hastings(PRIOR, obs, 0.3, N, bl.MCMCConfig(seed=3))
    s = res.samples
    batches = s[: len(s) // 100 * 100].reshape(100, -1).mean(axis=1)
    se = batches.std(ddof=1) / math.sqrt(100)
    assert abs(s.mean() - 2.5) < 3 * se
    assert abs(s.var() - 1.25) < 0.1
    assert 0.05 <= res.acceptance <= 0.8


def test_mh_seed_determinism():
    obs = snapshot_obs([1, 2, 3], [2, 3, 1], 5, eps=0.05)
    cfg = bl.MCMCConfig(n_samples=3000, burn_in=500, seed=9)
    a = bl.metropolis_hastings(PRIOR, obs, 0.5, 5, cfg)
    b = bl.metropolis_hastings(PRIOR, obs, 0.5, 5, cfg)
    assert np.array_equal(a.samples, b.samples) and len(a.samples) == 2500


def test_mh_example1_near_truth():
    exp = load_experiment(EXAMPLE1)
    _, obs = simulate_experiment(exp)
    mu0, N, prior = bl.closed_loop_parameters(exp)
    res = bl.metropolis_hastings(prior, obs, mu0, N, bl.MCMCConfig(seed=0))
    assert abs(res.samples.mean() - 2.0) / 2.0 < 0.15
    row = res.summary_row("mu_1_jobs")
    assert row[0] == "mu_1_jobs" and len(row) == 8


def test_mh_config_validation():
    with pytest.raises(ValueError):
        bl.MCMCConfig(n_samples=10, burn_in=10)
    with pytest.raises(ValueError):
        bl.MCMCConfig(proposal_scale=0.0)
    with pytest.raises(ValueError, match="likelihood"):
        bl.metropolis_hastings(PRIOR, snapshot_obs([], [], 3), 0.5, 3, likelihood="exact")


def test_fully_observed_posterior_hand_values():
    spec = NetworkSpec((StationSpec(0, Discipline.SOURCE_SINK),), (JobClass("a"),),
                       np.ones((1, 1, 1)), NetworkKind.OPEN)
    empty = Trajectory(np.zeros(0), np.zeros(0, dtype=int), 1, 7.0)
    assert bl.fully_observed_posterior(empty, [PRIOR], spec)[0] == RatePosterior(5, 9, 5, 2)
    one = Trajectory(np.array([3.0]), np.array([0]), 1, 7.0)
    assert bl.fully_observed_posterior(one, [PRIOR], spec)[0] == RatePosterior(6, 9, 5, 2)


def test_fully_observed_posterior_loop_exposure():
    spec = closed_loop(N=2)
    # y01 at t=1 and t=2, y10 at t=4; horizon 5
    traj = Trajectory(np.array([1.0, 2.0, 4.0]), np.array([0, 0, 1]), 2, 5.0)
    priors = [RatePosterior.fixed_at(0.5), PRIOR]
    post = bl.fully_observed_posterior(traj, priors, spec)
    assert post[0].fixed
    # station busy on (1, 5]
    assert post[1] == RatePosterior(6.0, 2.0 + 4.0, 5.0, 2.0)


def test_closed_loop_parameters():
    mu0, N, prior = bl.closed_loop_parameters(load_experiment(EXAMPLE1))
    assert (mu0, N, prior.shape, prior.rate) == (0.1, 50, 5.0, 2.0)
    with pytest.raises(ConfigError, match="closed-loop only"):
        bl.closed_loop_parameters(load_experiment(EXAMPLE2))


def test_density_helpers():
    grid = np.linspace(0.01, 8, 800)
    samples = np.random.default_rng(0).gamma(5, 0.5, 50_000)
    dens = bl.samples_density(samples, grid)
    assert np.trapezoid(dens, grid) == pytest.approx(1.0)
    assert bl.grid_total_variation(grid, dens, stats.gamma.pdf(grid, 5, scale=0.5)) < 0.02
    assert bl.grid_total_variation(grid, dens, dens) == 0.0
