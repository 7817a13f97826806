"""Reference posteriors for checking the variational engine.

All closed-loop helpers assume the two-node network of a delay node
(rate ``mu0`` per job) feeding one single-server station (rate ``lam``)
with population ``N``; ``x`` is the number of jobs at the station.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg, special, stats

from .netmodel import (ConfigError, Discipline, NetworkKind, NetworkSpec,
                       counts_to_queue_lengths, load_partners, effective_discipline,
                       load_value)
from .observations import ObservationSet, reading_log_pmf
from .meanfield.posteriors import QUANTILES, RatePosterior

MAX_EXACT_STATES = 20


def stationary_distribution(lam: float, mu0: float, N: int) -> np.ndarray:
    """``pi(x) ∝ (mu0/lam)^x / (N-x)!`` on ``{0..N}``, computed in log space."""
    if lam <= 0 or mu0 <= 0:
        raise ValueError("rates must be positive")
    x = np.arange(N + 1)
    logw = x * (math.log(mu0) - math.log(lam)) - special.gammaln(N - x + 1)
    return np.exp(logw - special.logsumexp(logw))


def _reading_table(obs: ObservationSet, N: int, epsilon: float | None) -> np.ndarray:
    """``log f(o_k | x)`` for every observation ``k`` and station count ``x``."""
    eps = obs.model.evaluation_epsilon if epsilon is None else epsilon
    x = np.arange(N + 1)
    table = np.zeros((len(obs), N + 1))
    for n, (i, _) in enumerate(obs.nodes):
        node_x = N - x if i == 0 else x
        for k, o in enumerate(obs.values[:, n]):
            table[k] += reading_log_pmf(int(o), node_x, eps, obs.support)
    return table


def stationary_likelihood_fn(obs: ObservationSet, mu0: float, N: int,
                             epsilon: float | None = None):
    """Scalar ``lam -> log likelihood`` with the reading table precomputed.

    With ``theta = log(mu0/lam)``, ``log pi(x) = x*theta + c(x) - log Z``,
    so each call costs two small log-sum-exps.
    """
    x = np.arange(N + 1)
    c = -special.gammaln(N - x + 1)
    K = len(obs)
    if K == 0:
        return lambda lam: 0.0
    table = _reading_table(obs, N, epsilon)
    rows, counts = np.unique(table, axis=0, return_counts=True)
    lmu0 = math.log(mu0)

    def loglik(lam: float) -> float:
        v = x * (lmu0 - math.log(lam)) + c
        m = v.max()
        logz = m + math.log(np.exp(v - m).sum())
        w = rows + v
        mw = w.max(axis=1)
        per = mw + np.log(np.exp(w - mw[:, None]).sum(axis=1))
        return float(counts @ per) - K * logz

    return loglik


def stationary_log_likelihood(lam, obs: ObservationSet, mu0: float, N: int,
                              epsilon: float | None = None):
    """Log of ``prod_k sum_x f(o_k | x) pi(x | lam)``; vectorised over ``lam``."""
    if np.any(np.asarray(lam) <= 0) or mu0 <= 0:
        raise ValueError("rates must be positive")
    fn = stationary_likelihood_fn(obs, mu0, N, epsilon)
    if np.ndim(lam) == 0:
        return fn(float(lam))
    return np.array([fn(float(l)) for l in np.asarray(lam, dtype=float)])


def closed_loop_generator(lam: float, mu0: float, N: int) -> np.ndarray:
    """Tridiagonal generator of the station count."""
    Q = np.zeros((N + 1, N + 1))
    x = np.arange(N + 1)
    Q[x[:-1], x[:-1] + 1] = mu0 * (N - x[:-1])
    Q[x[1:], x[1:] - 1] = lam
    Q[x, x] = -Q.sum(axis=1)
    return Q


def transient_log_likelihood(lam: float, obs: ObservationSet, mu0: float, N: int,
                             epsilon: float | None = None) -> float:
    """Exact forward-algorithm likelihood from an empty station at time 0."""
    if N + 1 > MAX_EXACT_STATES:
        raise ValueError(f"exact likelihood limited to {MAX_EXACT_STATES} states, got {N + 1}")
    if len(obs) == 0:
        return 0.0
    table = _reading_table(obs, N, epsilon)
    Q = closed_loop_generator(lam, mu0, N)
    alpha = np.zeros(N + 1)
    alpha[0] = 1.0
    total, last = 0.0, 0.0
    cache = {}
    for k, t in enumerate(obs.times):
        dt = round(float(t - last), 12)
        if dt not in cache:
            cache[dt] = linalg.expm(Q * dt)
        alpha = np.maximum(alpha @ cache[dt], 0.0)
        shift = table[k].max()
        alpha = alpha * np.exp(table[k] - shift)
        c = alpha.sum()
        total += math.log(c) + shift
        alpha /= c
        last = t
    return total


def prior_grid(prior: RatePosterior, n: int = 400) -> np.ndarray:
    lo, hi = stats.gamma.ppf([0.001, 0.999], prior.shape, scale=1.0 / prior.rate)
    return np.linspace(lo, hi, n)


def exact_transient_posterior(prior: RatePosterior, obs: ObservationSet, mu0: float, N: int,
                              lam_grid=None, epsilon: float | None = None):
    """Grid posterior of ``lam`` under the exact transient likelihood.

    Returns ``(grid, density)`` with the density normalised by the
    trapezoid rule on the grid.
    """
    if N + 1 > MAX_EXACT_STATES:
        raise ValueError(f"exact posterior limited to {MAX_EXACT_STATES} states, got {N + 1}")
    grid = prior_grid(prior) if lam_grid is None else np.asarray(lam_grid, dtype=float)
    ll = np.array([transient_log_likelihood(l, obs, mu0, N, epsilon) for l in grid])
    logpost = stats.gamma.logpdf(grid, prior.shape, scale=1.0 / prior.rate) + ll
    dens = np.exp(logpost - logpost.max())
    return grid, dens / np.trapezoid(dens, grid)


# ------------------------------------------------------------------ sampler

@dataclass(frozen=True)
class MCMCConfig:
    n_samples: int = 100_000
    burn_in: int = 10_000
    proposal_scale: float | None = None   # tuned by a pilot run when None
    seed: int = 0
    pilot: int = 3000

    def __post_init__(self):
        if not (self.n_samples > self.burn_in >= 0):
            raise ValueError("need n_samples > burn_in >= 0")
        if self.proposal_scale is not None and not self.proposal_scale > 0:
            raise ValueError("proposal_scale must be positive")


@dataclass
class MCMCResult:
    samples: np.ndarray
    acceptance: float
    proposal_scale: float

    def summary_row(self, name: str) -> list:
        s = self.samples
        return [name, float(s.mean()), float(s.std(ddof=1)), *np.quantile(s, QUANTILES)]


def _chain(logpost, x0: float, n: int, scale: float, rng) -> tuple[np.ndarray, float]:
    out = np.empty(n)
    x, lp = x0, logpost(x0)
    accepted = 0
    steps = rng.standard_normal(n) * scale
    logu = np.log(rng.random(n))
    for t in range(n):
        y = x * math.exp(steps[t])
        lq = logpost(y)
        # multiplicative proposal: Hastings factor y/x
        if logu[t] < lq - lp + steps[t]:
            x, lp = y, lq
            accepted += 1
        out[t] = x
    return out, accepted / max(n, 1)


def metropolis_hastings(prior: RatePosterior, obs: ObservationSet, mu0: float, N: int,
                        cfg: MCMCConfig = MCMCConfig(), likelihood: str = "stationary",
                        epsilon: float | None = None) -> MCMCResult:
    """Log-normal random-walk sampler for ``lam`` under a Gamma prior.

    ``likelihood`` selects the stationary approximation or the exact
    transient likelihood (small populations only).
    """
    if likelihood == "stationary":
        loglik = stationary_likelihood_fn(obs, mu0, N, epsilon)
    elif likelihood == "transient":
        def loglik(l):
            return transient_log_likelihood(l, obs, mu0, N, epsilon)
    else:
        raise ValueError(f"unknown likelihood {likelihood!r}")

    a, b = prior.prior_shape, prior.prior_rate

    def logpost(l):
        return (a - 1) * math.log(l) - b * l + loglik(l)

    rng = np.random.default_rng(cfg.seed)
    x0 = a / b
    scale = cfg.proposal_scale
    if scale is None:
        scale = 0.5
        for _ in range(6):
            pilot, acc = _chain(logpost, x0, cfg.pilot // 6 + 1, scale, rng)
            x0 = float(pilot[-1])
            scale *= min(max(acc / 0.3, 0.2), 5.0)
    chain, acc = _chain(logpost, x0, cfg.n_samples, scale, rng)
    if not 0.05 <= acc <= 0.8:
        warnings.warn(f"MH acceptance rate {acc:.3f} outside [0.05, 0.8]", RuntimeWarning,
                      stacklevel=2)
    return MCMCResult(chain[cfg.burn_in:], acc, scale)


def samples_density(samples: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Gaussian kernel density of ``samples`` on ``grid``, renormalised there."""
    dens = stats.gaussian_kde(samples)(grid)
    return dens / np.trapezoid(dens, grid)


def grid_total_variation(grid: np.ndarray, p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.trapezoid(np.abs(p - q), grid))


# ------------------------------------------------------------- conjugacy

def fully_observed_posterior(traj, priors, spec: NetworkSpec) -> list[RatePosterior]:
    """Exact Gamma posterior of each direction rate given a complete path:
    ``Gamma(alpha + n, beta + integral of max(load, 0))``."""
    dirs = spec.transitions.directions
    x = counts_to_queue_lengths(np.zeros(len(dirs), dtype=np.int64), spec).astype(float)
    exposure = np.zeros(len(dirs))
    edges = np.concatenate([[0.0], traj.times, [traj.horizon]])
    events = list(traj.events) + [None]
    for n, k in enumerate(events):
        dt = edges[n + 1] - edges[n]
        for d, (i, _, c) in enumerate(dirs):
            if spec.stations[i].discipline is Discipline.SOURCE_SINK:
                load = 1.0
            else:
                w = sum(max(x[i, c2], 0.0) for c2 in load_partners(spec, i, c))
                load = float(load_value(effective_discipline(spec, i), spec.stations[i].servers,
                                        x[i, c], w))
            exposure[d] += dt * max(load, 0.0)
        if k is not None:
            i, j, c = dirs[k]
            x[i, c] -= 1
            x[j, c] += 1
    counts = traj.event_counts()
    return [p if p.fixed else p.updated(float(counts[d]), float(exposure[d]))
            for d, p in enumerate(priors)]


def closed_loop_parameters(exp) -> tuple[float, int, RatePosterior]:
    """``(mu0, N, prior of lam)`` for a single-station closed loop experiment."""
    spec = exp.spec
    ok = (spec.kind is NetworkKind.CLOSED and spec.n_stations == 2 and spec.n_classes == 1
          and spec.stations[1].servers == 1
          and spec.stations[1].discipline in (Discipline.FCFS, Discipline.PS)
          and exp.fixed[0, 0] and not exp.fixed[1, 0])
    if not ok:
        raise ConfigError("stationary baseline is closed-loop only: it needs a delay node with a "
                          "fixed rate and one single-server station with an inferred rate")
    a, b = exp.priors[(1, 0)]
    return float(exp.service[0, 0]), int(spec.population[0]), RatePosterior(a, b, a, b)
