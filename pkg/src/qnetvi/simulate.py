"""Exact simulation of the transition-count process and its path density."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .netmodel import NetworkSpec, counts_to_queue_lengths, generator_rates
from .observations import (ObservationModel, ObservationSet, monitored_nodes,
                           reading_pmf)


class SimulationError(RuntimeError):
    pass


@dataclass
class Trajectory:
    """Piecewise-constant count path: ``events[n]`` fires at ``times[n]``.

    ``times`` excludes the start at 0; the path starts from all-zero counts.
    """

    times: np.ndarray    # (I,) strictly increasing in (0, horizon]
    events: np.ndarray   # (I,) direction index of each jump
    n_directions: int
    horizon: float

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.events = np.asarray(self.events, dtype=int)
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        if len(self.times) != len(self.events):
            raise ValueError("times and events differ in length")
        if np.any(np.diff(self.times) <= 0) or (len(self.times) and self.times[0] <= 0):
            raise ValueError("event times must be strictly increasing and positive")

    def __len__(self):
        return len(self.times)

    def states(self) -> np.ndarray:
        """Count vectors ``y_0 = 0, y_1, ..., y_I`` of shape (I+1, |T|)."""
        y = np.zeros((len(self.times) + 1, self.n_directions), dtype=np.int64)
        if len(self.events):
            step = np.zeros((len(self.events), self.n_directions), dtype=np.int64)
            step[np.arange(len(self.events)), self.events] = 1
            y[1:] = np.cumsum(step, axis=0)
        return y

    def counts_at(self, t) -> np.ndarray:
        """Count vector(s) at time(s) ``t`` (right-continuous)."""
        idx = np.searchsorted(self.times, np.asarray(t, dtype=float), side="right")
        return self.states()[idx]

    def event_counts(self) -> np.ndarray:
        return np.bincount(self.events, minlength=self.n_directions)


def gillespie_sample(spec: NetworkSpec, rates, horizon: float, delta: float = 0.0,
                     seed: int | np.random.Generator = 0,
                     max_events: int = 10_000_000) -> Trajectory:
    """Direct-method simulation of the counting process on ``[0, horizon]``."""
    rates = np.asarray(rates, dtype=float)
    if np.any(rates <= 0):
        raise ValueError("rates must be strictly positive")
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    rng = np.random.default_rng(seed)
    dirs = spec.transitions.directions
    x = counts_to_queue_lengths(np.zeros(len(dirs), dtype=np.int64), spec).astype(float)
    t = 0.0
    times, events = [], []
    while True:
        a = generator_rates(x, rates, delta, spec)
        total = a.sum()
        if total <= 0:
            break
        t += rng.exponential(1.0 / total)
        if t > horizon:
            break
        k = int(np.searchsorted(np.cumsum(a), rng.random() * total, side="right"))
        k = min(k, len(a) - 1)
        i, j, c = dirs[k]
        x[i, c] -= 1
        x[j, c] += 1
        times.append(t)
        events.append(k)
        if len(times) > max_events:
            raise SimulationError(
                f"more than {max_events} events before t={t:.4g}; rates explode "
                f"(total rate {total:.4g})")
    return Trajectory(np.array(times), np.array(events, dtype=int), len(dirs), horizon)


def path_log_density(traj: Trajectory, rates, delta: float, spec: NetworkSpec) -> float:
    """Log density of the path: sum of log jump rates minus integrated exit rate."""
    rates = np.asarray(rates, dtype=float)
    dirs = spec.transitions.directions
    x = counts_to_queue_lengths(np.zeros(len(dirs), dtype=np.int64), spec).astype(float)
    logp, last = 0.0, 0.0
    for t, k in zip(traj.times, traj.events):
        a = generator_rates(x, rates, delta, spec)
        logp -= a.sum() * (t - last)
        if a[k] <= 0:
            return -math.inf
        logp += math.log(a[k])
        i, j, c = dirs[k]
        x[i, c] -= 1
        x[j, c] += 1
        last = t
    logp -= generator_rates(x, rates, delta, spec).sum() * (traj.horizon - last)
    return float(logp)


def sample_observations(traj: Trajectory, times, model: ObservationModel, spec: NetworkSpec,
                        seed: int | np.random.Generator = 0, stations=None,
                        support: int | None = None) -> ObservationSet:
    """Noisy readings of the monitored node counts at ``times``.

    Without an explicit ``support`` open networks use four times the largest
    true count seen at the monitored nodes.
    """
    times = np.asarray(times, dtype=float)
    if len(times) and (times.max() > traj.horizon or times.min() < 0):
        raise ValueError(f"observation times must lie in [0, {traj.horizon}]")
    if stations is None:
        stations = range(spec.n_stations)
    nodes = monitored_nodes(spec, stations)
    rng = np.random.default_rng(seed)
    truth = np.array([[x[i, c] for i, c in nodes]
                      for x in (counts_to_queue_lengths(y, spec) for y in traj.counts_at(times))],
                     dtype=int).reshape(len(times), len(nodes))
    if support is None:
        if spec.kind.value == "closed":
            support = max(1, sum(spec.population))
        else:
            support = max(1, 4 * int(truth.max(initial=0)))
    eps = model.sampling_epsilon
    values = truth.copy()
    if eps > 0:
        for idx in np.ndindex(truth.shape):
            values[idx] = rng.choice(support + 1, p=reading_pmf(int(truth[idx]), eps, support))
    return ObservationSet(times, nodes, values, model, support)


def write_trajectory(path: str | Path, traj: Trajectory, spec: NetworkSpec):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(["time", "origin", "destination", "class"])
        for t, k in zip(traj.times, traj.events):
            i, j, c = spec.transitions.directions[k]
            w.writerow([repr(float(t)), i, j, spec.classes[c].name])


def read_trajectory(path: str | Path, spec: NetworkSpec, horizon: float) -> Trajectory:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if rows[:1] != [["time", "origin", "destination", "class"]]:
        raise ValueError(f"{path}: unexpected trajectory header")
    times, events = [], []
    for r in rows[1:]:
        if not r:
            continue
        times.append(float(r[0]))
        events.append(spec.transitions.index((int(r[1]), int(r[2]), spec.class_index(r[3]))))
    return Trajectory(np.array(times), np.array(events, dtype=int), len(spec.transitions), horizon)


def simulate_experiment(exp, seed: int | None = None) -> tuple[Trajectory, ObservationSet]:
    """Trajectory and observations for a parsed experiment.

    The seed is split into independent streams for the path and the noise.
    """
    seed = exp.simulation.seed if seed is None else seed
    sim_ss, obs_ss = np.random.SeedSequence(seed).spawn(2)
    horizon = exp.simulation.horizon
    traj = gillespie_sample(exp.spec, exp.true_rates(), horizon, exp.simulation.delta,
                            np.random.default_rng(sim_ss), exp.simulation.max_events)
    obs = sample_observations(traj, exp.observation.times(horizon), exp.observation.model,
                              exp.spec, np.random.default_rng(obs_ss),
                              exp.observation.monitored, exp.observation.support)
    return traj, obs
