"""Noisy queue-length readings at fixed monitoring times.

Each monitored node reports a count on ``{0, ..., S}``. With error rate
``eps`` the reading equals the true count with probability ``1 - eps``
and is otherwise uniform over the remaining ``S`` values::

    f(o | x) = eps / S + 1(o == x) * (1 - (S + 1) * eps / S)

Exact snapshots are the ``eps -> 0`` limit; inference always evaluates
them with a small positive ``eps`` so that the likelihood stays positive.
Node 0 of a closed network reports the delay occupancy ``N - x``.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .netmodel import ConfigError, NetworkKind, NetworkSpec


class ObservationKind(str, enum.Enum):
    REGULARIZED_COUNT = "regularized_count"
    EXACT_SNAPSHOT = "exact_snapshot"


@dataclass(frozen=True)
class ObservationModel:
    kind: ObservationKind = ObservationKind.REGULARIZED_COUNT
    epsilon: float = 0.0
    inference_epsilon: float = 1e-3

    def __post_init__(self):
        object.__setattr__(self, "kind", ObservationKind(self.kind))
        if not 0 <= self.epsilon < 1:
            raise ConfigError(f"epsilon must lie in [0, 1), got {self.epsilon}")

    @property
    def sampling_epsilon(self) -> float:
        return 0.0 if self.kind is ObservationKind.EXACT_SNAPSHOT else self.epsilon

    @property
    def evaluation_epsilon(self) -> float:
        """Error rate used inside inference (always strictly positive)."""
        if self.kind is ObservationKind.EXACT_SNAPSHOT or self.epsilon == 0:
            return self.inference_epsilon
        return self.epsilon


def reading_log_pmf(o: int, x, epsilon: float, support: int) -> np.ndarray:
    """``log f(o | x)`` for an array of true counts ``x`` (any integers)."""
    if epsilon <= 0:
        raise ValueError("epsilon = 0 gives -inf log-likelihoods; use a small positive value")
    x = np.asarray(x)
    off = np.log(epsilon / support)
    on = np.log(epsilon / support + 1.0 - (support + 1) * epsilon / support)
    return np.where(x == o, on, off)


def reading_pmf(x: int, epsilon: float, support: int) -> np.ndarray:
    """Distribution of a reading over ``{0..S}`` given true count ``x``."""
    p = np.full(support + 1, epsilon / support)
    if 0 <= x <= support:
        p[x] += 1.0 - (support + 1) * epsilon / support
    return p


def log_obs_likelihood(x, o, model: ObservationModel, support: int) -> float:
    """Sum over monitored nodes of ``log f(o_n | x_n)``.

    Raises ``ValueError`` when the model would be evaluated at ``eps = 0``.
    """
    eps = model.evaluation_epsilon
    return float(sum(reading_log_pmf(int(on), int(xn), eps, support) for xn, on in zip(x, o)))


@dataclass
class ObservationSet:
    """Readings ``values[k, n]`` of node ``nodes[n] = (station, class)`` at ``times[k]``."""

    times: np.ndarray
    nodes: tuple[tuple[int, int], ...]
    values: np.ndarray
    model: ObservationModel
    support: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float).reshape(-1)
        self.values = np.asarray(self.values, dtype=int).reshape(len(self.times), len(self.nodes))
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("observation times must be strictly increasing")
        if np.any(self.values < 0):
            raise ValueError("readings must be non-negative")

    def __len__(self):
        return len(self.times)

    def check_horizon(self, horizon: float):
        if len(self.times) and (self.times[0] < 0 or self.times[-1] > horizon + 1e-12):
            raise ValueError(f"observation times must lie in [0, {horizon}]")

    def truth_values(self, x: np.ndarray) -> np.ndarray:
        """True node counts for queue-length matrix ``x`` in ``nodes`` order."""
        return np.array([x[i, c] for i, c in self.nodes])


def monitored_nodes(spec: NetworkSpec, stations) -> tuple[tuple[int, int], ...]:
    """``(station, class)`` pairs with traffic at the monitored stations."""
    nodes = []
    for i in stations:
        if i == 0 and spec.kind is NetworkKind.OPEN:
            continue
        for c in range(spec.n_classes):
            tr = spec.transitions
            if tr.inflow[(i, c)] or tr.outflow[(i, c)]:
                nodes.append((i, c))
    return tuple(nodes)


def node_label(spec: NetworkSpec, node) -> str:
    i, c = node
    return f"node{i}_{spec.classes[c].name}"


def write_observations(path: str | Path, obs: ObservationSet, spec: NetworkSpec):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, quoting=csv.QUOTE_MINIMAL, lineterminator="\r\n")
        w.writerow(["time"] + [node_label(spec, n) for n in obs.nodes])
        for t, row in zip(obs.times, obs.values):
            w.writerow([repr(float(t))] + [int(v) for v in row])


def read_observations(path: str | Path, spec: NetworkSpec, model: ObservationModel,
                      support: int | None = None) -> ObservationSet:
    """Read a wide observation CSV; columns must name monitored nodes of ``spec``."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:1] != ["time"]:
        raise ValueError(f"{path}: expected a header starting with 'time'")
    labels = {node_label(spec, (i, c)): (i, c)
              for i in range(spec.n_stations) for c in range(spec.n_classes)}
    try:
        nodes = tuple(labels[h] for h in rows[0][1:])
    except KeyError as exc:
        raise ValueError(f"{path}: column {exc.args[0]!r} is not a node of this network") from None
    body = [r for r in rows[1:] if r]
    times = np.array([float(r[0]) for r in body])
    values = np.array([[int(v) for v in r[1:]] for r in body], dtype=int).reshape(len(body), len(nodes))
    if support is None:
        support = max(1, sum(spec.population)) if spec.kind is NetworkKind.CLOSED \
            else max(1, 4 * int(values.max(initial=0)))
    return ObservationSet(times, nodes, values, model, support)
