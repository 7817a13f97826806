"""Network topology, feasible job transitions and station loads.

A network is described by its stations (node 0 is either the external
source/sink of an open network or the delay node of a closed one), an
ordered list of job classes and one routing matrix per class. Queue
lengths are linear functions of the per-direction transition counts, and
every direction fires at rate ``delta + rate * max(load, 0)``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

ROW_SUM_TOL = 1e-9


class ConfigError(ValueError):
    """Invalid network or experiment description."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class Discipline(str, enum.Enum):
    FCFS = "fcfs"
    PS = "ps"
    INF = "inf"
    PRIORITY_FCFS = "priority_fcfs"
    DELAY = "delay"
    SOURCE_SINK = "source_sink"


class NetworkKind(str, enum.Enum):
    OPEN = "open"
    CLOSED = "closed"


@dataclass(frozen=True)
class StationSpec:
    index: int
    discipline: Discipline
    servers: float = 1.0
    # multi-class FCFS is only accepted when explicitly treated as PS
    fcfs_as_ps: bool = False

    def __post_init__(self):
        if self.index < 0:
            raise ConfigError(f"station index must be >= 0, got {self.index}")
        if self.discipline in (Discipline.INF, Discipline.DELAY):
            object.__setattr__(self, "servers", math.inf)
        if not (self.servers >= 1):
            raise ConfigError(f"station {self.index}: servers must be >= 1")
        if self.servers != math.inf and self.servers != int(self.servers):
            raise ConfigError(f"station {self.index}: servers must be an integer or inf")


@dataclass(frozen=True)
class JobClass:
    name: str
    priority: int = 0  # lower value = served first


class Direction(NamedTuple):
    """A feasible class-``cls`` job movement ``origin -> destination``."""

    origin: int
    destination: int
    cls: int


@dataclass(frozen=True)
class TransitionSet:
    directions: tuple[Direction, ...]
    inflow: dict  # (station, class) -> tuple of direction indices
    outflow: dict

    def __len__(self):
        return len(self.directions)

    def __iter__(self):
        return iter(self.directions)

    def index(self, direction) -> int:
        return self.directions.index(Direction(*direction))


@dataclass(frozen=True, eq=False)
class NetworkSpec:
    stations: tuple[StationSpec, ...]
    classes: tuple[JobClass, ...]
    routing: np.ndarray  # (C, M+1, M+1)
    kind: NetworkKind
    population: tuple[int, ...] = ()  # per class, closed networks only
    transitions: TransitionSet = field(init=False, repr=False)

    def __post_init__(self):
        stations = tuple(sorted(self.stations, key=lambda s: s.index))
        object.__setattr__(self, "stations", stations)
        object.__setattr__(self, "classes", tuple(self.classes))
        object.__setattr__(self, "kind", NetworkKind(self.kind))
        routing = np.array(self.routing, dtype=float)
        routing.setflags(write=False)
        object.__setattr__(self, "routing", routing)
        pop = self.population
        if isinstance(pop, (int, np.integer)):
            pop = (int(pop),) * len(self.classes)
        object.__setattr__(self, "population", tuple(int(n) for n in pop))
        self._validate()
        object.__setattr__(self, "transitions", build_transition_set(self))

    @property
    def n_stations(self) -> int:
        """Number of nodes including node 0."""
        return len(self.stations)

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def class_index(self, name: str) -> int:
        for c, jc in enumerate(self.classes):
            if jc.name == name:
                return c
        raise KeyError(name)

    def _validate(self):
        M1, C = len(self.stations), len(self.classes)
        if C == 0:
            raise ConfigError("at least one job class is required")
        if [s.index for s in self.stations] != list(range(M1)):
            raise ConfigError("station indices must be 0..M without gaps")
        if self.routing.shape != (C, M1, M1):
            raise ConfigError(
                f"routing must have shape {(C, M1, M1)}, got {self.routing.shape}")
        if np.any(self.routing < 0) or np.any(self.routing > 1):
            raise ConfigError("routing probabilities must lie in [0, 1]")
        for c in range(C):
            for i in range(M1):
                total = self.routing[c, i].sum()
                if abs(total - 1.0) > ROW_SUM_TOL:
                    raise ConfigError(
                        f"routing row {i} of class {self.classes[c].name!r} "
                        f"sums to {total!r}, expected 1")
        node0 = self.stations[0].discipline
        if self.kind is NetworkKind.OPEN and node0 is not Discipline.SOURCE_SINK:
            raise ConfigError("open networks need a source_sink node 0")
        if self.kind is NetworkKind.CLOSED:
            if node0 is not Discipline.DELAY:
                raise ConfigError("closed networks need a delay node 0")
            if len(self.population) != C or any(n < 0 for n in self.population):
                raise ConfigError("closed networks need a non-negative population per class")
        for st in self.stations[1:]:
            if st.discipline in (Discipline.DELAY, Discipline.SOURCE_SINK):
                raise ConfigError(
                    f"station {st.index}: {st.discipline.value} is reserved for node 0")
            if st.discipline is Discipline.PRIORITY_FCFS:
                served = [c for c in range(C) if self.routing[c, :, st.index].any()]
                if len(served) < 2:
                    raise ConfigError(
                        f"station {st.index}: priority scheduling needs >= 2 classes")
                ranks = [self.classes[c].priority for c in served]
                if len(set(ranks)) != len(ranks):
                    raise ConfigError(
                        f"station {st.index}: priority ranks must be strictly ordered")
            if st.discipline is Discipline.FCFS and not st.fcfs_as_ps:
                served = [c for c in range(C) if self.routing[c, :, st.index].any()]
                if len(served) > 1:
                    raise ConfigError(
                        f"station {st.index}: multi-class FCFS needs fcfs_as_ps: true")


def build_transition_set(spec: NetworkSpec) -> TransitionSet:
    """Feasible directions in lexicographic ``(i, j, c)`` order plus the
    per-station inflow/outflow index sets."""
    C, M1 = spec.routing.shape[0], spec.routing.shape[1]
    directions = tuple(
        Direction(i, j, c)
        for i in range(M1) for j in range(M1) for c in range(C)
        if spec.routing[c, i, j] > 0
    )
    inflow: dict = {(i, c): [] for i in range(M1) for c in range(C)}
    outflow: dict = {(i, c): [] for i in range(M1) for c in range(C)}
    for k, (i, j, c) in enumerate(directions):
        outflow[(i, c)].append(k)
        inflow[(j, c)].append(k)
    return TransitionSet(
        directions,
        {key: tuple(v) for key, v in inflow.items()},
        {key: tuple(v) for key, v in outflow.items()},
    )


def rates_from_service(spec: NetworkSpec, service: np.ndarray) -> np.ndarray:
    """Per-direction rates ``mu[i, c] * p[c, i, j]`` from service rates of shape (M+1, C)."""
    service = np.asarray(service, dtype=float)
    return np.array([service[i, c] * spec.routing[c, i, j]
                     for i, j, c in spec.transitions.directions])


def service_from_rates(spec: NetworkSpec, rates: np.ndarray) -> np.ndarray:
    """Aggregate direction rates back to service rates (sum over outflow)."""
    mu = np.zeros((spec.n_stations, spec.n_classes))
    for k, (i, _, c) in enumerate(spec.transitions.directions):
        mu[i, c] += rates[k]
    return mu


def counts_to_queue_lengths(y: Sequence[int], spec: NetworkSpec) -> np.ndarray:
    """Queue lengths ``x[i, c] = sum(inflow counts) - sum(outflow counts)``.

    Row 0 holds the delay occupancy ``N_c + in - out`` for closed networks and
    zeros for open ones. Values may be negative under the augmented model.
    """
    y = np.asarray(y)
    M1, C = spec.n_stations, spec.n_classes
    x = np.zeros((M1, C), dtype=y.dtype if y.dtype.kind in "iu" else float)
    for k, (i, j, c) in enumerate(spec.transitions.directions):
        x[j, c] += y[k]
        x[i, c] -= y[k]
    if spec.kind is NetworkKind.CLOSED:
        x[0] += np.asarray(spec.population, dtype=x.dtype)
    else:
        x[0] = 0
    return x


def load_partners(spec: NetworkSpec, i: int, c: int) -> tuple[int, ...]:
    """Classes whose queue lengths at station ``i`` enter the class-``c`` load."""
    st = spec.stations[i]
    present = [c2 for c2 in range(spec.n_classes) if c2 != c and (
        spec.transitions.inflow[(i, c2)] or spec.transitions.outflow[(i, c2)])]
    if st.discipline is Discipline.PS or (
            st.discipline is Discipline.FCFS and st.fcfs_as_ps):
        return tuple(present)
    if st.discipline is Discipline.PRIORITY_FCFS:
        rank = spec.classes[c].priority
        return tuple(c2 for c2 in present if spec.classes[c2].priority < rank)
    return ()


def load_value(discipline: Discipline, servers: float, x, w=0):
    """Station load for own queue length ``x`` and partner total ``w``.

    ``w`` is the sum of the positive parts of the partner queue lengths
    (all other classes for PS, higher-priority classes for priority FCFS).
    Vectorised over numpy arrays. Negative results are allowed; callers
    clamp with ``max(load, 0)``.
    """
    x = np.asarray(x, dtype=float)
    w = np.asarray(w, dtype=float)
    K = servers
    if discipline is Discipline.SOURCE_SINK:
        return np.ones(np.broadcast(x, w).shape)
    if discipline in (Discipline.INF, Discipline.DELAY):
        return x + 0.0 * w
    if discipline is Discipline.FCFS:
        return np.minimum(K, x) + 0.0 * w
    if discipline is Discipline.PS:
        if math.isinf(K):
            return x + 0.0 * w
        total = np.maximum(x, 0.0) + w
        with np.errstate(divide="ignore", invalid="ignore"):
            factor = np.where(total > 0, np.minimum(K / np.where(total > 0, total, 1.0), 1.0), 1.0)
        return x * factor
    if discipline is Discipline.PRIORITY_FCFS:
        return np.minimum(np.maximum(K - w, 0.0), x)
    raise ValueError(discipline)


def effective_discipline(spec: NetworkSpec, i: int) -> Discipline:
    st = spec.stations[i]
    if st.discipline is Discipline.FCFS and st.fcfs_as_ps:
        return Discipline.PS
    return st.discipline


def station_load(y: Sequence[int], i: int, c: int, spec: NetworkSpec) -> float:
    """Effective number of busy class-``c`` servers at station ``i`` in count state ``y``."""
    x = counts_to_queue_lengths(y, spec)
    return _load_from_queues(x, i, c, spec)


def _load_from_queues(x: np.ndarray, i: int, c: int, spec: NetworkSpec) -> float:
    st = spec.stations[i]
    w = sum(max(float(x[i, c2]), 0.0) for c2 in load_partners(spec, i, c))
    return float(load_value(effective_discipline(spec, i), st.servers, x[i, c], w))


def generator_rate(y: Sequence[int], direction, rates: np.ndarray, delta: float,
                   spec: NetworkSpec) -> float:
    """Rate of a unit increment of ``y`` in ``direction``: ``delta + rate * max(load, 0)``."""
    k = direction if isinstance(direction, (int, np.integer)) else spec.transitions.index(direction)
    i, _, c = spec.transitions.directions[k]
    load = station_load(y, i, c, spec)
    return delta + rates[k] * max(load, 0.0)


def generator_rates(x: np.ndarray, rates: np.ndarray, delta: float,
                    spec: NetworkSpec) -> np.ndarray:
    """All direction rates at once, given queue lengths ``x`` (see
    :func:`counts_to_queue_lengths`)."""
    loads = {}
    out = np.empty(len(spec.transitions))
    for k, (i, _, c) in enumerate(spec.transitions.directions):
        if (i, c) not in loads:
            loads[(i, c)] = max(_load_from_queues(x, i, c, spec), 0.0)
        out[k] = delta + rates[k] * loads[(i, c)]
    return out
