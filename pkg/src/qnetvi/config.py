"""YAML experiment files.

Schema (unknown keys are rejected, errors carry the offending line)::

    network:
      kind: closed                 # open | closed
      population: 50               # closed only; int or {class: int}
      classes:
        - {name: jobs, priority: 0}
      stations:
        - {index: 0, discipline: delay}
        - {index: 1, discipline: fcfs, servers: 1}
      routing:                     # per class, sparse edge list
        jobs:
          - {from: 0, to: 1, p: 1.0}
          - {from: 1, to: 0, p: 1.0}
    rates:                         # service rate of each (station, class)
      - {station: 0, class: jobs, value: 0.1, fixed: true}
      - {station: 1, class: jobs, value: 2.0, prior: {shape: 5, rate: 2}}
    observation:
      kind: regularized_count      # or exact_snapshot
      epsilon: 0.2
      n_obs: 50                    # equally spaced t_k = k T / K
      monitored: [0, 1]            # default: every station (and the delay node)
      support: 50                  # reading support {0..S}; default N or 4x max
    simulation: {horizon: 100, seed: 1, delta: 0.0}
    inference: {delta: 1.0e-6, nu_bar: 50, grid: 2000, tol: 1.0e-6, max_iters: 100,
                coupling: true}

Every inferred rate needs a ``prior``; fixed rates need a ``value``. Rates
of the outflow directions of an inferred ``(station, class)`` each get the
prior independently.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .netmodel import (ConfigError, Discipline, JobClass, NetworkKind,
                       NetworkSpec, StationSpec, rates_from_service)
from .observations import ObservationKind, ObservationModel
from .meanfield.posteriors import RatePosterior


_TOP_KEYS = {"network", "rates", "observation", "simulation", "inference"}
_NETWORK_KEYS = {"kind", "population", "classes", "stations", "routing"}
_STATION_KEYS = {"index", "discipline", "servers", "fcfs_as_ps"}
_CLASS_KEYS = {"name", "priority"}
_EDGE_KEYS = {"from", "to", "p"}
_RATE_KEYS = {"station", "class", "value", "fixed", "prior"}
_PRIOR_KEYS = {"shape", "rate"}
_OBS_KEYS = {"kind", "epsilon", "n_obs", "monitored", "support", "inference_epsilon"}
_SIM_KEYS = {"horizon", "seed", "delta", "max_events"}
_INF_KEYS = {"delta", "nu_bar", "grid", "tol", "max_iters", "ymax_cap", "init_intensity",
             "coupling"}


@dataclass
class InferenceSettings:
    delta: float = 1e-6
    nu_bar: float = 50.0
    grid: int = 2000
    tol: float = 1e-6
    max_iters: int = 100
    ymax_cap: int = 512
    init_intensity: float | None = None
    coupling: bool = True


@dataclass
class SimulationSettings:
    horizon: float = 100.0
    seed: int = 0
    delta: float = 0.0
    max_events: int = 10_000_000


@dataclass
class ObservationSettings:
    model: ObservationModel
    n_obs: int
    monitored: tuple[int, ...]
    support: int | None = None

    def times(self, horizon: float) -> np.ndarray:
        K = self.n_obs
        return horizon * np.arange(1, K + 1) / K if K else np.zeros(0)


@dataclass
class Experiment:
    spec: NetworkSpec
    service: np.ndarray          # (M+1, C) rate values, nan where unknown
    fixed: np.ndarray            # (M+1, C) bool
    priors: dict                 # (station, class) -> (shape, rate)
    observation: ObservationSettings
    simulation: SimulationSettings = field(default_factory=SimulationSettings)
    inference: InferenceSettings = field(default_factory=InferenceSettings)
    digest: str = ""

    def true_rates(self) -> np.ndarray:
        """Direction rates used for simulation; all service values must be set."""
        missing = [(i, c) for i in range(self.spec.n_stations) for c in range(self.spec.n_classes)
                   if self.spec.transitions.outflow[(i, c)] and math.isnan(self.service[i, c])]
        if missing:
            raise ConfigError(f"simulation needs a value for every rate; missing {missing}")
        return rates_from_service(self.spec, np.nan_to_num(self.service))

    def rate_priors(self) -> list[RatePosterior]:
        """Initial per-direction posteriors: Gamma priors or fixed point values."""
        out = []
        for i, j, c in self.spec.transitions.directions:
            if self.fixed[i, c]:
                out.append(RatePosterior.fixed_at(self.service[i, c] * self.spec.routing[c, i, j]))
            else:
                a, b = self.priors[(i, c)]
                out.append(RatePosterior(a, b, a, b))
        return out

    def observation_support(self, observed_max: int | None = None) -> int:
        if self.observation.support is not None:
            return self.observation.support
        if self.spec.kind is NetworkKind.CLOSED:
            return max(1, sum(self.spec.population))
        return max(1, 4 * int(observed_max or 0))


class _Tree:
    """Plain YAML data plus the source line of every node."""

    def __init__(self, node, path=()):
        self.path = path
        self.line = node.start_mark.line + 1
        if isinstance(node, yaml.MappingNode):
            self.value = {}
            for k, v in node.value:
                key = yaml.safe_load(yaml.serialize(k)) if not isinstance(k, yaml.ScalarNode) else k.value
                self.value[str(key)] = _Tree(v, path + (str(key),))
        elif isinstance(node, yaml.SequenceNode):
            self.value = [_Tree(v, path + (n,)) for n, v in enumerate(node.value)]
        else:
            self.value = yaml.safe_load(yaml.serialize(node))

    def fail(self, message):
        where = ".".join(str(p) for p in self.path) or "<root>"
        raise ConfigError(f"{where}: {message}", self.line)

    def mapping(self, allowed, required=()):
        if not isinstance(self.value, dict):
            self.fail("expected a mapping")
        for key, sub in self.value.items():
            if key not in allowed:
                sub.fail(f"unknown key {key!r}")
        for key in required:
            if key not in self.value:
                self.fail(f"missing required key {key!r}")
        return self.value

    def seq(self):
        if not isinstance(self.value, list):
            self.fail("expected a list")
        return self.value

    def plain(self):
        if isinstance(self.value, dict):
            return {k: v.plain() for k, v in self.value.items()}
        if isinstance(self.value, list):
            return [v.plain() for v in self.value]
        return self.value

    def number(self, low=None, high=None, integer=False, allow_inf=False):
        v = self.value
        if isinstance(v, str) and allow_inf and v.lower() in ("inf", "infinity", ".inf"):
            v = math.inf
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            self.fail(f"expected a number, got {v!r}")
        if integer and not (isinstance(v, int) or (allow_inf and math.isinf(v))):
            self.fail(f"expected an integer, got {v!r}")
        if math.isinf(v) and not allow_inf:
            self.fail("infinite value not allowed")
        if low is not None and v < low:
            self.fail(f"must be >= {low}, got {v!r}")
        if high is not None and v > high:
            self.fail(f"must be <= {high}, got {v!r}")
        return v

    def boolean(self):
        if not isinstance(self.value, bool):
            self.fail(f"expected true/false, got {self.value!r}")
        return self.value

    def choice(self, enum_cls):
        try:
            return enum_cls(str(self.value).lower())
        except ValueError:
            self.fail(f"expected one of {[e.value for e in enum_cls]}, got {self.value!r}")


def load_experiment(path: str | Path) -> Experiment:
    text = Path(path).read_text(encoding="utf-8")
    return parse_experiment(text)


def parse_experiment(text: str) -> Experiment:
    try:
        node = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"YAML syntax error: {getattr(exc, 'problem', exc)}",
                          mark.line + 1 if mark else None) from None
    if node is None:
        raise ConfigError("empty configuration", 1)
    root = _Tree(node)
    top = root.mapping(_TOP_KEYS, required=("network", "rates"))
    spec = _parse_network(top["network"])
    service, fixed, priors = _parse_rates(top["rates"], spec)
    observation = _parse_observation(top.get("observation"), spec)
    simulation = _parse_simulation(top.get("simulation"))
    inference = _parse_inference(top.get("inference"))
    digest = hashlib.sha256(
        json.dumps(root.plain(), sort_keys=True, default=str).encode()).hexdigest()
    return Experiment(spec, service, fixed, priors, observation, simulation, inference, digest)


def _parse_network(tree: _Tree) -> NetworkSpec:
    net = tree.mapping(_NETWORK_KEYS, required=("kind", "classes", "stations", "routing"))
    kind = net["kind"].choice(NetworkKind)
    classes = []
    for ct in net["classes"].seq():
        d = ct.mapping(_CLASS_KEYS, required=("name",))
        priority = d["priority"].number(integer=True) if "priority" in d else 0
        classes.append(JobClass(str(d["name"].value), int(priority)))
    names = [c.name for c in classes]
    if len(set(names)) != len(names):
        net["classes"].fail("class names must be unique")
    stations = []
    for st in net["stations"].seq():
        d = st.mapping(_STATION_KEYS, required=("index", "discipline"))
        servers = d["servers"].number(low=1, integer=True, allow_inf=True) if "servers" in d else 1
        try:
            stations.append(StationSpec(
                int(d["index"].number(low=0, integer=True)),
                d["discipline"].choice(Discipline),
                float(servers),
                d["fcfs_as_ps"].boolean() if "fcfs_as_ps" in d else False))
        except ConfigError as exc:
            st.fail(str(exc))
    M1 = len(stations)
    routing = np.zeros((len(classes), M1, M1))
    rmap = net["routing"].mapping(set(names))
    for c, name in enumerate(names):
        if name not in rmap:
            net["routing"].fail(f"missing routing for class {name!r}")
        for edge in rmap[name].seq():
            e = edge.mapping(_EDGE_KEYS, required=("from", "to", "p"))
            i = e["from"].number(low=0, high=M1 - 1, integer=True)
            j = e["to"].number(low=0, high=M1 - 1, integer=True)
            routing[c, i, j] += e["p"].number(low=0, high=1)
    population = ()
    if kind is NetworkKind.CLOSED:
        if "population" not in net:
            tree.fail("closed networks need a population")
        pt = net["population"]
        if isinstance(pt.value, dict):
            pm = pt.mapping(set(names), required=names)
            population = tuple(int(pm[n].number(low=0, integer=True)) for n in names)
        else:
            population = (int(pt.number(low=0, integer=True)),) * len(names)
    elif "population" in net:
        net["population"].fail("population only applies to closed networks")
    try:
        return NetworkSpec(tuple(stations), tuple(classes), routing, kind, population)
    except ConfigError as exc:
        tree.fail(str(exc))


def _parse_rates(tree: _Tree, spec: NetworkSpec):
    M1, C = spec.n_stations, spec.n_classes
    service = np.full((M1, C), np.nan)
    fixed = np.zeros((M1, C), dtype=bool)
    priors = {}
    seen = set()
    for rt in tree.seq():
        d = rt.mapping(_RATE_KEYS, required=("station", "class"))
        i = int(d["station"].number(low=0, high=M1 - 1, integer=True))
        try:
            c = spec.class_index(str(d["class"].value))
        except KeyError:
            d["class"].fail(f"unknown class {d['class'].value!r}")
        if (i, c) in seen:
            rt.fail(f"duplicate rate entry for station {i}, class {spec.classes[c].name!r}")
        seen.add((i, c))
        if "value" in d:
            service[i, c] = d["value"].number(low=0)
            if service[i, c] <= 0:
                d["value"].fail("rates must be positive")
        fixed[i, c] = d["fixed"].boolean() if "fixed" in d else False
        if fixed[i, c]:
            if "value" not in d:
                rt.fail("fixed rates need a value")
            if "prior" in d:
                d["prior"].fail("fixed rates take no prior")
        else:
            if "prior" not in d:
                rt.fail("inferred rates need a prior {shape, rate}")
            p = d["prior"].mapping(_PRIOR_KEYS, required=("shape", "rate"))
            a, b = p["shape"].number(low=0), p["rate"].number(low=0)
            if a <= 0 or b <= 0:
                d["prior"].fail("prior shape and rate must be positive")
            priors[(i, c)] = (float(a), float(b))
    for i in range(M1):
        for c in range(C):
            if spec.transitions.outflow[(i, c)] and (i, c) not in seen:
                tree.fail(f"no rate entry for station {i}, class {spec.classes[c].name!r}")
    return service, fixed, priors


def _parse_observation(tree: _Tree | None, spec: NetworkSpec) -> ObservationSettings:
    default_monitored = tuple(range(1, spec.n_stations))
    if spec.kind is NetworkKind.CLOSED:
        default_monitored = (0,) + default_monitored
    if tree is None:
        return ObservationSettings(ObservationModel(ObservationKind.EXACT_SNAPSHOT, 0.0), 0,
                                   default_monitored)
    d = tree.mapping(_OBS_KEYS)
    kind = d["kind"].choice(ObservationKind) if "kind" in d else ObservationKind.REGULARIZED_COUNT
    eps = float(d["epsilon"].number(low=0)) if "epsilon" in d else 0.0
    if eps >= 1:
        d["epsilon"].fail("epsilon must lie in [0, 1)")
    inf_eps = float(d["inference_epsilon"].number(low=0)) if "inference_epsilon" in d else 1e-3
    if not 0 < inf_eps < 1:
        d["inference_epsilon"].fail("inference_epsilon must lie in (0, 1)")
    n_obs = int(d["n_obs"].number(low=0, integer=True)) if "n_obs" in d else 0
    monitored = default_monitored
    if "monitored" in d:
        monitored = tuple(int(m.number(low=0, high=spec.n_stations - 1, integer=True))
                          for m in d["monitored"].seq())
        if spec.kind is NetworkKind.OPEN and 0 in monitored:
            d["monitored"].fail("the source/sink node of an open network cannot be monitored")
    support = int(d["support"].number(low=1, integer=True)) if "support" in d else None
    return ObservationSettings(ObservationModel(kind, eps, inf_eps), n_obs,
                               tuple(sorted(set(monitored))), support)


def _parse_simulation(tree: _Tree | None) -> SimulationSettings:
    out = SimulationSettings()
    if tree is None:
        return out
    d = tree.mapping(_SIM_KEYS)
    if "horizon" in d:
        out.horizon = float(d["horizon"].number(low=0))
        if out.horizon <= 0:
            d["horizon"].fail("horizon must be positive")
    if "seed" in d:
        out.seed = int(d["seed"].number(low=0, integer=True))
    if "delta" in d:
        out.delta = float(d["delta"].number(low=0))
    if "max_events" in d:
        out.max_events = int(d["max_events"].number(low=1, integer=True))
    return out


def _parse_inference(tree: _Tree | None) -> InferenceSettings:
    out = InferenceSettings()
    if tree is None:
        return out
    d = tree.mapping(_INF_KEYS)
    if "delta" in d:
        out.delta = float(d["delta"].number(low=0))
    if "nu_bar" in d:
        out.nu_bar = float(d["nu_bar"].number(low=0, allow_inf=True))
    if "grid" in d:
        out.grid = int(d["grid"].number(low=1, integer=True))
    if "tol" in d:
        out.tol = float(d["tol"].number(low=0))
    if "max_iters" in d:
        out.max_iters = int(d["max_iters"].number(low=0, integer=True))
    if "ymax_cap" in d:
        out.ymax_cap = int(d["ymax_cap"].number(low=1, integer=True))
    if "init_intensity" in d:
        out.init_intensity = float(d["init_intensity"].number(low=0))
    if "coupling" in d:
        out.coupling = d["coupling"].boolean()
    return out
