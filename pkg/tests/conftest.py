"""Shared network fixtures."""

from pathlib import Path

import numpy as np
import pytest

from qnetvi.netmodel import Discipline, JobClass, NetworkKind, NetworkSpec, StationSpec

DATA = Path(__file__).resolve().parents[1] / "src" / "qnetvi" / "data"
EXAMPLE1 = DATA / "example1.yaml"
EXAMPLE2 = DATA / "example2.yaml"


def closed_loop(N=50, discipline=Discipline.FCFS, servers=1):
    """Delay node 0 feeding one station."""
    routing = np.array([[[0.0, 1.0], [1.0, 0.0]]])
    return NetworkSpec((StationSpec(0, Discipline.DELAY), StationSpec(1, discipline, servers)),
                       (JobClass("jobs"),), routing, NetworkKind.CLOSED, (N,))


def open_tandem(p=0.5):
    """Source splits to stations 1 and 2, both feed station 3, which exits."""
    routing = np.zeros((1, 4, 4))
    routing[0, 0, 1], routing[0, 0, 2] = p, 1 - p
    routing[0, 1, 3] = routing[0, 2, 3] = routing[0, 3, 0] = 1.0
    stations = (StationSpec(0, Discipline.SOURCE_SINK), StationSpec(1, Discipline.FCFS, 1),
                StationSpec(2, Discipline.PS, 2), StationSpec(3, Discipline.INF))
    return NetworkSpec(stations, (JobClass("a"),), routing, NetworkKind.OPEN)


def priority_pair():
    """Two classes through one priority station, then out."""
    routing = np.zeros((2, 2, 2))
    routing[:, 0, 1] = routing[:, 1, 0] = 1.0
    stations = (StationSpec(0, Discipline.SOURCE_SINK), StationSpec(1, Discipline.PRIORITY_FCFS, 1))
    return NetworkSpec(stations, (JobClass("hi", 0), JobClass("lo", 1)), routing,
                       NetworkKind.OPEN)


@pytest.fixture
def loop_spec():
    return closed_loop()


@pytest.fixture
def tandem_spec():
    return open_tandem()


def tiny_loop_data():
    """Closed loop with two jobs and two exact readings of the station."""
    from qnetvi.meanfield import RatePosterior
    from qnetvi.observations import ObservationKind, ObservationModel, ObservationSet

    spec = closed_loop(N=2)
    model = ObservationModel(ObservationKind.EXACT_SNAPSHOT, 0.0, inference_epsilon=1e-3)
    obs = ObservationSet([1.5, 3.0], ((1, 0),), [[2], [1]], model, 2)
    mu0, horizon = 0.8, 3.0
    priors = [RatePosterior.fixed_at(mu0), RatePosterior(2.0, 2.0, 2.0, 2.0)]
    return spec, obs, mu0, horizon, priors
