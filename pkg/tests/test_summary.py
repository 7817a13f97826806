import math

import numpy as np
import pytest

from qnetvi.meanfield import RatePosterior
from qnetvi.meanfield.summary import aggregate, read_csv, routing_rows, service_posteriors, write_csv

from conftest import open_tandem


def test_aggregate_equal_rates_is_exact():
    a = aggregate([RatePosterior(3, 2, 1, 0.3), RatePosterior(4, 2, 1, 0.3)])
    assert (a.shape, a.rate, a.prior_shape) == (7, 2, 2)


def test_aggregate_moment_matching():
    ps = [RatePosterior(3, 2, 1, 1), RatePosterior(4, 5, 1, 1)]
    a = aggregate(ps)
    assert a.mean == pytest.approx(3 / 2 + 4 / 5)
    assert a.sd ** 2 == pytest.approx(3 / 4 + 4 / 25)
    fixed = aggregate([RatePosterior.fixed_at(1.0), RatePosterior.fixed_at(2.0)])
    assert fixed.value == 3.0
    with pytest.raises(ValueError):
        aggregate([RatePosterior.fixed_at(1.0), RatePosterior(1, 1, 1, 1)])


def test_service_and_routing_tables():
    spec = open_tandem()
    posts = [RatePosterior.fixed_at(0.5), RatePosterior.fixed_at(0.5)] + [
        RatePosterior(5, 2, 1, 1)] * 3
    names = [n for n, _ in service_posteriors(spec, posts)]
    assert names == ["mu_1_a", "mu_2_a", "mu_3_a"]
    assert routing_rows(spec, posts) == []


def test_csv_format(tmp_path):
    write_csv(tmp_path / "x.csv", ["a", "b,c"], [[0.1, np.int64(3)], ["q\"r", math.inf]])
    raw = (tmp_path / "x.csv").read_bytes()
    assert raw.startswith(b'a,"b,c"\r\n0.1,3\r\n')
    header, rows = read_csv(tmp_path / "x.csv")
    assert header == ["a", "b,c"] and rows[1] == ['q"r', "inf"]


def test_routing_from_inferred_split():
    spec = open_tandem()
    posts = [RatePosterior(4, 2, 1, 1), RatePosterior(2, 2, 1, 1)] + [RatePosterior(5, 2, 1, 1)] * 3
    rows = routing_rows(spec, posts)
    assert [r[2] for r in rows] == [1, 2]
    assert rows[0][3] == pytest.approx(2 / 3) and rows[1][3] == pytest.approx(1 / 3)
    assert rows[0][4] == 3 and rows[1][4] == 1
