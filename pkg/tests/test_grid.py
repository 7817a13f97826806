import numpy as np
import pytest

from qnetvi.meanfield.grid import TimeGrid


def test_jump_times_doubled():
    g = TimeGrid.build(10.0, 10, obs_times=[2.5, 5.0])
    for t, left in zip([2.5, 5.0], g.jump_left):
        assert g.times[left] == g.times[left + 1] == t
    assert g.times[0] == 0 and g.times[-1] == 10
    assert np.all(np.diff(g.times) >= 0)
    assert len(g.obs_left) == 2


def test_coinciding_uniform_node_replaced():
    g = TimeGrid.build(10.0, 10, obs_times=[5.0])
    assert np.sum(g.times == 5.0) == 2
    assert len(g) == 11 - 1 + 2


def test_extra_jumps_are_not_observations():
    g = TimeGrid.build(4.0, 4, obs_times=[2.0], extra_jumps=[1.3])
    assert len(g.jump_left) == 2 and len(g.obs_left) == 1
    assert g.times[g.obs_left[0]] == 2.0


def test_trapezoid_skips_zero_width():
    g = TimeGrid.build(4.0, 4, extra_jumps=[1.5])
    step = np.where(g.times < 1.5, 1.0, 3.0)
    step[g.jump_left] = 1.0     # left limit at the jump
    assert g.trapezoid(step) == pytest.approx(1.5 * 1 + 2.5 * 3)


@pytest.mark.parametrize("args,message", [
    ((0.0, 10), "horizon"),
    ((10.0, 0), "interval"),
    ((10.0, 2, [1.0, 2.0]), "coarser"),
    ((10.0, 20, [11.0]), "inside"),
])
def test_grid_errors(args, message):
    with pytest.raises(ValueError, match=message):
        TimeGrid.build(*args)
