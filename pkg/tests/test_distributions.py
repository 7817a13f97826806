import numpy as np
import pytest
from scipy import stats

from qnetvi.meanfield.distributions import (Lattice, convolve, convolve_all,
                                            shifted_expectations, total_variation)


def poisson_rows(means, n):
    return np.array([stats.poisson.pmf(np.arange(n), m) for m in means])


def test_convolution_matches_direct_sum():
    a = Lattice(2, np.array([[0.2, 0.5, 0.3]]))
    b = Lattice(-1, np.array([[0.6, 0.4]]))
    c = convolve(a, b)
    assert c.lo == 1
    assert np.allclose(c.p[0], np.convolve(a.p[0], b.p[0]), atol=1e-14)


def test_difference_of_poissons_is_skellam():
    a = Lattice(0, poisson_rows([3.0, 7.0], 80))
    b = Lattice(0, poisson_rows([2.0, 5.0], 80)).negated()
    d = convolve(a, b)
    for r, (mu1, mu2) in enumerate([(3.0, 2.0), (7.0, 5.0)]):
        ref = stats.skellam.pmf(d.support, mu1, mu2)
        assert total_variation(d.p[r], ref) < 1e-10


def test_positive_part_and_masses():
    x = Lattice(-2, np.array([[0.1, 0.2, 0.3, 0.4]]))       # support -2..1
    pos = x.positive_part()
    assert pos.lo == 0 and np.allclose(pos.p, [[0.6, 0.4]])
    assert x.mass_below(0)[0] == pytest.approx(0.3)
    assert x.mean()[0] == pytest.approx(-0.2 - 0.2 + 0.4)
    assert x.prob_of([5])[0] == 0.0 and x.prob_of([-1])[0] == pytest.approx(0.2)
    assert convolve_all([], 3).p.shape == (3, 1)


@pytest.mark.parametrize("coef", [-1, 0, 1])
def test_shifted_expectations_brute_force(coef):
    rng = np.random.default_rng(coef + 5)
    z = Lattice(-3, rng.dirichlet(np.ones(6), size=4))
    ny = 5
    hlo = -3 - 4
    h = rng.normal(size=(2, 4, 6 + 8))
    got = shifted_expectations(z, h, hlo, coef, ny)
    for s in range(4):
        for y in range(ny):
            vals = z.support + coef * y - hlo
            ref = h[:, s, vals] @ z.p[s]
            assert np.allclose(got[:, s, y], ref, atol=1e-12)


def test_shifted_expectations_support_check():
    z = Lattice(0, np.ones((1, 3)) / 3)
    with pytest.raises(ValueError):
        shifted_expectations(z, np.zeros((1, 1, 3)), 0, 1, 4)
