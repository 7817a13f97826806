"""Gamma rate posteriors and their closed-form summaries."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special, stats

QUANTILES = (0.025, 0.25, 0.5, 0.75, 0.975)
SUMMARY_COLUMNS = ("rate", "mean", "sd", "q2.5", "q25", "q50", "q75", "q97.5")


@dataclass(frozen=True)
class RatePosterior:
    """``Gamma(shape, rate)`` with its prior, or a fixed known value."""

    shape: float
    rate: float
    prior_shape: float
    prior_rate: float
    value: float | None = None  # set for rates that are not inferred

    @classmethod
    def fixed_at(cls, value: float) -> "RatePosterior":
        return cls(math.inf, math.inf, math.inf, math.inf, float(value))

    @property
    def fixed(self) -> bool:
        return self.value is not None

    @property
    def mean(self) -> float:
        return self.value if self.fixed else self.shape / self.rate

    @property
    def mean_log(self) -> float:
        """``E[log rate]``, i.e. ``digamma(shape) - log(rate)``."""
        return math.log(self.value) if self.fixed else special.digamma(self.shape) - math.log(self.rate)

    @property
    def sd(self) -> float:
        return 0.0 if self.fixed else math.sqrt(self.shape) / self.rate

    def updated(self, shape_increment: float, rate_increment: float) -> "RatePosterior":
        if self.fixed:
            return self
        return RatePosterior(self.prior_shape + shape_increment, self.prior_rate + rate_increment,
                             self.prior_shape, self.prior_rate)

    def reset(self) -> "RatePosterior":
        if self.fixed:
            return self
        return RatePosterior(self.prior_shape, self.prior_rate, self.prior_shape, self.prior_rate)

    def kl_to_prior(self) -> float:
        return 0.0 if self.fixed else gamma_kl(self.shape, self.rate, self.prior_shape, self.prior_rate)

    def quantiles(self, q=QUANTILES) -> np.ndarray:
        if self.fixed:
            return np.full(len(q), self.value)
        return stats.gamma.ppf(q, self.shape, scale=1.0 / self.rate)


def gamma_kl(a1: float, b1: float, a0: float, b0: float) -> float:
    """KL(Gamma(a1, b1) || Gamma(a0, b0)) with shape/rate parametrisation."""
    return float((a1 - a0) * special.digamma(a1) - special.gammaln(a1) + special.gammaln(a0)
                 + a0 * (math.log(b1) - math.log(b0)) + a1 * (b0 - b1) / b1)


def summary_row(name: str, post: RatePosterior) -> list:
    return [name, post.mean, post.sd, *post.quantiles()]
