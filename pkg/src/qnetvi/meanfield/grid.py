"""Time discretisation shared by all fields of the variational state."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class TimeGrid:
    """Grid nodes on ``[0, horizon]`` where every jump time appears twice.

    The two copies of a jump time bound a zero-length interval: fields
    stored at the first copy are left limits, at the second copy right
    limits. Observation times are jump times (the backward functional
    jumps there); :meth:`build` can add further ones.
    """

    times: np.ndarray
    jump_left: np.ndarray   # index of the left copy of each jump time
    horizon: float
    obs_left: np.ndarray    # subset of jump_left belonging to observations

    @property
    def jump_right(self) -> np.ndarray:
        return self.jump_left + 1

    @property
    def obs_right(self) -> np.ndarray:
        return self.obs_left + 1

    def __len__(self):
        return len(self.times)

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.times)

    @classmethod
    def build(cls, horizon: float, n_intervals: int = 2000, obs_times=(),
              extra_jumps=()) -> "TimeGrid":
        if horizon <= 0:
            raise ValueError("horizon must be positive")
        if n_intervals < 1:
            raise ValueError("need at least one interval")
        obs_times = np.asarray(obs_times, dtype=float)
        if len(obs_times) and (obs_times.min() < 0 or obs_times.max() > horizon):
            raise ValueError("observation times must lie inside the horizon")
        dt = horizon / n_intervals
        if len(obs_times) > 1 and dt > np.diff(np.sort(obs_times)).min() + 1e-12:
            raise ValueError(
                f"grid spacing {dt:.4g} is coarser than the observation spacing "
                f"{np.diff(np.sort(obs_times)).min():.4g}")
        jumps = np.union1d(obs_times, np.asarray(extra_jumps, dtype=float))
        base = np.linspace(0.0, horizon, n_intervals + 1)
        tol = 1e-9 * horizon
        # uniform nodes that coincide with a jump time are replaced by it
        keep = np.ones(len(base), dtype=bool)
        if len(jumps):
            pos = np.searchsorted(jumps, base)
            for n, b in enumerate(base):
                for p in (pos[n] - 1, pos[n]):
                    if 0 <= p < len(jumps) and abs(jumps[p] - b) <= tol:
                        keep[n] = False
        times = np.sort(np.concatenate([base[keep], jumps, jumps]), kind="stable")
        left = np.searchsorted(times, jumps, side="left")
        obs_left = left[np.isin(jumps, obs_times)] if len(obs_times) else np.zeros(0, dtype=int)
        return cls(times, left.astype(int), float(horizon), obs_left.astype(int))

    def trapezoid(self, values: np.ndarray, axis: int = 0) -> np.ndarray:
        """Trapezoid rule over the grid; zero-length intervals contribute nothing."""
        values = np.moveaxis(np.asarray(values, dtype=float), axis, 0)
        w = self.widths.reshape((-1,) + (1,) * (values.ndim - 1))
        return np.sum(0.5 * w * (values[1:] + values[:-1]), axis=0)
