"""Mean-field coordinate ascent over per-direction counting processes.

Under the approximating measure every direction ``eta`` counts jumps as an
independent pure-birth process with intensity ``nu[eta][s, y]``. For each
direction we keep, on the shared :class:`TimeGrid`:

* ``phi``   marginal law of the count (rows = grid nodes, columns = y),
* ``nu``    intensities, capped at ``nu_bar``,
* ``logr``  log of the backward functional, stored up to an additive
  constant per grid node (only differences in ``y`` enter ``nu``),
* ``kappa`` slack of the cap constraint.

One sweep visits the directions in order. For each it recomputes the
conditional load statistics given the current marginals of all other
directions, integrates the backward equation (RK4, log space, with a jump
at each observation), sets ``nu``/``kappa`` and re-solves the forward
master equation. Gamma posteriors of the rates are refreshed after the
sweep, then the evidence lower bound is evaluated.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from ..netmodel import (Discipline, NetworkKind, NetworkSpec, effective_discipline,
                        load_partners, load_value)
from ..observations import ObservationSet
from .distributions import Lattice, convolve, convolve_all, shifted_expectations
from .grid import TimeGrid
from .posteriors import RatePosterior

log = logging.getLogger(__name__)

LOG_CLAMP = 700.0
SHED_TOL = 1e-6
GROWTH = 1.25
STABLE_STEP = 0.5       # substep bound on h * rate (RK4 is stable up to ~2.78)
MAX_SUBSTEPS = 10_000
INIT_FLOOR = 1e-3        # keeps every starting intensity positive


class SupportError(RuntimeError):
    """Count support would have to exceed the configured hard cap."""


@dataclass
class EngineSettings:
    delta: float = 1e-6
    nu_bar: float = 50.0
    tol: float = 1e-6
    max_iters: int = 100
    ymax_cap: int = 512
    init_intensity: float | None = None
    # include the other directions' generator terms in each backward pass
    coupling: bool = True

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError("inference needs delta > 0 (log delta enters the bound)")
        if not self.nu_bar > 0:
            raise ValueError("nu_bar must be positive")

    @classmethod
    def from_inference(cls, inf) -> "EngineSettings":
        return cls(inf.delta, inf.nu_bar, inf.tol, inf.max_iters, inf.ymax_cap,
                   inf.init_intensity, inf.coupling)


@dataclass
class LoadStats:
    """Conditional load statistics of one direction given its own count.

    All arrays have shape (S, ny): ``load = E[max(U, 0) | y]``,
    ``busy = P(U > 0 | y)``, ``logload = E[log U ; U > 0 | y]``.
    """

    load: np.ndarray
    busy: np.ndarray
    logload: np.ndarray

    def expected_generator(self, post: RatePosterior, delta: float) -> np.ndarray:
        return delta + post.mean * self.load

    def expected_log_generator(self, post: RatePosterior, delta: float) -> np.ndarray:
        return self.busy * post.mean_log + self.logload + (1.0 - self.busy) * math.log(delta)


class VariationalState:
    """All fields of the approximating measure plus the rate posteriors."""

    def __init__(self, spec: NetworkSpec, grid: TimeGrid, obs: ObservationSet | None,
                 settings: EngineSettings, priors):
        self.spec = spec
        self.grid = grid
        self.obs = obs if obs is not None and len(obs) else None
        self.settings = settings
        self.priors = list(priors)
        self.posteriors = list(priors)
        if len(self.priors) != len(spec.transitions):
            raise ValueError("need one prior per direction")
        D = len(spec.transitions)
        self.phi: list[np.ndarray] = [None] * D
        self.nu: list[np.ndarray] = [None] * D
        self.logr: list[np.ndarray] = [None] * D
        self.kappa: list[np.ndarray] = [None] * D
        self.shed = np.zeros(D)
        self.notes: list[str] = []

    @property
    def n_directions(self) -> int:
        return len(self.spec.transitions)

    @property
    def delta(self) -> float:
        return self.settings.delta

    def ny(self, k: int) -> int:
        return self.phi[k].shape[1]

    def warn(self, message: str):
        if message not in self.notes:
            self.notes.append(message)
            warnings.warn(message, RuntimeWarning, stacklevel=3)


# ---------------------------------------------------------------- marginals

def forward_master(nu: np.ndarray, grid: TimeGrid) -> tuple[np.ndarray, float]:
    """Solve the pure-birth master equation from a point mass at 0.

    ``nu`` (S, ny) is interpolated linearly inside each grid interval. Mass
    leaving the top state is lost; the largest loss over the horizon is
    returned and the marginals are renormalised row by row.
    """
    nu = np.asarray(nu, dtype=float)
    S, ny = nu.shape
    t = grid.times
    phi = np.empty((S, ny))
    cur = np.zeros(ny)
    cur[0] = 1.0
    phi[0] = cur

    def rhs(p, v):
        flow = v * p
        d = -flow
        d[1:] += flow[:-1]
        return d

    for n in range(S - 1):
        h = t[n + 1] - t[n]
        if h > 0:
            v0, v1 = nu[n], nu[n + 1]
            peak = max(v0.max(), v1.max())
            nsub = int(min(max(1, math.ceil(h * peak / STABLE_STEP)), MAX_SUBSTEPS))
            hs = h / nsub
            for m in range(nsub):
                a, b = m / nsub, (m + 1) / nsub
                va = v0 + a * (v1 - v0)
                vm = v0 + 0.5 * (a + b) * (v1 - v0)
                vb = v0 + b * (v1 - v0)
                k1 = rhs(cur, va)
                k2 = rhs(cur + 0.5 * hs * k1, vm)
                k3 = rhs(cur + 0.5 * hs * k2, vm)
                k4 = rhs(cur + hs * k3, vb)
                cur = cur + hs / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        phi[n + 1] = cur
    shed = float(max(0.0, 1.0 - phi.sum(axis=1).min()))
    np.maximum(phi, 0.0, out=phi)
    phi /= phi.sum(axis=1, keepdims=True)
    return phi, shed


def initial_support(rate: float, horizon: float, cap: int) -> int:
    m = rate * horizon
    return int(min(cap, math.ceil(m + 10 * math.sqrt(m) + 10))) + 1


def _forward_with_growth(state: VariationalState, k: int):
    cap = state.settings.ymax_cap
    while True:
        phi, shed = forward_master(state.nu[k], state.grid)
        if shed <= SHED_TOL:
            break
        ny = state.nu[k].shape[1]
        if ny - 1 >= cap:
            d = state.spec.transitions.directions[k]
            raise SupportError(
                f"direction {tuple(d)}: count support {ny - 1} sheds {shed:.2e} "
                f"probability mass and the cap is {cap}; raise inference.ymax_cap")
        new = min(cap + 1, int(math.ceil(ny * GROWTH)))
        pad = ((0, 0), (0, new - ny))
        state.nu[k] = np.pad(state.nu[k], pad, mode="edge")
        if state.logr[k] is not None:
            state.logr[k] = np.pad(state.logr[k], pad, mode="edge")
        if state.kappa[k] is not None:
            state.kappa[k] = np.pad(state.kappa[k], pad)
    state.phi[k] = phi
    state.shed[k] = shed


# ----------------------------------------------------------- queue lengths

def has_queue(spec: NetworkSpec, i: int) -> bool:
    return not (i == 0 and spec.kind is NetworkKind.OPEN)


def station_variable(state: VariationalState, i: int, c: int, exclude=None,
                     rows=None) -> Lattice:
    """Law of ``x[i, c]`` under the product measure, optionally leaving out
    the direction(s) ``exclude`` and restricted to grid ``rows``."""
    spec = state.spec
    tr = spec.transitions
    if exclude is None or isinstance(exclude, (int, np.integer)):
        exclude = () if exclude is None else (int(exclude),)
    n_rows = len(state.grid) if rows is None else len(np.atleast_1d(rows))
    parts = []
    for k in tr.inflow[(i, c)]:
        if k not in exclude and tr.directions[k].origin != i:
            p = state.phi[k] if rows is None else state.phi[k][rows]
            parts.append(Lattice(0, p))
    for k in tr.outflow[(i, c)]:
        if k not in exclude and tr.directions[k].destination != i:
            p = state.phi[k] if rows is None else state.phi[k][rows]
            parts.append(Lattice(0, p).negated())
    out = convolve_all(parts, n_rows)
    if i == 0 and spec.kind is NetworkKind.CLOSED:
        out = Lattice(out.lo + spec.population[c], out.p)
    return out


def queue_length_distribution(state: VariationalState, i: int, c: int, s=None) -> Lattice:
    """Law of ``x[i, c]`` at grid node(s) ``s`` (all nodes when omitted).

    The support may reach negative values; see :func:`negative_mass`.
    """
    rows = None if s is None else np.atleast_1d(s)
    return station_variable(state, i, c, rows=rows)


def negative_mass(dist: Lattice) -> np.ndarray:
    return dist.mass_below(0)


def _load_tables(state: VariationalState, i: int, c: int, xlo: int, nx: int):
    """``E_W[f(load(x, W))]`` tabulated over ``x = xlo..xlo+nx-1`` for the
    three statistics, where ``W`` sums the partner classes' positive parts."""
    spec = state.spec
    S = len(state.grid)
    disc = effective_discipline(spec, i)
    partners = load_partners(spec, i, c)
    if partners:
        W = convolve_all([station_variable(state, i, c2).positive_part() for c2 in partners], S)
        w, pw = W.support, W.p
    else:
        w, pw = np.zeros(1), np.ones((S, 1))
    x = np.arange(xlo, xlo + nx)
    F = load_value(disc, spec.stations[i].servers, x[:, None], w[None, :])
    pos = F > 0
    FA = np.where(pos, F, 0.0)
    FL = np.where(pos, np.log(np.where(pos, F, 1.0)), 0.0)
    tables = np.stack([pw @ FA.T, pw @ pos.T.astype(float), pw @ FL.T])
    return tables


def load_stats(state: VariationalState, k: int) -> LoadStats:
    """Load statistics of direction ``k`` conditional on its own count."""
    spec = state.spec
    i, j, c = spec.transitions.directions[k]
    S, ny = len(state.grid), state.ny(k)
    if spec.stations[i].discipline is Discipline.SOURCE_SINK:
        one = np.ones((S, ny))
        return LoadStats(one, one.copy(), np.zeros((S, ny)))
    coef = 0 if i == j else -1
    z = station_variable(state, i, c, exclude=k)
    xlo = z.lo + min(0, coef * (ny - 1))
    nx = z.n + abs(coef) * (ny - 1)
    tables = _load_tables(state, i, c, xlo, nx)
    load, busy, logload = shifted_expectations(z, tables, xlo, coef, ny)
    return LoadStats(np.maximum(load, 0.0), np.clip(busy, 0.0, 1.0), logload)


def _count_measures(state: VariationalState, kp: int, base: Lattice) -> tuple[Lattice, Lattice]:
    """Laws of ``base - Y'`` and the same measure weighted by ``nu'(Y')``."""
    i, j, _ = state.spec.transitions.directions[kp]
    phi, nu = state.phi[kp], state.nu[kp]
    if i == j:
        rate = (phi * nu).sum(axis=1, keepdims=True)
        return base, Lattice(base.lo, base.p * rate)
    return (convolve(base, Lattice(0, phi).negated()),
            convolve(base, Lattice(0, phi * nu).negated()))


def _coupled_directions(spec: NetworkSpec, k: int):
    """Directions whose load depends on the count of direction ``k``.

    Yields ``(k', coef, partner)``: ``coef`` is how ``Y^k`` enters the
    queue length involved and ``partner`` tells whether that queue length
    is a partner class of ``k'`` rather than its own.
    """
    tr = spec.transitions
    i, j, c = tr.directions[k]
    if i == j:
        return
    for kp, (ip, jp, cp) in enumerate(tr.directions):
        if kp == k or ip not in (i, j):
            continue
        if spec.stations[ip].discipline is Discipline.SOURCE_SINK:
            continue
        coef = -1 if ip == i else 1
        if cp == c:
            yield kp, coef, False
        elif c in load_partners(spec, ip, cp):
            yield kp, coef, True


def coupling_potential(state: VariationalState, k: int) -> np.ndarray:
    """Dependence of the other directions' path terms on ``Y^k = y``.

    For every direction ``k'`` whose load involves ``Y^k`` this adds
    ``E[lambda'] E[load'+ | y] - E[nu'(Y') (busy' (E log lambda' - log delta)
    + logload') | y]``; parts that do not depend on ``y`` are dropped.
    """
    spec = state.spec
    S, ny = len(state.grid), state.ny(k)
    out = np.zeros((S, ny))
    log_delta = math.log(state.delta)
    for kp, coef, partner in _coupled_directions(spec, k):
        post = state.posteriors[kp]
        ip, _, cp = spec.transitions.directions[kp]
        if partner:
            E = _partner_expectations(state, k, kp, coef)
        else:
            base = station_variable(state, ip, cp, exclude=(k, kp))
            plain, weighted = _count_measures(state, kp, base)
            xlo = plain.lo + min(0, coef * (ny - 1))
            tables = _load_tables(state, ip, cp, xlo, plain.n + ny - 1)
            E = np.concatenate([shifted_expectations(plain, tables[:1], xlo, coef, ny),
                                shifted_expectations(weighted, tables[1:], xlo, coef, ny)])
        out += post.mean * E[0] - (post.mean_log - log_delta) * E[1] - E[2]
    return out


def _partner_expectations(state: VariationalState, k: int, kp: int, coef: int) -> np.ndarray:
    """As in :func:`coupling_potential` when ``Y^k`` enters the partner sum of ``k'``."""
    spec = state.spec
    S, ny = len(state.grid), state.ny(k)
    ip, _, cp = spec.transitions.directions[kp]
    c = spec.transitions.directions[k].cls
    plain, weighted = _count_measures(state, kp, station_variable(state, ip, cp, exclude=kp))
    rest = convolve_all([station_variable(state, ip, c2).positive_part()
                         for c2 in load_partners(spec, ip, cp) if c2 != c], S)
    zp = station_variable(state, ip, c, exclude=k)
    vlo = min(zp.lo + min(0, coef * (ny - 1)), 0)
    vhi = max(zp.hi + max(0, coef * (ny - 1)), 0)
    w = np.arange(0, rest.hi + vhi + 1)
    F = load_value(effective_discipline(spec, ip), spec.stations[ip].servers,
                   plain.support[:, None], w[None, :])
    pos = F > 0
    FA = np.where(pos, F, 0.0)
    FL = np.where(pos, np.log(np.where(pos, F, 1.0)), 0.0)
    H = np.stack([plain.p @ FA, weighted.p @ pos.astype(float), weighted.p @ FL])
    # average over the remaining partners for each value v >= 0 of (x_partner)+
    H2 = shifted_expectations(rest, H, 0, 1, vhi + 1)
    if vlo < 0:
        H2 = np.concatenate([np.repeat(H2[:, :, :1], -vlo, axis=2), H2], axis=2)
    return shifted_expectations(zp, H2, vlo, coef, ny)


def expected_generator(state: VariationalState, k: int, y: int, s: int) -> float:
    """``E[Xi_{Y,eta} | Y^eta = y]`` at grid node ``s``."""
    return float(load_stats(state, k).expected_generator(state.posteriors[k], state.delta)[s, y])


def expected_log_generator(state: VariationalState, k: int, y: int, s: int) -> float:
    """``E[log Xi_{Y,eta} | Y^eta = y]`` in the small-delta split form."""
    st = load_stats(state, k)
    return float(st.expected_log_generator(state.posteriors[k], state.delta)[s, y])


# ------------------------------------------------------------ observations

def _reading_logs(obs: ObservationSet) -> tuple[float, float]:
    eps = obs.model.evaluation_epsilon
    return math.log(eps / obs.support), math.log1p(-eps)


def observation_jumps(state: VariationalState, k: int) -> np.ndarray:
    """``E[log f(o_k) | Y^eta = y]`` restricted to the nodes ``eta`` touches,
    shape (K, ny). Nodes the direction does not touch contribute nothing."""
    obs = state.obs
    ny = state.ny(k)
    if obs is None:
        return np.zeros((0, ny))
    i, j, c = state.spec.transitions.directions[k]
    off, on = _reading_logs(obs)
    rows = state.grid.obs_left
    out = np.zeros((len(obs), ny))
    y = np.arange(ny)
    for n, node in enumerate(obs.nodes):
        if i == j or node not in ((i, c), (j, c)):
            continue
        coef = -1 if node == (i, c) else 1
        z = station_variable(state, node[0], c, exclude=k, rows=rows)
        idx = obs.values[:, n][:, None] - coef * y[None, :] - z.lo
        ok = (idx >= 0) & (idx < z.n)
        p = np.where(ok, np.take_along_axis(z.p, np.clip(idx, 0, z.n - 1), axis=1), 0.0)
        out += off + p * (on - off)
    return out


def observation_term(state: VariationalState) -> float:
    obs = state.obs
    if obs is None:
        return 0.0
    off, on = _reading_logs(obs)
    total = 0.0
    for n, (i, c) in enumerate(obs.nodes):
        x = station_variable(state, i, c, rows=state.grid.obs_left)
        total += float(np.sum(off + x.prob_of(obs.values[:, n]) * (on - off)))
    return total


# ------------------------------------------------------------- backward pass

def _log_candidate(L: np.ndarray, B: np.ndarray) -> np.ndarray:
    up = np.empty_like(L)
    up[..., :-1] = L[..., 1:]
    up[..., -1] = L[..., -1]
    return up - L + B


def backward_log_r(A: np.ndarray, B: np.ndarray, jumps: np.ndarray, grid: TimeGrid,
                   nu_bar: float) -> tuple[np.ndarray, bool]:
    """Integrate the log backward equation from ``log r_T = 0``.

    ``jumps[k]`` is added when crossing observation ``k``. Each row is
    shifted so its maximum is 0; only differences along ``y`` matter, so
    the field itself never overflows. Without a cap the exponentiated
    log-ratio is clamped at ``LOG_CLAMP``; the flag reports whether that
    happened.
    """
    S, ny = A.shape
    t = grid.times
    capped = math.isfinite(nu_bar)
    lnb = math.log(nu_bar) if capped else math.inf
    jump_at = {int(n): kk for kk, n in enumerate(grid.obs_left)}

    def rhs(L, a, b):
        ls = _log_candidate(L, b)
        if capped:
            eff = np.where(ls < lnb, np.exp(np.minimum(ls, lnb)), nu_bar * (1.0 + ls - lnb))
        else:
            eff = np.exp(np.minimum(ls, LOG_CLAMP))
        return a - eff

    L = np.empty((S, ny))
    L[-1] = 0.0
    clamped = False
    for n in range(S - 2, -1, -1):
        h = t[n + 1] - t[n]
        cur = L[n + 1]
        if h == 0:
            if n in jump_at and len(jumps):
                cur = cur + jumps[jump_at[n]]
        else:
            a0, a1, b0, b1 = A[n], A[n + 1], B[n], B[n + 1]
            peak = math.exp(min(float(_log_candidate(cur, b1).max()), LOG_CLAMP))
            peak = max(peak, float(np.exp(np.minimum(b0, LOG_CLAMP)).max()))
            nsub = int(min(max(1, math.ceil(h * min(peak, nu_bar) / STABLE_STEP)), MAX_SUBSTEPS))
            hs = h / nsub
            for m in range(nsub):
                # fractions measured from the left node; we move right to left
                fa, fb = 1 - m / nsub, 1 - (m + 1) / nsub
                fm = 0.5 * (fa + fb)
                aa, am, ab = a0 + fa * (a1 - a0), a0 + fm * (a1 - a0), a0 + fb * (a1 - a0)
                ba, bm, bb = b0 + fa * (b1 - b0), b0 + fm * (b1 - b0), b0 + fb * (b1 - b0)
                k1 = rhs(cur, aa, ba)
                k2 = rhs(cur - 0.5 * hs * k1, am, bm)
                k3 = rhs(cur - 0.5 * hs * k2, am, bm)
                k4 = rhs(cur - hs * k3, ab, bb)
                cur = cur - hs / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        cur = cur - cur.max()
        if not capped and not clamped and _log_candidate(cur, B[n]).max() > LOG_CLAMP:
            clamped = True
        L[n] = cur
    return L, clamped


def intensities_from_log_r(L: np.ndarray, B: np.ndarray, phi: np.ndarray,
                           nu_bar: float) -> tuple[np.ndarray, np.ndarray]:
    """Intensities and slack from the backward field.

    The unconstrained candidate is ``exp(log r(y+1) - log r(y) + B)``; above
    the cap the intensity is ``nu_bar`` and the slack ``phi * log(cand / nu_bar)``.
    """
    ls = _log_candidate(L, B)
    if not math.isfinite(nu_bar):
        return np.exp(np.minimum(ls, LOG_CLAMP)), np.zeros_like(ls)
    lnb = math.log(nu_bar)
    over = ls >= lnb
    nu = np.where(over, nu_bar, np.exp(np.minimum(ls, lnb)))
    kappa = np.where(over, phi * (ls - lnb), 0.0)
    return nu, kappa


def _potential(state: VariationalState, k: int, st: LoadStats) -> np.ndarray:
    A = st.expected_generator(state.posteriors[k], state.delta)
    if state.settings.coupling:
        A = A + coupling_potential(state, k)
    return A


def backward_sweep(state: VariationalState, directions=None) -> list[np.ndarray]:
    """Recompute ``log r`` for the given directions (all by default) from the
    current marginals, without touching intensities."""
    ks = range(state.n_directions) if directions is None else directions
    out = []
    for k in ks:
        st = load_stats(state, k)
        post = state.posteriors[k]
        L, clamped = backward_log_r(_potential(state, k, st),
                                    st.expected_log_generator(post, state.delta),
                                    observation_jumps(state, k), state.grid,
                                    state.settings.nu_bar)
        if clamped:
            state.warn(f"intensity log-ratio clamped at {LOG_CLAMP:g} for direction "
                       f"{tuple(state.spec.transitions.directions[k])}")
        state.logr[k] = L
        out.append(L)
    return out


def update_intensities(state: VariationalState, k: int, B: np.ndarray | None = None):
    """Set ``nu`` and ``kappa`` of direction ``k`` from its current ``log r``."""
    if B is None:
        B = load_stats(state, k).expected_log_generator(state.posteriors[k], state.delta)
    state.nu[k], state.kappa[k] = intensities_from_log_r(
        state.logr[k], B, state.phi[k], state.settings.nu_bar)
    return state.nu[k], state.kappa[k]


def sweep_direction(state: VariationalState, k: int):
    """Backward pass, intensity update and forward pass for one direction."""
    st = load_stats(state, k)
    post = state.posteriors[k]
    B = st.expected_log_generator(post, state.delta)
    L, clamped = backward_log_r(_potential(state, k, st), B,
                                observation_jumps(state, k), state.grid, state.settings.nu_bar)
    if clamped:
        state.warn(f"intensity log-ratio clamped at {LOG_CLAMP:g} for direction "
                   f"{tuple(state.spec.transitions.directions[k])}")
    state.logr[k] = L
    update_intensities(state, k, B)
    _forward_with_growth(state, k)


# ------------------------------------------------------------ rates and bound

def update_rate_posteriors(state: VariationalState, stats=None) -> list[RatePosterior]:
    """Conjugate Gamma update from the integrated expected intensity and load."""
    if stats is None:
        stats = [load_stats(state, k) for k in range(state.n_directions)]
    grid = state.grid
    new = []
    for k, prior in enumerate(state.priors):
        if prior.fixed:
            new.append(prior)
            continue
        shape_inc = float(grid.trapezoid((state.phi[k] * state.nu[k]).sum(axis=1)))
        rate_inc = float(grid.trapezoid((state.phi[k] * stats[k].load).sum(axis=1)))
        if not (math.isfinite(shape_inc) and math.isfinite(rate_inc)):
            raise FloatingPointError(f"non-finite rate update for direction {k}")
        new.append(prior.updated(shape_inc, rate_inc))
    state.posteriors = new
    return new


@dataclass
class Elbo:
    observation: float
    kl: float
    path: float

    @property
    def total(self) -> float:
        return self.observation - self.kl - self.path


def path_term(state: VariationalState, stats=None) -> float:
    if stats is None:
        stats = [load_stats(state, k) for k in range(state.n_directions)]
    integrand = np.zeros(len(state.grid))
    for k, st in enumerate(stats):
        post = state.posteriors[k]
        A = st.expected_generator(post, state.delta)
        B = st.expected_log_generator(post, state.delta)
        nu = state.nu[k]
        val = special.xlogy(nu, nu) - nu * (B + 1.0) + A
        integrand += (state.phi[k] * val).sum(axis=1)
    return float(state.grid.trapezoid(integrand))


def evaluate_elbo(state: VariationalState, stats=None) -> Elbo:
    kl = sum(p.kl_to_prior() for p in state.posteriors)
    return Elbo(observation_term(state), float(kl), path_term(state, stats))


# ----------------------------------------------------------- initialisation

def _mean_observed(obs: ObservationSet | None, spec: NetworkSpec) -> dict:
    if obs is None:
        return {}
    return {node: float(obs.values[:, n].mean()) for n, node in enumerate(obs.nodes)}


def _observed_slope(obs: ObservationSet | None, node) -> float:
    """Least-squares growth rate of an observed count through the origin."""
    if obs is None or node not in obs.nodes or not np.any(obs.times > 0):
        return 0.0
    x = obs.values[:, obs.nodes.index(node)].astype(float)
    return max(float(x @ obs.times / (obs.times @ obs.times)), 0.0)


def initial_intensities(spec: NetworkSpec, priors, obs: ObservationSet | None) -> np.ndarray:
    """Constant starting intensity per direction from the traffic equations.

    Open networks push the source rates through the routing matrices,
    holding back at each observed station the flow its queue grows by.
    Closed networks use the bottleneck throughput, with each station's
    capacity evaluated at its mean observed queue length (or the full
    population when unmonitored).
    """
    tr = spec.transitions
    M1, C = spec.n_stations, spec.n_classes
    means = np.array([p.mean for p in priors])
    mu = np.zeros((M1, C))
    for k, (i, _, c) in enumerate(tr.directions):
        mu[i, c] += means[k]
    out = np.zeros(len(tr))
    observed = _mean_observed(obs, spec)
    for c in range(C):
        P = spec.routing[c]
        if spec.kind is NetworkKind.OPEN:
            # inflow minus outflow matches the fitted growth of each observed queue
            slope = np.array([_observed_slope(obs, (i, c)) for i in range(M1)])
            flow = np.zeros(M1)
            flow[0] = mu[0, c]
            for _ in range(4 * M1):
                inflow = flow @ P
                new = np.concatenate([[mu[0, c]], np.maximum(inflow[1:] - slope[1:], 0.0)])
                if np.allclose(new, flow):
                    break
                flow = new
        else:
            # visit ratios relative to the delay node
            A = (np.eye(M1) - P).T
            A[0] = 0.0
            A[0, 0] = 1.0
            rhs = np.zeros(M1)
            rhs[0] = 1.0
            v = np.maximum(np.linalg.lstsq(A, rhs, rcond=None)[0], 0.0)
            N = spec.population[c]
            best = math.inf
            for i in range(M1):
                if v[i] <= 0 or not tr.outflow[(i, c)]:
                    continue
                xbar = observed.get((i, c), float(N))
                others = sum(observed.get((i, c2), 0.0) for c2 in load_partners(spec, i, c))
                load = float(load_value(effective_discipline(spec, i), spec.stations[i].servers,
                                        xbar, others))
                best = min(best, mu[i, c] * max(load, 0.0) / v[i])
            flow = v * (best if math.isfinite(best) else 0.0)
        for k, (i, j, cc) in enumerate(tr.directions):
            if cc == c:
                out[k] = flow[i] * P[i, j]
    return np.maximum(out, 0.1)


def _station_order(spec: NetworkSpec, c: int):
    """Stations 1..M in routing order for class ``c``, or None on a cycle."""
    P = spec.routing[c]
    M1 = spec.n_stations
    indeg = {i: sum(P[j, i] > 0 for j in range(1, M1)) for i in range(1, M1)}
    ready = [i for i in range(1, M1) if indeg[i] == 0]
    order = []
    while ready:
        i = ready.pop(0)
        order.append(i)
        for j in range(1, M1):
            if P[i, j] > 0:
                indeg[j] -= 1
                if indeg[j] == 0:
                    ready.append(j)
    return order if len(order) == M1 - 1 else None


def initial_paths(spec: NetworkSpec, priors, obs: ObservationSet | None,
                  grid: TimeGrid) -> np.ndarray | None:
    """Time-varying starting intensities that follow the observed queues.

    Open feed-forward networks only: arrivals grow at the source rate and
    each station releases, by every observation time, its inflow minus the
    observed queue (kept non-decreasing). Intensities are the slopes of
    these mean cumulative counts between observation times. Returns shape
    (directions, grid nodes), or None when the construction does not apply.
    """
    if spec.kind is not NetworkKind.OPEN or obs is None or not len(obs):
        return None
    tr = spec.transitions
    knots = np.concatenate([[0.0], obs.times[obs.times > 0]])
    if knots[-1] < grid.horizon:
        knots = np.append(knots, grid.horizon)
    means = np.array([p.mean for p in priors])
    cum = np.zeros((len(tr), len(knots)))
    for c in range(spec.n_classes):
        order = _station_order(spec, c)
        if order is None:
            return None
        P = spec.routing[c]
        inflow = {i: np.zeros(len(knots)) for i in range(spec.n_stations)}
        for k in tr.outflow[(0, c)]:
            cum[k] = means[k] * knots
            inflow[tr.directions[k].destination] += cum[k]
        for i in order:
            out = inflow[i].copy()
            if (i, c) in obs.nodes:
                x = obs.values[:, obs.nodes.index((i, c))].astype(float)
                seen = np.interp(knots, obs.times, x, left=0.0)
                out = np.maximum.accumulate(np.maximum(inflow[i] - seen, 0.0))
            row = P[i]
            for k in tr.outflow[(i, c)]:
                j = tr.directions[k].destination
                cum[k] = out * row[j] / row.sum()
                if j != 0:
                    inflow[j] += cum[k]
    slopes = np.diff(cum, axis=1) / np.diff(knots)
    seg = np.clip(np.searchsorted(knots, grid.times, side="left") - 1, 0, len(knots) - 2)
    # right copies of a knot already belong to the next segment
    right = np.zeros(len(grid), dtype=bool)
    right[grid.jump_right] = True
    seg = np.where(right & np.isin(grid.times, knots), np.minimum(seg + 1, len(knots) - 2), seg)
    return slopes[:, seg]


def initialize(spec: NetworkSpec, priors, obs: ObservationSet | None, grid: TimeGrid,
               settings: EngineSettings) -> VariationalState:
    """Constant intensities, one forward pass, ``log r = 0``, ``kappa = 0``."""
    for p in priors:
        if not p.fixed and not (p.shape > 0 and p.rate > 0):
            raise ValueError("priors must have positive shape and rate")
    state = VariationalState(spec, grid, obs, settings, priors)
    paths = None
    if settings.init_intensity is not None:
        rates = np.full(state.n_directions, float(settings.init_intensity))
    else:
        rates = initial_intensities(spec, priors, state.obs)
        paths = initial_paths(spec, priors, state.obs, grid)
    S = len(grid)
    for k, c in enumerate(rates):
        path = np.full(S, c) if paths is None else np.maximum(paths[k], INIT_FLOOR)
        ny = initial_support(float(grid.trapezoid(path)) / grid.horizon, grid.horizon,
                             settings.ymax_cap)
        state.nu[k] = np.repeat(np.minimum(path, settings.nu_bar)[:, None], ny, axis=1)
        state.logr[k] = np.zeros((S, ny))
        state.kappa[k] = np.zeros((S, ny))
        _forward_with_growth(state, k)
    _check_initial_fit(state)
    return state


def _check_initial_fit(state: VariationalState):
    obs = state.obs
    if obs is None:
        return
    for n, (i, c) in enumerate(obs.nodes):
        mean_path = np.abs(station_variable(state, i, c, rows=state.grid.obs_left).mean())
        observed = np.abs(obs.values[:, n]).astype(float)
        a, b = mean_path.sum(), observed.sum()
        if a > 0 and b > 0 and max(a / b, b / a) > 10:
            state.warn(f"initial mean path at node ({i}, {c}) is off the observed counts "
                       f"by more than 10x; consider inference.init_intensity")


def pin_to_trajectory(state: VariationalState, traj) -> VariationalState:
    """Replace the fields by the point-mass marginals of a fully observed path.

    The grid must contain every jump time. Intensities are set to the
    reciprocal holding time of each visited count (0 for the final count),
    so that their time integral equals the number of jumps.
    """
    grid = state.grid
    if len(traj.times) and not np.all(np.isin(traj.times, grid.times)):
        raise ValueError("grid must include every jump time of the trajectory")
    left = np.zeros(len(grid), dtype=bool)
    left[grid.jump_left] = True
    idx = np.where(left, np.searchsorted(traj.times, grid.times, side="left"),
                   np.searchsorted(traj.times, grid.times, side="right"))
    counts = traj.states()[idx]                       # (S, D)
    S = len(grid)
    for k in range(state.n_directions):
        jumps = traj.times[traj.events == k]
        final = len(jumps)
        ny = final + 2
        phi = np.zeros((S, ny))
        phi[np.arange(S), counts[:, k]] = 1.0
        enter = np.concatenate([[0.0], jumps])
        leave = np.concatenate([jumps, [grid.horizon]])
        rate = np.zeros(ny)
        rate[:final] = 1.0 / (leave[:final] - enter[:final])
        state.phi[k] = phi
        state.nu[k] = np.tile(rate, (S, 1))
        state.logr[k] = np.zeros((S, ny))
        state.kappa[k] = np.zeros((S, ny))
    return state


# ------------------------------------------------------------ driver

@dataclass
class InferenceResult:
    state: VariationalState
    elbo_trace: list = field(default_factory=list)
    elbo_terms: list = field(default_factory=list)
    converged: bool = False
    decreased: bool = False
    iterations: int = 0

    @property
    def posteriors(self) -> list[RatePosterior]:
        return self.state.posteriors

    @property
    def spec(self) -> NetworkSpec:
        return self.state.spec


def run_coordinate_ascent(spec: NetworkSpec, priors, obs: ObservationSet | None,
                          settings: EngineSettings, horizon: float, n_intervals: int = 2000,
                          grid: TimeGrid | None = None, callback=None) -> InferenceResult:
    """Iterate sweeps until the relative bound change drops below ``tol``.

    ``callback(iteration, state)`` runs after every completed iteration
    (and once after initialisation with iteration 0).
    """
    if obs is not None:
        obs.check_horizon(horizon)
    if grid is None:
        times = obs.times if obs is not None else ()
        grid = TimeGrid.build(horizon, n_intervals, times)
    state = initialize(spec, priors, obs, grid, settings)
    stats = [load_stats(state, k) for k in range(state.n_directions)]
    elbo = evaluate_elbo(state, stats)
    result = InferenceResult(state, [elbo.total], [elbo])
    if callback:
        callback(0, state)
    for it in range(1, settings.max_iters + 1):
        for k in range(state.n_directions):
            sweep_direction(state, k)
        stats = [load_stats(state, k) for k in range(state.n_directions)]
        update_rate_posteriors(state, stats)
        elbo = evaluate_elbo(state, stats)
        prev = result.elbo_trace[-1]
        result.elbo_trace.append(elbo.total)
        result.elbo_terms.append(elbo)
        result.iterations = it
        log.info("iteration %d: elbo %.6f", it, elbo.total)
        if callback:
            callback(it, state)
        if elbo.total < prev - 1e-4 * abs(elbo.total):
            result.decreased = True
            state.warn(f"bound decreased at iteration {it} ({prev:.6g} -> {elbo.total:.6g}); "
                       "the time grid may be too coarse")
        if abs(elbo.total - prev) < settings.tol * abs(elbo.total):
            result.converged = True
            break
    return result


def check_slackness(state: VariationalState) -> dict:
    """Worst violations of the cap, slackness and normalisation invariants."""
    nu_bar = state.settings.nu_bar
    worst = {"kappa_min": 0.0, "nu_excess": -math.inf, "complementarity": 0.0,
             "mass_low": 0.0, "mass_high": 0.0}
    for k in range(state.n_directions):
        kap, nu, phi = state.kappa[k], state.nu[k], state.phi[k]
        worst["kappa_min"] = min(worst["kappa_min"], float(kap.min()))
        worst["nu_excess"] = max(worst["nu_excess"], float((nu - nu_bar).max()))
        if math.isfinite(nu_bar):
            worst["complementarity"] = max(worst["complementarity"],
                                           float(np.abs(kap * (nu - nu_bar)).max()))
        mass = phi.sum(axis=1)
        worst["mass_low"] = max(worst["mass_low"], float((1 - mass).max()))
        worst["mass_high"] = max(worst["mass_high"], float((mass - 1).max()))
    return worst
