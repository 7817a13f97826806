"""Tables derived from an inference result, and their CSV writers.

Service rates aggregate the outflow directions of a (station, class):
``mu = sum of lambda_eta`` is reported as ``Gamma(sum of shapes, rate)``,
which is exact when the directions share one rate parameter. Shapes are
moment-matched when they do not.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from ..netmodel import NetworkSpec
from ..observations import node_label
from .engine import InferenceResult, VariationalState, has_queue, queue_length_distribution
from .posteriors import SUMMARY_COLUMNS, RatePosterior, summary_row

BAND_COLUMNS = ("time", "node", "mean", "q2.5", "q50", "q97.5", "neg_mass")
ROUTING_COLUMNS = ("station", "class", "destination", "probability", "concentration")
ELBO_COLUMNS = ("iteration", "elbo", "observation", "kl", "path")
DIRECTION_COLUMNS = ("direction",) + SUMMARY_COLUMNS[1:] + ("shape", "rate_param")


def write_csv(path: str | Path, header, rows):
    """UTF-8, RFC 4180 quoting, CRLF records, header first."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, quoting=csv.QUOTE_MINIMAL, lineterminator="\r\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])


def read_csv(path: str | Path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows:
        raise ValueError(f"{path}: empty file")
    return rows[0], rows[1:]


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def rate_name(spec: NetworkSpec, i: int, c: int) -> str:
    return f"mu_{i}_{spec.classes[c].name}"


def direction_name(spec: NetworkSpec, k: int) -> str:
    i, j, c = spec.transitions.directions[k]
    return f"lambda_{i}_{j}_{spec.classes[c].name}"


def aggregate(posts: list[RatePosterior]) -> RatePosterior:
    """Posterior of a sum of independent Gamma rates."""
    if all(p.fixed for p in posts):
        return RatePosterior.fixed_at(sum(p.value for p in posts))
    if any(p.fixed for p in posts):
        raise ValueError("cannot aggregate fixed and inferred rates")
    rates = np.array([p.rate for p in posts])
    shapes = np.array([p.shape for p in posts])
    prior_shape = sum(p.prior_shape for p in posts)
    if np.allclose(rates, rates[0], rtol=1e-12, atol=0):
        return RatePosterior(float(shapes.sum()), float(rates[0]), prior_shape, posts[0].prior_rate)
    mean = float((shapes / rates).sum())
    var = float((shapes / rates ** 2).sum())
    return RatePosterior(mean ** 2 / var, mean / var, prior_shape,
                         float(np.mean([p.prior_rate for p in posts])))


def service_posteriors(spec: NetworkSpec, posts) -> list[tuple[str, RatePosterior]]:
    """Aggregated posterior of every inferred service rate, in station/class order."""
    tr = spec.transitions
    out = []
    for i in range(spec.n_stations):
        for c in range(spec.n_classes):
            ks = tr.outflow[(i, c)]
            if not ks or any(posts[k].fixed for k in ks):
                continue
            out.append((rate_name(spec, i, c), aggregate([posts[k] for k in ks])))
    return out


def routing_rows(spec: NetworkSpec, posts) -> list[list]:
    """Routing point estimates with Dirichlet concentrations (shape increments)."""
    tr = spec.transitions
    rows = []
    for i in range(spec.n_stations):
        for c in range(spec.n_classes):
            ks = tr.outflow[(i, c)]
            if len(ks) < 2 or any(posts[k].fixed for k in ks):
                continue
            total = sum(posts[k].mean for k in ks)
            for k in ks:
                p = posts[k]
                rows.append([i, spec.classes[c].name, tr.directions[k].destination,
                             p.mean / total, p.shape - p.prior_shape])
    return rows


def _quantile_index(cdf: np.ndarray, q: float) -> np.ndarray:
    return np.minimum((cdf < q - 1e-12).sum(axis=1), cdf.shape[1] - 1)


def credible_bands(state: VariationalState) -> list[list]:
    """Per node and grid time: mean and 95% band of the queue length.

    Summaries use the law restricted to ``x >= 0`` and renormalised; the
    discarded negative mass is reported alongside.
    """
    spec = state.spec
    times = state.grid.times
    keep = np.r_[np.diff(times) > 0, True]  # one row per distinct time
    rows = []
    for i in range(spec.n_stations):
        if not has_queue(spec, i):
            continue
        for c in range(spec.n_classes):
            if not (spec.transitions.inflow[(i, c)] or spec.transitions.outflow[(i, c)]):
                continue
            dist = queue_length_distribution(state, i, c)
            neg = dist.mass_below(0)
            cut = max(0, -dist.lo)
            p = dist.p[:, cut:]
            support = np.arange(dist.lo + cut, dist.lo + cut + p.shape[1])
            mass = p.sum(axis=1, keepdims=True)
            p = np.where(mass > 0, p / np.where(mass > 0, mass, 1), 0)
            cdf = np.cumsum(p, axis=1)
            mean = p @ support
            qs = [support[_quantile_index(cdf, q)] for q in (0.025, 0.5, 0.975)]
            label = node_label(spec, (i, c))
            for s in np.nonzero(keep)[0]:
                rows.append([float(times[s]), label, float(mean[s]), int(qs[0][s]),
                             int(qs[1][s]), int(qs[2][s]), float(neg[s])])
    return rows


def write_result(result: InferenceResult, out_dir: str | Path) -> list[Path]:
    """Write summary, bands, ELBO trace, direction and routing tables."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec, posts = result.spec, result.posteriors
    files = []

    def emit(name, header, rows):
        write_csv(out / name, header, rows)
        files.append(out / name)

    emit("posterior_summary.csv", SUMMARY_COLUMNS,
         [summary_row(n, p) for n, p in service_posteriors(spec, posts)])
    emit("direction_posteriors.csv", DIRECTION_COLUMNS,
         [[*summary_row(direction_name(spec, k), p), p.shape, p.rate]
          for k, p in enumerate(posts) if not p.fixed])
    routing = routing_rows(spec, posts)
    if routing:
        emit("routing.csv", ROUTING_COLUMNS, routing)
    emit("credible_bands.csv", BAND_COLUMNS, credible_bands(result.state))
    emit("elbo_trace.csv", ELBO_COLUMNS,
         [[it, t.total, t.observation, t.kl, t.path] for it, t in enumerate(result.elbo_terms)])
    return files
