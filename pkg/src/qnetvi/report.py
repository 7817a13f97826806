"""Side-by-side comparison of result directories, with optional figures."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .meanfield.posteriors import SUMMARY_COLUMNS
from .meanfield.summary import read_csv, write_csv


class ReportError(ValueError):
    pass


def _label(d: Path) -> str:
    man = d / "manifest.json"
    cmd = ""
    if man.exists():
        cmd = json.loads(man.read_text(encoding="utf-8")).get("command", "")
    return f"{d.name}:{cmd}" if cmd else d.name


def _summary(d: Path) -> dict[str, dict[str, float]]:
    path = d / "posterior_summary.csv"
    if not path.exists():
        raise ReportError(f"{d}: no posterior_summary.csv")
    header, rows = read_csv(path)
    if tuple(header) != SUMMARY_COLUMNS:
        raise ReportError(f"{path}: unexpected columns {header}")
    return {r[0]: {h: float(v) for h, v in zip(header[1:], r[1:])} for r in rows}


def merge_summaries(dirs: list[Path]) -> tuple[list[str], list[list]]:
    """One row per rate and every source's summary columns side by side."""
    if not dirs:
        raise ReportError("need at least one result directory")
    tables = [_summary(d) for d in dirs]
    names = set(tables[0])
    for d, t in zip(dirs[1:], tables[1:]):
        if set(t) != names:
            only_first = sorted(names - set(t))
            only_here = sorted(set(t) - names)
            raise ReportError(f"rate sets differ between {dirs[0]} and {d}: "
                              f"only in first {only_first}, only in second {only_here}")
    labels = [_label(d) for d in dirs]
    if len(set(labels)) != len(labels):
        labels = [f"{n}#{i}" for i, n in enumerate(labels)]
    header = ["rate"] + [f"{lab}.{col}" for lab in labels for col in SUMMARY_COLUMNS[1:]]
    order = [n for n in tables[0]]  # keep the first source's ordering
    rows = [[n] + [t[n][col] for t in tables for col in SUMMARY_COLUMNS[1:]] for n in order]
    return header, rows


def build_report(dirs: list[Path], out: Path, figures: bool = True) -> list[Path]:
    header, rows = merge_summaries(dirs)
    files = [out / "comparison.csv"]
    write_csv(files[0], header, rows)
    if figures:
        files += draw_figures(dirs, out)
    return files


# ------------------------------------------------------------------ figures

def _chain(d: Path):
    path = d / "chain.csv"
    if not path.exists():
        return None
    header, rows = read_csv(path)
    return header[1], np.array([float(r[1]) for r in rows])


def draw_figures(dirs: list[Path], out: Path) -> list[Path]:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from scipy import stats

    files = []
    tables = [(d, _summary(d)) for d in dirs]
    names = list(tables[0][1])
    ncol = min(len(names), 5)
    nrow = -(-len(names) // ncol)
    fig, axes = plt.subplots(nrow, ncol, figsize=(3.2 * ncol, 2.6 * nrow), squeeze=False)
    for ax, name in zip(axes.flat, names):
        lo = min(t[name]["q2.5"] for _, t in tables)
        hi = max(t[name]["q97.5"] for _, t in tables)
        pad = 0.3 * (hi - lo) + 1e-9
        x = np.linspace(max(lo - pad, 0.0), hi + pad, 400)
        for d, t in tables:
            ch = _chain(d)
            if ch is not None and ch[0] == name:
                ax.hist(ch[1], bins=60, density=True, alpha=0.4, label=_label(d))
            else:
                m, s = t[name]["mean"], t[name]["sd"]
                if s > 0:
                    ax.plot(x, stats.gamma.pdf(x, (m / s) ** 2, scale=s ** 2 / m), label=_label(d))
                else:
                    ax.axvline(m, label=_label(d))
        ax.set_title(name, fontsize=9)
    for ax in list(axes.flat)[len(names):]:
        ax.axis("off")
    axes.flat[0].legend(fontsize=7)
    fig.tight_layout()
    files.append(out / "posterior_densities.png")
    fig.savefig(files[-1], dpi=110)
    plt.close(fig)

    for d in dirs:
        bands = d / "credible_bands.csv"
        if bands.exists():
            files.append(_band_figure(plt, d, out))
        trace = d / "elbo_trace.csv"
        if trace.exists():
            _, rows = read_csv(trace)
            fig, ax = plt.subplots(figsize=(5, 3.2))
            it = [int(r[0]) for r in rows]
            val = [float(r[1]) for r in rows]
            ax.plot(it[1:], val[1:], "o-", ms=3)
            ax.set_xlabel("iteration")
            ax.set_ylabel("evidence lower bound")
            fig.tight_layout()
            files.append(out / f"elbo_{d.name}.png")
            fig.savefig(files[-1], dpi=110)
            plt.close(fig)
    return files


def _band_figure(plt, d: Path, out: Path) -> Path:
    _, rows = read_csv(d / "credible_bands.csv")
    nodes = list(dict.fromkeys(r[1] for r in rows))
    obs = None
    if (d / "observations.csv").exists():
        oh, orows = read_csv(d / "observations.csv")
        obs = (oh, np.array([[float(v) for v in r] for r in orows]).reshape(len(orows), len(oh)))
    ncol = min(len(nodes), 2)
    nrow = -(-len(nodes) // ncol)
    fig, axes = plt.subplots(nrow, ncol, figsize=(5 * ncol, 2.4 * nrow), squeeze=False)
    for ax, node in zip(axes.flat, nodes):
        sel = [r for r in rows if r[1] == node]
        t = np.array([float(r[0]) for r in sel])
        ax.fill_between(t, [float(r[3]) for r in sel], [float(r[5]) for r in sel],
                        color="0.75", step="mid")
        ax.plot(t, [float(r[2]) for r in sel], color="0.2", lw=0.8)
        if obs is not None and node in obs[0]:
            ax.plot(obs[1][:, 0], obs[1][:, obs[0].index(node)], "k.", ms=4)
        ax.set_title(node, fontsize=9)
    for ax in list(axes.flat)[len(nodes):]:
        ax.axis("off")
    fig.tight_layout()
    path = out / f"bands_{d.name}.png"
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path
