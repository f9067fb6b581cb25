"""Multi-seed execution and the three-metric summaries used by ``compare``."""

from __future__ import annotations

import csv
import logging
import os
import statistics
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from scpo_lab.config import RunConfig
from scpo_lab.trainer import METRIC_COLUMNS, read_metrics, run

log = logging.getLogger(__name__)

OUT_ENV = "SCPO_LAB_OUT"
DEFAULT_OUT = "runs"
SUMMARY_METRICS = ("J_r", "M_c", "rho_c")


def output_root(explicit=None) -> Path:
    """``--out`` if given, else ``$SCPO_LAB_OUT``, else ``./runs``."""
    if explicit:
        return Path(explicit)
    return Path(os.environ.get(OUT_ENV) or DEFAULT_OUT)


def seed_dir(root, algo: str, seed: int) -> Path:
    return Path(root) / algo / f"seed_{seed}"


def _run_one(args):
    cfg, out = args
    run(cfg, out)
    return str(out)


def run_seeds(config: RunConfig, seeds, root, parallel: bool = False) -> list[Path]:
    """Train ``config`` once per seed; each seed gets its own directory."""
    jobs = [(config.replace(seed=int(s)), seed_dir(root, config.algo, int(s))) for s in seeds]
    if parallel and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(len(jobs), os.cpu_count() or 1)) as pool:
            return [Path(p) for p in pool.map(_run_one, jobs)]
    return [Path(_run_one(job)) for job in jobs]


def final_window(rows, window: int = 10) -> dict:
    """Mean of each summary metric over the last ``window`` epochs."""
    if not rows:
        raise ValueError("no epochs to summarize")
    tail = rows[-window:]
    return {m: statistics.fmean(float(r[m]) for r in tail) for m in SUMMARY_METRICS}


def median_table(per_seed: dict) -> dict:
    """``{algo: [window summaries]} -> {algo: {metric: median}}``."""
    return {
        algo: {m: statistics.median(s[m] for s in summaries) for m in SUMMARY_METRICS}
        for algo, summaries in per_seed.items()
    }


def write_joined(path, sources: dict) -> None:
    """One CSV with ``algo, seed`` prepended to every metrics row.

    ``sources`` maps ``(algo, seed)`` to a metrics.csv path; values are
    copied verbatim.
    """
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["algo", "seed", *METRIC_COLUMNS])
        for (algo, seed), src in sources.items():
            with open(src, newline="") as inp:
                reader = csv.reader(inp)
                header = next(reader)
                if header != METRIC_COLUMNS:
                    raise ValueError(f"{src}: unexpected metrics header")
                for row in reader:
                    w.writerow([algo, seed, *row])


def write_table(path, table: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["algo", *SUMMARY_METRICS])
        for algo, vals in table.items():
            w.writerow([algo, *(repr(vals[m]) for m in SUMMARY_METRICS)])


def curves(runs: dict) -> dict:
    """Per-algorithm, per-epoch medians across seeds of the summary metrics."""
    by_algo: dict = {}
    for (algo, _seed), rows in runs.items():
        by_algo.setdefault(algo, []).append(rows)
    out = {}
    for algo, seed_rows in by_algo.items():
        n = min(len(r) for r in seed_rows)
        out[algo] = [
            {"epoch": e, **{m: statistics.median(float(r[e][m]) for r in seed_rows) for m in SUMMARY_METRICS}}
            for e in range(n)
        ]
    return out


def write_curves(path, curve_data: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["algo", "epoch", *SUMMARY_METRICS])
        for algo, points in curve_data.items():
            for p in points:
                w.writerow([algo, p["epoch"], *(repr(p[m]) for m in SUMMARY_METRICS)])


def write_svg(path, curve_data: dict) -> None:
    """Three side-by-side line charts; needs the optional matplotlib extra."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "scpo-lab"

    titles = {"J_r": "episode return", "M_c": "episode cost", "rho_c": "cost rate"}
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.5))
    for ax, metric in zip(axes, SUMMARY_METRICS):
        for algo, points in curve_data.items():
            ax.plot([p["epoch"] for p in points], [p[metric] for p in points], label=algo)
        ax.set_title(titles[metric])
        ax.set_xlabel("epoch")
    axes[0].legend()
    fig.tight_layout()
    # fixed metadata keeps the file reproducible
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def metrics_paths(root, algos, seeds) -> dict:
    return {(a, int(s)): seed_dir(root, a, int(s)) / "metrics.csv" for a in algos for s in seeds}


def load_runs(root, algos, seeds) -> dict:
    return {key: read_metrics(p) for key, p in metrics_paths(root, algos, seeds).items()}
