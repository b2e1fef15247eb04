"""Standard synthetic benchmark: ablation arms over several seeds.

Per seed the run generates 2000/400/400 samples and trains

* stage 1 with visibility and pseudo-labels (the cascade's first stage),
* direct regression (positions + visibility) and direct regression without
  visibility, sharing stage 1's initial weights and batch order,
* stages 2 and 3 of the cascade with auto-routing,
* the two-branch control: both stage-3 branches on all data, averaged.

Seeds run in separate processes; the per-seed wall time on one core is what a
machine with at least as many cores as seeds needs for the whole run.

Usage: ``python -m dfalign.benchmark [--seeds 0,1,2] [--workers N] [--out DIR]``
"""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import click
import numpy as np

from .baselines import train_direct, train_two_branch
from .cascade import predict, train_cascade, train_stage1
from .config import RunConfig
from .geometry import SUBSETS, mean_ne, metrics_rows
from .pipeline import make_splits

SEEDS = (0, 1, 2)
# 2000 iterations per network with the schedule breakpoints kept at 1/3 and 2/3
OVERRIDES = dict(iterations=2000, t1=667, t2=1333, learning_rate=0.05, log_every=250, val_every=250)
TOLERANCE = 0.002
TIME_LIMIT_S = 30 * 60
ARMS = ("direct_no_visibility", "direct", "stage1", "stage2", "stage3", "two_branch")


def benchmark_config(seed: int, **overrides) -> RunConfig:
    return RunConfig().with_overrides(seed=seed, **{**OVERRIDES, **overrides})


def run_seed(seed: int, overrides: dict | None = None) -> dict:
    """Train every arm for one seed; returns test NE per arm and stage-1 subset NE."""
    # keep each worker on one BLAS thread so timings mean "one core"
    cfg = benchmark_config(seed, **(overrides or {}))
    t0 = time.perf_counter()
    data = make_splits(cfg)
    train, val, test = data["train"], data["val"], data["test"]
    tc = cfg.training()
    s1 = train_stage1(train, tc, seed, val)
    direct = train_direct(train, tc, seed, val, with_pseudolabels=False, with_visibility=True)
    no_vis = train_direct(train, tc, seed, val, with_pseudolabels=False, with_visibility=False)
    cascade = train_cascade(train, tc, seed, val, stage1=s1)
    two, _ = train_two_branch(train, cascade.model, tc, seed, val)
    seconds = time.perf_counter() - t0

    gt, vis = test.normalized, test.visibility
    p = predict(cascade.model, test.images)
    preds = {
        "direct_no_visibility": no_vis.net.predict(test.images)[0].reshape(gt.shape),
        "direct": direct.net.predict(test.images)[0].reshape(gt.shape),
        "stage1": p.stage1, "stage2": p.stage2, "stage3": p.stage3,
        "two_branch": two.predict_landmarks(test.images),
    }
    rows = metrics_rows(p.stage1, gt, vis, test.subsets, cfg.pdl_threshold, test.image_size)
    return {
        "seed": seed,
        "config_hash": cfg.hash(),
        "seconds": seconds,
        "test_NE": {k: mean_ne(v, gt, vis) for k, v in preds.items()},
        "stage1_subset_NE": {r[0]: r[2] for r in rows if r[1] == "mean" and r[0] in SUBSETS},
        "train_branch_sizes": [int(np.sum(cascade.routes == 1)), int(np.sum(cascade.routes == 2))],
        "test_branch_sizes": [int(np.sum(p.branches == 1)), int(np.sum(p.branches == 2))],
        "routing_fallback": bool(cascade.fallback),
    }


def _worker(args):
    os.environ.setdefault("OMP_NUM_THREADS", "1")
    return run_seed(*args)


def summarize(results: list[dict]) -> dict:
    """Medians over seeds and the directional checks."""
    med = {a: float(np.median([r["test_NE"][a] for r in results])) for a in ARMS}
    sub = {s: float(np.median([r["stage1_subset_NE"][s] for r in results])) for s in SUBSETS}
    checks = {
        "visibility_helps": med["direct"] < med["direct_no_visibility"],
        "pseudolabels_help": med["stage1"] < med["direct"],
        "stage2_not_worse": med["stage2"] <= med["stage1"] + TOLERANCE,
        "stage3_not_worse": med["stage3"] <= med["stage2"] + TOLERANCE,
        "routing_beats_two_branch": med["stage3"] <= med["two_branch"],
        "large_zoom_hardest": max(sub, key=sub.get) == "large-zoom",
        "runtime_per_seed": max(r["seconds"] for r in results) < TIME_LIMIT_S,
    }
    return {"seeds": [r["seed"] for r in results], "median_test_NE": med,
            "median_stage1_subset_NE": sub, "max_seed_seconds": max(r["seconds"] for r in results),
            "checks": checks, "per_seed": results}


def run_benchmark(seeds=SEEDS, workers: int | None = None, overrides: dict | None = None) -> dict:
    workers = workers or min(len(seeds), os.cpu_count() or 1)
    t0 = time.perf_counter()
    jobs = [(s, overrides) for s in seeds]
    if workers <= 1:
        results = [run_seed(*j) for j in jobs]
    else:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_worker, jobs))
    summary = summarize(results)
    summary["wall_seconds"] = time.perf_counter() - t0
    summary["workers"] = workers
    return summary


@click.command()
@click.option("--seeds", default=",".join(map(str, SEEDS)), help="comma-separated seeds")
@click.option("--workers", type=int, default=None, help="parallel processes (default: min(seeds, cores))")
@click.option("--out", type=click.Path(dir_okay=False), default="benchmark.json")
def main(seeds, workers, out):
    """Run the standard benchmark and write a JSON summary."""
    seeds = tuple(int(s) for s in seeds.split(",") if s.strip())
    summary = run_benchmark(seeds, workers)
    Path(out).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    for arm, ne in summary["median_test_NE"].items():
        click.echo(f"{arm:>22}: median test NE {ne:.4f}")
    for name, ok in summary["checks"].items():
        click.echo(f"{'PASS' if ok else 'FAIL'} {name}")


if __name__ == "__main__":
    main()
