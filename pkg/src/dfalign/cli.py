"""Command line: generate, train, evaluate, inspect-clusters, compare-baselines."""

from __future__ import annotations

import logging
import sys
from pathlib import Path

import click

from . import pipeline
from .cascade import load_bundle
from .config import ConfigError, RunConfig
from .geometry import SUBSETS


class Context:
    def __init__(self, cfg: RunConfig, force: bool, out: str | None):
        self.cfg = cfg
        self.force = force
        self.out = out


def _fail(exc: Exception):
    raise click.ClickException(str(exc))


@click.group()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
              help="key = value configuration file")
@click.option("--seed", type=click.IntRange(0, 2 ** 64 - 1), default=None, help="top-level seed (u64)")
@click.option("--force", is_flag=True, help="replace existing output directories")
@click.option("--out", type=click.Path(file_okay=False), default=None, help="output directory")
@click.option("-v", "--verbose", count=True, help="log progress (-vv for debug)")
@click.pass_context
def main(ctx, config_path, seed, force, out, verbose):
    """Cascaded landmark alignment on synthetic garment images."""
    logging.basicConfig(level=[logging.WARNING, logging.INFO, logging.DEBUG][min(verbose, 2)],
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(config_path) if config_path else RunConfig()
        if seed is not None:
            cfg = cfg.with_overrides(seed=seed)
    except ConfigError as exc:
        _fail(exc)
    ctx.obj = Context(cfg, force, out)


@main.command()
@click.pass_obj
def generate(obj: Context):
    """Generate train/val/test splits and print the subset histogram."""
    out = obj.out or obj.cfg.data_dir
    try:
        manifest = pipeline.generate(obj.cfg, out, obj.force)
    except (pipeline.OutputExists, ValueError) as exc:
        _fail(exc)
    width = max(len(s) for s in SUBSETS)
    for split, hist in manifest["subsets"].items():
        total = sum(hist.values())
        click.echo(f"{split} ({total} samples)")
        for name in SUBSETS:
            n = hist[name]
            click.echo(f"  {name:<{width}} {n:6d} {100 * n / total:5.1f}% " + "#" * round(40 * n / total))
    click.echo(f"wrote {out} (content sha256 {manifest['content_sha256'][:16]})")


@main.command()
@click.option("--data", "data_dir", type=click.Path(file_okay=False), default=None,
              help="dataset directory (default: data_dir from the config)")
@click.pass_obj
def train(obj: Context, data_dir):
    """Train the three-stage cascade and write a bundle."""
    data_dir = data_dir or obj.cfg.data_dir
    out = obj.out or obj.cfg.bundle_dir
    try:
        result = pipeline.train(obj.cfg, data_dir, out, obj.force)
    except (pipeline.OutputExists, FileNotFoundError, ValueError) as exc:
        _fail(exc)
    sizes = [int((result.routes == b).sum()) for b in (1, 2)]
    click.echo(f"wrote {out}; stage-3 branch sizes {sizes[0]}/{sizes[1]}"
               + (" (fallback: both branches trained on all samples)" if result.fallback else ""))


@main.command()
@click.option("--bundle", type=click.Path(file_okay=False), default=None)
@click.option("--data", "data_dir", type=click.Path(file_okay=False), default=None)
@click.option("--split", "split_name", type=click.Choice(pipeline.SPLITS), default="test")
@click.pass_obj
def evaluate(obj: Context, bundle, data_dir, split_name):
    """Per-stage metrics CSVs and PDL plots for one split."""
    bundle = bundle or obj.cfg.bundle_dir
    data_dir = data_dir or obj.cfg.data_dir
    out = obj.out or str(Path(bundle) / f"eval_{split_name}")
    try:
        model = load_bundle(bundle)
        dataset = pipeline.load_splits(data_dir, (split_name,))[split_name]
        summary = pipeline.evaluate(model, dataset, obj.cfg.pdl_threshold, out, obj.force)
    except (pipeline.OutputExists, FileNotFoundError, ValueError) as exc:
        _fail(exc)
    for stage, ne in summary["mean_NE"].items():
        click.echo(f"{stage}: mean NE {ne:.4f}")
    click.echo(f"wrote {out}")


@main.command("inspect-clusters")
@click.option("--stage", type=click.IntRange(1, 3), required=True)
@click.option("--bundle", type=click.Path(file_okay=False), default=None)
@click.option("--data", "data_dir", type=click.Path(file_okay=False), default=None)
@click.pass_obj
def inspect_clusters(obj: Context, stage, bundle, data_dir):
    """Cluster populations, centers, routing errors and a nearest-sample montage."""
    bundle = bundle or obj.cfg.bundle_dir
    data_dir = data_dir or obj.cfg.data_dir
    out = obj.out or str(Path(bundle) / f"clusters_stage{stage}")
    try:
        model = load_bundle(bundle)
        train_set = pipeline.load_splits(data_dir, ("train",))["train"]
        summary = pipeline.inspect_clusters(model, bundle, train_set, stage, out, obj.force)
    except (pipeline.OutputExists, FileNotFoundError, ValueError) as exc:
        _fail(exc)
    click.echo(f"stage {stage}: {summary['k']} clusters over {summary['training_samples']} samples; wrote {out}")


@main.command("compare-baselines")
@click.option("--bundle", type=click.Path(file_okay=False), default=None,
              help="reuse a trained cascade (must share the config hash)")
@click.option("--data", "data_dir", type=click.Path(file_okay=False), default=None)
@click.pass_obj
def compare_baselines(obj: Context, bundle, data_dir):
    """Train direct regression and the patch cascade; report against the cascade."""
    data_dir = data_dir or obj.cfg.data_dir
    out = obj.out or "compare"
    try:
        summary = pipeline.compare_baselines(obj.cfg, data_dir, out, bundle, obj.force)
    except (pipeline.OutputExists, FileNotFoundError, ValueError) as exc:
        _fail(exc)
    counts = ", ".join(f"{k}: {v}" for k, v in summary["network_counts"].items())
    click.echo(f"trained networks: {counts}; wrote {out}")


if __name__ == "__main__":
    sys.exit(main())
