"""End-to-end steps shared by the command line and the benchmark.

Each step reads and writes plain directories: a dataset directory with one
sub-directory per split, a cascade bundle, and report directories. Every
output directory carries a ``manifest.json``; it is also the marker that lets
``force`` replace a directory.
"""

from __future__ import annotations

import hashlib
import json
import shutil
from collections import Counter
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import (ModelEntry, cascade_entry, compare, network_entry, train_direct,
                        train_patch_cascade, write_pdl_svg, write_report_csv)
from .cascade import (CascadeModel, cluster_space, load_bundle, predict, read_assignments, save_bundle,
                      train_cascade)
from .config import RunConfig
from .geometry import SUBSETS, mean_ne, metrics_rows, pdl_curve, write_metrics_csv
from .pseudolabel import squared_distances, write_cluster_csv
from .synth import Dataset, generate_dataset, load_dataset, save_dataset, split

SPLITS = ("train", "val", "test")


class OutputExists(FileExistsError):
    pass


def prepare_output(path, force: bool) -> Path:
    """Create ``path``; an existing non-empty directory needs ``force`` and a manifest."""
    path = Path(path)
    if path.exists():
        if not path.is_dir():
            raise OutputExists(f"{path} exists and is not a directory")
        if any(path.iterdir()):
            if not force:
                raise OutputExists(f"{path} already exists (use --force to replace it)")
            if not (path / "manifest.json").exists():
                raise OutputExists(f"{path} is not an output directory of this tool; refusing to replace it")
            shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def file_digest(paths) -> str:
    h = hashlib.sha256()
    for p in sorted(Path(p) for p in paths):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


# -- data -------------------------------------------------------------------------

def make_splits(cfg: RunConfig) -> dict[str, Dataset]:
    total = cfg.n_train + cfg.n_val + cfg.n_test
    ds = generate_dataset(cfg.generation(total), cfg.seed)
    parts = split(ds, [cfg.n_train / total, cfg.n_val / total, cfg.n_test / total], cfg.seed)
    return dict(zip(SPLITS, parts))


def subset_histogram(dataset: Dataset) -> dict[str, int]:
    counts = Counter(dataset.subsets)
    return {s: counts.get(s, 0) for s in SUBSETS}


def generate(cfg: RunConfig, out, force=False) -> dict:
    out = prepare_output(out, force)
    splits = make_splits(cfg)
    for name, ds in splits.items():
        save_dataset(ds, out / name)
    files = [p for name in SPLITS for p in (out / name).rglob("*") if p.is_file()]
    manifest = {"package_version": __version__, "seed": cfg.seed, "config_hash": cfg.hash(),
                "sizes": {k: len(v) for k, v in splits.items()},
                "subsets": {k: subset_histogram(v) for k, v in splits.items()},
                "content_sha256": file_digest(files)}
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    write_json(out / "manifest.json", manifest)
    return manifest


def load_splits(data_dir, names=SPLITS) -> dict[str, Dataset]:
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {data_dir}")
    return {n: load_dataset(data_dir / n) for n in names}


def data_manifest(data_dir) -> dict:
    p = Path(data_dir) / "manifest.json"
    return json.loads(p.read_text()) if p.exists() else {}


# -- training ----------------------------------------------------------------------

def train(cfg: RunConfig, data_dir, out, force=False):
    data = load_splits(data_dir, ("train", "val"))
    out = prepare_output(out, force)
    result = train_cascade(data["train"], cfg.training(), cfg.seed, data["val"])
    extra = {"config_hash": cfg.hash(), "seed": cfg.seed,
             "data_sha256": data_manifest(data_dir).get("content_sha256", "")}
    save_bundle(out, result, data["train"].sample_ids, extra)
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    return result


# -- evaluation ------------------------------------------------------------------------

def stage_predictions(model: CascadeModel, dataset: Dataset):
    p = predict(model, dataset.images)
    return {"stage1": p.stage1, "stage2": p.stage2, "stage3": p.stage3}, p.branches


def evaluate(model: CascadeModel, dataset: Dataset, threshold_px: float, out, force=False,
             thresholds=None) -> dict:
    """Metrics CSVs for every stage (``metrics.csv`` is the final stage) plus PDL plots."""
    n_model = model.stage1.arch.n_landmarks
    if dataset.n_landmarks != n_model:
        raise ValueError(f"dataset has {dataset.n_landmarks} landmarks, model predicts {n_model}")
    if dataset.image_size != model.stage1.arch.input_size:
        raise ValueError(f"dataset images are {dataset.image_size} px, model expects "
                         f"{model.stage1.arch.input_size} px")
    out = prepare_output(out, force)
    preds, branches = stage_predictions(model, dataset)
    summary = evaluate_predictions(preds, dataset, threshold_px, out, thresholds)
    summary["branch_counts"] = [int(np.sum(branches == 1)), int(np.sum(branches == 2))]
    write_json(out / "manifest.json", summary)
    return summary


def evaluate_predictions(preds: dict[str, np.ndarray], dataset: Dataset, threshold_px: float,
                         out, thresholds=None) -> dict:
    """Write one metrics CSV per entry of ``preds`` and the PDL plots; return a summary."""
    out = Path(out)
    gt, vis, subsets = dataset.normalized, dataset.visibility, dataset.subsets
    size = dataset.image_size
    thresholds = np.arange(1, 21, dtype=float) if thresholds is None else np.asarray(thresholds, float)
    names = list(preds)
    summary = {"threshold_px": threshold_px, "image_side": size, "samples": len(dataset),
               "mean_NE": {}, "subset_NE": {}}
    curves = {}
    for name in names:
        rows = metrics_rows(preds[name], gt, vis, subsets, threshold_px, size)
        write_metrics_csv(out / f"metrics_{name}.csv", rows)
        summary["mean_NE"][name] = mean_ne(preds[name], gt, vis)
        summary["subset_NE"][name] = {r[0]: r[2] for r in rows if r[1] == "mean" and r[0] != "all"}
        curves[name] = pdl_curve(preds[name], gt, vis, thresholds, size)
    final = names[-1]
    shutil.copyfile(out / f"metrics_{final}.csv", out / "metrics.csv")
    write_pdl_svg(out / "pdl_stages.svg", thresholds, curves, "PDL by stage (all test samples)")
    sub_arr = np.asarray(subsets)
    sub_curves = {s: pdl_curve(preds[final][sub_arr == s], gt[sub_arr == s], vis[sub_arr == s],
                               thresholds, size)
                  for s in SUBSETS if np.any(sub_arr == s)}
    write_pdl_svg(out / "pdl_subsets.svg", thresholds, sub_curves, f"PDL by subset ({final})")
    summary["pdl_thresholds"] = thresholds.tolist()
    return summary


# -- cluster inspection ---------------------------------------------------------------

def inspect_clusters(model: CascadeModel, bundle, train_set: Dataset, stage: int, out, force=False,
                     per_cluster: int = 6) -> dict:
    """Population, center and (stage 2) routing error per cluster, plus a montage."""
    if stage not in (1, 2, 3):
        raise ValueError(f"stage must be 1, 2 or 3, got {stage}")
    cm = model.clusters[stage - 1]
    if cm is None:
        raise ValueError(f"bundle has no stage-{stage} cluster model")
    assign_map = read_assignments(bundle, stage)
    missing = [s for s in train_set.sample_ids if s not in assign_map]
    if missing:
        raise ValueError(f"training split does not match the bundle: {len(missing)} samples without assignment")
    assign = np.array([assign_map[s] for s in train_set.sample_ids])
    out = prepare_output(out, force)
    populations = np.bincount(assign, minlength=cm.k)
    errors = model.routing.errors if stage == 2 else None
    write_cluster_csv(out / "clusters.csv", populations, errors)
    with open(out / "centers.csv", "w", encoding="utf-8") as fh:
        fh.write(",".join(["cluster_id"] + [f"c{j}" for j in range(cm.dim)]) + "\n")
        for k, c in enumerate(cm.centers):
            fh.write(",".join([str(k)] + [repr(float(v)) for v in c]) + "\n")
    space = cluster_space(model, train_set, stage)
    d2 = squared_distances(space, cm.centers)
    nearest = np.argsort(d2, axis=0, kind="stable")[:per_cluster].T   # (K, per_cluster)
    write_montage(out / "montage.svg", train_set, nearest, populations)
    summary = {"stage": stage, "k": cm.k, "space": cm.space, "temperature": cm.temperature,
               "training_samples": int(populations.sum())}
    write_json(out / "manifest.json", summary)
    return summary


def write_montage(path, dataset: Dataset, nearest, populations):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    k, m = nearest.shape
    with matplotlib.rc_context({"svg.hashsalt": "dfalign", "svg.fonttype": "none"}):
        fig, axes = plt.subplots(k, m, figsize=(m * 0.9, k * 0.9), squeeze=False)
        for i in range(k):
            for j in range(m):
                ax = axes[i, j]
                idx = nearest[i, j]
                ax.imshow(dataset.images[idx], cmap="gray", vmin=0, vmax=1, interpolation="nearest")
                pts = dataset.coords[idx][dataset.visibility[idx] != 2]
                ax.scatter(pts[:, 0] - 0.5, pts[:, 1] - 0.5, s=3, c="tab:red")
                ax.set_xticks([])
                ax.set_yticks([])
                if j == 0:
                    ax.set_ylabel(f"{i} ({populations[i]})", fontsize=6)
        fig.tight_layout(pad=0.2)
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)


# -- baselines comparison ----------------------------------------------------------------

def compare_baselines(cfg: RunConfig, data_dir, out, bundle=None, force=False) -> dict:
    """Train the baseline arms on the same splits and seed, then write the report."""
    data = load_splits(data_dir)
    tcfg = cfg.training()
    if bundle is not None:
        manifest = json.loads((Path(bundle) / "manifest.json").read_text())
        if manifest.get("config_hash") != cfg.hash():
            raise ValueError(f"bundle {bundle} was trained with a different configuration "
                             f"({manifest.get('config_hash', '?')[:12]} vs {cfg.hash()[:12]})")
        dfa = load_bundle(bundle)
    else:
        dfa = train_cascade(data["train"], tcfg, cfg.seed, data["val"]).model
    out = prepare_output(out, force)
    direct = train_direct(data["train"], tcfg, cfg.seed, data["val"])
    patch = train_patch_cascade(data["train"], direct.net, tcfg, cfg.seed, data["val"])
    entries = [cascade_entry("DFA", dfa), network_entry("direct", direct.net),
               ModelEntry("patch-cascade", patch.predict_landmarks, patch.n_networks)]
    report = compare(entries, data["test"], cfg.pdl_threshold)
    write_report_csv(out / "report.csv", report)
    write_pdl_svg(out / "pdl_models.svg", report.thresholds, report.curves, "PDL by model (test)")
    summary = {"config_hash": cfg.hash(), "seed": cfg.seed, "threshold_px": cfg.pdl_threshold,
               "network_counts": report.network_counts, "patch_size": patch.patch,
               "empty_crops": patch.empty_crops}
    write_json(out / "manifest.json", summary)
    return summary
