"""Comparison arms: direct regression, the two-branch averaging control and a patch cascade.

The patch cascade follows the classic part-based recipe: a whole-image
regressor, then for each later stage one small network per landmark that
looks only at a square crop around the current estimate.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .cascade import (CascadeModel, StageResult, Targets, TrainConfig, fit_stage, position_targets,
                      predict as cascade_predict, stage3_inputs, train_stage1, train_stage3)
from .geometry import LANDMARK_NAMES, SUBSETS, landmark_errors, mean_ne, pdl
from .network import StageNetwork
from .seeding import rng_for


def train_direct(train, cfg: TrainConfig, seed: int, val=None, with_pseudolabels=False,
                 with_visibility=True, name="stage1") -> StageResult:
    """Single whole-image regressor; the flags select the stage-1 ablation arm.

    The default ``name`` shares the stage-1 seed streams, so arms differ only
    in their loss terms (same initial weights, same batch order).
    """
    return train_stage1(train, cfg, seed, val, with_pseudolabels=with_pseudolabels,
                        with_visibility=with_visibility, name=name)


# -- two-branch averaging control ------------------------------------------------

@dataclass
class TwoBranchModel:
    """Stage 1-2 of a cascade plus two stage-3 nets trained on all data, averaged."""
    stage1: StageNetwork
    stage2: StageNetwork
    branches: tuple[StageNetwork, StageNetwork]

    n_networks = 4

    def predict_landmarks(self, images) -> np.ndarray:
        est2, _, aux = stage3_inputs(images, self.stage1, self.stage2)
        c = sum(b.predict(images, aux)[0] for b in self.branches) / 2
        return (est2 + c).reshape(len(images), -1, 2)


def train_two_branch(train, model: CascadeModel, cfg: TrainConfig, seed: int, val=None):
    """Stage-3 control: both branches see every training sample; outputs are averaged.

    Uses the same stage-3 seed streams as auto-routing so only the data
    partition and the combination rule differ.
    """
    # a single explicit partition makes both branches train on everything
    routes = np.ones(len(train), dtype=int)
    res = train_stage3(train, model.stage1, model.stage2, model.routing, cfg, seed, val,
                       routes=routes, warn_fallback=False)
    return TwoBranchModel(model.stage1, model.stage2, res.branches), res


# -- patch cascade --------------------------------------------------------------

def patch_size(image_size: int, reference_patch=120, reference_image=224) -> int:
    """Crop side scaled from the reference 120 px on 224 px images (34 px at 64)."""
    return int(round(reference_patch / reference_image * image_size))


def padded_size(patch: int, pools: int = 2) -> int:
    step = 2 ** pools
    return -(-patch // step) * step


def extract_patches(images, centers_px, patch: int, out_size: int | None = None):
    """Square crops centered at ``centers_px`` (S, 2) in pixel (x, y).

    Regions outside the image are zero-filled. The crop sits in the middle of
    an ``out_size`` canvas (zero border). Returns (patches, empty) where
    ``empty`` flags crops that did not overlap the image at all.
    """
    images = np.asarray(images)
    n, h, w = images.shape
    out_size = out_size or patch
    pad = (out_size - patch) // 2
    out = np.zeros((n, out_size, out_size), dtype=images.dtype)
    empty = np.zeros(n, dtype=bool)
    origin = np.floor(np.asarray(centers_px, float) - patch / 2 + 0.5).astype(int)
    for i, (x0, y0) in enumerate(origin):
        xs, ys = max(x0, 0), max(y0, 0)
        xe, ye = min(x0 + patch, w), min(y0 + patch, h)
        if xe <= xs or ye <= ys:
            empty[i] = True
            continue
        out[i, pad + ys - y0:pad + ye - y0, pad + xs - x0:pad + xe - x0] = images[i, ys:ye, xs:xe]
    return out, empty


def _to_px(norm, image_size):
    # the benchmark box is the full frame: center image_size/2, side image_size
    return np.asarray(norm) * image_size + image_size / 2


@dataclass
class PatchCascadeModel:
    stage1: StageNetwork
    stages: list[list[StageNetwork]]          # stages[s][i]: net for landmark i at stage s+2
    patch: int
    image_size: int
    side: int                                  # network input side (patch plus zero border)
    empty_crops: list[int] = field(default_factory=list)

    @property
    def n_networks(self) -> int:
        return 1 + sum(len(s) for s in self.stages)

    def refine(self, images, est, nets):
        """One patch stage: each landmark's net corrects its own estimate."""
        est = est.copy()
        empty_total = 0
        for i, net in enumerate(nets):
            crops, empty = extract_patches(images, _to_px(est[:, i], self.image_size), self.patch, self.side)
            empty_total += int(empty.sum())
            est[:, i] += net.predict(crops)[0]
        return est, empty_total

    def predict_stages(self, images) -> list[np.ndarray]:
        images = np.asarray(images)
        est = self.stage1.predict(images)[0].reshape(len(images), -1, 2)
        out = [est]
        for nets in self.stages:
            est, _ = self.refine(images, est, nets)
            out.append(est)
        return out

    def predict_landmarks(self, images) -> np.ndarray:
        return self.predict_stages(images)[-1]


def train_patch_cascade(train, stage1: StageNetwork, cfg: TrainConfig, seed: int, val=None,
                        n_stages: int = 3) -> PatchCascadeModel:
    """Train the per-landmark patch nets of stages 2..n on crops around the running estimate."""
    size = train.image_size
    patch = patch_size(size)
    side = padded_size(patch, len(cfg.channels))
    arch = cfg.architecture(1, side, aux_dim=0, n_clusters=0)
    model = PatchCascadeModel(stage1, [], patch, size, side)
    coords = train.normalized
    est = stage1.predict(train.images)[0].reshape(coords.shape)
    val_est = None if val is None else stage1.predict(val.images)[0].reshape(val.normalized.shape)
    for s in range(2, n_stages + 1):
        nets = []
        empty_total = 0
        for i in range(train.n_landmarks):
            name = f"patch_stage{s}_landmark{i}"
            crops, empty = extract_patches(train.images, _to_px(est[:, i], size), patch, side)
            empty_total += int(empty.sum())
            pos, mask = position_targets(coords[:, i:i + 1], train.visibility[:, i:i + 1], base=est[:, i:i + 1])
            targets = Targets(pos, mask, train.visibility[:, i:i + 1], None)
            net = StageNetwork.initialize(arch, rng_for(seed, name, "init"))
            val_fn = None
            if val is not None:
                v_crops, _ = extract_patches(val.images, _to_px(val_est[:, i], size), patch, side)
                v_gt, v_vis, v_base = val.normalized[:, i:i + 1], val.visibility[:, i:i + 1], val_est[:, i:i + 1]

                def val_fn(n, v_crops=v_crops, v_gt=v_gt, v_vis=v_vis, v_base=v_base):
                    p = v_base + n.predict(v_crops)[0].reshape(v_base.shape)
                    return mean_ne(p, v_gt, v_vis)
            fit_stage(net, crops, None, targets, cfg, seed, name, use_visibility=True,
                      use_labels=False, val_fn=val_fn)
            nets.append(net)
        model.stages.append(nets)
        model.empty_crops.append(empty_total)
        est, _ = model.refine(train.images, est, nets)
        if val is not None:
            val_est, _ = model.refine(val.images, val_est, nets)
    return model


# -- comparison report -------------------------------------------------------------

@dataclass
class ModelEntry:
    name: str
    predict: Callable[[np.ndarray], np.ndarray]   # images -> (S, N, 2) normalized
    n_networks: int


def cascade_entry(name: str, model: CascadeModel) -> ModelEntry:
    return ModelEntry(name, lambda im: cascade_predict(model, im).stage3, model.n_networks)


def network_entry(name: str, net: StageNetwork) -> ModelEntry:
    return ModelEntry(name, lambda im: net.predict(im)[0].reshape(len(im), -1, 2), 1)


REPORT_HEADER = ("section", "name", "model", "NE", "PDL@threshold", "sample_count", "n_networks")


@dataclass
class Report:
    rows: list[tuple]
    thresholds: np.ndarray
    curves: dict[str, np.ndarray]       # model -> PDL per threshold (all test landmarks)
    threshold_px: float
    network_counts: dict[str, int]


def compare(models: list[ModelEntry], test, threshold_px: float, thresholds=None,
            names=LANDMARK_NAMES) -> Report:
    """Per-landmark and per-subset NE/PDL for every model, plus PDL curves.

    Rows: one per (landmark, model) then one per (subset, model).
    """
    size = test.image_size
    thresholds = np.arange(1, 21, dtype=float) if thresholds is None else np.asarray(thresholds, float)
    gt, vis = test.normalized, test.visibility
    subsets = np.asarray(test.subsets)
    preds = {m.name: np.asarray(m.predict(test.images)) for m in models}
    rows = []
    for i, lm in enumerate(names):
        for m in models:
            e = landmark_errors(preds[m.name][:, i], gt[:, i], vis[:, i])
            cnt = int(np.sum(~np.isnan(e)))
            ne = float(np.nanmean(e)) if cnt else float("nan")
            rate = pdl(preds[m.name][:, i:i + 1], gt[:, i:i + 1], vis[:, i:i + 1], threshold_px, size) if cnt else float("nan")
            rows.append(("landmark", lm, m.name, ne, rate, cnt, m.n_networks))
    for sub in SUBSETS:
        sel = subsets == sub
        for m in models:
            if sel.any():
                ne = mean_ne(preds[m.name][sel], gt[sel], vis[sel])
                rate = pdl(preds[m.name][sel], gt[sel], vis[sel], threshold_px, size)
            else:
                ne = rate = float("nan")
            rows.append(("subset", sub, m.name, ne, rate, int(sel.sum()), m.n_networks))
    curves = {m.name: np.array([pdl(preds[m.name], gt, vis, t, size) for t in thresholds]) for m in models}
    return Report(rows, thresholds, curves, threshold_px, {m.name: m.n_networks for m in models})


def _fmt(v):
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return "" if np.isnan(v) else f"{v:.6f}"


def write_report_csv(path, report: Report):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for row in report.rows:
            w.writerow([_fmt(v) for v in row])


def write_pdl_svg(path, thresholds, curves: dict[str, np.ndarray], title="PDL vs threshold"):
    """Line plot of detection rate against the pixel threshold, one line per model."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "dfalign", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(5, 4))
        for name, ys in curves.items():
            ax.plot(thresholds, 100 * np.asarray(ys), marker="o", markersize=3, label=name)
        ax.set_xlabel("distance threshold [px]")
        ax.set_ylabel("detection rate [%]")
        ax.set_ylim(0, 100)
        ax.set_title(title)
        ax.grid(alpha=0.3)
        ax.legend(loc="lower right", fontsize=8)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
