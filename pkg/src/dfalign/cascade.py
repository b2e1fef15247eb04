"""Three-stage cascade: scheduled multi-task training, additive composition and auto-routing.

Stage 1 regresses landmark positions from the image. Stage 2 sees the image
plus the stage-1 estimate and regresses the correction ``gt - estimate``.
Stage 3 has two such correctors; each sample goes to one of them according
to the error score ``G`` computed from its predicted stage-2 pseudo-label.
All coordinates are box-normalized.
"""

from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import SGD, NonFiniteError, backward
from .geometry import TRUNCATED, per_sample_mean_error, mean_ne
from .network import Architecture, StageNetwork, load_checkpoint, save_checkpoint
from .pseudolabel import (ClusterModel, RoutingTable, cluster_error_table, contextual_offset,
                          kmeans, load_cluster_model, load_routing_table, offset_space,
                          save_cluster_model, save_routing_table, soft_pseudo_label,
                          stage1_space)
from .seeding import derive_seed, rng_for

log = logging.getLogger(__name__)

SCHEDULE_MODES = ("as-written", "decay")
BUNDLE_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    iterations: int = 6000
    batch_size: int = 32
    learning_rate: float = 0.01
    momentum: float = 0.9
    alpha: float = 1.0
    beta: float = 1.0
    t1: int = 2000
    t2: int = 4000
    schedule_mode: str = "as-written"
    n_clusters: int = 20
    temperature: float = 20.0
    epsilon: float = 0.3
    # clustering distances are measured in pixels of a 224-px reference frame
    label_scale: float = 224.0
    channels: tuple[int, ...] = (8, 16)
    kernel: int = 3
    dense: int = 128
    dtype: str = "float32"
    log_every: int = 100
    val_every: int = 500
    kmeans_max_iter: int = 300
    # later stages start from the previous stage's trunk instead of from scratch
    warm_start: bool = True
    # keep the parameters with the best validation NE seen at the logged checkpoints
    select_best: bool = True

    def architecture(self, n_landmarks: int, image_size: int, aux_dim: int = 0,
                     n_clusters: int | None = None) -> Architecture:
        return Architecture(input_size=image_size, channels=tuple(self.channels), kernel=self.kernel,
                            dense=self.dense, aux_dim=aux_dim, n_landmarks=n_landmarks,
                            n_clusters=self.n_clusters if n_clusters is None else n_clusters,
                            dtype=self.dtype)

    @property
    def schedule(self) -> "LossSchedule":
        return LossSchedule(self.alpha, self.beta, self.t1, self.t2)


# -- loss schedule ------------------------------------------------------------

@dataclass(frozen=True)
class LossSchedule:
    alpha: float = 1.0
    beta: float = 1.0
    t1: int = 2000
    t2: int = 4000

    def __post_init__(self):
        if not 0 < self.t1 < self.t2:
            raise ValueError("schedule breakpoints need 0 < t1 < t2")


def schedule_weight(t: float, base: float, t1: float, t2: float, mode: str = "as-written") -> float:
    """Piecewise auxiliary-loss weight.

    ``base`` before ``t1`` and 0 from ``t2`` on. In between, "as-written"
    ramps linearly from 0 up to ``base``; "decay" ramps from ``base`` down to 0.
    """
    if t < 0:
        raise ValueError("iteration must be non-negative")
    if mode not in SCHEDULE_MODES:
        raise ValueError(f"unknown schedule mode {mode!r}")
    if t < t1:
        return base
    if t >= t2:
        return 0.0
    frac = (t - t1) / (t2 - t1) if mode == "as-written" else (t2 - t) / (t2 - t1)
    return frac * base


def alpha_at(t, sched: LossSchedule, mode="as-written") -> float:
    return schedule_weight(t, sched.alpha, sched.t1, sched.t2, mode)


def beta_at(t, sched: LossSchedule, mode="as-written") -> float:
    return schedule_weight(t, sched.beta, sched.t1, sched.t2, mode)


@dataclass
class Targets:
    positions: np.ndarray          # (S, 2N)
    position_mask: np.ndarray      # (S, 2N), 0 on truncated landmarks
    visibility: np.ndarray         # (S, N)
    labels: np.ndarray | None      # (S, K)

    def take(self, idx) -> "Targets":
        return Targets(self.positions[idx], self.position_mask[idx], self.visibility[idx],
                       None if self.labels is None else self.labels[idx])


def overall_loss(graph, out, targets: Targets, t, sched: LossSchedule, mode="as-written",
                 use_visibility=True, use_labels=True):
    """Build ``L_pos + alpha(t) L_vis + beta(t) L_labels`` on ``graph``.

    Disabled terms are left out of the graph entirely. Returns the loss node
    and a breakdown dict of floats.
    """
    a = alpha_at(t, sched, mode) if use_visibility else 0.0
    b = beta_at(t, sched, mode) if use_labels and targets.labels is not None else 0.0
    l_pos = graph.euclidean_loss(out.positions, targets.positions, targets.position_mask)
    total = l_pos
    parts = {"L_pos": float(l_pos.value), "L_vis": float("nan"), "L_labels": float("nan"),
             "alpha": a, "beta": b}
    if use_visibility:
        l_vis = graph.logistic_loss(out.visibility, targets.visibility)
        parts["L_vis"] = float(l_vis.value)
        total = graph.add(total, graph.scale(l_vis, a))
    if use_labels and targets.labels is not None:
        l_lab = graph.euclidean_loss(out.pseudolabels, targets.labels)
        parts["L_labels"] = float(l_lab.value)
        total = graph.add(total, graph.scale(l_lab, b))
    parts["L"] = float(total.value)
    return total, parts


# -- generic stage fitting ----------------------------------------------------------

def position_targets(coords, visibility, base=None):
    """Flattened regression targets ``gt - base`` and the truncation mask."""
    coords = np.asarray(coords, float)
    target = coords if base is None else coords - np.asarray(base, float).reshape(coords.shape)
    mask = np.repeat((np.asarray(visibility) != TRUNCATED).astype(float), 2, axis=-1)
    target = np.where(mask.reshape(target.shape) > 0, target, 0.0)
    return target.reshape(len(coords), -1), mask


def fit_stage(net: StageNetwork, images, aux, targets: Targets, cfg: TrainConfig, seed: int,
              name: str, use_visibility=True, use_labels=True, val_fn=None) -> list[dict]:
    """Mini-batch SGD on the scheduled loss; returns the training log rows.

    ``val_NE`` in a row is measured after that iteration's update. With
    ``val_fn`` and ``cfg.select_best`` the network ends up holding the
    parameters with the lowest validation NE, the untrained starting point
    included; the chosen row gets ``selected = 1`` (no row is flagged when the
    starting point wins).
    """
    dtype = net.arch.dtype
    images = np.asarray(images, dtype=dtype)
    aux = None if aux is None else np.asarray(aux, dtype=dtype)
    n = len(images)
    if n == 0:
        raise ValueError(f"{name}: empty training set")
    rng = rng_for(seed, name, "batches")
    opt = SGD(cfg.learning_rate, cfg.momentum)
    sched = cfg.schedule
    select = val_fn is not None and cfg.select_best
    best = (float(val_fn(net)), None, net.copy().params) if select else None
    order, cursor = rng.permutation(n), 0
    rows = []
    for t in range(cfg.iterations):
        if cursor + cfg.batch_size > n:
            order, cursor = rng.permutation(n), 0
        idx = order[cursor:cursor + min(cfg.batch_size, n)]
        cursor += len(idx)
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                out = net.forward(images[idx], None if aux is None else aux[idx])
                loss, parts = overall_loss(out.graph, out, targets.take(idx), t, sched,
                                           cfg.schedule_mode, use_visibility, use_labels)
                if not np.isfinite(parts["L"]):
                    raise NonFiniteError("non-finite loss")
                opt.step(net.params, backward(out.graph, loss))
        except FloatingPointError as exc:
            raise TrainingDiverged(f"{name}: {exc} at iteration {t}") from exc
        last = t == cfg.iterations - 1
        if t % cfg.log_every == 0 or last:
            row = {"iteration": t, **parts, "val_NE": float("nan"), "selected": 0}
            if val_fn is not None and (t % cfg.val_every == 0 or last):
                row["val_NE"] = float(val_fn(net))
                if select and row["val_NE"] < best[0]:
                    best = (row["val_NE"], len(rows), net.copy().params)
            rows.append(row)
            log.debug("%s it=%d L=%.5f val=%.4f", name, t, parts["L"], row["val_NE"])
    if select:
        net.params.update(best[2])
        if best[1] is not None:
            rows[best[1]]["selected"] = 1
    elif rows:
        rows[-1]["selected"] = 1
    return rows


LOG_COLUMNS = ("iteration", "L_pos", "L_vis", "L_labels", "alpha", "beta", "val_NE", "selected")


def write_training_log(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([r["iteration"]] + ["" if np.isnan(r[c]) else f"{r[c]:.8g}" for c in LOG_COLUMNS[1:-1]]
                   + [r["selected"]])


# -- stages -----------------------------------------------------------------------

@dataclass
class StageResult:
    net: StageNetwork
    clusters: ClusterModel | None
    assignments: np.ndarray | None
    log: list[dict]


def _flat(x):
    x = np.asarray(x)
    return x.reshape(len(x), -1)


def warm_start(arch: Architecture, prev: StageNetwork, rng) -> StageNetwork:
    """Fresh network for ``arch`` whose trunk is copied from ``prev``.

    Conv layers, the image rows of ``fc.w``, ``fc.b`` and the visibility head
    are copied; aux rows of ``fc.w`` and the position head start at zero (so the
    initial correction is exactly zero); the pseudo-label head stays random.
    """
    net = StageNetwork.initialize(arch, rng)
    src = prev.params
    for name, value in src.items():
        if name.startswith("conv") or name in ("fc.b", "vis.w", "vis.b"):
            if net.params[name].shape != value.shape:
                raise ValueError(f"warm start: {name} has shape {value.shape}, "
                                 f"expected {net.params[name].shape}")
            net.params[name] = value.astype(arch.dtype, copy=True)
    n_img = arch.flat_features
    if src["fc.w"].shape[0] < n_img or src["fc.w"].shape[1] != arch.dense:
        raise ValueError("warm start: incompatible fc layer")
    fc = np.zeros(arch.param_shapes()["fc.w"], dtype=arch.dtype)
    fc[:n_img] = src["fc.w"][:n_img]
    net.params["fc.w"] = fc
    net.params["pos.w"] = np.zeros_like(net.params["pos.w"])
    net.params["pos.b"] = np.zeros_like(net.params["pos.b"])
    return net


def _new_net(arch, cfg: TrainConfig, seed, name, prev=None) -> StageNetwork:
    rng = rng_for(seed, name, "init")
    if cfg.warm_start and prev is not None:
        return warm_start(arch, prev, rng)
    return StageNetwork.initialize(arch, rng)


def fit_clusters(points, cfg: TrainConfig, seed: int, name: str, space: str):
    res = kmeans(points, cfg.n_clusters, seed=derive_seed(seed, name, "kmeans"),
                 max_iter=cfg.kmeans_max_iter, temperature=cfg.temperature, space=space)
    return res.model, res.assignments


def train_stage1(train, cfg: TrainConfig, seed: int, val=None, with_pseudolabels=True,
                 with_visibility=True, name="stage1") -> StageResult:
    """Regress normalized positions (+ visibility, + configuration-space pseudo-labels)."""
    coords = train.normalized
    pos, mask = position_targets(coords, train.visibility)
    clusters = assign = labels = None
    if with_pseudolabels:
        space = stage1_space(coords, train.visibility) * cfg.label_scale
        clusters, assign = fit_clusters(space, cfg, seed, name, "configuration")
        labels = soft_pseudo_label(space, clusters)
    arch = cfg.architecture(train.n_landmarks, train.image_size)
    net = StageNetwork.initialize(arch, rng_for(seed, name, "init"))
    val_fn = None
    if val is not None:
        val_coords = val.normalized

        def val_fn(n):
            p, _, _ = n.predict(val.images)
            return mean_ne(p.reshape(val_coords.shape), val_coords, val.visibility)
    rows = fit_stage(net, train.images, None, Targets(pos, mask, train.visibility, labels), cfg,
                     seed, name, with_visibility, with_pseudolabels, val_fn)
    return StageResult(net, clusters, assign, rows)


def train_stage2(train, stage1: StageNetwork, cfg: TrainConfig, seed: int, val=None,
                 name="stage2") -> StageResult:
    """Regress the correction to the frozen stage-1 estimate; offset-space pseudo-labels."""
    coords = train.normalized
    est1 = stage1.predict(train.images)[0].reshape(coords.shape)
    pos, mask = position_targets(coords, train.visibility, base=est1)
    space = offset_space(est1, coords, train.visibility) * cfg.label_scale
    clusters, assign = fit_clusters(space, cfg, seed, name, "offset")
    labels = soft_pseudo_label(space, clusters)
    arch = cfg.architecture(train.n_landmarks, train.image_size, aux_dim=2 * train.n_landmarks)
    net = _new_net(arch, cfg, seed, name, stage1)
    val_fn = None
    if val is not None:
        val_coords = val.normalized
        val_est1 = stage1.predict(val.images)[0]

        def val_fn(n):
            c = n.predict(val.images, val_est1)[0]
            return mean_ne((val_est1 + c).reshape(val_coords.shape), val_coords, val.visibility)
    rows = fit_stage(net, train.images, _flat(est1), Targets(pos, mask, train.visibility, labels),
                     cfg, seed, name, True, True, val_fn)
    return StageResult(net, clusters, assign, rows)


def routing_score(f_hat, table: RoutingTable) -> np.ndarray:
    """``G = sum_k e_k f_k``; an empty cluster (e = inf) makes G infinite iff its f > 0."""
    f_hat = np.asarray(f_hat, dtype=float)
    e = table.errors
    if f_hat.shape[-1] != len(e):
        raise ValueError(f"pseudo-label has {f_hat.shape[-1]} entries, table has {len(e)}")
    finite = np.isfinite(e)
    g = f_hat[..., finite] @ e[finite]
    hit_empty = np.any(f_hat[..., ~finite] > 0, axis=-1)
    return np.where(hit_empty, np.inf, g)


def route(g, epsilon: float = 0.3):
    """Branch 1 iff ``G < epsilon`` (strict), else branch 2."""
    return np.where(np.asarray(g) < epsilon, 1, 2)


def build_routing_table(train, stage1, stage2, stage2_assign, cfg: TrainConfig) -> RoutingTable:
    """Mean stage-2 residual NE of the training samples in each stage-2 cluster."""
    coords = train.normalized
    est1 = stage1.predict(train.images)[0]
    est2 = (est1 + stage2.predict(train.images, est1)[0]).reshape(coords.shape)
    err = per_sample_mean_error(est2, coords, train.visibility)
    ok = ~np.isnan(err)
    return cluster_error_table(stage2_assign[ok], err[ok], cfg.n_clusters, cfg.epsilon)


@dataclass
class Stage3Result:
    branches: tuple[StageNetwork, StageNetwork]
    clusters: ClusterModel
    assignments: np.ndarray
    routes: np.ndarray
    logs: tuple[list[dict], list[dict]]
    fallback: bool = False


def stage3_inputs(images, stage1, stage2):
    est1 = stage1.predict(images)[0]
    c2, _, f2 = stage2.predict(images, est1)
    est2 = est1 + c2
    return est2, f2, np.concatenate([est2, f2], axis=1)


def train_stage3(train, stage1, stage2, table: RoutingTable, cfg: TrainConfig, seed: int,
                 val=None, routes=None, name="stage3", warn_fallback=True) -> Stage3Result:
    """Train the two stage-3 correctors on the routed partitions of the training set.

    ``routes`` overrides auto-routing with an explicit branch per sample (used
    by ablations). If either partition is empty, both branches train on all
    samples.
    """
    coords = train.normalized
    est2, f2, aux = stage3_inputs(train.images, stage1, stage2)
    explicit = routes is not None
    if routes is None:
        routes = route(routing_score(f2, table), table.epsilon)
    routes = np.asarray(routes)
    pos, mask = position_targets(coords, train.visibility, base=est2)
    delta = offset_space(est2.reshape(coords.shape), coords, train.visibility) * cfg.label_scale
    space = contextual_offset(delta)
    clusters, assign = fit_clusters(space, cfg, seed, name, "contextual-offset")
    labels = soft_pseudo_label(space, clusters)
    targets = Targets(pos, mask, train.visibility, labels)
    parts = [np.flatnonzero(routes == 1), np.flatnonzero(routes == 2)]
    fallback = min(len(p) for p in parts) == 0
    if fallback and warn_fallback:
        warnings.warn(f"{name}: routing left a branch empty "
                      f"({len(parts[0])}/{len(parts[1])}); training both branches on all samples")
    if fallback:
        parts = [np.arange(len(train))] * 2
    arch = cfg.architecture(train.n_landmarks, train.image_size, aux_dim=aux.shape[1])
    val_parts = None
    if val is not None:
        v_est2, v_f2, v_aux = stage3_inputs(val.images, stage1, stage2)
        v_all = np.arange(len(val))
        if fallback or explicit:
            val_parts = [v_all, v_all]
        else:
            # each branch is validated on the validation samples routed to it
            v_routes = route(routing_score(v_f2, table), table.epsilon)
            val_parts = [np.flatnonzero(v_routes == b) for b in (1, 2)]
            val_parts = [p if len(p) else v_all for p in val_parts]
    nets, logs = [], []
    for b, idx in enumerate(parts, start=1):
        bname = f"{name}_branch{b}"
        net = _new_net(arch, cfg, seed, bname, stage2)
        val_fn = None
        if val_parts is not None:
            vi = val_parts[b - 1]

            def val_fn(n, vi=vi):
                c = n.predict(val.images[vi], v_aux[vi])[0]
                gt = val.normalized[vi]
                return mean_ne((v_est2[vi] + c).reshape(gt.shape), gt, val.visibility[vi])
        logs.append(fit_stage(net, train.images[idx], aux[idx], targets.take(idx), cfg, seed, bname,
                              True, True, val_fn))
        nets.append(net)
    return Stage3Result(tuple(nets), clusters, assign, routes, tuple(logs), fallback)


# -- full model -------------------------------------------------------------------

@dataclass
class CascadeModel:
    stage1: StageNetwork | None = None
    stage2: StageNetwork | None = None
    stage3: tuple[StageNetwork, StageNetwork] | None = None
    clusters: tuple[ClusterModel | None, ClusterModel | None, ClusterModel | None] = (None, None, None)
    routing: RoutingTable | None = None
    label_scale: float = 224.0

    @property
    def trained(self) -> bool:
        return (self.stage1 is not None and self.stage2 is not None and self.stage3 is not None
                and len(self.stage3) == 2 and self.routing is not None)

    @property
    def n_networks(self) -> int:
        return 4


@dataclass
class CascadePrediction:
    stage1: np.ndarray        # (S, N, 2) normalized
    stage2: np.ndarray
    stage3: np.ndarray
    visibility_logits: np.ndarray
    pseudolabels2: np.ndarray
    scores: np.ndarray        # G
    branches: np.ndarray

    @property
    def visibility(self) -> np.ndarray:
        return self.visibility_logits.argmax(axis=-1)

    def stage(self, k: int) -> np.ndarray:
        return (self.stage1, self.stage2, self.stage3)[k - 1]


def predict(model: CascadeModel, images, routes=None) -> CascadePrediction:
    """Run the cascade on (S, H, W) images; returns normalized per-stage estimates."""
    if not model.trained:
        raise RuntimeError("cascade model is not fully trained")
    images = np.asarray(images)
    if images.ndim == 2:
        images = images[None]
    n_lm = model.stage1.arch.n_landmarks
    est1, vis_logits, _ = model.stage1.predict(images)
    c2, _, f2 = model.stage2.predict(images, est1)
    est2 = est1 + c2
    g = routing_score(f2, model.routing)
    branches = route(g, model.routing.epsilon) if routes is None else np.asarray(routes)
    aux3 = np.concatenate([est2, f2], axis=1)
    c3 = np.zeros_like(est2)
    for b in (1, 2):
        idx = np.flatnonzero(branches == b)
        if len(idx):
            c3[idx] = model.stage3[b - 1].predict(images[idx], aux3[idx])[0]
    est3 = est2 + c3
    shape = (len(images), n_lm, 2)
    return CascadePrediction(est1.reshape(shape), est2.reshape(shape), est3.reshape(shape),
                             vis_logits, f2, g, branches)


@dataclass
class CascadeTraining:
    model: CascadeModel
    logs: dict[str, list[dict]]
    assignments: dict[int, np.ndarray]
    routes: np.ndarray
    fallback: bool = False


def train_cascade(train, cfg: TrainConfig, seed: int, val=None, stage1: StageResult | None = None
                  ) -> CascadeTraining:
    """Train all three stages in order; ``stage1`` may be supplied pre-trained."""
    s1 = stage1 if stage1 is not None else train_stage1(train, cfg, seed, val)
    s2 = train_stage2(train, s1.net, cfg, seed, val)
    table = build_routing_table(train, s1.net, s2.net, s2.assignments, cfg)
    s3 = train_stage3(train, s1.net, s2.net, table, cfg, seed, val)
    model = CascadeModel(s1.net, s2.net, s3.branches, (s1.clusters, s2.clusters, s3.clusters),
                         table, cfg.label_scale)
    logs = {"stage1": s1.log, "stage2": s2.log,
            "stage3_branch1": s3.logs[0], "stage3_branch2": s3.logs[1]}
    return CascadeTraining(model, logs, {1: s1.assignments, 2: s2.assignments, 3: s3.assignments},
                           s3.routes, s3.fallback)


# -- bundle files -------------------------------------------------------------------

NET_FILES = {"stage1": "stage1.dfanet", "stage2": "stage2.dfanet",
             "stage3_branch1": "stage3_branch1.dfanet", "stage3_branch2": "stage3_branch2.dfanet"}


def save_bundle(path, training: CascadeTraining, sample_ids, manifest_extra: dict | None = None):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    m = training.model
    nets = {"stage1": m.stage1, "stage2": m.stage2,
            "stage3_branch1": m.stage3[0], "stage3_branch2": m.stage3[1]}
    for key, fname in NET_FILES.items():
        save_checkpoint(nets[key], path / fname)
    for k, cm in enumerate(m.clusters, start=1):
        if cm is not None:
            save_cluster_model(cm, path / f"clusters_stage{k}.dfaclus")
    save_routing_table(m.routing, path / "routing_table.dfaroute")
    for name, rows in training.logs.items():
        write_training_log(path / f"train_log_{name}.csv", rows)
    for k, assign in training.assignments.items():
        if assign is None:
            continue
        with open(path / f"assignments_stage{k}.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample_id", "cluster_id"])
            w.writerows(zip(sample_ids, (int(a) for a in assign)))
    manifest = {"format_version": BUNDLE_VERSION, "package_version": __version__,
                "label_scale": m.label_scale, "epsilon": m.routing.epsilon,
                "networks": NET_FILES, "n_networks": m.n_networks,
                "routing_fallback": training.fallback,
                "branch_sizes": [int(np.sum(training.routes == 1)), int(np.sum(training.routes == 2))]}
    manifest.update(manifest_extra or {})
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_bundle(path) -> CascadeModel:
    path = Path(path)
    mf = path / "manifest.json"
    if not mf.exists():
        raise FileNotFoundError(f"no cascade bundle at {path} (missing manifest.json)")
    manifest = json.loads(mf.read_text())
    if manifest.get("format_version") != BUNDLE_VERSION:
        raise ValueError(f"{path}: unsupported bundle version {manifest.get('format_version')}")
    nets = {k: load_checkpoint(path / f) for k, f in NET_FILES.items()}
    clusters = tuple(load_cluster_model(path / f"clusters_stage{k}.dfaclus")
                     if (path / f"clusters_stage{k}.dfaclus").exists() else None for k in (1, 2, 3))
    return CascadeModel(nets["stage1"], nets["stage2"], (nets["stage3_branch1"], nets["stage3_branch2"]),
                        clusters, load_routing_table(path / "routing_table.dfaroute"),
                        manifest["label_scale"])


def read_assignments(path, stage: int) -> dict[str, int]:
    with open(Path(path) / f"assignments_stage{stage}.csv", newline="", encoding="utf-8") as fh:
        return {row["sample_id"]: int(row["cluster_id"]) for row in csv.DictReader(fh)}


def cluster_space(model: CascadeModel, dataset, stage: int) -> np.ndarray:
    """The stage's clustering-space vectors for ``dataset`` under a trained model."""
    coords, vis = dataset.normalized, dataset.visibility
    if stage == 1:
        return stage1_space(coords, vis) * model.label_scale
    est1 = model.stage1.predict(dataset.images)[0]
    if stage == 2:
        return offset_space(est1.reshape(coords.shape), coords, vis) * model.label_scale
    if stage == 3:
        est2, _, _ = stage3_inputs(dataset.images, model.stage1, model.stage2)
        delta = offset_space(est2.reshape(coords.shape), coords, vis) * model.label_scale
        return contextual_offset(delta)
    raise ValueError(f"stage must be 1, 2 or 3, got {stage}")
