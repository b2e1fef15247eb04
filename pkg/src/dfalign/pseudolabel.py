"""K-means clustering spaces and soft pseudo-labels.

Each cascade stage clusters its training samples in its own space:

* stage 1 -- flattened ground-truth landmark configuration
* stage 2 -- offsets of the stage-1 estimate from ground truth
* stage 3 -- the linearized outer product of the stage-2 offset with itself

and regresses ``f(k) = exp(-||x - C_k|| / T)`` as an auxiliary target.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import TRUNCATED

SPACES = ("configuration", "offset", "contextual-offset")

_CLUSTER_MAGIC = b"DFACLUS\x01"
_ROUTING_MAGIC = b"DFAROUT\x01"
_FILE_VERSION = 1


@dataclass
class ClusterModel:
    centers: np.ndarray
    temperature: float = 20.0
    space: str = "configuration"

    def __post_init__(self):
        self.centers = np.atleast_2d(np.asarray(self.centers, dtype=float))
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.space not in SPACES:
            raise ValueError(f"unknown clustering space {self.space!r}")
        if not np.all(np.isfinite(self.centers)):
            raise ValueError("cluster centers must be finite")

    @property
    def k(self) -> int:
        return len(self.centers)

    @property
    def dim(self) -> int:
        return self.centers.shape[1]


@dataclass
class KMeansResult:
    model: ClusterModel
    assignments: np.ndarray
    history: list[float] = field(default_factory=list)  # objective after each assignment
    iterations: int = 0

    @property
    def objective(self) -> float:
        return self.history[-1]


def squared_distances(points, centers, chunk: int = 512) -> np.ndarray:
    """Exact pairwise squared distances, (n, k), computed from differences."""
    points = np.asarray(points, float)
    centers = np.asarray(centers, float)
    out = np.empty((len(points), len(centers)))
    for s in range(0, len(points), chunk):
        diff = points[s:s + chunk, None, :] - centers[None, :, :]
        out[s:s + chunk] = np.einsum("nkd,nkd->nk", diff, diff)
    return out


def kmeans_plus_plus(points, k, rng) -> np.ndarray:
    """Distance-weighted seeding: first center uniform, then proportional to D^2."""
    n = len(points)
    chosen = [int(rng.integers(n))]
    d2 = squared_distances(points, points[chosen]).min(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        chosen.append(idx)
        d2 = np.minimum(d2, squared_distances(points, points[idx:idx + 1])[:, 0])
    return points[chosen].copy()


def kmeans(points, k: int, seed: int = 0, max_iter: int = 300, init=None,
           temperature: float = 20.0, space: str = "configuration") -> KMeansResult:
    """Lloyd's algorithm until the assignment stops changing (or ``max_iter``).

    Points go to their nearest center, ties to the lowest index. A center
    that loses all its points keeps its previous position.
    """
    points = np.asarray(points, dtype=float)
    if points.ndim != 2:
        raise ValueError("points must be a 2-D array")
    if k < 1 or len(points) < k:
        raise ValueError(f"need at least k={k} points, got {len(points)}")
    if init is None:
        centers = kmeans_plus_plus(points, k, np.random.default_rng(seed))
    else:
        centers = np.array(init, dtype=float)
        if centers.shape != (k, points.shape[1]):
            raise ValueError(f"init must have shape {(k, points.shape[1])}")

    assign = None
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        d2 = squared_distances(points, centers)
        new_assign = d2.argmin(axis=1)
        history.append(float(d2[np.arange(len(points)), new_assign].sum()))
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(k):
            members = points[assign == j]
            if len(members):
                centers[j] = members.mean(axis=0)
    return KMeansResult(ClusterModel(centers, temperature, space), assign, history, it)


def soft_pseudo_label(x, model: ClusterModel) -> np.ndarray:
    """``f(k) = exp(-||x - C_k||_2 / T)`` for one vector or a batch of rows."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != model.dim:
        raise ValueError(f"dimension mismatch: vector has {x.shape[-1]}, centers have {model.dim}")
    single = x.ndim == 1
    d = np.sqrt(squared_distances(np.atleast_2d(x), model.centers))
    f = np.exp(-d / model.temperature)
    return f[0] if single else f


def stage1_space(coords, visibility) -> np.ndarray:
    """Flattened normalized coordinates; truncated points clamped onto the box."""
    coords = np.asarray(coords, dtype=float)
    trunc = (np.asarray(visibility) == TRUNCATED)[..., None]
    imputed = np.where(trunc, np.clip(coords, -0.5, 0.5), coords)
    return imputed.reshape(*coords.shape[:-2], -1)


def offset_space(estimate, coords, visibility) -> np.ndarray:
    """``estimate - gt`` flattened, with the entries of truncated landmarks zeroed."""
    delta = np.asarray(estimate, dtype=float) - np.asarray(coords, dtype=float)
    delta = np.where((np.asarray(visibility) == TRUNCATED)[..., None], 0.0, delta)
    return delta.reshape(*delta.shape[:-2], -1)


def contextual_offset(delta) -> np.ndarray:
    """Column-stacked outer product of each offset vector with itself."""
    delta = np.asarray(delta, dtype=float)
    outer = delta[..., :, None] * delta[..., None, :]
    # column-major linearization: swap the two matrix axes, then flatten row-major
    return np.swapaxes(outer, -1, -2).reshape(*delta.shape[:-1], -1)


@dataclass
class RoutingTable:
    errors: np.ndarray          # mean error per stage-2 cluster; +inf for empty clusters
    epsilon: float = 0.3

    def __post_init__(self):
        self.errors = np.asarray(self.errors, dtype=float)


def cluster_error_table(assignments, sample_errors, k: int, epsilon: float = 0.3) -> RoutingTable:
    assignments = np.asarray(assignments)
    sample_errors = np.asarray(sample_errors, dtype=float)
    if np.any(assignments >= k) or np.any(assignments < 0):
        raise ValueError("assignment index out of range")
    sums = np.bincount(assignments, weights=sample_errors, minlength=k)
    counts = np.bincount(assignments, minlength=k)
    with np.errstate(invalid="ignore", divide="ignore"):
        errors = np.where(counts > 0, sums / np.maximum(counts, 1), np.inf)
    return RoutingTable(errors, epsilon)


# -- files ------------------------------------------------------------------

def save_cluster_model(model: ClusterModel, path) -> None:
    tag = model.space.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CLUSTER_MAGIC)
        fh.write(struct.pack("<II", _FILE_VERSION, len(tag)))
        fh.write(tag)
        fh.write(struct.pack("<IId", model.k, model.dim, model.temperature))
        fh.write(np.ascontiguousarray(model.centers, dtype="<f8").tobytes())


def load_cluster_model(path) -> ClusterModel:
    data = Path(path).read_bytes()
    if data[:8] != _CLUSTER_MAGIC:
        raise ValueError(f"{path}: not a cluster model file")
    version, tlen = struct.unpack_from("<II", data, 8)
    if version != _FILE_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    pos = 16
    space = data[pos:pos + tlen].decode("utf-8")
    pos += tlen
    k, dim, temperature = struct.unpack_from("<IId", data, pos)
    pos += 16
    centers = np.frombuffer(data[pos:pos + 8 * k * dim], dtype="<f8").reshape(k, dim).astype(float)
    return ClusterModel(centers, temperature, space)


def save_routing_table(table: RoutingTable, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_ROUTING_MAGIC)
        fh.write(struct.pack("<IId", _FILE_VERSION, len(table.errors), table.epsilon))
        fh.write(np.ascontiguousarray(table.errors, dtype="<f8").tobytes())


def load_routing_table(path) -> RoutingTable:
    data = Path(path).read_bytes()
    if data[:8] != _ROUTING_MAGIC:
        raise ValueError(f"{path}: not a routing table file")
    version, k, epsilon = struct.unpack_from("<IId", data, 8)
    if version != _FILE_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    errors = np.frombuffer(data[24:24 + 8 * k], dtype="<f8").astype(float)
    return RoutingTable(errors, epsilon)


def write_cluster_csv(path, populations, mean_errors=None) -> None:
    """Inspection table: cluster id, population, mean NE (blank when unknown)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cluster_id", "population", "mean_NE"])
        for k, pop in enumerate(populations):
            e = "" if mean_errors is None else f"{mean_errors[k]:.6f}"
            w.writerow([k, int(pop), e])
