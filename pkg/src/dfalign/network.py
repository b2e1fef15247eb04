"""Small convolutional landmark regressor with position, visibility and pseudo-label heads."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Graph, Node, ShapeError, grad_check

CHECKPOINT_MAGIC = b"DFANET\x00\x01"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Architecture:
    input_size: int = 64
    channels: tuple[int, ...] = (8, 16)
    kernel: int = 3
    dense: int = 128
    aux_dim: int = 0
    n_landmarks: int = 8
    n_clusters: int = 20
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.input_size % (2 ** len(self.channels)):
            raise ValueError(f"input_size {self.input_size} not divisible by 2^{len(self.channels)}")
        if self.kernel % 2 == 0:
            raise ValueError("kernel size must be odd")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unsupported dtype {self.dtype!r}")

    @property
    def flat_features(self) -> int:
        side = self.input_size // 2 ** len(self.channels)
        return side * side * self.channels[-1]

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        c_in = 1
        for i, c in enumerate(self.channels):
            shapes[f"conv{i}.w"] = (self.kernel, self.kernel, c_in, c)
            shapes[f"conv{i}.b"] = (c,)
            c_in = c
        n_in = self.flat_features + self.aux_dim
        shapes["fc.w"] = (n_in, self.dense)
        shapes["fc.b"] = (self.dense,)
        n = self.n_landmarks
        shapes["pos.w"] = (self.dense, 2 * n)
        shapes["pos.b"] = (2 * n,)
        # one 3-way classifier per landmark, stored side by side
        shapes["vis.w"] = (self.dense, 3 * n)
        shapes["vis.b"] = (3 * n,)
        shapes["label.w"] = (self.dense, self.n_clusters)
        shapes["label.b"] = (self.n_clusters,)
        return shapes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(**{**d, "channels": tuple(d["channels"])})


@dataclass
class StageOutput:
    positions: Node        # (B, 2N)
    visibility: Node       # (B, N, 3) logits
    pseudolabels: Node     # (B, K)
    graph: Graph


@dataclass
class StageNetwork:
    arch: Architecture
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def initialize(cls, arch: Architecture, rng: np.random.Generator) -> "StageNetwork":
        """Glorot-uniform weights, zero biases."""
        params = {}
        for name, shape in arch.param_shapes().items():
            if name.endswith(".b"):
                params[name] = np.zeros(shape, dtype=arch.dtype)
                continue
            if len(shape) == 4:
                fan_in = shape[0] * shape[1] * shape[2]
                fan_out = shape[0] * shape[1] * shape[3]
            else:
                fan_in, fan_out = shape
            s = np.sqrt(6.0 / (fan_in + fan_out))
            params[name] = rng.uniform(-s, s, size=shape).astype(arch.dtype)
        return cls(arch, params)

    def copy(self) -> "StageNetwork":
        return StageNetwork(self.arch, {k: v.copy() for k, v in self.params.items()})

    def forward(self, images: np.ndarray, aux: np.ndarray | None = None,
                graph: Graph | None = None, nodes: dict[str, Node] | None = None) -> StageOutput:
        """Run the network on a batch of (B, H, W) images plus optional (B, aux_dim) inputs."""
        arch = self.arch
        images = np.asarray(images, dtype=arch.dtype)
        if images.ndim == 2:
            images = images[None]
        if images.shape[1:] != (arch.input_size, arch.input_size):
            raise ShapeError(f"input layer: expected images of {arch.input_size}x{arch.input_size}, "
                             f"got {images.shape[1:]}")
        bsz = images.shape[0]
        if arch.aux_dim:
            if aux is None:
                raise ShapeError(f"aux input layer: expected {arch.aux_dim} features, got none")
            aux = np.asarray(aux, dtype=arch.dtype).reshape(bsz, -1)
            if aux.shape[1] != arch.aux_dim:
                raise ShapeError(f"aux input layer: expected {arch.aux_dim} features, got {aux.shape[1]}")
        elif aux is not None and np.size(aux) != 0:
            raise ShapeError("aux input layer: network takes no aux input")

        g = graph if graph is not None else Graph(check_finite=False)
        p = nodes if nodes is not None else {k: g.param(k, v) for k, v in self.params.items()}
        h = g.constant(images[..., None])
        for i in range(len(arch.channels)):
            h = g.conv2d(h, p[f"conv{i}.w"], p[f"conv{i}.b"], name=f"conv{i}")
            h = g.relu(h)
            h = g.maxpool2(h, name=f"pool{i}")
        h = g.reshape(h, (bsz, arch.flat_features))
        if arch.aux_dim:
            h = g.concat(h, g.constant(aux))
        h = g.relu(g.dense(h, p["fc.w"], p["fc.b"], name="fc"))
        pos = g.dense(h, p["pos.w"], p["pos.b"], name="pos")
        vis = g.reshape(g.dense(h, p["vis.w"], p["vis.b"], name="vis"), (bsz, arch.n_landmarks, 3))
        lab = g.dense(h, p["label.w"], p["label.b"], name="label")
        out = StageOutput(pos, vis, lab, g)
        if not all(np.all(np.isfinite(n.value)) for n in (pos, vis, lab)):
            raise FloatingPointError("network produced non-finite outputs")
        return out

    def predict(self, images, aux=None, batch_size: int = 128):
        """Batched inference; returns numpy (positions, visibility logits, pseudo-labels)."""
        outs = ([], [], [])
        for start in range(0, len(images), batch_size):
            a = None if aux is None else np.asarray(aux)[start:start + batch_size]
            o = self.forward(images[start:start + batch_size], a)
            for acc, node in zip(outs, (o.positions, o.visibility, o.pseudolabels)):
                acc.append(node.value)
        return tuple(np.concatenate(acc) for acc in outs)


def network_grad_check(net: StageNetwork, images, aux=None, head: str = "all",
                       targets=None, epsilon: float = 1e-5, entries_per_param: int = 10,
                       rng=None) -> tuple[float, int]:
    """Finite-difference check of a stage network's gradients through one head.

    ``head`` picks the loss: "positions" (euclidean), "visibility" (logistic),
    "pseudolabels" (euclidean) or "all" (their sum). Targets are drawn at
    random when not given.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    arch = net.arch
    bsz = len(images)
    if targets is None:
        targets = {
            "positions": rng.normal(scale=0.3, size=(bsz, 2 * arch.n_landmarks)),
            "visibility": rng.integers(0, 3, size=(bsz, arch.n_landmarks)),
            "pseudolabels": rng.uniform(size=(bsz, arch.n_clusters)),
        }
    heads = ("positions", "visibility", "pseudolabels") if head == "all" else (head,)

    def build(g, nodes):
        out = net.forward(images, aux, graph=g, nodes=nodes)
        terms = []
        if "positions" in heads:
            terms.append(g.euclidean_loss(out.positions, targets["positions"]))
        if "visibility" in heads:
            terms.append(g.logistic_loss(out.visibility, targets["visibility"]))
        if "pseudolabels" in heads:
            terms.append(g.euclidean_loss(out.pseudolabels, targets["pseudolabels"]))
        loss = terms[0]
        for t in terms[1:]:
            loss = g.add(loss, t)
        return loss

    return grad_check(build, net.params, epsilon, entries_per_param, rng)


def save_checkpoint(net: StageNetwork, path) -> None:
    """Write magic, version, JSON architecture, then named float64 LE tensors."""
    arch = json.dumps(net.arch.to_dict(), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(arch)))
        fh.write(arch)
        fh.write(struct.pack("<I", len(net.params)))
        for name in sorted(net.params):
            value = np.ascontiguousarray(net.params[name], dtype="<f8")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", value.ndim))
            fh.write(struct.pack(f"<{value.ndim}Q", *value.shape))
            fh.write(value.tobytes())


def load_checkpoint(path) -> StageNetwork:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a stage network checkpoint")
    pos = 8
    version, alen = struct.unpack_from("<II", data, pos)
    pos += 8
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    arch = Architecture.from_dict(json.loads(data[pos:pos + alen].decode("utf-8")))
    pos += alen
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", data, pos)
        pos += 8 * ndim
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        params[name] = np.frombuffer(data[pos:pos + nbytes], dtype="<f8").reshape(shape).astype(arch.dtype)
        pos += nbytes
    expected = arch.param_shapes()
    if set(params) != set(expected) or any(params[k].shape != tuple(expected[k]) for k in expected):
        raise ValueError(f"{path}: parameters do not match the stored architecture")
    return StageNetwork(arch, params)
