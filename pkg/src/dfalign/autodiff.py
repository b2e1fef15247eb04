"""Minimal reverse-mode automatic differentiation on numpy arrays.

A :class:`Graph` is a tape: every op appends a :class:`Node` holding its
output value and a closure that maps the output gradient to input gradients.
Appending preserves topological order, so :func:`backward` walks the node
list in reverse.

Image tensors use channels-last layout ``(batch, height, width, channels)``.
"""

from __future__ import annotations

import hashlib
from typing import Callable, Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Node:
    __slots__ = ("index", "op", "inputs", "value", "grad", "name", "backward_fn", "pattern")

    def __init__(self, index, op, inputs, value, backward_fn=None, name=None):
        self.index = index
        self.op = op
        self.inputs = inputs
        self.value = value
        self.grad = None
        self.name = name
        self.backward_fn = backward_fn
        # relu masks / pool switches, used to detect kink crossings in grad_check
        self.pattern = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Node({self.index}, {self.op}{label}, shape={self.value.shape})"


class Graph:
    """Tape of nodes in creation (hence topological) order."""

    def __init__(self, check_finite: bool = True):
        self.nodes: list[Node] = []
        self.check_finite = check_finite

    def _push(self, op, inputs, value, backward_fn=None, name=None) -> Node:
        if self.check_finite and not np.all(np.isfinite(value)):
            raise NonFiniteError(f"op {op!r} produced non-finite values")
        node = Node(len(self.nodes), op, tuple(i.index for i in inputs), value, backward_fn, name)
        self.nodes.append(node)
        return node

    # -- leaves ---------------------------------------------------------

    def param(self, name: str, value: np.ndarray) -> Node:
        return self._push("param", (), value, name=name)

    def constant(self, value, name: str | None = None) -> Node:
        value = np.asarray(value)
        if not np.issubdtype(value.dtype, np.floating):
            value = value.astype(float)
        return self._push("const", (), value, name=name)

    @property
    def params(self) -> list[Node]:
        return [n for n in self.nodes if n.op == "param"]

    # -- elementwise ----------------------------------------------------

    def add(self, a: Node, b: Node) -> Node:
        if a.shape != b.shape:
            raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
        return self._push("add", (a, b), a.value + b.value, lambda g: (g, g))

    def mul(self, a: Node, b: Node) -> Node:
        if a.shape != b.shape:
            raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
        av, bv = a.value, b.value
        return self._push("mul", (a, b), av * bv, lambda g: (g * bv, g * av))

    def scale(self, a: Node, c: float) -> Node:
        c = float(c)
        return self._push("scale", (a,), a.value * c, lambda g: (g * c,))

    def relu(self, a: Node) -> Node:
        mask = a.value > 0
        node = self._push("relu", (a,), np.maximum(a.value, 0), lambda g: (g * mask,))
        node.pattern = mask
        return node

    # -- structural -----------------------------------------------------

    def reshape(self, a: Node, shape) -> Node:
        old = a.shape
        try:
            out = a.value.reshape(shape)
        except ValueError as exc:
            raise ShapeError(f"reshape: cannot view {old} as {shape}") from exc
        return self._push("reshape", (a,), out, lambda g: (g.reshape(old),))

    def concat(self, a: Node, b: Node) -> Node:
        """Concatenate two ``(batch, features)`` nodes along features."""
        if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[0] != b.shape[0]:
            raise ShapeError(f"concat: incompatible shapes {a.shape} and {b.shape}")
        split = a.shape[1]
        out = np.concatenate([a.value, b.value], axis=1)
        return self._push("concat", (a, b), out, lambda g: (g[:, :split], g[:, split:]))

    def sum(self, a: Node) -> Node:
        shape = a.shape
        return self._push("sum", (a,), np.asarray(a.value.sum()),
                          lambda g: (np.broadcast_to(g, shape).copy(),))

    # -- linear layers --------------------------------------------------

    def dense(self, x: Node, w: Node, b: Node | None = None, name: str = "dense") -> Node:
        """``x @ w + b`` for ``x`` of shape (batch, in)."""
        xv, wv = x.value, w.value
        if xv.ndim != 2 or wv.ndim != 2 or xv.shape[1] != wv.shape[0]:
            raise ShapeError(f"{name}: input {xv.shape} does not match weight {wv.shape}")
        out = xv @ wv
        if b is None:
            return self._push("dense", (x, w), out, lambda g: (g @ wv.T, xv.T @ g))
        if b.shape != (wv.shape[1],):
            raise ShapeError(f"{name}: bias {b.shape} does not match weight {wv.shape}")
        out = out + b.value
        return self._push("dense", (x, w, b), out,
                          lambda g: (g @ wv.T, xv.T @ g, g.sum(axis=0)))

    def conv2d(self, x: Node, w: Node, b: Node, name: str = "conv") -> Node:
        """Stride-1, zero-padded ('same') convolution.

        ``x``: (B, H, W, C); ``w``: (kh, kw, C, F) with odd kh, kw; ``b``: (F,).
        """
        xv, wv = x.value, w.value
        if xv.ndim != 4 or wv.ndim != 4 or xv.shape[3] != wv.shape[2]:
            raise ShapeError(f"{name}: input {xv.shape} does not match kernel {wv.shape}")
        kh, kw, c, f = wv.shape
        bsz, h, wd, _ = xv.shape
        ph, pw = kh // 2, kw // 2
        xp = np.pad(xv, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
        win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # B,H,W,C,kh,kw
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(bsz * h * wd, kh * kw * c)
        wm = wv.reshape(kh * kw * c, f)
        out = (cols @ wm + b.value).reshape(bsz, h, wd, f)

        need_dx = x.op != "const"

        def back(g):
            g2 = g.reshape(-1, f)
            dw = (cols.T @ g2).reshape(wv.shape)
            db = np.ones(g2.shape[0], dtype=g2.dtype) @ g2
            if not need_dx:
                return None, dw, db
            # transposed convolution as a sum of shifted matmuls
            wt = wv.transpose(0, 1, 3, 2)
            dxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i:i + h, j:j + wd, :] += g @ wt[i, j]
            return dxp[:, ph:ph + h, pw:pw + wd, :], dw, db

        return self._push("conv2d", (x, w, b), out, back)

    def maxpool2(self, x: Node, name: str = "pool") -> Node:
        """2x2 max pooling with stride 2; ties resolve to the first window entry
        in row-major order."""
        xv = x.value
        bsz, h, wd, c = xv.shape
        if h % 2 or wd % 2:
            raise ShapeError(f"{name}: spatial size {h}x{wd} is not even")
        quads = (xv[:, 0::2, 0::2], xv[:, 0::2, 1::2], xv[:, 1::2, 0::2], xv[:, 1::2, 1::2])
        out = np.maximum(np.maximum(quads[0], quads[1]), np.maximum(quads[2], quads[3]))
        taken = quads[0] == out
        masks = [taken]
        for q in quads[1:3]:
            m = (q == out) & ~taken
            taken = taken | m
            masks.append(m)
        masks.append(~taken)

        def back(g):
            dx = np.empty(xv.shape, dtype=g.dtype)
            dx[:, 0::2, 0::2] = g * masks[0]
            dx[:, 0::2, 1::2] = g * masks[1]
            dx[:, 1::2, 0::2] = g * masks[2]
            dx[:, 1::2, 1::2] = g * masks[3]
            return (dx,)

        node = self._push("maxpool2", (x,), out, back)
        node.pattern = np.stack(masks)
        return node

    # -- losses -----------------------------------------------------------

    def euclidean_loss(self, pred: Node, target, mask=None) -> Node:
        """Masked squared error normalized by the number of unmasked terms."""
        target = np.asarray(target, dtype=pred.value.dtype)
        if target.shape != pred.shape:
            raise ShapeError(f"euclidean_loss: pred {pred.shape} vs target {target.shape}")
        dtype = pred.value.dtype
        mask = np.ones(pred.shape, dtype) if mask is None else np.asarray(mask, dtype=dtype)
        if mask.shape != pred.shape:
            raise ShapeError(f"euclidean_loss: mask {mask.shape} vs pred {pred.shape}")
        denom = max(1.0, float(mask.sum()))
        resid = mask * (pred.value - target)
        value = np.asarray(float(np.sum(resid * resid)) / denom)
        return self._push("euclidean_loss", (pred,), value.astype(dtype),
                          lambda g: (g * (2.0 / denom) * resid,))

    def logistic_loss(self, logits: Node, labels) -> Node:
        """Mean multinomial logistic loss over all leading positions.

        ``logits`` has classes on the last axis; ``labels`` holds class indices
        for every leading position.
        """
        z = logits.value
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != z.shape[:-1]:
            raise ShapeError(f"logistic_loss: labels {labels.shape} vs logits {z.shape}")
        shifted = z - z.max(axis=-1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        picked = np.take_along_axis(logp, labels[..., None], axis=-1)[..., 0]
        count = max(1, picked.size)
        value = np.asarray(-float(picked.sum()) / count, dtype=z.dtype)
        prob = np.exp(logp)

        def back(g):
            d = prob.copy()
            np.put_along_axis(d, labels[..., None],
                              np.take_along_axis(d, labels[..., None], axis=-1) - 1.0, axis=-1)
            return (g * d / np.asarray(count, dtype=d.dtype),)

        return self._push("logistic_loss", (logits,), value, back)

    def kink_signature(self) -> str:
        h = hashlib.sha1()
        for node in self.nodes:
            if node.pattern is not None:
                h.update(np.ascontiguousarray(node.pattern).tobytes())
        return h.hexdigest()


def backward(graph: Graph, loss: Node) -> dict[str, np.ndarray]:
    """Backpropagate from a scalar ``loss``; return gradients keyed by param name.

    Parameters that do not reach the loss get exact zeros.
    """
    if loss.value.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    nodes = graph.nodes
    for node in nodes:
        node.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(nodes[: loss.index + 1]):
        if node.grad is None or node.backward_fn is None:
            continue
        for idx, g in zip(node.inputs, node.backward_fn(node.grad)):
            src = nodes[idx]
            if g is None or src.op == "const":
                continue
            src.grad = g if src.grad is None else src.grad + g
    grads = {}
    for node in nodes:
        if node.op == "param":
            grads[node.name] = np.zeros_like(node.value) if node.grad is None else node.grad
    return grads


class SGD:
    """Plain SGD with heavy-ball momentum: ``v = m*v + g; theta -= lr*v``."""

    def __init__(self, learning_rate: float, momentum: float = 0.9):
        if learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]):
        sgd_step(params, grads, self.learning_rate, self.velocity, self.momentum)
        return params


def sgd_step(params, grads, learning_rate, momentum_state, momentum=0.9):
    """Update ``params`` in place and return them.

    The whole step is aborted, leaving params and momentum untouched, if any
    gradient is non-finite.
    """
    if learning_rate <= 0:
        raise ValueError("learning_rate must be positive")
    unknown = set(grads) - set(params)
    if unknown:
        raise KeyError(f"gradients for unknown parameters: {sorted(unknown)}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
    for name, g in grads.items():
        v = momentum_state.get(name)
        v = g.copy() if v is None else momentum * v + g
        momentum_state[name] = v
        params[name] -= learning_rate * v
    return params


def grad_check(build_loss: Callable[[Graph, dict[str, Node]], Node],
               params: dict[str, np.ndarray], epsilon: float = 1e-5,
               entries_per_param: int | None = None, rng=None) -> tuple[float, int]:
    """Compare analytic gradients with central finite differences.

    ``build_loss(graph, nodes)`` must build a scalar loss from the param nodes.
    Entries whose +/- perturbation flips a relu mask or pool switch are skipped.
    Returns ``(max relative error, number of entries checked)``.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-7, 1e-3]")
    rng = np.random.default_rng(0) if rng is None else rng

    def run():
        g = Graph()
        nodes = {k: g.param(k, v) for k, v in params.items()}
        loss = build_loss(g, nodes)
        return g, loss

    graph, loss = run()
    analytic = backward(graph, loss)
    base_sig = graph.kink_signature()

    worst, checked = 0.0, 0
    for name, value in params.items():
        flat = value.reshape(-1)
        if not np.shares_memory(flat, value):
            raise ValueError(f"parameter {name!r} must be contiguous")
        if entries_per_param is None or entries_per_param >= flat.size:
            picks = range(flat.size)
        else:
            picks = rng.choice(flat.size, size=entries_per_param, replace=False)
        for i in picks:
            orig = flat[i]
            flat[i] = orig + epsilon
            gp, lp = run()
            flat[i] = orig - epsilon
            gm, lm = run()
            flat[i] = orig
            if gp.kink_signature() != base_sig or gm.kink_signature() != base_sig:
                continue
            numeric = (float(lp.value) - float(lm.value)) / (2 * epsilon)
            a = float(analytic[name].reshape(-1)[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
            checked += 1
    return worst, checked
