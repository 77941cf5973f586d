"""Tape-based reverse-mode automatic differentiation over float64 numpy arrays.

Only the handful of primitives needed by a small convolutional classifier
are supported. Every primitive accepts a leading batch dimension, so one
tape can carry a whole mini-batch.

    >>> tape = Tape()
    >>> x = tape.leaf(np.array([-1.0, 5.0]))
    >>> out = tape.sum(tape.relu(x))
    >>> tape.backward(out)[x]
    array([0., 1.])
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when a primitive receives operands of incompatible shapes."""


def _shape_error(kind: str, a, b, what: str = "") -> ShapeError:
    msg = f"{kind}: incompatible shapes {tuple(np.shape(a))} and {tuple(np.shape(b))}"
    if what:
        msg += f" ({what})"
    return ShapeError(msg)


class Var:
    """Handle to a node recorded on a tape."""

    __slots__ = ("tape", "index")

    def __init__(self, tape: "Tape", index: int):
        self.tape = tape
        self.index = index

    def __eq__(self, other) -> bool:
        return isinstance(other, Var) and other.tape is self.tape and other.index == self.index

    def __hash__(self) -> int:
        return hash((id(self.tape), self.index))

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.index].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Var(index={self.index}, kind={self.tape.nodes[self.index].kind!r}, shape={self.shape})"


@dataclass
class Node:
    kind: str
    parents: tuple[int, ...]
    value: np.ndarray
    attrs: dict = field(default_factory=dict)
    cache: dict = field(default_factory=dict)
    needs_grad: bool = False


# ---------------------------------------------------------------------------
# primitives: forward(values, attrs) -> (out, cache)
#             backward(gout, values, out, cache, attrs) -> tuple of parent grads
# ---------------------------------------------------------------------------


def _conv_raw(x: np.ndarray, w: np.ndarray, padding: int) -> tuple[np.ndarray, np.ndarray]:
    k = w.shape[-1]
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = sliding_window_view(xp, (k, k), axis=(2, 3))  # (n, c, ho, wo, k, k)
    out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3]))  # (n, ho, wo, o)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2)), cols


def _conv2d_fwd(values, attrs):
    x, w, b = values
    p = attrs["padding"]
    if x.ndim != 4 or w.ndim != 4 or w.shape[1] != x.shape[1] or w.shape[2] != w.shape[3]:
        raise _shape_error("conv2d", x, w, "expected input (n,c,h,w) and kernel (o,c,k,k)")
    k = w.shape[-1]
    if b.shape != (w.shape[0],):
        raise _shape_error("conv2d", w, b, "bias must have one entry per output channel")
    if not 0 <= p <= k - 1:
        raise ShapeError(f"conv2d: padding {p} outside [0, {k - 1}] for kernel size {k}")
    if x.shape[2] + 2 * p < k or x.shape[3] + 2 * p < k:
        raise _shape_error("conv2d", x, w, "kernel larger than padded input")
    out, cols = _conv_raw(x, w, p)
    out += b[None, :, None, None]
    return out, {"cols": cols}


def _conv2d_bwd(g, values, out, cache, attrs):
    x, w, b = values
    p = attrs["padding"]
    k = w.shape[-1]
    gw = np.tensordot(g, cache["cols"], axes=([0, 2, 3], [0, 2, 3]))
    gb = g.sum(axis=(0, 2, 3))
    # input gradient is a full correlation with the flipped, channel-swapped kernel
    flipped = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    gx, _ = _conv_raw(g, flipped, k - 1 - p)
    return gx, gw, gb


def _dense_fwd(values, attrs):
    x, w, b = values
    if w.ndim != 2 or b.shape != (w.shape[1],):
        raise _shape_error("dense", w, b, "expected weight (d,o) and bias (o,)")
    if x.ndim == 1:
        if x.shape[0] != w.shape[0]:
            raise _shape_error("dense", x, w)
        return x @ w + b, {}
    flat = x.reshape(x.shape[0], -1)
    if flat.shape[1] != w.shape[0]:
        raise _shape_error("dense", x, w, f"{flat.shape[1]} input features vs {w.shape[0]} weight rows")
    return flat @ w + b, {"flat": flat}


def _dense_bwd(g, values, out, cache, attrs):
    x, w, b = values
    if x.ndim == 1:
        return g @ w.T, np.outer(x, g), g.copy()
    flat = cache["flat"]
    return (g @ w.T).reshape(x.shape), flat.T @ g, g.sum(axis=0)


def _relu_fwd(values, attrs):
    (x,) = values
    return np.where(x > 0, x, 0.0), {}


def _relu_bwd(g, values, out, cache, attrs):
    # subgradient at exactly 0 is 0
    return (np.where(values[0] > 0, g, 0.0),)


def _maxpool2_fwd(values, attrs):
    (x,) = values
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"maxpool2: expected (n,c,h,w) with even h and w, got {x.shape}")
    n, c, h, w = x.shape
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    # argmax picks the first maximum in row-major window order
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, {"idx": idx}


def _maxpool2_bwd(g, values, out, cache, attrs):
    (x,) = values
    n, c, h, w = x.shape
    win = np.zeros((n, c, h // 2, w // 2, 4))
    np.put_along_axis(win, cache["idx"][..., None], g[..., None], axis=-1)
    gx = win.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
    return (gx,)


def _add_fwd(values, attrs):
    a, b = values
    if a.shape != b.shape:
        raise _shape_error("add", a, b)
    return a + b, {}


def _add_bwd(g, values, out, cache, attrs):
    return g, g


def _scale_fwd(values, attrs):
    return values[0] * attrs["factor"], {}


def _scale_bwd(g, values, out, cache, attrs):
    return (g * attrs["factor"],)


def _sum_fwd(values, attrs):
    return np.asarray(values[0].sum()), {}


def _sum_bwd(g, values, out, cache, attrs):
    return (np.full(values[0].shape, float(g)),)


def _check_labels(kind: str, logits: np.ndarray, labels: np.ndarray) -> None:
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise _shape_error(kind, logits, labels, "expected logits (n,k) and labels (n,)")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError(f"{kind}: label outside [0, {logits.shape[1]})")


def _xent_fwd(values, attrs):
    (logits,) = values
    labels = attrs["labels"]
    _check_labels("softmax_xent", logits, labels)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    picked = -log_p[np.arange(len(labels)), labels]
    loss = picked.sum()
    if attrs["reduction"] == "mean":
        loss = loss / len(labels)
    return np.asarray(loss), {"probs": np.exp(log_p)}


def _xent_bwd(g, values, out, cache, attrs):
    labels = attrs["labels"]
    grad = cache["probs"].copy()
    grad[np.arange(len(labels)), labels] -= 1.0
    if attrs["reduction"] == "mean":
        grad /= len(labels)
    return (grad * float(g),)


def _select_fwd(values, attrs):
    (logits,) = values
    labels = attrs["labels"]
    _check_labels("select_logit", logits, labels)
    return np.asarray(logits[np.arange(len(labels)), labels].sum()), {}


def _select_bwd(g, values, out, cache, attrs):
    labels = attrs["labels"]
    grad = np.zeros_like(values[0])
    grad[np.arange(len(labels)), labels] = float(g)
    return (grad,)


_Forward = Callable[[list, dict], tuple]
_Backward = Callable[..., tuple]

PRIMITIVES: dict[str, tuple[_Forward, _Backward]] = {
    "conv2d": (_conv2d_fwd, _conv2d_bwd),
    "dense": (_dense_fwd, _dense_bwd),
    "relu": (_relu_fwd, _relu_bwd),
    "maxpool2": (_maxpool2_fwd, _maxpool2_bwd),
    "add": (_add_fwd, _add_bwd),
    "scale": (_scale_fwd, _scale_bwd),
    "sum": (_sum_fwd, _sum_bwd),
    "softmax_xent": (_xent_fwd, _xent_bwd),
    "select_logit": (_select_fwd, _select_bwd),
}


class Tape:
    """Records primitive applications in execution order.

    A tape is single-use and not thread safe; build one per forward pass.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.leaves: set[int] = set()

    def _record(self, node: Node) -> Var:
        self.nodes.append(node)
        return Var(self, len(self.nodes) - 1)

    def leaf(self, value, requires_grad: bool = True) -> Var:
        """Record an input array; ``requires_grad`` marks it as a differentiation target."""
        arr = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError("leaf value contains NaN or Inf")
        arr.setflags(write=False)
        var = self._record(Node("leaf", (), arr, needs_grad=requires_grad))
        if requires_grad:
            self.leaves.add(var.index)
        return var

    def constant(self, value) -> Var:
        return self.leaf(value, requires_grad=False)

    def forward(self, kind: str, *inputs: Var, **attrs) -> Var:
        if kind not in PRIMITIVES:
            raise KeyError(f"unknown primitive {kind!r}")
        for v in inputs:
            if v.tape is not self:
                raise ValueError(f"{kind}: operand recorded on a different tape")
        fwd, _ = PRIMITIVES[kind]
        values = [self.nodes[v.index].value for v in inputs]
        out, cache = fwd(values, attrs)
        out = np.asarray(out, dtype=np.float64)
        if not np.all(np.isfinite(out)):
            raise FloatingPointError(f"{kind}: non-finite output")
        needs = any(self.nodes[v.index].needs_grad for v in inputs)
        return self._record(Node(kind, tuple(v.index for v in inputs), out, attrs, cache, needs))

    # convenience wrappers -------------------------------------------------

    def conv2d(self, x: Var, w: Var, b: Var, padding: int = 1) -> Var:
        return self.forward("conv2d", x, w, b, padding=padding)

    def dense(self, x: Var, w: Var, b: Var) -> Var:
        return self.forward("dense", x, w, b)

    def relu(self, x: Var) -> Var:
        return self.forward("relu", x)

    def maxpool2(self, x: Var) -> Var:
        return self.forward("maxpool2", x)

    def add(self, a: Var, b: Var) -> Var:
        return self.forward("add", a, b)

    def scale(self, a: Var, factor: float) -> Var:
        return self.forward("scale", a, factor=float(factor))

    def sum(self, a: Var) -> Var:
        return self.forward("sum", a)

    def softmax_xent(self, logits: Var, labels, reduction: str = "mean") -> Var:
        if reduction not in ("mean", "sum"):
            raise ValueError(f"softmax_xent: unknown reduction {reduction!r}")
        return self.forward("softmax_xent", logits, labels=np.asarray(labels, dtype=np.int64), reduction=reduction)

    def select_logit(self, logits: Var, labels) -> Var:
        """Sum over the batch of each row's logit at its label."""
        return self.forward("select_logit", logits, labels=np.asarray(labels, dtype=np.int64))

    # ---------------------------------------------------------------------

    def backward(self, output: Var) -> dict[Var, np.ndarray]:
        """Gradients of a scalar node with respect to every marked leaf."""
        out_node = self.nodes[output.index]
        if out_node.value.size != 1:
            raise ValueError(f"backward: output must be scalar, got shape {out_node.value.shape}")
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[output.index] = np.ones_like(out_node.value)
        for i in range(output.index, -1, -1):
            node = self.nodes[i]
            g = grads[i]
            if g is None or not node.parents or not node.needs_grad:
                continue
            _, bwd = PRIMITIVES[node.kind]
            values = [self.nodes[j].value for j in node.parents]
            parent_grads = bwd(g, values, node.value, node.cache, node.attrs)
            for j, pg in zip(node.parents, parent_grads):
                if not self.nodes[j].needs_grad:
                    continue
                grads[j] = pg if grads[j] is None else grads[j] + pg
        result = {}
        for i in sorted(self.leaves):
            g = grads[i]
            result[Var(self, i)] = np.zeros_like(self.nodes[i].value) if g is None else g
        return result


def numerical_gradient(fn: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-4) -> np.ndarray:
    """Central finite differences of a scalar function, one coordinate at a time."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + step
        hi = fn(x)
        flat[j] = orig - step
        lo = fn(x)
        flat[j] = orig
        gflat[j] = (hi - lo) / (2 * step)
    return grad
