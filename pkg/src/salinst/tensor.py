"""Minimal reverse-mode autodiff over dense 4-D tensors.

Everything is double precision. A Tensor wraps a (n, c, h, w) ndarray and
remembers how it was produced; backward() walks the tape in reverse
topological order and accumulates gradients into every tensor that
influenced the loss. New primitives are defined by building an output
tensor with `_from_op` and a closure that scatters the incoming gradient
to the parents.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional

import numpy as np


class ShapeError(ValueError):
    """Raised when tensor shapes do not satisfy an op's contract."""


class GradientError(RuntimeError):
    """Raised when a gradient is missing or a graph is not differentiable."""


class Tensor:
    """Dense 4-D array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim != 4:
            raise ShapeError(f"tensors are 4-D (n, c, h, w); got shape {arr.shape}")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Backpropagate from a scalar root through the whole tape."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = _toposort(self)
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _toposort(root: Tensor) -> list:
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _from_op(data: np.ndarray, parents: tuple, backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad or p._parents for p in parents):
        out.requires_grad = any(p.requires_grad for p in parents)
        out._parents = parents
        out._backward = backward
    return out


def scalar(value: float) -> Tensor:
    return Tensor(np.full((1, 1, 1, 1), float(value)))


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")

    def bwd(g):
        a._accumulate(g)
        b._accumulate(g)

    return _from_op(a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: shape mismatch {a.shape} vs {b.shape}")

    def bwd(g):
        a._accumulate(g)
        b._accumulate(-g)

    return _from_op(a.data - b.data, (a, b), bwd)


def mul_elementwise(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul_elementwise: shape mismatch {a.shape} vs {b.shape}")

    def bwd(g):
        a._accumulate(g * b.data)
        b._accumulate(g * a.data)

    return _from_op(a.data * b.data, (a, b), bwd)


def mul_const(a: Tensor, c) -> Tensor:
    """Multiply by a constant ndarray (broadcastable); the constant gets no grad."""
    c = np.asarray(c, dtype=np.float64)
    out_data = a.data * c

    def bwd(g):
        ga = g * c
        if ga.shape != a.shape:
            ga = _unbroadcast(ga, a.shape)
        a._accumulate(ga)

    return _from_op(out_data, (a,), bwd)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    for axis, (gs, s) in enumerate(zip(g.shape, shape)):
        if s == 1 and gs != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def scalar_mul(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def bwd(g):
        a._accumulate(g * s)

    return _from_op(a.data * s, (a,), bwd)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bwd(g):
        a._accumulate(g * mask)

    return _from_op(np.maximum(a.data, 0.0), (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-a.data))

    def bwd(g):
        a._accumulate(g * s * (1.0 - s))

    return _from_op(s, (a,), bwd)


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != a.data.size or len(shape) != 4:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")

    def bwd(g):
        a._accumulate(g.reshape(a.shape))

    return _from_op(a.data.reshape(shape), (a,), bwd)


def concat(tensors, axis: int = 3) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * 4
            sl[axis] = slice(lo, hi)
            t._accumulate(g[tuple(sl)])

    return _from_op(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bwd)


def take(a: Tensor, flat_indices) -> Tensor:
    """Gather entries of the flattened tensor into a (1, 1, 1, k) vector."""
    idx = np.asarray(flat_indices, dtype=np.intp)
    out_data = a.data.reshape(-1)[idx].reshape(1, 1, 1, idx.size)

    def bwd(g):
        ga = np.zeros(a.data.size)
        np.add.at(ga, idx, g.reshape(-1))
        a._accumulate(ga.reshape(a.shape))

    return _from_op(out_data, (a,), bwd)


def sum_all(a: Tensor) -> Tensor:
    def bwd(g):
        a._accumulate(np.full_like(a.data, g.reshape(-1)[0]))

    return _from_op(a.data.sum().reshape(1, 1, 1, 1), (a,), bwd)


def mean_tensors(tensors) -> Tensor:
    """Average of scalar tensors (graph-tracked)."""
    tensors = list(tensors)
    total = tensors[0]
    for t in tensors[1:]:
        total = add(total, t)
    return scalar_mul(total, 1.0 / len(tensors))


# ---------------------------------------------------------------------------
# spatial primitives


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1,
           dilation: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution (cross-correlation) with square kernels.

    weight is (c_out, c_in, k, k); bias is (1, c_out, 1, 1). Output spatial
    size follows floor((H + 2p - d*(k-1) - 1)/s) + 1.
    """
    if stride < 1 or dilation < 1:
        raise ShapeError(f"conv2d: stride/dilation must be >= 1, got {stride}/{dilation}")
    n, c, h, w = x.shape
    c_out, c_in, k, k2 = weight.shape
    if k != k2:
        raise ShapeError(f"conv2d: kernel must be square, got weight shape {weight.shape}")
    if c != c_in:
        raise ShapeError(
            f"conv2d: input channels {x.shape} do not match weight {weight.shape}")
    if bias.shape != (1, c_out, 1, 1):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != (1, {c_out}, 1, 1)")
    span = dilation * (k - 1) + 1
    h_out = (h + 2 * padding - span) // stride + 1
    w_out = (w + 2 * padding - span) // stride + 1
    if h_out < 1 or w_out < 1:
        raise ShapeError(
            f"conv2d: empty output for input {x.shape}, kernel {k}, "
            f"stride {stride}, dilation {dilation}, padding {padding}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (span, span), axis=(2, 3))
    win = win[:, :, ::stride, ::stride, ::dilation, ::dilation]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        n * h_out * w_out, c * k * k)
    wmat = weight.data.reshape(c_out, -1)
    out = cols @ wmat.T + bias.data.reshape(1, c_out)
    out = out.reshape(n, h_out, w_out, c_out).transpose(0, 3, 1, 2)

    hp, wp = h + 2 * padding, w + 2 * padding

    def bwd(g):
        go = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
        bias._accumulate(g.sum(axis=(0, 2, 3)).reshape(1, c_out, 1, 1))
        weight._accumulate((go.T @ cols).reshape(weight.shape))
        gcols = (go @ wmat).reshape(n, h_out, w_out, c, k, k).transpose(0, 3, 4, 5, 1, 2)
        gxp = np.zeros((n, c, hp, wp))
        for i in range(k):
            for j in range(k):
                gxp[:, :,
                    i * dilation: i * dilation + stride * h_out: stride,
                    j * dilation: j * dilation + stride * w_out: stride] += gcols[:, :, i, j]
        x._accumulate(gxp[:, :, padding: padding + h, padding: padding + w])

    return _from_op(np.ascontiguousarray(out), (x, weight, bias), bwd)


def maxpool2d(x: Tensor, kernel: int, stride: int = 1, padding: int = 0) -> Tensor:
    """Windowed max; backward routes the gradient to the first (row-major)
    maximal cell of each window."""
    if kernel < 1:
        raise ShapeError(f"maxpool2d: kernel must be >= 1, got {kernel}")
    n, c, h, w = x.shape
    h_out = (h + 2 * padding - kernel) // stride + 1
    w_out = (w + 2 * padding - kernel) // stride + 1
    if h_out < 1 or w_out < 1:
        raise ShapeError(f"maxpool2d: empty output for input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                constant_values=-np.inf)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kernel, kernel), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    flat = win.reshape(n, c, h_out, w_out, kernel * kernel)
    arg = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    hp, wp = h + 2 * padding, w + 2 * padding

    def bwd(g):
        di, dj = np.divmod(arg, kernel)
        rows = (np.arange(h_out) * stride)[None, None, :, None] + di
        cols_ = (np.arange(w_out) * stride)[None, None, None, :] + dj
        ni = np.arange(n)[:, None, None, None]
        ci = np.arange(c)[None, :, None, None]
        gxp = np.zeros((n, c, hp, wp))
        np.add.at(gxp, (ni, ci, rows, cols_), g)
        x._accumulate(gxp[:, :, padding: padding + h, padding: padding + w])

    return _from_op(np.ascontiguousarray(out), (x,), bwd)


def upsample_nearest2x(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def bwd(g):
        x._accumulate(g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))

    return _from_op(out, (x,), bwd)


# ---------------------------------------------------------------------------
# loss primitives (scalar reductions with hand-derived backward rules)

PROB_CLAMP = 1e-7


def balanced_objectness(logits: Tensor, pos_indices, neg_indices) -> Tensor:
    """Class-balanced binary objectness loss over flat anchor logits.

    Positive and negative terms are normalized by their own counts so that
    the (much larger) negative set cannot dominate. Probabilities are
    clamped to [1e-7, 1 - 1e-7] before the logs.
    """
    pos = np.asarray(pos_indices, dtype=np.intp)
    neg = np.asarray(neg_indices, dtype=np.intp)
    flat = logits.data.reshape(-1)
    p = 1.0 / (1.0 + np.exp(-flat))
    pc = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    loss = 0.0
    if pos.size:
        loss -= np.log(pc[pos]).mean()
    if neg.size:
        loss -= np.log(1.0 - pc[neg]).mean()

    unclamped = (p > PROB_CLAMP) & (p < 1.0 - PROB_CLAMP)

    def bwd(g):
        gs = float(g.reshape(-1)[0])
        gl = np.zeros_like(flat)
        if pos.size:
            gl[pos] += -(1.0 - p[pos]) * unclamped[pos] / pos.size
        if neg.size:
            gl[neg] += p[neg] * unclamped[neg] / neg.size
        logits._accumulate(gs * gl.reshape(logits.shape))

    return _from_op(np.array(loss).reshape(1, 1, 1, 1), (logits,), bwd)


def smooth_l1(pred: Tensor, target) -> Tensor:
    """Mean over rows of the smooth-L1 error summed over the last axis.

    pred is (1, 1, p, 4); target is a constant array of the same shape.
    """
    target = np.asarray(target, dtype=np.float64).reshape(pred.shape)
    rows = pred.shape[2]
    e = pred.data - target
    ae = np.abs(e)
    per = np.where(ae < 1.0, 0.5 * e * e, ae - 0.5)
    loss = per.sum() / rows

    def bwd(g):
        gs = float(g.reshape(-1)[0])
        pred._accumulate(gs * np.clip(e, -1.0, 1.0) / rows)

    return _from_op(np.array(loss).reshape(1, 1, 1, 1), (pred,), bwd)


def bce_with_support(logits: Tensor, target, support) -> Tensor:
    """Per-pixel binary cross-entropy averaged over a support region.

    target and support are constant arrays shaped like logits; support is a
    0/1 indicator of which pixels contribute.
    """
    target = np.asarray(target, dtype=np.float64).reshape(logits.shape)
    support = np.asarray(support, dtype=np.float64).reshape(logits.shape)
    n_sup = support.sum()
    if n_sup == 0:
        raise ValueError("bce_with_support: empty support region")
    p = 1.0 / (1.0 + np.exp(-logits.data))
    pc = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    per = -(target * np.log(pc) + (1.0 - target) * np.log(1.0 - pc))
    loss = (per * support).sum() / n_sup

    unclamped = (p > PROB_CLAMP) & (p < 1.0 - PROB_CLAMP)

    def bwd(g):
        gs = float(g.reshape(-1)[0])
        logits._accumulate(gs * (p - target) * unclamped * support / n_sup)

    return _from_op(np.array(loss).reshape(1, 1, 1, 1), (logits,), bwd)


# ---------------------------------------------------------------------------
# graph, optimizer, checkpointing, gradient checking


@dataclass
class Graph:
    """A rebuildable scalar-loss computation over named parameters."""
    build: Callable[[], Tensor]
    parameters: Dict[str, Tensor]


@dataclass
class OptimState:
    learning_rate: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")


def sgd_step(params: Dict[str, Tensor], state: OptimState) -> None:
    """In-place momentum-SGD update with L2 decay added to the gradients."""
    for name, p in params.items():
        if p.grad is None:
            raise GradientError(f"sgd_step: parameter '{name}' has no gradient")
        g = p.grad + state.weight_decay * p.data
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = state.momentum * v + g
        state.velocity[name] = v
        p.data -= state.learning_rate * v


def zero_grads(params: Dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


def finite_diff_check(graph: Graph, parameter: str, epsilon: float,
                      max_entries: int = 64, rng: Optional[np.random.Generator] = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    Samples up to max_entries parameter entries. Relative error is
    |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    param = graph.parameters[parameter]
    zero_grads(graph.parameters)
    loss = graph.build()
    if loss.data.size != 1:
        raise ShapeError(f"finite_diff_check: loss must be scalar, got {loss.shape}")
    loss.backward()
    if param.grad is None:
        raise GradientError(f"parameter '{parameter}' received no gradient")
    analytic = param.grad.reshape(-1).copy()

    flat = param.data.reshape(-1)
    if rng is None:
        rng = np.random.default_rng(0)
    if flat.size <= max_entries:
        entries = np.arange(flat.size)
    else:
        entries = rng.choice(flat.size, size=max_entries, replace=False)

    worst = 0.0
    for i in entries:
        old = flat[i]
        flat[i] = old + epsilon
        up = graph.build().item()
        flat[i] = old - epsilon
        down = graph.build().item()
        flat[i] = old
        numeric = (up - down) / (2.0 * epsilon)
        err = abs(analytic[i] - numeric) / max(1e-8, abs(analytic[i]) + abs(numeric))
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# parameter checkpoints

_CKPT_MAGIC = b"NNP4"
_CKPT_VERSION = 1


def save_checkpoint(params: Dict[str, Tensor], path) -> None:
    """Write parameters: versioned header, then per-parameter records of
    (name length, name, 4-int shape, raw little-endian doubles)."""
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<II", _CKPT_VERSION, len(params)))
        for name, p in params.items():
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<4q", *p.shape))
            f.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> Dict[str, Tensor]:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic {magic!r})")
        version, count = struct.unpack("<II", f.read(8))
        if version != _CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        params: Dict[str, Tensor] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", f.read(4))
            name = f.read(nlen).decode("utf-8")
            shape = struct.unpack("<4q", f.read(32))
            size = int(np.prod(shape))
            data = np.frombuffer(f.read(size * 8), dtype="<f8").reshape(shape)
            params[name] = Tensor(data.copy(), requires_grad=True)
    return params
