"""Minimal reverse-mode differentiation over float64 numpy arrays.

Every op returns a new :class:`Tensor` that remembers its parents and a
backward rule. :func:`backward` orders the reachable graph topologically and
walks it in reverse, accumulating gradients additively across fan-out.

Batched inputs are supported everywhere a leading batch axis makes sense:
``conv2d`` takes ``(C, H, W)`` or ``(N, C, H, W)``, ``dense`` takes ``(in,)``
or ``(N, in)``. There is no general broadcasting.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class ShapeError(ValueError):
    """Raised when operand shapes do not fit an op."""


class Tensor:
    """Dense float64 array with an optional gradient buffer."""

    __slots__ = ("value", "grad", "requires_grad", "name", "_parents", "_backward", "_op")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        v = np.asarray(value, dtype=np.float64)
        self.value = v if v.flags.c_contiguous else v.copy()  # keeps 0-d scalars 0-d
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.value) if requires_grad else None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.value)

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else float(self.value)

    def detach(self) -> "Tensor":
        return Tensor(self.value.copy())

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{tag})"

    # operator sugar; only same-shape tensors and python scalars are accepted
    def __add__(self, other):
        return add(self, _as_tensor(other, self.shape))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scalar_mul(_as_tensor(other, self.shape), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scalar_mul(self, -1.0)


def _as_tensor(x, shape) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (int, float)):
        return Tensor(np.full(shape, float(x)))
    return Tensor(x)


def make_op(value: np.ndarray, parents: Iterable[Tensor], backward_fn: BackwardFn, op: str) -> Tensor:
    """Wrap ``value`` as the output of an op.

    ``backward_fn`` maps the output gradient to one gradient (or ``None``)
    per parent. Ops whose parents need no gradient produce plain constants.
    """
    parents = tuple(parents)
    out = Tensor(value)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        out._op = op
    return out


def topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf with ``requires_grad`` reachable from ``loss``.

    Leaf gradients accumulate across calls; call ``zero_grad`` in between.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------- primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return make_op(a.value + b.value, (a, b), lambda g: (g, g), "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    av, bv = a.value, b.value
    return make_op(av * bv, (a, b), lambda g: (g * bv, g * av), "mul")


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return make_op(a.value * c, (a,), lambda g: (g * c,), "scalar_mul")


def relu(a: Tensor) -> Tensor:
    # subgradient 0 at exactly 0
    mask = a.value > 0
    return make_op(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.value
    # split by sign so neither branch overflows
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return make_op(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return make_op(np.array(a.value.sum()), (a,), lambda g: (np.full(shape, float(g)),), "sum")


def square(a: Tensor) -> Tensor:
    x = a.value
    return make_op(x * x, (a,), lambda g: (2.0 * g * x,), "square")


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` with ``w`` of shape ``(out, in)``."""
    if w.value.ndim != 2 or x.value.ndim not in (1, 2) or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weight {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"dense: bias {b.shape} does not match weight {w.shape}")
    xv, wv = x.value, w.value
    out = xv @ wv.T
    if b is not None:
        out = out + b.value

    def back(g):
        gx = g @ wv
        gw = np.outer(g, xv) if xv.ndim == 1 else g.T @ xv
        gb = g if g.ndim == 1 else g.sum(axis=0)
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return make_op(out, parents, back, "dense")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """3x3 convolution with zero padding 1 and stride 1 or 2.

    ``x`` is ``(C, H, W)`` or ``(N, C, H, W)``; ``w`` is ``(out, C, 3, 3)``.
    """
    if stride not in (1, 2):
        raise ShapeError(f"conv2d: stride must be 1 or 2, got {stride}")
    xv = x.value
    unbatched = xv.ndim == 3
    if unbatched:
        xv = xv[None]
    if xv.ndim != 4:
        raise ShapeError(f"conv2d: input must be (C,H,W) or (N,C,H,W), got {x.shape}")
    if w.value.ndim != 4 or w.shape[2:] != (3, 3) or w.shape[1] != xv.shape[1]:
        raise ShapeError(f"conv2d: weight {w.shape} incompatible with input {x.shape}")
    cout = w.shape[0]
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv2d: bias {b.shape} does not match {cout} output channels")

    n, c, h, wd = xv.shape
    ho, wo = (h - 1) // stride + 1, (wd - 1) // stride + 1
    xp = np.pad(xv, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))[:, :, ::stride, ::stride]
    # channel-major columns (C*9, N*Ho*Wo) keep the innermost copy axis contiguous
    cols = np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * 9, n * ho * wo)
    wmat = w.value.reshape(cout, c * 9)
    out = (wmat @ cols).reshape(cout, n, ho, wo)
    if b is not None:
        out += b.value[:, None, None, None]
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))
    if unbatched:
        out = out[0]

    def back(g):
        if unbatched:
            g = g[None]
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, -1)
        gw = (g2 @ cols.T).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (wmat.T @ g2).reshape(c, 3, 3, n, ho, wo)
            dxp = np.zeros((c, n, h + 2, wd + 2))
            for ki in range(3):
                for kj in range(3):
                    dxp[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += dcols[:, ki, kj]
            gx = np.ascontiguousarray(dxp[:, :, 1:-1, 1:-1].transpose(1, 0, 2, 3))
            if unbatched:
                gx = gx[0]
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, w, b) if b is not None else (x, w)
    return make_op(out, parents, back, "conv2d")


def bce_with_logits(logits: Tensor, target: np.ndarray, pos_weight: float = 1.0) -> Tensor:
    """Mean binary cross-entropy of ``sigmoid(logits)`` against a fixed 0/1 target."""
    z = logits.value
    t = np.asarray(target, dtype=np.float64)
    if t.shape != z.shape:
        raise ShapeError(f"bce: target {t.shape} does not match logits {z.shape}")
    # log(1 + exp(-|z|)) formulation
    softplus_neg = np.log1p(np.exp(-np.abs(z)))
    log_p = -(np.maximum(-z, 0.0) + softplus_neg)
    log_1mp = -(np.maximum(z, 0.0) + softplus_neg)
    weight = np.where(t > 0.5, pos_weight, 1.0)
    loss = -(weight * (t * log_p + (1.0 - t) * log_1mp)).mean()
    p = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
    count = z.size

    def back(g):
        return (float(g) * weight * (p - t) / count,)

    return make_op(np.array(loss), (logits,), back, "bce")


def weighted_sq_error(pred: Tensor, target: np.ndarray, weight: np.ndarray | None = None,
                      batch: int = 1) -> Tensor:
    """``sum((weight * (pred - target))**2) / batch`` with ``target``/``weight`` held fixed."""
    t = np.asarray(target, dtype=np.float64)
    if t.shape != pred.shape:
        raise ShapeError(f"sq_error: target {t.shape} does not match prediction {pred.shape}")
    diff = pred.value - t
    w2 = None
    if weight is not None:
        w2 = np.broadcast_to(np.asarray(weight, dtype=np.float64), pred.shape) ** 2
        val = (w2 * diff * diff).sum() / batch
    else:
        val = (diff * diff).sum() / batch

    def back(g):
        gd = 2.0 * float(g) * diff / batch
        return (gd * w2 if w2 is not None else gd,)

    return make_op(np.array(val), (pred,), back, "sq_error")


# ---------------------------------------------------------------- optimizer


def adam_step(params: Sequence[Tensor], state: dict, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update applied in place to ``params``.

    ``state`` holds ``"t"`` and per-parameter moment lists ``"m"``/``"v"``;
    an empty dict is initialised to zeros on first use.
    """
    if not state:
        state["t"] = 0
        state["m"] = [np.zeros_like(p.value) for p in params]
        state["v"] = [np.zeros_like(p.value) for p in params]
    state["t"] += 1
    t = state["t"]
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for p, m, v in zip(params, state["m"], state["v"]):
        g = p.grad
        if g.shape != p.value.shape:
            raise ShapeError(f"adam: grad {g.shape} does not match param {p.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p.value -= lr * m_hat / (np.sqrt(v_hat) + eps)


class Adam:
    """Thin stateful wrapper around :func:`adam_step`."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state: dict = {}

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        adam_step(self.params, self.state, self.lr, self.betas[0], self.betas[1], self.eps)
