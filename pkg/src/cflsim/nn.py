"""Minimal reverse-mode autodiff over float64 numpy arrays.

Values are plain ``np.ndarray`` objects; a :class:`Var` wraps one together
with the closure that pushes gradients to its parents.  A parameter set is a
``dict[str, np.ndarray]`` whose iteration order is taken lexicographically
wherever order matters.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from cflsim.errors import CapabilityError, StructuralError

ParamSet = dict[str, np.ndarray]

DTYPE = np.float64


class Var:
    """A node in the computation graph."""

    __slots__ = ("value", "grad", "parents", "backward_fn")

    def __init__(self, value, parents: tuple["Var", ...] = (), backward_fn=None):
        self.value = np.asarray(value, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.parents = parents
        self.backward_fn = backward_fn

    # numpy must never silently operate on graph nodes
    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        raise CapabilityError(f"unsupported op in graph: numpy ufunc {ufunc.__name__!r}")

    def __array_function__(self, func, types, args, kwargs):
        raise CapabilityError(f"unsupported op in graph: numpy function {func.__name__!r}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_var(other)))

    def __rsub__(self, other):
        return add(as_var(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Var(shape={self.shape})"


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Var(a.value + b.value, (a, b), backward)


def neg(a: Var) -> Var:
    return Var(-a.value, (a,), lambda g: (-g,))


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)

    def backward(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return Var(a.value * b.value, (a, b), backward)


def matmul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise StructuralError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        return g @ b.value.T, a.value.T @ g

    return Var(a.value @ b.value, (a, b), backward)


def relu(a: Var) -> Var:
    mask = a.value > 0
    return Var(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a: Var) -> Var:
    out = _stable_sigmoid(a.value)
    return Var(out, (a,), lambda g: (g * out * (1.0 - out),))


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softmax(a: Var) -> Var:
    """Softmax along the last axis."""
    z = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return Var(s, (a,), backward)


def reshape(a: Var, shape: Sequence[int]) -> Var:
    old = a.shape
    return Var(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def total(a: Var) -> Var:
    shape = a.shape
    return Var(np.array(a.value.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a: Var) -> Var:
    n = a.value.size
    shape = a.shape
    return Var(np.array(a.value.sum() / n), (a,), lambda g: (np.full(shape, g / n),))


def global_avg_pool(a: Var) -> Var:
    """[N, C, H, W] -> [N, C]."""
    n, c, h, w = a.shape
    area = h * w

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / area, (n, c, h, w)).copy(),)

    return Var(a.value.mean(axis=(2, 3)), (a,), backward)


def take(a: Var, index: Sequence[int], axis: int) -> Var:
    """Gather ``index`` along ``axis``; index entries must be distinct."""
    idx = np.asarray(index, dtype=np.intp)
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        sl = [slice(None)] * len(shape)
        sl[axis] = idx
        out[tuple(sl)] = g
        return (out,)

    return Var(np.take(a.value, idx, axis=axis), (a,), backward)


def scatter(a: Var, index: Sequence[int], axis: int, size: int) -> Var:
    """Place slices of ``a`` at ``index`` of a zero tensor with ``size`` along ``axis``."""
    idx = np.asarray(index, dtype=np.intp)
    shape = list(a.shape)
    shape[axis] = size
    out = np.zeros(shape)
    sl = [slice(None)] * len(shape)
    sl[axis] = idx
    out[tuple(sl)] = a.value
    return Var(out, (a,), lambda g: (np.take(g, idx, axis=axis),))


def _windows(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d(x, weight, stride: int = 1) -> Var:
    """Cross-correlation with zero padding ``k // 2``; output spatial dims ceil(H / stride)."""
    x, weight = as_var(x), as_var(weight)
    if x.value.ndim != 4 or weight.value.ndim != 4:
        raise StructuralError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise StructuralError(f"conv2d channel mismatch: input Cin={cin}, weight Cin={wcin}")
    if kh != kw or kh % 2 == 0:
        raise StructuralError(f"conv2d kernel must be odd and square, got {kh}x{kw}")
    if stride < 1:
        raise StructuralError(f"conv2d stride must be >= 1, got {stride}")
    k = kh
    win = _windows(x.value, k, stride)
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * k * k)
    wmat = weight.value.reshape(cout, cin * k * k)
    out = (cols @ wmat.T).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        gw = (g2.T @ cols).reshape(weight.shape)
        gcols = (g2 @ wmat).reshape(n, ho, wo, cin, k, k)
        p = k // 2
        gxp = np.zeros((n, cin, h + 2 * p, w + 2 * p))
        for i in range(k):
            for j in range(k):
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[
                    :, :, :, :, i, j
                ].transpose(0, 3, 1, 2)
        return gxp[:, :, p : p + h, p : p + w], gw

    return Var(np.ascontiguousarray(out), (x, weight), backward)


def softmax_cross_entropy(logits: Var, labels: np.ndarray) -> Var:
    """Mean cross-entropy of integer ``labels`` under ``softmax(logits)``."""
    z = logits.value
    if z.ndim != 2 or len(labels) != z.shape[0]:
        raise StructuralError(f"logits {z.shape} do not match {len(labels)} labels")
    labels = np.asarray(labels, dtype=np.intp)
    n = z.shape[0]
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - logsum[:, None]
    loss = -logp[np.arange(n), labels].sum() / n

    def backward(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (g * p / n,)

    return Var(np.array(loss), (logits,), backward)


def mse(pred: Var, target: np.ndarray) -> Var:
    diff = pred.value - target
    n = diff.size
    return Var(np.array((diff * diff).sum() / n), (pred,), lambda g: (g * 2.0 * diff / n,))


def backward(root: Var) -> None:
    """Accumulate d(root)/d(node) into ``node.grad`` for every ancestor."""
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node.backward_fn is None or node.grad is None:
            continue
        for parent, g in zip(node.parents, node.backward_fn(node.grad)):
            parent.grad = g if parent.grad is None else parent.grad + g


def grad_of(loss_fn: Callable[[dict[str, Var]], Var], params: Mapping[str, np.ndarray]) -> ParamSet:
    """Exact gradients of a scalar ``loss_fn(vars)`` with respect to every parameter."""
    leaves = {k: Var(params[k]) for k in sorted(params)}
    loss = loss_fn(leaves)
    if not isinstance(loss, Var):
        try:
            value = np.asarray(loss, dtype=DTYPE)
        except (TypeError, ValueError) as exc:
            raise CapabilityError(f"loss_fn returned unsupported value {type(loss).__name__}") from exc
        if value.size != 1:
            raise StructuralError(f"loss must be scalar, got shape {value.shape}")
        return {k: np.zeros_like(params[k], dtype=DTYPE) for k in leaves}
    if loss.value.size != 1:
        raise StructuralError(f"loss must be scalar, got shape {loss.shape}")
    backward(loss)
    return {
        k: (v.grad.copy() if v.grad is not None else np.zeros_like(v.value)) for k, v in leaves.items()
    }


def value_and_grad(loss_fn, params: Mapping[str, np.ndarray]) -> tuple[float, ParamSet]:
    box: list[float] = []

    def wrapped(vs):
        out = loss_fn(vs)
        box.append(float(out.value))
        return out

    grads = grad_of(wrapped, params)
    return box[0], grads


def check_same_structure(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray], what: str = "") -> None:
    if set(a) != set(b):
        missing = sorted(set(a) ^ set(b))
        raise StructuralError(f"{what} key sets differ: {missing}")
    for k in a:
        if np.shape(a[k]) != np.shape(b[k]):
            raise StructuralError(f"{what} shape mismatch for {k!r}: {np.shape(a[k])} vs {np.shape(b[k])}")


def sgd_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float) -> ParamSet:
    check_same_structure(params, grads, "sgd_step")
    return {k: params[k] - lr * grads[k] for k in sorted(params)}


def params_sub(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray]) -> ParamSet:
    check_same_structure(a, b, "params_sub")
    return {k: a[k] - b[k] for k in sorted(a)}


def copy_params(p: Mapping[str, np.ndarray]) -> ParamSet:
    return {k: np.array(p[k], dtype=DTYPE, copy=True) for k in sorted(p)}


def params_equal(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray]) -> bool:
    return set(a) == set(b) and all(
        np.shape(a[k]) == np.shape(b[k]) and np.array_equal(a[k], b[k]) for k in a
    )


# -- binary serialization -------------------------------------------------

PARAM_MAGIC = b"CFLP"
PARAM_VERSION = 1


def dump_params(params: Mapping[str, np.ndarray]) -> bytes:
    """Serialize to the flat ``CFLP`` format (entries in lexicographic id order)."""
    chunks = [PARAM_MAGIC, struct.pack("<I", PARAM_VERSION)]
    for key in sorted(params):
        arr = np.asarray(params[key], dtype="<f8")
        kb = key.encode("utf-8")
        chunks.append(struct.pack("<I", len(kb)))
        chunks.append(kb)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(chunks)


def load_params(blob: bytes) -> ParamSet:
    if blob[:4] != PARAM_MAGIC:
        raise StructuralError(f"bad magic {blob[:4]!r}, expected {PARAM_MAGIC!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != PARAM_VERSION:
        raise StructuralError(f"unsupported CFLP version {version}")
    pos = 8
    out: ParamSet = {}
    while pos < len(blob):
        (klen,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        key = blob[pos : pos + klen].decode("utf-8")
        pos += klen
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}Q", blob, pos)
        pos += 8 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(dims)
        pos += 8 * count
        if key in out:
            raise StructuralError(f"duplicate parameter id {key!r}")
        out[key] = arr.astype(DTYPE)
    return out


def param_count(params: Iterable[np.ndarray]) -> int:
    return int(sum(np.size(p) for p in params))
