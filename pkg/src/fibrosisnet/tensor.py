"""A small reverse-mode autodiff engine over numpy arrays.

Only the operations the backbone and the slope head need are provided.
Every op builds a node holding its parents and a closure mapping the
output gradient to parent gradients; :meth:`Tensor.backward` walks the
graph in reverse topological order.

Computation defaults to float32.  Build tensors from float64 arrays to
run the same graph in double precision (used for gradient checking).
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import GraphCycle, IoFailure, NonFiniteValue, ShapeMismatch

CHECK_FINITE = True


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self)))

    def __rsub__(self, other):
        return add(_lift(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf that requires grad."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeMismatch("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def _topological_order(root: Tensor) -> list:
    order, state = [], {}
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        key = id(node)
        if expanded:
            state[key] = 2
            order.append(node)
            continue
        if state.get(key) == 2:
            continue
        if state.get(key) == 1:
            raise GraphCycle("computation graph contains a cycle")
        state[key] = 1
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad:
                if state.get(id(p)) == 1:
                    raise GraphCycle("computation graph contains a cycle")
                if state.get(id(p)) != 2:
                    stack.append((p, False))
    return order


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _lift_params(w, b, like: Tensor):
    # plain arrays are accepted as constant (non-trainable) parameters
    w = _lift(w, like)
    return w, None if b is None else _lift(b, like)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if CHECK_FINITE and not np.isfinite(data).all():
        raise NonFiniteValue("operation produced a non-finite value")
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ------------------------------------------------------------ elementwise


def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    return _node(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def residual_add(x: Tensor, y: Tensor) -> Tensor:
    if x.shape != y.shape:
        raise ShapeMismatch(f"residual_add shapes differ: {x.shape} vs {y.shape}")
    return add(x, y)


def neg(x: Tensor) -> Tensor:
    return _node(-x.data, (x,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    return _node(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def tensor_sum(x: Tensor) -> Tensor:
    return _node(np.asarray(x.data.sum(), dtype=x.dtype), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return _node(
        np.asarray(x.data.mean(), dtype=x.dtype),
        (x,),
        lambda g: (np.full(x.shape, g / n, dtype=x.dtype),),
    )


def reshape(x: Tensor, shape) -> Tensor:
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    xs = list(xs)
    if not xs:
        raise ShapeMismatch("concat of an empty list")
    ndim = xs[0].ndim
    axis = axis % ndim
    for x in xs:
        if x.ndim != ndim or any(x.shape[d] != xs[0].shape[d] for d in range(ndim) if d != axis):
            raise ShapeMismatch(f"concat along {axis}: incompatible shapes {[t.shape for t in xs]}")
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(np.concatenate([x.data for x in xs], axis=axis), xs, backward)


# ----------------------------------------------------------------- linear


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
    return _node(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` for ``x`` of shape (N, F), ``w`` (F, G), ``b`` (G,)."""
    w, b = _lift_params(w, b, x)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeMismatch(f"dense: input {x.shape} vs weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeMismatch(f"dense: bias {b.shape} vs {w.shape[1]} outputs")
    out = x.data @ w.data
    if b is None:
        return _node(out, (x, w), lambda g: (g @ w.data.T, x.data.T @ g))
    return _node(out + b.data, (x, w, b), lambda g: (g @ w.data.T, x.data.T @ g, g.sum(axis=0)))


# ------------------------------------------------------------ convolution


def _conv_out(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _check_conv_bias(b, channels):
    if b is not None and b.shape != (channels,):
        raise ShapeMismatch(f"bias shape {b.shape}, expected ({channels},)")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of NCHW input with OIKK weights (im2col)."""
    w, b = _lift_params(w, b, x)
    if x.ndim != 4 or w.ndim != 4 or w.shape[1] != x.shape[1] or w.shape[2] != w.shape[3]:
        raise ShapeMismatch(f"conv2d: input {x.shape} vs weight {w.shape}")
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    ho, wo = _conv_out(h, k, stride, pad), _conv_out(wd, k, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeMismatch(f"conv2d: kernel {k} does not fit padded input {h}x{wd}")
    _check_conv_bias(b, o)
    xp = _pad(x.data, pad)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    wmat = w.data.reshape(o, c * k * k)
    out = (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gw = (gmat.T @ cols).reshape(w.shape)
        gcols = (gmat @ wmat).reshape(n, ho, wo, c, k, k)
        gxp = np.zeros(xp.shape, dtype=xp.dtype)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[
                    :, :, :, :, i, j
                ].transpose(0, 3, 1, 2)
        gx = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
        grads = (gx, gw)
        return grads + ((g.sum(axis=(0, 2, 3)),) if b is not None else ())

    parents = (x, w) if b is None else (x, w, b)
    return _node(out, parents, backward)


def depthwise_conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Per-channel KxK cross-correlation; ``w`` has shape (C, 1, K, K)."""
    w, b = _lift_params(w, b, x)
    if x.ndim != 4 or w.ndim != 4 or w.shape[0] != x.shape[1] or w.shape[1] != 1 or w.shape[2] != w.shape[3]:
        raise ShapeMismatch(f"depthwise_conv2d: input {x.shape} vs weight {w.shape}")
    n, c, h, wd = x.shape
    k = w.shape[2]
    ho, wo = _conv_out(h, k, stride, pad), _conv_out(wd, k, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeMismatch(f"depthwise_conv2d: kernel {k} does not fit padded input {h}x{wd}")
    _check_conv_bias(b, c)
    xp = _pad(x.data, pad)
    kern = w.data[:, 0]

    def tap(i, j):
        return xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]

    out = np.zeros((n, c, ho, wo), dtype=np.result_type(x.dtype, w.dtype))
    for i in range(k):
        for j in range(k):
            out += tap(i, j) * kern[None, :, i, j, None, None]
    if b is not None:
        out += b.data[None, :, None, None]

    def backward(g):
        gxp = np.zeros(xp.shape, dtype=xp.dtype)
        gk = np.zeros(kern.shape, dtype=w.dtype)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                    g * kern[None, :, i, j, None, None]
                )
                gk[:, i, j] = (g * tap(i, j)).sum(axis=(0, 2, 3))
        gx = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
        grads = (gx, gk[:, None])
        return grads + ((g.sum(axis=(0, 2, 3)),) if b is not None else ())

    parents = (x, w) if b is None else (x, w, b)
    return _node(out, parents, backward)


def pointwise_conv(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """1x1 convolution; ``w`` has shape (O, I, 1, 1).  Stride subsamples the input."""
    w, b = _lift_params(w, b, x)
    if x.ndim != 4 or w.ndim != 4 or w.shape[1] != x.shape[1] or w.shape[2:] != (1, 1):
        raise ShapeMismatch(f"pointwise_conv: input {x.shape} vs weight {w.shape}")
    n, c, h, wd = x.shape
    o = w.shape[0]
    _check_conv_bias(b, o)
    xs = x.data[:, :, ::stride, ::stride]
    ho, wo = xs.shape[2:]
    wmat = w.data[:, :, 0, 0]
    flat = xs.transpose(0, 2, 3, 1).reshape(-1, c)
    out = (flat @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (gmat.T @ flat)[:, :, None, None]
        gxs = (gmat @ wmat).reshape(n, ho, wo, c).transpose(0, 3, 1, 2)
        if stride == 1:
            gx = np.ascontiguousarray(gxs)
        else:
            gx = np.zeros(x.shape, dtype=x.dtype)
            gx[:, :, ::stride, ::stride] = gxs
        grads = (gx, gw)
        return grads + ((g.sum(axis=(0, 2, 3)),) if b is not None else ())

    parents = (x, w) if b is None else (x, w, b)
    return _node(out, parents, backward)


# ---------------------------------------------------------------- pooling


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeMismatch(f"global_avg_pool expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    return _node(
        x.data.mean(axis=(2, 3)),
        (x,),
        lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).astype(x.dtype),),
    )


def avg_pool2d(x: Tensor, factor: int) -> Tensor:
    """Non-overlapping ``factor`` x ``factor`` mean pooling (floor mode)."""
    if x.ndim != 4:
        raise ShapeMismatch(f"avg_pool2d expects NCHW, got {x.shape}")
    if factor == 1:
        return x
    n, c, h, w = x.shape
    ho, wo = h // factor, w // factor
    if ho < 1 or wo < 1:
        raise ShapeMismatch(f"avg_pool2d factor {factor} too large for {h}x{w}")
    crop = x.data[:, :, : ho * factor, : wo * factor]
    out = crop.reshape(n, c, ho, factor, wo, factor).mean(axis=(3, 5))

    def backward(g):
        gx = np.zeros(x.shape, dtype=x.dtype)
        up = np.repeat(np.repeat(g, factor, axis=2), factor, axis=3) / (factor * factor)
        gx[:, :, : ho * factor, : wo * factor] = up
        return (gx,)

    return _node(out, (x,), backward)


# ------------------------------------------------------------------ losses


def mae_loss(pred: Tensor, target) -> Tensor:
    """Mean absolute error; the subgradient at exact ties is 0."""
    target = _lift(target, pred)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"mae_loss shapes differ: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    sign = np.sign(diff).astype(pred.dtype)
    return _node(
        np.asarray(np.abs(diff).mean(), dtype=pred.dtype),
        (pred, target),
        lambda g: (g * sign / n, -g * sign / n),
    )


# -------------------------------------------------------------- optimizer


@dataclass
class LrSchedule:
    base_lr: float = 1e-4
    decay: float = 0.99
    decay_interval: int = 100
    staircase: bool = True

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if not 0 < self.decay <= 1:
            raise ValueError("decay must lie in (0, 1]")


def lr_at(step: int, sched: LrSchedule | None = None) -> float:
    sched = sched or LrSchedule()
    exponent = step // sched.decay_interval if sched.staircase else step / sched.decay_interval
    return sched.base_lr * sched.decay**exponent


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState, lr: float):
    """One bias-corrected Adam update applied in place; returns ``(params, state)``.

    Parameters missing from ``grads`` are treated as having zero gradient.
    """
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return params, state


# ---------------------------------------------------------- initialisation


def kaiming_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, dtype=np.float32) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


# ----------------------------------------------------------- serialisation

PARAM_MAGIC = b"FNET1"


def params_to_bytes(params: Mapping[str, object]) -> bytes:
    buf = io.BytesIO()
    buf.write(PARAM_MAGIC)
    for name, value in params.items():
        arr = np.asarray(value.data if isinstance(value, Tensor) else value, dtype="<f4")
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<I", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    return buf.getvalue()


def params_from_bytes(data: bytes) -> dict:
    if not data.startswith(PARAM_MAGIC):
        raise ValueError("not an FNET1 parameter file")
    out, pos, n = {}, len(PARAM_MAGIC), len(data)

    def take(count):
        nonlocal pos
        if pos + count > n:
            raise ValueError("truncated FNET1 parameter file")
        chunk = data[pos : pos + count]
        pos += count
        return chunk

    while pos < n:
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(take(4 * count), dtype="<f4").reshape(dims).astype(np.float32)
    return out


def save_params(params: Mapping[str, object], path) -> None:
    try:
        Path(path).write_bytes(params_to_bytes(params))
    except OSError as exc:
        raise IoFailure(f"cannot write parameters to {path}: {exc}") from exc


def load_params(path) -> dict:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read parameters from {path}: {exc}") from exc
    return params_from_bytes(data)


def as_parameters(arrays: Mapping[str, np.ndarray], dtype=np.float32) -> dict:
    return {k: Tensor(np.array(v, dtype=dtype), requires_grad=True, name=k) for k, v in arrays.items()}


def collect_grads(params: Mapping[str, Tensor]) -> dict:
    return {k: p.grad for k, p in params.items() if p.grad is not None}


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
