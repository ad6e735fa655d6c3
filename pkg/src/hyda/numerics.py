"""Dense float64 tensors with reverse-mode gradients.

Only the operations the adapter needs are provided, each with exact-shape
semantics. Broadcasting is limited to what ``add``/``mul`` need for biases and
channel gates.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import ConfigError, FormatError, NumericError, ShapeError

_GRAD_ENABLED = True
_DEBUG = False
_RELU_PATTERN = None  # (mode, masks, cursor) while an activation pattern is recorded or replayed


@contextlib.contextmanager
def no_grad():
    """Run forward passes without recording the graph."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def debug_checks():
    """Raise NumericError as soon as any op produces a non-finite value."""
    global _DEBUG
    prev, _DEBUG = _DEBUG, True
    try:
        yield
    finally:
        _DEBUG = prev


class ActivationPattern:
    """ReLU on/off masks in call order, recorded once and replayed on later passes.

    Replaying keeps the function on the linear piece it occupied at the
    recording point, so central differences do not straddle ReLU kinks.
    """

    def __init__(self):
        self.masks = []
        self.replaying = False
        self.cursor = 0

    def mask_for(self, x):
        if not self.replaying:
            mask = x > 0
            self.masks.append(mask)
            return mask
        if self.cursor >= len(self.masks) or self.masks[self.cursor].shape != x.shape:
            raise ShapeError("replayed forward pass does not match the recorded activation pattern")
        mask = self.masks[self.cursor]
        self.cursor += 1
        return mask

    @contextlib.contextmanager
    def record(self):
        with self._active(False):
            yield self

    @contextlib.contextmanager
    def replay(self):
        self.cursor = 0
        with self._active(True):
            yield self
        if self.cursor != len(self.masks):
            raise ShapeError("replayed forward pass used fewer ReLUs than were recorded")

    @contextlib.contextmanager
    def _active(self, replaying):
        global _RELU_PATTERN
        prev, _RELU_PATTERN = _RELU_PATTERN, self
        self.replaying = replaying
        try:
            yield
        finally:
            _RELU_PATTERN = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def numpy(self):
        return self.data

    def backward(self):
        backward(self)

    # operator sugar; keeps model code readable
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn, op):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if _DEBUG and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite value produced by {op}")
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    on_path = set()
    while stack:
        node, expanded = stack.pop()
        if expanded:
            on_path.discard(id(node))
            order.append(node)
            continue
        if id(node) in seen:
            if id(node) in on_path:
                raise RuntimeError("cycle detected in compute graph")
            continue
        seen.add(id(node))
        on_path.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
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


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# --- elementwise ---------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                 "mul")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0 if _RELU_PATTERN is None else _RELU_PATTERN.mask_for(x.data)
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ConfigError(f"unknown activation {kind!r}")


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clip")


def power(x: Tensor, p: float) -> Tensor:
    if p == 0:
        return _make(np.ones_like(x.data), (x,), lambda g: (np.zeros_like(g),), "power")
    return _make(x.data ** p, (x,), lambda g: (g * p * x.data ** (p - 1),), "power")


# --- reductions / shape ------------------------------------------------------

def reduce_sum(x: Tensor, axis=None) -> Tensor:
    out = x.data.sum(axis=axis)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _make(np.asarray(out), (x,), bw, "sum")


def reduce_mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(reduce_sum(x, axis), 1.0 / n)


def reshape(x: Tensor, new_shape) -> Tensor:
    new_shape = tuple(int(s) for s in new_shape)
    if int(np.prod(new_shape)) != x.data.size:
        raise ShapeError(f"cannot reshape {x.shape} into {new_shape}")
    return _make(x.data.reshape(new_shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def flatten(x: Tensor) -> Tensor:
    """Collapse everything after the leading axis: ``[B, ...] -> [B, N]``."""
    return reshape(x, (x.shape[0], int(np.prod(x.shape[1:]))))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                 lambda g: (g.transpose(inv),), "transpose")


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    ref = list(xs[0].shape)
    for x in xs[1:]:
        other = list(x.shape)
        if len(other) != len(ref) or any(o != r for i, (o, r) in enumerate(zip(other, ref)) if i != axis % len(ref)):
            raise ShapeError(f"concat along {axis}: shapes {xs[0].shape} and {x.shape}")
    splits = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _make(np.concatenate([x.data for x in xs], axis=axis), xs,
                 lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def take(x: Tensor, idx) -> Tensor:
    """Rows of ``x`` selected by integer index array (gradient scatters back)."""
    idx = np.asarray(idx, dtype=np.int64)

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _make(x.data[idx], (x,), bw, "take")


def pick(p: Tensor, labels) -> Tensor:
    """``p[n, labels[n]]`` for every row n."""
    labels = np.asarray(labels, dtype=np.int64)
    rows = np.arange(p.shape[0])

    def bw(g):
        gp = np.zeros_like(p.data)
        gp[rows, labels] = g
        return (gp,)

    return _make(p.data[rows, labels], (p,), bw, "pick")


def scatter_mean(x: Tensor, src, dst, n_out: int) -> Tensor:
    """out[d] = mean of x[s] over all pairs (s, d).

    Every output index must appear in ``dst`` at least once.
    """
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    counts = np.bincount(dst, minlength=n_out).astype(np.float64)
    if np.any(counts == 0):
        raise ShapeError("scatter_mean: some outputs receive no inputs")
    out = np.zeros((n_out,) + x.shape[1:])
    np.add.at(out, dst, x.data[src])
    scale = (1.0 / counts).reshape((-1,) + (1,) * (x.data.ndim - 1))
    out *= scale

    def bw(g):
        gs = g * scale
        gx = np.zeros_like(x.data)
        np.add.at(gx, src, gs[dst])
        return (gx,)

    return _make(out, (x,), bw, "scatter_mean")


# --- linear maps -------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` with ``w`` stored as [in, out]."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} vs weight {w.shape}")
    y = matmul(x, w)
    return y if b is None else add(y, b)


def softmax(x: Tensor) -> Tensor:
    if x.data.ndim != 2 or x.shape[1] < 2:
        raise ShapeError(f"softmax expects [B, K>=2], got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)
    return _make(s, (x,), lambda g: (s * (g - (g * s).sum(axis=1, keepdims=True)),), "softmax")


def pointwise_conv3d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """1x1x1 convolution: ``out[b,o,...] = sum_i w[o,i] x[b,i,...] + b[o]``."""
    if x.data.ndim != 5 or w.data.ndim != 2 or w.shape[1] != x.shape[1]:
        raise ShapeError(f"pointwise_conv3d: input {x.shape} vs weight {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"pointwise_conv3d: bias {b.shape} vs weight {w.shape}")
    B, Ci = x.shape[:2]
    spatial = x.shape[2:]
    xf = x.data.reshape(B, Ci, -1)
    out = np.einsum("oi,bis->bos", w.data, xf)
    if b is not None:
        out += b.data[None, :, None]
    out = out.reshape((B, w.shape[0]) + spatial)

    def bw(g):
        gf = g.reshape(B, w.shape[0], -1)
        gx = np.einsum("oi,bos->bis", w.data, gf).reshape(x.shape)
        gw = np.einsum("bos,bis->oi", gf, xf)
        gb = gf.sum(axis=(0, 2)) if b is not None else None
        return (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, bw, "pointwise_conv3d")


def _im2col(xp, D, H, W):
    # xp: padded [B, C, D+2, H+2, W+2] -> [B, C*27, D*H*W]
    B, C = xp.shape[:2]
    win = sliding_window_view(xp, (3, 3, 3), axis=(2, 3, 4))  # [B,C,D,H,W,3,3,3]
    cols = win.transpose(0, 1, 5, 6, 7, 2, 3, 4)
    return cols.reshape(B, C * 27, D * H * W)


def _col2im(dcols, B, C, D, H, W):
    d = dcols.reshape(B, C, 3, 3, 3, D, H, W)
    gp = np.zeros((B, C, D + 2, H + 2, W + 2))
    for i in range(3):
        for j in range(3):
            for k in range(3):
                gp[:, :, i:i + D, j:j + H, k:k + W] += d[:, :, i, j, k]
    return gp[:, :, 1:-1, 1:-1, 1:-1]


def conv3d_same(x: Tensor, w: Tensor) -> Tensor:
    """3x3x3 cross-correlation, zero padding 1, stride 1, no bias.

    ``w`` is either one kernel bank [Cout, Cin, 3, 3, 3] shared by the batch or
    a per-sample bank [B, Cout, Cin, 3, 3, 3].
    """
    if x.data.ndim != 5:
        raise ShapeError(f"conv3d_same expects [B, C, D, H, W], got {x.shape}")
    B, Ci, D, H, W = x.shape
    if min(D, H, W) < 1:
        raise ShapeError(f"conv3d_same: empty spatial extent {x.shape}")
    per_sample = w.data.ndim == 6
    kshape = w.shape[-5:] if per_sample else w.shape
    if (w.data.ndim not in (5, 6) or kshape[2:] != (3, 3, 3) or kshape[1] != Ci
            or (per_sample and w.shape[0] != B)):
        raise ShapeError(f"conv3d_same: input {x.shape} vs kernel {w.shape}")
    Co = kshape[0]
    cols = _im2col(np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1))), D, H, W)
    if per_sample:
        wm = w.data.reshape(B, Co, Ci * 27)
        out = np.matmul(wm, cols)
    else:
        wm = w.data.reshape(Co, Ci * 27)
        out = np.einsum("ok,bks->bos", wm, cols)

    def bw(g):
        gf = g.reshape(B, Co, -1)
        if per_sample:
            dcols = np.matmul(wm.transpose(0, 2, 1), gf)
            gw = np.matmul(gf, cols.transpose(0, 2, 1)).reshape(w.shape)
        else:
            dcols = np.einsum("ok,bos->bks", wm, gf)
            gw = np.einsum("bos,bks->ok", gf, cols).reshape(w.shape)
        gx = _col2im(dcols, B, Ci, D, H, W) if x.requires_grad else None
        return (gx, gw)

    return _make(out.reshape(B, Co, D, H, W), (x, w), bw, "conv3d_same")


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean: [B, C, D, H, W] -> [B, C, 1, 1, 1]."""
    if x.data.ndim != 5:
        raise ShapeError(f"global_avg_pool expects 5-D input, got {x.shape}")
    n = int(np.prod(x.shape[2:]))
    out = x.data.mean(axis=(2, 3, 4), keepdims=True)
    return _make(out, (x,), lambda g: (np.broadcast_to(g / n, x.shape).copy(),), "global_avg_pool")


# --- parameters ----------------------------------------------------------------

@dataclass
class ParamTensor:
    name: str
    value: Tensor
    weight_decay_group: str = "other"


class ModelParams:
    """Ordered collection of named trainable tensors."""

    GROUPS = ("hypergraph", "other")

    def __init__(self):
        self._params: dict[str, ParamTensor] = {}

    def add(self, name, data, group="other") -> Tensor:
        if name in self._params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        if group not in self.GROUPS:
            raise ConfigError(f"unknown weight decay group {group!r}")
        t = Tensor(data, requires_grad=True)
        self._params[name] = ParamTensor(name, t, group)
        return t

    def __getitem__(self, name) -> Tensor:
        return self._params[name].value

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def tensors(self):
        return [p.value for p in self._params.values()]

    def zero_grad(self):
        for p in self._params.values():
            p.value.grad = None

    def count(self, prefix=""):
        return int(sum(p.value.size for p in self._params.values() if p.name.startswith(prefix)))

    def state_dict(self):
        return {name: p.value.data.copy() for name, p in self._params.items()}

    def load_state_dict(self, arrays):
        for name, p in self._params.items():
            if name not in arrays:
                raise FormatError(f"missing tensor entry {name!r}")
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != p.value.shape:
                raise FormatError(f"tensor {name!r} has shape {arr.shape}, expected {p.value.shape}")
            p.value.data = arr.copy()


# --- gradient checking -----------------------------------------------------------

def finite_diff_errors(loss_fn: Callable[[], Tensor], params: Iterable, h: float = 1e-4,
                       max_entries: int | None = None, rng=None, hold_relu_pattern: bool = False) -> dict:
    """Per-parameter max relative error between analytic and central-difference gradients.

    ``params`` is a ModelParams or an iterable of (name, Tensor). With
    ``max_entries`` set, larger tensors are checked on a random subset of
    entries plus a random-direction probe that touches every entry.
    With ``hold_relu_pattern`` the perturbed passes reuse the ReLU masks of the
    unperturbed pass; the value and gradient at the base point are unchanged
    but the stencil stays on one linear piece.
    """
    if not 1e-6 <= h <= 1e-3:
        raise ConfigError(f"finite-difference step {h} outside [1e-6, 1e-3]")
    if isinstance(params, ModelParams):
        named = [(p.name, p.value) for p in params]
    else:
        named = list(params)
    rng = np.random.default_rng(0) if rng is None else rng

    for _, t in named:
        t.grad = None
    pattern = ActivationPattern()
    with pattern.record() if hold_relu_pattern else contextlib.nullcontext():
        loss = loss_fn()
    if not np.isfinite(loss.data).all():
        raise NumericError("non-finite loss")
    backward(loss)
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for name, t in named}

    def evaluate():
        with no_grad(), pattern.replay() if hold_relu_pattern else contextlib.nullcontext():
            v = float(loss_fn().data)
        if not np.isfinite(v):
            raise NumericError("non-finite loss during finite differences")
        return v

    errors = {}
    for name, t in named:
        flat = t.data.reshape(-1)
        ga = analytic[name].reshape(-1)
        if max_entries is None or flat.size <= max_entries:
            idx = np.arange(flat.size)
        else:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = evaluate()
            flat[i] = orig - h
            fm = evaluate()
            flat[i] = orig
            fd = (fp - fm) / (2 * h)
            worst = max(worst, abs(ga[i] - fd) / max(1.0, abs(ga[i])))
        if max_entries is not None and flat.size > max_entries:
            v = rng.standard_normal(flat.size)
            v /= np.linalg.norm(v)
            orig = flat.copy()
            flat[:] = orig + h * v
            fp = evaluate()
            flat[:] = orig - h * v
            fm = evaluate()
            flat[:] = orig
            fd = (fp - fm) / (2 * h)
            a = float(ga @ v)
            worst = max(worst, abs(a - fd) / max(1.0, abs(a)))
        errors[name] = worst
    return errors


def finite_diff_check(loss_fn: Callable[[], Tensor], params: Iterable, h: float = 1e-4,
                      max_entries: int | None = None, rng=None, hold_relu_pattern: bool = False) -> float:
    """Max over parameters of ``|analytic - central difference| / max(1, |analytic|)``."""
    errs = finite_diff_errors(loss_fn, params, h=h, max_entries=max_entries, rng=rng,
                              hold_relu_pattern=hold_relu_pattern)
    return max(errs.values()) if errs else 0.0
