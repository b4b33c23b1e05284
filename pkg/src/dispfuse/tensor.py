"""Small reverse-mode autodiff engine over numpy arrays.

Every backward rule is written with Tensor operations, so gradients can be
differentiated again (``create_graph=True``).  That second level is what the
gradient penalty of the critic needs.  A few fused ops (batch-norm in
training mode, the splatting warp) only provide first-order rules and refuse
to take part in a ``create_graph`` pass.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "tensor",
    "no_grad",
    "is_grad_enabled",
    "set_precision",
    "get_dtype",
    "precision",
    "grad",
    "concat",
    "conv2d",
    "conv_transpose2d",
    "conv2d_weight",
    "where_mask",
    "l2_norm",
    "batch_norm_train",
    "custom_op",
    "grad_check",
    "numerical_grad",
    "OPS",
    "add",
    "mul",
    "neg",
    "exp",
    "log",
    "tabs",
    "relu",
    "sigmoid",
    "power",
    "tsum",
    "mean",
    "reshape",
    "getitem",
]

_DTYPES = {"f32": np.float32, "f64": np.float64}
_state = {"dtype": np.float64, "grad": True}


def set_precision(name: str) -> None:
    """Select the global float precision: ``"f32"`` or ``"f64"``."""
    if name not in _DTYPES:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}")
    _state["dtype"] = _DTYPES[name]


def get_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def precision(name: str):
    old = _state["dtype"]
    set_precision(name)
    try:
        yield
    finally:
        _state["dtype"] = old


def is_grad_enabled() -> bool:
    return _state["grad"]


@contextlib.contextmanager
def no_grad():
    old = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = old


@contextlib.contextmanager
def _enable_grad(flag: bool):
    old = _state["grad"]
    _state["grad"] = flag
    try:
        yield
    finally:
        _state["grad"] = old


def _as_array(x, dtype=None) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    arr = np.asarray(x)
    if dtype is None:
        dtype = _state["dtype"]
    if arr.dtype != dtype:
        arr = arr.astype(dtype)
    return arr


class Tensor:
    """n-d float array with an optional place in a differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "_second_order")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad: Tensor | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self._second_order = True

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            _raise_not_scalar(self)
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / np.asarray(other, dtype=self.dtype))

    def __rtruediv__(self, other):
        return mul(_lift(other), reciprocal(self))

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    # -- methods mirroring the functional ops ------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def abs(self):
        return tabs(self)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def sqrt(self):
        return power(self, 0.5)

    def backward(self, grad_output=None, create_graph: bool = False) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if grad_output is None:
            if self.data.size != 1:
                _raise_not_scalar(self)
            grad_output = Tensor(np.ones_like(self.data))
        elif not isinstance(grad_output, Tensor):
            grad_output = Tensor(grad_output)
        leaves = _leaves(self)
        grads = _backprop(self, grad_output, leaves, create_graph)
        for leaf in leaves:
            g = grads.get(id(leaf))
            if g is None:
                continue
            if not create_graph:
                g = Tensor(g.data)
            if leaf.grad is None:
                leaf.grad = g
            elif create_graph:
                leaf.grad = leaf.grad + g
            else:
                leaf.grad = Tensor(leaf.grad.data + g.data)


def _raise_not_scalar(t: Tensor):
    raise ValueError(f"expected a scalar (one-element) tensor, got shape {t.shape}")


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str, second_order: bool = True) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._second_order = second_order
    out.op = op
    if _state["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


# -- graph traversal ---------------------------------------------------------

def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _leaves(root: Tensor) -> list[Tensor]:
    return [n for n in _topo(root) if n.is_leaf and n.requires_grad]


def _backprop(root: Tensor, grad_root: Tensor, targets: Sequence[Tensor], create_graph: bool) -> dict:
    if not root.requires_grad:
        return {}
    order = _topo(root)
    target_ids = {id(t) for t in targets}
    # Only propagate into nodes that lead to one of the targets.
    useful: set[int] = set()
    for node in order:
        if id(node) in target_ids or any(id(p) in useful for p in node._parents):
            useful.add(id(node))
    grads: dict[int, Tensor] = {id(root): grad_root}
    with _enable_grad(create_graph):
        for node in reversed(order):
            g = grads.get(id(node))
            if g is None or node.is_leaf:
                continue
            if create_graph and not node._second_order:
                raise RuntimeError(f"op '{node.op}' does not support differentiating through its gradient")
            needs = tuple(p.requires_grad and id(p) in useful for p in node._parents)
            if not any(needs):
                continue
            pgrads = node._backward(g, needs)
            for p, pg, need in zip(node._parents, pgrads, needs):
                if not need or pg is None:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else prev + pg
    return grads


def grad(output: Tensor, inputs: Sequence[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Gradients of scalar ``output`` w.r.t. ``inputs`` without touching ``.grad``.

    Inputs the output does not depend on get a zero tensor.
    """
    if output.data.size != 1:
        _raise_not_scalar(output)
    seed = Tensor(np.ones_like(output.data))
    grads = _backprop(output, seed, inputs, create_graph)
    result = []
    for x in inputs:
        g = grads.get(id(x))
        if g is None:
            g = Tensor(np.zeros_like(x.data))
        elif not create_graph:
            g = Tensor(g.data)
        result.append(g)
    return result


# -- elementwise and shape ops -------------------------------------------------

def _unbroadcast(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    axes = tuple(range(extra)) + tuple(
        i + extra for i, n in enumerate(shape) if n == 1 and g.shape[i + extra] != 1
    )
    out = tsum(g, axes, keepdims=True)
    return reshape(out, shape)


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)

    def backward(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(g, b.shape) if needs[1] else None)

    return _make(a.data + b.data, (a, b), backward, "add")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g, needs: (neg(g),), "neg")


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)

    def backward(g, needs):
        return (_unbroadcast(g * b, a.shape) if needs[0] else None,
                _unbroadcast(g * a, b.shape) if needs[1] else None)

    return _make(a.data * b.data, (a, b), backward, "mul")


def reciprocal(a: Tensor) -> Tensor:
    out_data = 1.0 / a.data

    def backward(g, needs):
        return (neg(g) * out * out,)

    out = _make(out_data, (a,), backward, "reciprocal")
    return out


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)

    def backward(g, needs):
        if exponent == 2.0:
            return (g * a * 2.0,)
        return (g * power(a, exponent - 1.0) * exponent,)

    return _make(a.data ** exponent, (a,), backward, "pow")


def exp(a: Tensor) -> Tensor:
    def backward(g, needs):
        return (g * out,)

    out = _make(np.exp(a.data), (a,), backward, "exp")
    return out


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g, needs: (g / a,), "log")


def tabs(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g, needs: (g * sign,), "abs")


def relu(a: Tensor) -> Tensor:
    mask = (a.data > 0).astype(a.dtype)
    return _make(a.data * mask, (a,), lambda g, needs: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    # Split by sign so exp never overflows.
    x = a.data
    z = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(a.dtype)

    def backward(g, needs):
        return (g * out * (1.0 - out),)

    out = _make(s, (a,), backward, "sigmoid")
    return out


def where_mask(mask: np.ndarray, a: Tensor) -> Tensor:
    """``a`` where mask is true, 0 elsewhere; mask is a constant."""
    m = np.asarray(mask, dtype=a.dtype)
    return mul(a, m)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    if axis is None:
        axes = tuple(range(a.ndim))
    elif isinstance(axis, int):
        axes = (axis % a.ndim,)
    else:
        axes = tuple(ax % a.ndim for ax in axis)
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))

    def backward(g, needs):
        return (broadcast_to(reshape(g, kept), shape),)

    return _make(np.sum(a.data, axis=axes, keepdims=keepdims), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    elif isinstance(axis, int):
        count = a.shape[axis]
    else:
        count = int(np.prod([a.shape[ax] for ax in axis]))
    return tsum(a, axis, keepdims) * (1.0 / count)


def broadcast_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    if a.shape == tuple(shape):
        return a
    src = a.shape
    return _make(np.broadcast_to(a.data, shape).copy(), (a,),
                 lambda g, needs: (_unbroadcast(g, src),), "broadcast")


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g, needs: (reshape(g, src),), "reshape")


def getitem(a: Tensor, index) -> Tensor:
    src_shape = a.shape

    def backward(g, needs):
        return (scatter_slice(g, index, src_shape),)

    return _make(a.data[index], (a,), backward, "getitem")


def scatter_slice(g: Tensor, index, shape) -> Tensor:
    """Place ``g`` at ``index`` inside zeros of ``shape`` (adjoint of slicing)."""
    data = np.zeros(shape, dtype=g.dtype)
    if _is_fancy(index):
        np.add.at(data, index, g.data)
    else:
        data[index] = g.data

    def backward(gg, needs):
        return (getitem(gg, index),)

    return _make(data, (g,), backward, "scatter_slice")


def _is_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    ndim = tensors[0].ndim

    def backward(g, needs):
        out = []
        for k, need in enumerate(needs):
            if not need:
                out.append(None)
                continue
            idx = [slice(None)] * ndim
            idx[axis] = slice(int(bounds[k]), int(bounds[k + 1]))
            out.append(getitem(g, tuple(idx)))
        return tuple(out)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def l2_norm(a: Tensor, axis) -> Tensor:
    """Euclidean norm over ``axis``; the gradient at a zero vector is taken as 0."""
    n = np.sqrt(np.sum(a.data * a.data, axis=axis, keepdims=True))
    zero = (n == 0).astype(a.dtype)
    kept = n.shape

    def backward(g, needs):
        safe = reshape(out, kept) + zero
        return (a * (reshape(g, kept) / safe),)

    out = _make(n.reshape(np.sum(a.data, axis=axis).shape), (a,), backward, "l2_norm")
    return out


# -- convolutions -------------------------------------------------------------

def _conv_out(h: int, k: int, stride: int, pad: int) -> int:
    return (h + 2 * pad - k) // stride + 1


def _padded(x: np.ndarray, pad: int) -> np.ndarray:
    """``x`` (b,c,h,w) as a zero-padded (c,b,h+2p,w+2p) array."""
    b, c, h, w = x.shape
    xp = np.zeros((c, b, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    xp[:, :, pad : pad + h, pad : pad + w] = x.transpose(1, 0, 2, 3)
    return xp


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int, ho: int, wo: int) -> np.ndarray:
    """Patches of ``x`` as a (ci*kh*kw, b*ho*wo) matrix."""
    b, ci = x.shape[:2]
    xp = _padded(x, pad)
    cols = np.empty((ci, kh, kw, b, ho, wo), dtype=x.dtype)
    ye, xe = (ho - 1) * stride + 1, (wo - 1) * stride + 1
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i : i + ye : stride, j : j + xe : stride]
    return cols.reshape(ci * kh * kw, b * ho * wo)


def _spread(g: np.ndarray, kh: int, kw: int, stride: int, hp: int, wp: int) -> np.ndarray:
    """Copies of ``g`` (b,co,ho,wo) placed at every kernel offset: (kh*kw*co, b*hp*wp).

    Adjoint of summing shifted output planes; cheap when ``co`` is small.
    """
    b, co, ho, wo = g.shape
    z = np.zeros((kh, kw, co, b, hp, wp), dtype=g.dtype)
    gt = g.transpose(1, 0, 2, 3)
    ye, xe = (ho - 1) * stride + 1, (wo - 1) * stride + 1
    for i in range(kh):
        for j in range(kw):
            z[i, j, :, :, i : i + ye : stride, j : j + xe : stride] = gt
    return z.reshape(kh * kw * co, b * hp * wp)


def _kernel_rows(w: np.ndarray) -> np.ndarray:
    """(co,ci,kh,kw) -> (kh*kw*co, ci)."""
    co, ci, kh, kw = w.shape
    return w.transpose(2, 3, 0, 1).reshape(kh * kw * co, ci)


def _conv2d_np(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    b, ci, h, wd = x.shape
    co, ci2, kh, kw = w.shape
    if ci != ci2:
        raise ValueError(f"conv2d: input has {ci} channels but kernel expects {ci2}")
    if kh > h + 2 * pad or kw > wd + 2 * pad:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{wd + 2 * pad}")
    if stride < 1:
        raise ValueError("conv2d: stride must be >= 1")
    ho, wo = _conv_out(h, kh, stride, pad), _conv_out(wd, kw, stride, pad)
    if co * stride * stride >= ci:
        y = w.reshape(co, -1) @ _im2col(x, kh, kw, stride, pad, ho, wo)
        return np.ascontiguousarray(y.reshape(co, b, ho, wo).transpose(1, 0, 2, 3))
    # Narrow output: convolve every kernel tap at once, then sum shifted planes.
    xp = _padded(x, pad)
    hp, wp = xp.shape[2:]
    z = (_kernel_rows(w) @ xp.reshape(ci, -1)).reshape(kh, kw, co, b, hp, wp)
    ye, xe = (ho - 1) * stride + 1, (wo - 1) * stride + 1
    y = z[0, 0, :, :, 0:ye:stride, 0:xe:stride].copy()
    for i in range(kh):
        for j in range(kw):
            if i or j:
                y += z[i, j, :, :, i : i + ye : stride, j : j + xe : stride]
    return np.ascontiguousarray(y.transpose(1, 0, 2, 3))


def _conv_transpose_np(g: np.ndarray, w: np.ndarray, stride: int, pad: int, out_hw) -> np.ndarray:
    b, co, ho, wo = g.shape
    co2, ci, kh, kw = w.shape
    if co != co2:
        raise ValueError(f"conv_transpose2d: input has {co} channels but kernel expects {co2}")
    h, wd = out_hw
    hp = max(h + 2 * pad, (ho - 1) * stride + kh)
    wp = max(wd + 2 * pad, (wo - 1) * stride + kw)
    if co < ci:
        xp = (_kernel_rows(w).T @ _spread(g, kh, kw, stride, hp, wp)).reshape(ci, b, hp, wp)
    else:
        gm = g.transpose(1, 0, 2, 3).reshape(co, b * ho * wo)
        cols = (w.reshape(co, -1).T @ gm).reshape(ci, kh, kw, b, ho, wo)
        xp = np.zeros((ci, b, hp, wp), dtype=g.dtype)
        ye, xe = (ho - 1) * stride + 1, (wo - 1) * stride + 1
        for i in range(kh):
            for j in range(kw):
                xp[:, :, i : i + ye : stride, j : j + xe : stride] += cols[:, i, j]
    return np.ascontiguousarray(xp[:, :, pad : pad + h, pad : pad + wd].transpose(1, 0, 2, 3))


def _conv_weight_np(x: np.ndarray, g: np.ndarray, stride: int, pad: int, ksize) -> np.ndarray:
    kh, kw = ksize
    b, co, ho, wo = g.shape
    ci = x.shape[1]
    if co < ci:
        xp = _padded(x, pad)
        hp, wp = xp.shape[2:]
        hp2 = max(hp, (ho - 1) * stride + kh)
        wp2 = max(wp, (wo - 1) * stride + kw)
        if (hp2, wp2) != (hp, wp):
            xp = np.pad(xp, ((0, 0), (0, 0), (0, hp2 - hp), (0, wp2 - wp)))
        dw = _spread(g, kh, kw, stride, hp2, wp2) @ xp.reshape(ci, -1).T
        return np.ascontiguousarray(dw.reshape(kh, kw, co, ci).transpose(2, 3, 0, 1))
    gm = g.transpose(1, 0, 2, 3).reshape(co, b * ho * wo)
    dw = gm @ _im2col(x, kh, kw, stride, pad, ho, wo).T
    return dw.reshape(co, ci, kh, kw)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (b,ci,h,w) with ``w`` (co,ci,kh,kw), zero padding."""
    x, w = _lift(x), _lift(w)
    hw = x.shape[2:]
    ksize = w.shape[2:]

    def backward(g, needs):
        gx = conv_transpose2d(g, w, stride, pad, hw) if needs[0] else None
        gw = conv2d_weight(x, g, stride, pad, ksize) if needs[1] else None
        return gx, gw

    return _make(_conv2d_np(x.data, w.data, stride, pad), (x, w), backward, "conv2d")


def conv_transpose2d(g: Tensor, w: Tensor, stride: int = 1, pad: int = 0, out_hw=None) -> Tensor:
    """Adjoint of :func:`conv2d` w.r.t. its input; ``w`` is (c_in_of_g, c_out, kh, kw).

    ``out_hw`` defaults to ``(h-1)*stride - 2*pad + k``.
    """
    g, w = _lift(g), _lift(w)
    kh, kw = w.shape[2:]
    if out_hw is None:
        out_hw = ((g.shape[2] - 1) * stride - 2 * pad + kh, (g.shape[3] - 1) * stride - 2 * pad + kw)
    out_hw = tuple(out_hw)

    def backward(gy, needs):
        dg = conv2d(gy, w, stride, pad) if needs[0] else None
        dw = conv2d_weight(gy, g, stride, pad, (kh, kw)) if needs[1] else None
        return dg, dw

    return _make(_conv_transpose_np(g.data, w.data, stride, pad, out_hw), (g, w), backward, "conv_transpose2d")


def conv2d_weight(x: Tensor, g: Tensor, stride: int, pad: int, ksize) -> Tensor:
    """Gradient of ``<conv2d(x, W), g>`` w.r.t. ``W``; linear in both arguments."""
    x, g = _lift(x), _lift(g)
    hw = x.shape[2:]
    ksize = tuple(ksize)

    def backward(gw, needs):
        dx = conv_transpose2d(g, gw, stride, pad, hw) if needs[0] else None
        dg = conv2d(x, gw, stride, pad) if needs[1] else None
        return dx, dg

    return _make(_conv_weight_np(x.data, g.data, stride, pad, ksize), (x, g), backward, "conv2d_weight")


# -- fused first-order ops ------------------------------------------------------

def batch_norm_train(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5):
    """Per-channel batch normalisation with batch statistics.

    Returns ``(out, batch_mean, batch_var)``; the statistics are plain arrays.
    """
    axes = (0, 2, 3)
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gam = gamma.data.reshape(1, -1, 1, 1)
    out = xhat * gam + beta.data.reshape(1, -1, 1, 1)
    n = x.data.size // x.shape[1]

    def backward(g, needs):
        gd = g.data
        sg = gd.sum(axis=axes, keepdims=True)
        sgx = (gd * xhat).sum(axis=axes, keepdims=True)
        gx = gam * inv / n * (n * gd - sg - xhat * sgx) if needs[0] else None
        ggam = sgx.reshape(-1) if needs[1] else None
        gbeta = sg.reshape(-1) if needs[2] else None
        return tuple(None if v is None else Tensor(v) for v in (gx, ggam, gbeta))

    res = _make(out, (x, gamma, beta), backward, "batch_norm_train", second_order=False)
    return res, mu.reshape(-1), var.reshape(-1)


def custom_op(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    """Register a first-order op whose ``backward(g: ndarray, needs)`` returns arrays."""

    def wrapped(g, needs):
        res = backward(g.data, needs)
        return tuple(None if r is None else Tensor(r) for r in res)

    return _make(data, parents, wrapped, op, second_order=False)


# -- finite differences -----------------------------------------------------------

def numerical_grad(f: Callable[[Tensor], Tensor], x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    out = np.zeros_like(x)
    flat = x.reshape(-1)
    g = out.reshape(-1)
    # Grad mode stays on: f may itself differentiate (gradient penalty).
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(Tensor(x)).data)
        flat[i] = orig - eps
        fm = float(f(Tensor(x)).data)
        flat[i] = orig
        g[i] = (fp - fm) / (2 * eps)
    return out


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-6) -> float:
    """Max relative error between the analytic gradient of ``f`` and central differences.

    Entries whose numeric derivative is below 1e-3 of the largest one are
    measured against that floor instead, so finite-difference noise on
    (near-)zero entries does not dominate.
    """
    x = np.array(_as_array(x), dtype=np.float64)
    xt = Tensor(x.copy(), requires_grad=True)
    y = f(xt)
    if y.requires_grad:
        (analytic,) = grad(y, [xt])
        analytic = analytic.data
    else:
        analytic = np.zeros_like(x)
    numeric = numerical_grad(f, x, eps)
    floor = max(1e-12, 1e-3 * float(np.max(np.abs(numeric), initial=0.0)))
    err = np.abs(analytic - numeric) / np.maximum(floor, np.abs(numeric))
    return float(np.max(err))


# Ops with a randomised finite-difference check in the test suite.
OPS: dict[str, Callable] = {
    "add": add,
    "mul": mul,
    "neg": neg,
    "reciprocal": reciprocal,
    "power": power,
    "exp": exp,
    "log": log,
    "abs": tabs,
    "relu": relu,
    "sigmoid": sigmoid,
    "sum": tsum,
    "mean": mean,
    "reshape": reshape,
    "broadcast_to": broadcast_to,
    "getitem": getitem,
    "concat": concat,
    "l2_norm": l2_norm,
    "conv2d": conv2d,
    "conv_transpose2d": conv_transpose2d,
    "conv2d_weight": conv2d_weight,
    "batch_norm_train": batch_norm_train,
}


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
