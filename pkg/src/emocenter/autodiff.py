"""A small tape-based reverse-mode differentiation engine on numpy arrays.

Operations record themselves on the innermost active :class:`Tape` whenever one
of their inputs requires a gradient.  The tape is appended to in execution
order, so walking it backwards is a valid reverse topological order.

    >>> x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    >>> with Tape() as tape:
    ...     y = (x * x).sum()
    >>> tape.gradients(y, [x])[0]
    array([2., 4.])

Everything runs in float64.  Images use channels-last layout ``(B, H, W, C)``.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64


class AutodiffError(RuntimeError):
    pass


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("value", "requires_grad", "name")
    # make numpy defer to Tensor's reflected operators
    __array_ufunc__ = None

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.value

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __matmul__ = lambda self, other: matmul(self, other)
    __neg__ = lambda self: mul(self, -1.0)
    __getitem__ = lambda self, idx: getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("op", "inputs", "output", "vjp", "meta")

    def __init__(self, op, inputs, output, vjp, meta=None):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.vjp = vjp
        self.meta = meta


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


class Tape:
    """Ordered record of primitive applications.

    Use as a context manager around the forward computation, then call
    :meth:`backward` (or :meth:`gradients`) once the forward pass is done.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._recording = False

    def __enter__(self):
        if self._recording:
            raise AutodiffError("tape is already recording")
        self._recording = True
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        self._recording = False
        return False

    def __len__(self):
        return len(self.nodes)

    def backward(self, seeds) -> dict[int, np.ndarray]:
        """Propagate output cotangents back through the tape.

        ``seeds`` is a list of ``(tensor, cotangent)`` pairs.  Returns a dict
        mapping ``id(tensor)`` to the accumulated gradient for every tensor
        reached.
        """
        if self._recording:
            raise AutodiffError("backward called while the forward pass is still recording")
        grads: dict[int, np.ndarray] = {}
        for t, g in seeds:
            g = np.broadcast_to(np.asarray(g, dtype=DTYPE), t.shape)
            _accumulate(grads, t, g)
        for node in reversed(self.nodes):
            g = grads.get(id(node.output))
            if g is None:
                continue
            in_grads = node.vjp(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is not None and inp.requires_grad:
                    _accumulate(grads, inp, ig)
        return grads

    def gradients(self, output: Tensor, wrt: Sequence[Tensor], output_grad=None) -> list[np.ndarray]:
        if output_grad is None:
            output_grad = np.ones(output.shape)
        grads = self.backward([(output, output_grad)])
        return [grads.get(id(t), np.zeros(t.shape)) for t in wrt]


def _accumulate(grads, t, g):
    key = id(t)
    if key in grads:
        grads[key] = grads[key] + g
    else:
        grads[key] = np.array(g, dtype=DTYPE)


def _record(op: str, inputs: tuple[Tensor, ...], out_value: np.ndarray, vjp, meta=None) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_value, requires_grad=needs)
    if needs:
        stack = _tape_stack()
        if stack:
            stack[-1].nodes.append(_Node(op, inputs, out, vjp, meta))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# --- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _record("add", (a, b), a.value + b.value,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _record("sub", (a, b), a.value - b.value,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    av, bv = a.value, b.value
    return _record("mul", (a, b), av * bv,
                   lambda g: (_unbroadcast(g * bv, a.shape) if a.requires_grad else None,
                              _unbroadcast(g * av, b.shape) if b.requires_grad else None))


def add_bias(x, b) -> Tensor:
    """x + b with b broadcast along the last axis."""
    x, b = as_tensor(x), as_tensor(b)
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"bias {b.shape} does not match last axis of {x.shape}")
    return _record("add_bias", (x, b), x.value + b.value,
                   lambda g: (g, g.reshape(-1, b.shape[0]).sum(axis=0)))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value

    def vjp(g):
        ga = g @ bv.T if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _record("matmul", (a, b), av @ bv, vjp)


# --- nonlinearities ---------------------------------------------------------

def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.value)
    return _record("tanh", (x,), y, lambda g: (g * (1.0 - y * y),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = 0.5 * (1.0 + np.tanh(0.5 * x.value))
    return _record("sigmoid", (x,), y, lambda g: (g * y * (1.0 - y),))


def prelu(x, slope) -> Tensor:
    """max(x, 0) + slope * min(x, 0) with a scalar learnable slope.

    At x == 0 the derivative is taken from the positive branch.
    """
    x, slope = as_tensor(x), as_tensor(slope)
    if slope.value.size != 1:
        raise ShapeError("prelu slope must be a scalar")
    xv, a = x.value, slope.value
    neg = xv < 0
    y = np.where(neg, a * xv, xv)

    def vjp(g):
        gx = np.where(neg, a * g, g) if x.requires_grad else None
        ga = np.sum(g * np.where(neg, xv, 0.0)).reshape(slope.shape) if slope.requires_grad else None
        return gx, ga

    return _record("prelu", (x, slope), y, vjp)


# --- reductions -------------------------------------------------------------

def _expand_reduced(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum_(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    return _record("sum", (x,), np.sum(x.value, axis=axis, keepdims=keepdims),
                   lambda g: (_expand_reduced(g, x.shape, axis, keepdims),))


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    count = x.value.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return _record("mean", (x,), np.mean(x.value, axis=axis, keepdims=keepdims),
                   lambda g: (_expand_reduced(g, x.shape, axis, keepdims) / count,))


def logsumexp(x, axis: int = -1) -> Tensor:
    """log(sum(exp(x))) along ``axis`` with max subtraction; axis is dropped."""
    x = as_tensor(x)
    m = np.max(x.value, axis=axis, keepdims=True)
    e = np.exp(x.value - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.squeeze(m + np.log(s), axis=axis)
    soft = e / s
    return _record("logsumexp", (x,), out, lambda g: (np.expand_dims(g, axis) * soft,))


# --- shape manipulation -----------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        y = x.value.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return _record("reshape", (x,), y, lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    inv = None if axes is None else np.argsort(axes)
    return _record("transpose", (x,), np.transpose(x.value, axes),
                   lambda g: (np.transpose(g, inv),))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, np.integer)) or i is None or i is Ellipsis for i in items)


def getitem(x, idx) -> Tensor:
    x = as_tensor(x)
    basic = _is_basic_index(idx)

    def vjp(g):
        dx = np.zeros(x.shape)
        if basic:
            dx[idx] = g
        else:
            np.add.at(dx, idx, g)
        return (dx,)

    return _record("getitem", (x,), x.value[idx], vjp)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        y = np.concatenate([t.value for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _record("concat", tensors, y, lambda g: tuple(np.split(g, splits, axis=axis)))


# --- convolution and pooling (channels-last) --------------------------------

def _pair(v) -> tuple[int, int]:
    return (v, v) if np.isscalar(v) else (int(v[0]), int(v[1]))


def conv2d_output_size(size: int, kernel: int, stride: int) -> int:
    return (size - kernel) // stride + 1 if size >= kernel else 0


def conv2d(x, w, b, stride=1) -> Tensor:
    """Valid (unpadded) 2-D convolution.

    x: (B, H, W, C_in), w: (C_out, C_in, kh, kw), b: (C_out,) -> (B, Ho, Wo, C_out).
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    sh, sw = _pair(stride)
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} vs kernel {w.shape}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d: bias {b.shape} vs {w.shape[0]} output channels")
    bsz, h, wd, cin = x.shape
    cout, _, kh, kw = w.shape
    ho, wo = conv2d_output_size(h, kh, sh), conv2d_output_size(wd, kw, sw)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: input {h}x{wd} smaller than kernel {kh}x{kw}")
    win = np.lib.stride_tricks.sliding_window_view(x.value, (kh, kw), axis=(1, 2))
    win = win[:, : sh * (ho - 1) + 1 : sh, : sw * (wo - 1) + 1 : sw]
    cols = win.reshape(bsz * ho * wo, cin * kh * kw)
    wmat = w.value.reshape(cout, -1)
    y = (cols @ wmat.T + b.value).reshape(bsz, ho, wo, cout)

    def vjp(g):
        gflat = g.reshape(-1, cout)
        gw = (gflat.T @ cols).reshape(w.shape) if w.requires_grad else None
        gb = gflat.sum(axis=0) if b.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gflat @ wmat).reshape(bsz, ho, wo, cin, kh, kw)
            gx = np.zeros(x.shape)
            for i in range(kh):
                for j in range(kw):
                    gx[:, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw, :] += gcols[..., i, j]
        return gx, gw, gb

    return _record("conv2d", (x, w, b), y, vjp)


def maxpool2d(x, size=2) -> Tensor:
    """Non-overlapping max pooling over (H, W) of a (B, H, W, C) tensor.

    Trailing rows/columns that do not fill a window are dropped.  Ties route
    the gradient to the first maximal element.
    """
    x = as_tensor(x)
    p, q = _pair(size)
    bsz, h, wd, c = x.shape
    ho, wo = h // p, wd // q
    if ho < 1 or wo < 1:
        raise ShapeError(f"maxpool2d: input {h}x{wd} smaller than window {p}x{q}")
    blocks = x.value[:, : ho * p, : wo * q].reshape(bsz, ho, p, wo, q, c)
    blocks = blocks.transpose(0, 1, 3, 5, 2, 4).reshape(bsz, ho, wo, c, p * q)
    arg = blocks.argmax(axis=-1)
    y = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def vjp(g):
        onehot = (np.arange(p * q) == arg[..., None]) * g[..., None]
        onehot = onehot.reshape(bsz, ho, wo, c, p, q).transpose(0, 1, 4, 2, 5, 3)
        gx = np.zeros(x.shape)
        gx[:, : ho * p, : wo * q] = onehot.reshape(bsz, ho * p, wo * q, c)
        return (gx,)

    return _record("maxpool2d", (x,), y, vjp, meta=blocks)


# --- graphs and checking ----------------------------------------------------

def kink_margin(tape: Tape) -> float:
    """Distance of the recorded point from the nearest non-differentiable kink.

    Covers PReLU inputs (distance from 0) and max-pool windows (gap between the
    largest and second-largest element).  Returns inf when the tape has neither.
    """
    margin = np.inf
    for node in tape.nodes:
        if node.op == "prelu":
            margin = min(margin, float(np.min(np.abs(node.inputs[0].value))))
        elif node.op == "maxpool2d" and node.meta.shape[-1] > 1:
            top2 = np.sort(node.meta, axis=-1)[..., -2:]
            margin = min(margin, float(np.min(top2[..., 1] - top2[..., 0])))
    return margin


class Graph:
    """A reusable function of tensors with explicit forward and backward passes.

    ``fn`` receives one :class:`Tensor` per input and returns a Tensor.
    """

    def __init__(self, fn: Callable[..., Tensor], input_shapes: Sequence[tuple] | None = None):
        self.fn = fn
        self.input_shapes = None if input_shapes is None else [tuple(s) for s in input_shapes]
        self._tape: Tape | None = None
        self._inputs: list[Tensor] = []
        self._output: Tensor | None = None

    def forward(self, *inputs) -> Tensor:
        tensors = [t if isinstance(t, Tensor) else Tensor(t, requires_grad=True) for t in inputs]
        if self.input_shapes is not None:
            if len(tensors) != len(self.input_shapes):
                raise ShapeError(f"expected {len(self.input_shapes)} inputs, got {len(tensors)}")
            for i, (t, s) in enumerate(zip(tensors, self.input_shapes)):
                if t.shape != s:
                    raise ShapeError(f"input {i}: expected shape {s}, got {t.shape}")
        tape = Tape()
        with tape:
            out = self.fn(*tensors)
        self._tape, self._inputs, self._output = tape, tensors, out
        return out

    def backward(self, output_grad=None) -> list[np.ndarray | None]:
        if self._tape is None:
            raise AutodiffError("backward called before forward")
        out = self._output
        if output_grad is None:
            output_grad = np.ones(out.shape)
        output_grad = np.asarray(output_grad, dtype=DTYPE)
        if output_grad.shape != out.shape:
            raise ShapeError(f"output_grad shape {output_grad.shape} != output shape {out.shape}")
        grads = self._tape.backward([(out, output_grad)])
        result = []
        for t in self._inputs:
            if not t.requires_grad:
                result.append(None)
            else:
                result.append(grads.get(id(t), np.zeros(t.shape)))
        return result


def forward_eval(graph: Graph, inputs: Sequence) -> Tensor:
    return graph.forward(*inputs)


def backward(graph: Graph, output_grad=None) -> list[np.ndarray | None]:
    return graph.backward(output_grad)


def grad_check(fn: Callable[..., Tensor], point: Sequence[np.ndarray], eps: float = 1e-5) -> float:
    """Largest |analytic - central difference| / max(1, |central difference|)."""
    point = [np.array(p, dtype=DTYPE) for p in point]
    graph = Graph(fn)
    out = graph.forward(*[Tensor(p, requires_grad=True) for p in point])
    if out.value.size != 1:
        raise ShapeError("grad_check needs a scalar-valued function")
    analytic = graph.backward(np.ones(out.shape))
    worst = 0.0
    for k, p in enumerate(point):
        flat = p.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(fn(*[Tensor(q) for q in point]).value)
            flat[i] = orig - eps
            f_minus = float(fn(*[Tensor(q) for q in point]).value)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            err = abs(analytic[k].reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
