"""Dense float64 tensors with reverse-mode automatic differentiation.

Every backward rule is written in terms of the library's own ops, so a
gradient is itself a differentiable graph value.  That makes grad-of-grad
(and therefore exact Hessian-vector products) work by plain composition:
call ``backward(..., create_graph=True)`` and differentiate the result.

Recording is implicit: an op links its output to its inputs whenever grad
mode is on and some input requires a gradient.  A ``Graph`` can be opened
as a context manager to additionally capture the produced nodes in
insertion (topological) order, which keeps them alive for inspection and
supports bit-exact forward replay.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, ParameterError, ShapeError

_ids = itertools.count()


class _State(threading.local):
    def __init__(self):
        self.grad_enabled = True
        self.graphs: list["Graph"] = []


_state = _State()


@contextmanager
def no_grad():
    """Disable graph recording; ops return detached constants."""
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextmanager
def _grad_on():
    prev = _state.grad_enabled
    _state.grad_enabled = True
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Graph:
    """Append-only record of op applications.

    ``nodes`` lists every recorded output tensor in creation order, which is
    a topological order by construction (inputs always precede outputs).
    A graph instance must be written from a single thread; independent
    graphs never share state.
    """

    def __init__(self):
        self.nodes: list["Tensor"] = []

    def __enter__(self) -> "Graph":
        _state.graphs.append(self)
        return self

    def __exit__(self, *exc):
        _state.graphs.pop()
        return False

    def replay(self) -> None:
        """Recompute every recorded node from its parents' current data.

        With unchanged leaves this reproduces each node bit-exactly; after
        editing leaf data it re-runs the same forward computation.
        """
        for t in self.nodes:
            t.data = t._recompute(*(p.data for p in t._parents))


class Tensor:
    """N-dimensional float64 array that may participate in a graph."""

    __slots__ = ("data", "requires_grad", "node_id", "_op", "_parents", "_vjp", "_recompute")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_ids)
        self._op: str | None = None
        self._parents: tuple["Tensor", ...] = ()
        self._vjp: Callable | None = None
        self._recompute: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic
    def __add__(self, other):
        return add(self, as_tensor(other))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __truediv__(self, other):
        return div(self, as_tensor(other))

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    # shape and reductions
    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def permute(self, axes) -> "Tensor":
        return permute(self, axes)

    @property
    def T(self) -> "Tensor":
        return permute(self, tuple(range(self.ndim))[::-1])

    def broadcast_to(self, shape) -> "Tensor":
        return broadcast_to(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None) -> "Tensor":
        n = self.size if axis is None else int(np.prod([self.shape[a] for a in _axes_tuple(axis, self.ndim)]))
        return self.sum(axis=axis) * (1.0 / n)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _apply(op: str, parents: Sequence[Tensor], out_data: np.ndarray,
           vjp: Callable, recompute: Callable) -> Tensor:
    """Wrap an op result, linking it into the graph when grads are wanted."""
    track = _state.grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(out_data, requires_grad=track)
    if track:
        out._op = op
        out._parents = tuple(parents)
        out._vjp = vjp
        out._recompute = recompute
        if _state.graphs:
            _state.graphs[-1].nodes.append(out)
    return out


def _axes_tuple(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


# ---------------------------------------------------------------------------
# elementwise and linear-algebra primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def vjp(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _apply("add", (a, b), out, vjp, lambda x, y: x + y)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def vjp(g):
        return (_unbroadcast(g * b, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a, b.shape) if b.requires_grad else None)

    return _apply("mul", (a, b), out, vjp, lambda x, y: x * y)


def neg(a: Tensor) -> Tensor:
    return _apply("neg", (a,), -a.data, lambda g: (neg(g),), lambda x: -x)


def div(a: Tensor, b: Tensor) -> Tensor:
    out_t = _apply("div", (a, b), a.data / b.data, None, lambda x, y: x / y)

    def vjp(g):
        return (_unbroadcast(g / b, a.shape) if a.requires_grad else None,
                _unbroadcast(neg(g * out_t / b), b.shape) if b.requires_grad else None)

    out_t._vjp = vjp if out_t.requires_grad else None
    return out_t


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product; shapes [m,k] @ [k,n] -> [m,n]."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")

    def vjp(g):
        return (matmul(g, b.T) if a.requires_grad else None,
                matmul(a.T, g) if b.requires_grad else None)

    return _apply("matmul", (a, b), a.data @ b.data, vjp, lambda x, y: x @ y)


def exp(a: Tensor) -> Tensor:
    out_t = _apply("exp", (a,), np.exp(a.data), None, np.exp)
    out_t._vjp = (lambda g: (g * out_t,)) if out_t.requires_grad else None
    return out_t


def log(a: Tensor) -> Tensor:
    return _apply("log", (a,), np.log(a.data), lambda g: (g / a,), np.log)


def relu(a: Tensor) -> Tensor:
    mask = Tensor((a.data > 0).astype(np.float64))
    return _apply("relu", (a,), a.data * mask.data,
                  lambda g: (g * mask,), lambda x: x * mask.data)


# ---------------------------------------------------------------------------
# shape primitives


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    return _apply("reshape", (a,), a.data.reshape(shape),
                  lambda g: (reshape(g, a.shape),), lambda x: x.reshape(shape))


def permute(a: Tensor, axes) -> Tensor:
    # returns a view; downstream ops tolerate non-contiguous data
    axes = tuple(int(x) for x in axes)
    inverse = tuple(int(i) for i in np.argsort(axes))
    return _apply("permute", (a,), np.transpose(a.data, axes),
                  lambda g: (permute(g, inverse),),
                  lambda x: np.transpose(x, axes))


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    return _apply("broadcast_to", (a,), np.broadcast_to(a.data, shape).copy(),
                  lambda g: (_unbroadcast(g, a.shape),),
                  lambda x: np.broadcast_to(x, shape).copy())


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axes_tuple(axis, a.ndim)
    kept = tuple(1 if i in axes else s for i, s in enumerate(a.shape))

    def vjp(g):
        return (broadcast_to(reshape(g, kept), a.shape),)

    return _apply("sum", (a,), a.data.sum(axis=axes, keepdims=keepdims), vjp,
                  lambda x: x.sum(axis=axes, keepdims=keepdims))


def _unbroadcast(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Reduce a broadcast gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = tensor_sum(g, axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = tensor_sum(g, axis=axes, keepdims=True)
    return g if g.shape == shape else reshape(g, shape)


# ---------------------------------------------------------------------------
# window primitives (shared by conv2d, conv_transpose2d and maxpool2d)


def pad2d(a: Tensor, padding: int) -> Tensor:
    """Zero-pad the two trailing spatial axes of an [N,C,H,W] tensor."""
    p = int(padding)
    if p < 0:
        raise ParameterError("padding must be non-negative")
    if p == 0:
        return a
    width = ((0, 0), (0, 0), (p, p), (p, p))
    return _apply("pad2d", (a,), np.pad(a.data, width),
                  lambda g: (crop2d(g, p),), lambda x: np.pad(x, width))


def crop2d(a: Tensor, padding: int) -> Tensor:
    """Remove a symmetric spatial border; the adjoint of pad2d."""
    p = int(padding)
    if p == 0:
        return a
    if a.shape[2] <= 2 * p or a.shape[3] <= 2 * p:
        raise ShapeError(f"cannot crop border {p} from spatial shape {a.shape[2:]}")
    return _apply("crop2d", (a,), a.data[:, :, p:-p, p:-p].copy(),
                  lambda g: (pad2d(g, p),), lambda x: x[:, :, p:-p, p:-p].copy())


def _im2col_data(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))


def _col2im_data(cols: np.ndarray, h: int, w: int, stride: int) -> np.ndarray:
    n, ho, wo, c, kh, kw = cols.shape
    out = np.zeros((n, c, h, w), dtype=np.float64)
    if stride == kh == kw:
        # non-overlapping windows (the pooling case): one strided assignment
        view = out[:, :, :ho * kh, :wo * kw].reshape(n, c, ho, kh, wo, kw)
        view[...] = cols.transpose(0, 3, 1, 4, 2, 5)
        return out
    # overlapping windows: scatter-add one kernel offset at a time over a
    # contiguous [kh, kw, N, C, H', W'] copy so each slice add is cheap
    ct = np.ascontiguousarray(cols.transpose(4, 5, 0, 3, 1, 2))
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += ct[i, j]
    return out


def im2col(a: Tensor, kh: int, kw: int, stride: int = 1) -> Tensor:
    """Extract sliding [kh,kw] windows: [N,C,H,W] -> [N,H',W',C,kh,kw].

    Linear in the input; its adjoint (and backward rule) is col2im.
    """
    n, c, h, w = a.shape
    if kh > h or kw > w:
        raise ShapeError(f"window {(kh, kw)} larger than input {(h, w)}")

    def vjp(g):
        return (col2im(g, h, w, stride),)

    return _apply("im2col", (a,), _im2col_data(a.data, kh, kw, stride), vjp,
                  lambda x: _im2col_data(x, kh, kw, stride))


def col2im(cols: Tensor, h: int, w: int, stride: int = 1) -> Tensor:
    """Scatter-add windows back to [N,C,H,W]; the adjoint of im2col."""
    _, _, _, _, kh, kw = cols.shape

    def vjp(g):
        return (im2col(g, kh, kw, stride),)

    return _apply("col2im", (cols,), _col2im_data(cols.data, h, w, stride), vjp,
                  lambda x: _col2im_data(x, h, w, stride))


def reduce_max_last(a: Tensor) -> Tensor:
    """Maximum over the trailing axis; gradient goes to the first argmax."""
    idx = np.argmax(a.data, axis=-1)

    def vjp(g):
        mask = np.zeros(a.shape, dtype=np.float64)
        np.put_along_axis(mask, idx[..., None], 1.0, axis=-1)
        return (reshape(g, g.shape + (1,)) * Tensor(mask),)

    return _apply("max_last", (a,), a.data.max(axis=-1), vjp,
                  lambda x: np.take_along_axis(x, idx[..., None], axis=-1)[..., 0])


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Pick a[i, idx[i]] for each row i of a 2-D tensor."""
    idx = np.asarray(idx)
    n, l = a.shape

    def vjp(g):
        return (scatter_rows(g, idx, l),)

    return _apply("gather_rows", (a,), a.data[np.arange(n), idx], vjp,
                  lambda x: x[np.arange(n), idx])


def scatter_rows(v: Tensor, idx: np.ndarray, width: int) -> Tensor:
    """Place v[i] at column idx[i] of an [N,width] zero matrix."""
    idx = np.asarray(idx)
    n = v.shape[0]

    def fwd(x):
        out = np.zeros((n, width), dtype=np.float64)
        out[np.arange(n), idx] = x
        return out

    def vjp(g):
        return (gather_rows(g, idx),)

    return _apply("scatter_rows", (v,), fwd(v.data), vjp, fwd)


# ---------------------------------------------------------------------------
# network-level composites


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map x @ w + b with b broadcast over the batch."""
    return matmul(x, w) + b


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate [N,C,H,W] with filters [F,C,kh,kw] -> [N,F,H',W']."""
    n, c, h, wd = x.shape
    f, cw, kh, kw = w.shape
    if c != cw:
        raise ShapeError(f"input has {c} channels but filters expect {cw}")
    hp, wp = h + 2 * padding, wd + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(f"kernel {(kh, kw)} exceeds padded input {(hp, wp)}")
    if (hp - kh) % stride or (wp - kw) % stride:
        raise ShapeError(
            f"non-integer output extent for input {(h, wd)}, kernel {(kh, kw)}, "
            f"stride {stride}, padding {padding}")
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1

    cols = im2col(pad2d(x, padding), kh, kw, stride)
    mat = reshape(cols, (n * ho * wo, c * kh * kw))
    out = matmul(mat, reshape(w, (f, c * kh * kw)).T)
    if bias is not None:
        out = out + bias  # broadcast over rows while still 2-D and contiguous
    return permute(reshape(out, (n, ho, wo, f)), (0, 3, 1, 2))


def conv_transpose2d(x: Tensor, w: Tensor, bias: Tensor | None = None,
                     stride: int = 1) -> Tensor:
    """Fractionally-strided counterpart of conv2d (upsampling decoder layer).

    Maps [N,F,Ho,Wo] with filters [F,C,kh,kw] to [N,C,H,W] where
    H = (Ho-1)*stride + kh.
    """
    n, f, ho, wo = x.shape
    fw, c, kh, kw = w.shape
    if f != fw:
        raise ShapeError(f"input has {f} channels but filters expect {fw}")
    h, wd = (ho - 1) * stride + kh, (wo - 1) * stride + kw

    mat = reshape(permute(x, (0, 2, 3, 1)), (n * ho * wo, f))
    cols = reshape(matmul(mat, reshape(w, (f, c * kh * kw))), (n, ho, wo, c, kh, kw))
    out = col2im(cols, h, wd, stride)
    if bias is not None:
        out = out + reshape(bias, (1, c, 1, 1))
    return out


def maxpool2d(x: Tensor, window: int, stride: int | None = None) -> Tensor:
    """Per-window spatial maximum; odd trailing rows/cols are dropped."""
    stride = window if stride is None else stride
    n, c, h, w = x.shape
    if window > h or window > w:
        raise ShapeError(f"pool window {window} larger than input {(h, w)}")
    ho, wo = (h - window) // stride + 1, (w - window) // stride + 1

    cols = im2col(x, window, window, stride)
    flat = reshape(cols, (n, ho, wo, c, window * window))
    return permute(reduce_max_last(flat), (0, 3, 1, 2))


def dropout(x: Tensor, p: float, training: bool, seed: int) -> Tensor:
    """Zero elements with probability p and rescale survivors by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    rng = np.random.default_rng(seed)
    keep = (rng.random(x.shape) >= p).astype(np.float64) / (1.0 - p)
    return x * Tensor(keep)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-softmax of the labeled class, max-shifted for stability."""
    if logits.ndim != 2:
        raise ShapeError(f"logits must be [N, L], got {logits.shape}")
    labels = np.asarray(labels)
    n, l = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels must have shape ({n},), got {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= l):
        raise IndexError(f"labels must lie in [0, {l})")
    # the shift is detached: softmax is invariant to it, so its gradient is zero
    shift = Tensor(logits.data.max(axis=1, keepdims=True))
    z = logits - shift
    lse = log(tensor_sum(exp(z), axis=1))
    return (lse - gather_rows(z, labels)).mean()


# ---------------------------------------------------------------------------
# reverse-mode differentiation


class GradMap:
    """Mapping node_id -> gradient tensor of identical shape."""

    def __init__(self):
        self._grads: dict[int, Tensor] = {}

    def __len__(self):
        return len(self._grads)

    def __contains__(self, t: Tensor):
        return t.node_id in self._grads

    def wrt(self, t: Tensor) -> Tensor:
        """Gradient for t; KeyError if t never received one."""
        return self._grads[t.node_id]

    def data(self, t: Tensor) -> np.ndarray:
        """Gradient array for t, or zeros if t is disconnected from the loss."""
        g = self._grads.get(t.node_id)
        return np.zeros_like(t.data) if g is None else g.data

    def _accumulate(self, t: Tensor, g: Tensor) -> None:
        if g.shape != t.shape:
            raise ShapeError(f"gradient shape {g.shape} != tensor shape {t.shape}")
        cur = self._grads.get(t.node_id)
        self._grads[t.node_id] = g if cur is None else cur + g


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if t.node_id in seen:
            continue
        seen.add(t.node_id)
        stack.append((t, True))
        for p in t._parents:
            if p.requires_grad and p.node_id not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, create_graph: bool = False) -> GradMap:
    """Reverse-mode sweep from a scalar loss.

    Returns gradients for every requires_grad tensor reachable from the
    loss, keyed by node id.  With create_graph=True the returned gradients
    are themselves recorded graph values and can be differentiated again.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = GradMap()
    if not loss.requires_grad:
        return grads
    order = _toposort(loss)
    grads._accumulate(loss, Tensor(np.ones_like(loss.data)))
    ctx = _grad_on() if create_graph else no_grad()
    with ctx:
        for t in reversed(order):
            if t._vjp is None:
                continue
            gout = grads.wrt(t)
            for p, gi in zip(t._parents, t._vjp(gout)):
                if gi is not None and p.requires_grad:
                    grads._accumulate(p, gi)
    return grads


HVP_DEFAULT_MODE = "exact"


def hvp(loss_fn: Callable[[list[Tensor]], Tensor], params: list[Tensor],
        vector: Sequence[np.ndarray], mode: str | None = None,
        eps: float = 1e-4) -> list[np.ndarray]:
    """Hessian-vector product of loss_fn at params, applied to vector.

    "exact" differentiates through the gradient computation itself;
    "fd" uses a central difference of gradients, (g(θ+εv) - g(θ-εv)) / 2ε.
    Both evaluate loss_fn afresh and leave params untouched.
    """
    mode = HVP_DEFAULT_MODE if mode is None else mode
    vecs = [np.asarray(v, dtype=np.float64) for v in vector]
    if len(vecs) != len(params):
        raise ShapeError(f"{len(params)} params but {len(vecs)} vector blocks")
    for p, v in zip(params, vecs):
        if v.shape != p.shape:
            raise ShapeError(f"vector block {v.shape} != param shape {p.shape}")

    if mode == "exact":
        with _grad_on():
            loss = loss_fn(params)
            grads = backward(loss, create_graph=True)
            dot = None
            for p, v in zip(params, vecs):
                if p not in grads:
                    continue
                term = (grads.wrt(p) * Tensor(v)).sum()
                dot = term if dot is None else dot + term
            if dot is None or not dot.requires_grad:
                return [np.zeros_like(p.data) for p in params]
            hv = backward(dot)
        return [hv.data(p) for p in params]

    if mode == "fd":
        def grad_at(sign: float) -> list[np.ndarray]:
            shifted = [Tensor(p.data + sign * eps * v, requires_grad=True)
                       for p, v in zip(params, vecs)]
            with _grad_on():
                g = backward(loss_fn(shifted))
            return [g.data(p) for p in shifted]

        plus, minus = grad_at(+1.0), grad_at(-1.0)
        return [(a - b) / (2.0 * eps) for a, b in zip(plus, minus)]

    raise ParameterError(f"unknown hvp mode {mode!r}")
