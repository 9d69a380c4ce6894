"""Minimal dense tensors with tape-based reverse-mode differentiation.

Only the primitives needed by the U-Net and the depth losses are provided.
Activations use the N x C x H x W layout. Every primitive is a pair of
numpy functions (forward, backward); executed primitives whose inputs
require gradients are appended to the active :class:`Graph`, and
:func:`backward` replays that tape in reverse.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "ShapeError",
    "GradCheckError",
    "PRIMITIVES",
    "primitive_forward",
    "backward",
    "grad_check",
    "default_graph",
    "no_grad",
    "float64_mode",
    "get_dtype",
    # op helpers
    "add",
    "sub",
    "mul",
    "div",
    "scalar_mul",
    "relu",
    "conv2d",
    "max_pool2",
    "upsample2",
    "concat",
    "mean",
    "max_reduce",
    "absolute",
    "square",
    "sqrt",
    "exp",
    "clamp",
]


class ShapeError(ValueError):
    """Raised when a primitive receives inputs of non-conforming shapes."""


class GradCheckError(RuntimeError):
    """Raised when a gradient check meets non-finite values."""


_state = threading.local()


def get_dtype():
    return getattr(_state, "dtype", np.float32)


@contextlib.contextmanager
def float64_mode():
    """Run the enclosed code with 64-bit tensors (used by gradient checks)."""
    prev = get_dtype()
    _state.dtype = np.float64
    try:
        yield
    finally:
        _state.dtype = prev


class Tensor:
    """Dense real array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        # order="C" keeps 0-d scalars 0-d, unlike np.ascontiguousarray
        arr = np.asarray(data, dtype=get_dtype(), order="C")
        if arr.ndim > 4:
            raise ShapeError(f"tensor rank {arr.ndim} exceeds 4")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar, all routed through primitive_forward
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scalar_mul(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if np.isscalar(other):
            return scalar_mul(self, 1.0 / float(other))
        return div(self, other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def backward(self) -> Dict["Tensor", np.ndarray]:
        return backward(default_graph(), self)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    kind: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    ctx: Any


@dataclass
class Graph:
    """Ordered tape of executed primitives (inputs always precede outputs)."""

    nodes: List[Node] = field(default_factory=list)

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def reset(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)

    @contextlib.contextmanager
    def active(self):
        """Make this graph the recording target for the current thread."""
        prev = getattr(_state, "graph", None)
        _state.graph = self
        try:
            yield self
        finally:
            _state.graph = prev


def default_graph() -> Graph:
    g = getattr(_state, "graph", None)
    if g is None:
        g = getattr(_state, "root_graph", None)
        if g is None:
            g = _state.root_graph = Graph()
    return g


@contextlib.contextmanager
def no_grad():
    prev = getattr(_state, "recording", True)
    _state.recording = False
    try:
        yield
    finally:
        _state.recording = prev


# ---------------------------------------------------------------------------
# primitive implementations: forward(arrays, attrs) -> (out, ctx),
# backward(ctx, gout) -> tuple of input gradients (None for "no gradient")
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(kind, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: cannot broadcast {a.shape} with {b.shape}") from None


def _add_fwd(a, b):
    _check_broadcast("add", a, b)
    return a + b, (a.shape, b.shape)


def _add_bwd(ctx, g):
    sa, sb = ctx
    return _unbroadcast(g, sa), _unbroadcast(g, sb)


def _sub_fwd(a, b):
    _check_broadcast("sub", a, b)
    return a - b, (a.shape, b.shape)


def _sub_bwd(ctx, g):
    sa, sb = ctx
    return _unbroadcast(g, sa), _unbroadcast(-g, sb)


def _mul_fwd(a, b):
    _check_broadcast("mul", a, b)
    return a * b, (a, b)


def _mul_bwd(ctx, g):
    a, b = ctx
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _div_fwd(a, b):
    _check_broadcast("div", a, b)
    out = a / b
    return out, (a.shape, b, out)


def _div_bwd(ctx, g):
    sa, b, out = ctx
    gb = g / b
    return _unbroadcast(gb, sa), _unbroadcast(-gb * out, b.shape)


def _scalar_mul_fwd(a, *, scalar: float):
    return a * a.dtype.type(scalar), scalar


def _scalar_mul_bwd(ctx, g):
    return (g * g.dtype.type(ctx),)


def _relu_fwd(a):
    mask = a > 0
    return np.maximum(a, 0), mask


def _relu_bwd(mask, g):
    return (g * mask,)


def _abs_fwd(a):
    return np.abs(a), np.sign(a)


def _abs_bwd(sign, g):
    return (g * sign,)


def _square_fwd(a):
    return a * a, a


def _square_bwd(a, g):
    return (2 * a * g,)


def _sqrt_fwd(a):
    if np.any(a < 0):
        raise ValueError("sqrt: negative input")
    out = np.sqrt(a)
    return out, out


def _sqrt_bwd(out, g):
    with np.errstate(divide="ignore", invalid="ignore"):
        return (np.where(out > 0, g / (2 * out), 0).astype(g.dtype),)


def _exp_fwd(a):
    out = np.exp(a)
    return out, out


def _exp_bwd(out, g):
    return (g * out,)


def _clamp_fwd(a, *, lo: float, hi: float):
    if lo > hi:
        raise ValueError(f"clamp: lo {lo} > hi {hi}")
    inside = (a >= lo) & (a <= hi)
    return np.clip(a, lo, hi), inside


def _clamp_bwd(inside, g):
    return (g * inside,)


def _mean_fwd(a):
    return np.asarray(a.mean(dtype=a.dtype)).reshape(()), a.shape


def _mean_bwd(shape, g):
    n = int(np.prod(shape)) if shape else 1
    return (np.full(shape, g.reshape(-1)[0] / n, dtype=g.dtype),)


def _max_reduce_fwd(a):
    flat = a.reshape(-1)
    idx = int(np.argmax(flat))
    return np.asarray(flat[idx]).reshape(()), (a.shape, idx)


def _max_reduce_bwd(ctx, g):
    shape, idx = ctx
    out = np.zeros(int(np.prod(shape)), dtype=g.dtype)
    out[idx] = g.reshape(-1)[0]
    return (out.reshape(shape),)


def _concat_fwd(*arrays):
    first = arrays[0]
    for a in arrays[1:]:
        if a.ndim != 4 or first.ndim != 4 or a.shape[0] != first.shape[0] or a.shape[2:] != first.shape[2:]:
            raise ShapeError(
                f"concat: expected N x * x H x W matching {first.shape}, got {a.shape}"
            )
    return np.concatenate(arrays, axis=1), [a.shape[1] for a in arrays]


def _concat_bwd(splits, g):
    edges = np.cumsum(splits)[:-1]
    return tuple(np.ascontiguousarray(p) for p in np.split(g, edges, axis=1))


def _max_pool2_fwd(a):
    if a.ndim != 4 or a.shape[2] % 2 or a.shape[3] % 2:
        raise ShapeError(f"max_pool2: expected N x C x H x W with even H, W, got {a.shape}")
    n, c, h, w = a.shape
    blocks = a.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    # argmax returns the first maximal element; block order is row-major
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return out, (a.shape, arg)


def _max_pool2_bwd(ctx, g):
    shape, arg = ctx
    n, c, h, w = shape
    blocks = np.zeros((n, c, h // 2, w // 2, 4), dtype=g.dtype)
    np.put_along_axis(blocks, arg[..., None], g[..., None], axis=-1)
    dx = blocks.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(shape)
    return (dx,)


def _upsample2_fwd(a):
    if a.ndim != 4:
        raise ShapeError(f"upsample2: expected N x C x H x W, got {a.shape}")
    return a.repeat(2, axis=2).repeat(2, axis=3), None


def _upsample2_bwd(_, g):
    n, c, h, w = g.shape
    return (g.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5)),)


def _pad(x: np.ndarray, p: int, mode: str) -> np.ndarray:
    if p == 0:
        return x
    if mode == "zero":
        return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), mode="reflect")


def _reflect_index(n: int, p: int) -> np.ndarray:
    return np.pad(np.arange(n), p, mode="reflect")


def _unpad(g: np.ndarray, p: int, mode: str, shape) -> np.ndarray:
    if p == 0:
        return g
    if mode == "zero":
        return g[:, :, p:-p, p:-p]
    n, c, h, w = shape
    rows = np.zeros((n, c, h, g.shape[3]), dtype=g.dtype)
    np.add.at(rows, (slice(None), slice(None), _reflect_index(h, p)), g)
    out = np.zeros(shape, dtype=g.dtype)
    np.add.at(out, (slice(None), slice(None), slice(None), _reflect_index(w, p)), rows)
    return out


def _conv2d_fwd(x, w, b=None, *, stride: int = 1, padding: int = 0, pad_mode: str = "zero"):
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input and kernel, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input channels {x.shape[1]} != kernel channels {w.shape[1]} (kernel {w.shape})")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d: bias shape {b.shape}, expected ({w.shape[0]},)")
    if stride not in (1, 2):
        raise ValueError(f"conv2d: stride must be 1 or 2, got {stride}")
    if pad_mode not in ("zero", "reflect"):
        raise ValueError(f"conv2d: pad_mode must be 'zero' or 'reflect', got {pad_mode!r}")
    n, c, _, _ = x.shape
    o, _, kh, kw = w.shape
    xp = _pad(x, padding, pad_mode)
    hp, wp = xp.shape[2:]
    if hp < kh or wp < kw:
        raise ShapeError(f"conv2d: padded input {xp.shape} smaller than kernel {w.shape}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    if stride == 1 and c * kh * kw > _IM2COL_MAX_K:
        out, saved = _conv_shift_fwd(xp, w, ho, wo)
        method = "shift"
    else:
        out, saved = _conv_im2col_fwd(xp, w, ho, wo, stride)
        method = "im2col"
    if b is not None:
        out += b[:, None, None, None]
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))
    ctx = (method, saved, x.shape, xp.shape, w, b is not None, stride, padding, pad_mode)
    return out, ctx


# below this many columns per output the explicit column matrix is cheaper
_IM2COL_MAX_K = 16


def _conv_im2col_fwd(xp, w, ho, wo, stride):
    n, c = xp.shape[:2]
    o, _, kh, kw = w.shape
    # spatial axes stay innermost so every copy is a contiguous block move
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=xp.dtype)
    xt = xp.transpose(1, 0, 2, 3)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    cols = cols.reshape(c * kh * kw, n * ho * wo)
    out = (w.reshape(o, -1) @ cols).reshape(o, n, ho, wo)
    return out, cols


def _conv_shift_fwd(xp, w, ho, wo):
    # Flatten the padded input to (C, N*Hp*Wp); kernel tap (i, j) then reads a
    # contiguous column window shifted by i*Wp + j, so the convolution is a
    # sum of kh*kw plain matrix products. Rows/cols past (ho, wo) are junk
    # and are cropped.
    n, c, hp, wp = xp.shape
    o, _, kh, kw = w.shape
    span = n * hp * wp
    xf = np.zeros((c, span + (kh - 1) * wp + kw - 1), dtype=xp.dtype)
    xf[:, :span] = xp.transpose(1, 0, 2, 3).reshape(c, span)
    taps = np.ascontiguousarray(w.transpose(2, 3, 0, 1))
    acc = np.zeros((o, span), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            off = i * wp + j
            acc += taps[i, j] @ xf[:, off : off + span]
    out = acc.reshape(o, n, hp, wp)[:, :, :ho, :wo]
    return out, xf


def _conv2d_bwd(ctx, g):
    method, saved, xshape, xpshape, w, has_bias, stride, padding, pad_mode = ctx
    n, c = xshape[:2]
    o, _, kh, kw = w.shape
    ho, wo = g.shape[2:]
    gt = g.transpose(1, 0, 2, 3)
    if method == "shift":
        dw, dxt = _conv_shift_bwd(saved, gt, w, xpshape)
    else:
        cols = saved
        gm = np.ascontiguousarray(gt).reshape(o, n * ho * wo)
        dw = (gm @ cols.T).reshape(w.shape)
        dcols = (w.reshape(o, -1).T @ gm).reshape(c, kh, kw, n, ho, wo)
        dxt = np.zeros((c, n) + tuple(xpshape[2:]), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                dxt[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, i, j]
    dxp = np.ascontiguousarray(dxt.transpose(1, 0, 2, 3))
    dx = _unpad(dxp, padding, pad_mode, xshape)
    grads = (dx, dw)
    if has_bias:
        grads += (g.sum(axis=(0, 2, 3)),)
    return grads


def _conv_shift_bwd(xf, gt, w, xpshape):
    n, c, hp, wp = xpshape
    o, _, kh, kw = w.shape
    ho, wo = gt.shape[2:]
    span = n * hp * wp
    gf = np.zeros((o, n, hp, wp), dtype=gt.dtype)
    gf[:, :, :ho, :wo] = gt
    gf = gf.reshape(o, span)
    dw = np.empty((kh, kw, o, c), dtype=gt.dtype)
    dxf = np.zeros_like(xf)
    taps_t = np.ascontiguousarray(w.transpose(2, 3, 1, 0))
    for i in range(kh):
        for j in range(kw):
            off = i * wp + j
            window = xf[:, off : off + span]
            dw[i, j] = gf @ window.T
            dxf[:, off : off + span] += taps_t[i, j] @ gf
    dxt = dxf[:, :span].reshape(c, n, hp, wp)
    return np.ascontiguousarray(dw.transpose(2, 3, 0, 1)), dxt


PRIMITIVES: Dict[str, Tuple[Callable, Callable]] = {
    "add": (_add_fwd, _add_bwd),
    "sub": (_sub_fwd, _sub_bwd),
    "mul": (_mul_fwd, _mul_bwd),
    "div": (_div_fwd, _div_bwd),
    "scalar_mul": (_scalar_mul_fwd, _scalar_mul_bwd),
    "relu": (_relu_fwd, _relu_bwd),
    "conv2d": (_conv2d_fwd, _conv2d_bwd),
    "max_pool2": (_max_pool2_fwd, _max_pool2_bwd),
    "upsample2": (_upsample2_fwd, _upsample2_bwd),
    "concat": (_concat_fwd, _concat_bwd),
    "mean": (_mean_fwd, _mean_bwd),
    "max_reduce": (_max_reduce_fwd, _max_reduce_bwd),
    "abs": (_abs_fwd, _abs_bwd),
    "square": (_square_fwd, _square_bwd),
    "sqrt": (_sqrt_fwd, _sqrt_bwd),
    "exp": (_exp_fwd, _exp_bwd),
    "clamp": (_clamp_fwd, _clamp_bwd),
}


def primitive_forward(kind: str, *inputs: Tensor, **attrs) -> Tensor:
    """Execute one primitive and record it on the active graph if needed."""
    try:
        fwd, _ = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive kind {kind!r}") from None
    arrays = [t.data for t in inputs]
    out_data, ctx = fwd(*arrays, **attrs)
    needs_grad = getattr(_state, "recording", True) and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs_grad)
    if needs_grad:
        default_graph().record(Node(kind, tuple(inputs), out, ctx))
    return out


def backward(graph: Graph, loss: Tensor) -> Dict[Tensor, np.ndarray]:
    """Propagate d(loss)/d(.) through ``graph`` and fill leaf ``.grad`` buffers.

    Returns a mapping from every gradient-requiring leaf reached to its
    gradient. The graph is reset afterwards.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    nodes = graph.nodes
    if not any(node.output is loss for node in nodes):
        raise ValueError("backward: loss is not produced by this graph")
    produced = {id(node.output) for node in nodes}
    grads: Dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.data.dtype)}
    leaves: Dict[int, Tensor] = {}
    for node in reversed(nodes):
        gout = grads.pop(id(node.output), None)
        if gout is None:
            continue
        _, bwd = PRIMITIVES[node.kind]
        gins = bwd(node.ctx, gout)
        for t, gi in zip(node.inputs, gins):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if key not in produced:
                leaves[key] = t
    graph.reset()
    result: Dict[Tensor, np.ndarray] = {}
    for key, t in leaves.items():
        g = grads[key].astype(t.data.dtype, copy=False).reshape(t.shape)
        t.grad = g if t.grad is None else t.grad + g
        result[t] = g
    return result


# ---------------------------------------------------------------------------
# op helpers
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    return primitive_forward("add", a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return primitive_forward("sub", a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return primitive_forward("mul", a, b)


def div(a: Tensor, b: Tensor) -> Tensor:
    return primitive_forward("div", a, b)


def scalar_mul(a: Tensor, scalar: float) -> Tensor:
    return primitive_forward("scalar_mul", a, scalar=scalar)


def relu(a: Tensor) -> Tensor:
    return primitive_forward("relu", a)


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, padding: int = 0,
           pad_mode: str = "zero") -> Tensor:
    inputs = (x, w) if b is None else (x, w, b)
    return primitive_forward("conv2d", *inputs, stride=stride, padding=padding, pad_mode=pad_mode)


def max_pool2(x: Tensor) -> Tensor:
    return primitive_forward("max_pool2", x)


def upsample2(x: Tensor) -> Tensor:
    return primitive_forward("upsample2", x)


def concat(*xs: Tensor) -> Tensor:
    return primitive_forward("concat", *xs)


def mean(x: Tensor) -> Tensor:
    return primitive_forward("mean", x)


def max_reduce(x: Tensor) -> Tensor:
    return primitive_forward("max_reduce", x)


def absolute(x: Tensor) -> Tensor:
    return primitive_forward("abs", x)


def square(x: Tensor) -> Tensor:
    return primitive_forward("square", x)


def sqrt(x: Tensor) -> Tensor:
    return primitive_forward("sqrt", x)


def exp(x: Tensor) -> Tensor:
    return primitive_forward("exp", x)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    return primitive_forward("clamp", x, lo=lo, hi=hi)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def grad_check(builder: Callable[..., Tensor], inputs: Sequence, eps: float = 1e-3) -> float:
    """Compare analytic gradients of ``builder`` with central differences.

    ``builder`` maps tensors to a scalar tensor. Every input is treated as a
    differentiable leaf. The check runs in 64-bit precision so that the
    finite differences are meaningful at ``eps``. Returns the maximum over
    all input elements of ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    with float64_mode():
        base = [np.array(t.data if isinstance(t, Tensor) else t, dtype=np.float64) for t in inputs]
        graph = Graph()
        leaves = [Tensor(a, requires_grad=True) for a in base]
        with graph.active():
            loss = builder(*leaves)
        if not np.all(np.isfinite(loss.data)):
            raise GradCheckError("non-finite loss in builder")
        if graph.nodes and any(n.output is loss for n in graph.nodes):
            backward(graph, loss)
        analytic = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]

        def evaluate(arrays):
            with no_grad():
                val = builder(*[Tensor(a) for a in arrays]).data
            if not np.all(np.isfinite(val)):
                raise GradCheckError("non-finite loss during finite differencing")
            return float(val.reshape(-1)[0])

        worst = 0.0
        for k, arr in enumerate(base):
            flat = arr.reshape(-1)
            grad_flat = analytic[k].reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = evaluate(base)
                flat[i] = orig - eps
                fm = evaluate(base)
                flat[i] = orig
                num = (fp - fm) / (2 * eps)
                a = float(grad_flat[i])
                if not (np.isfinite(a) and np.isfinite(num)):
                    raise GradCheckError(f"non-finite gradient at input {k}, element {i}")
                err = abs(a - num) / max(1e-8, abs(a) + abs(num))
                worst = max(worst, err)
        return worst
