"""Reverse-mode automatic differentiation over dense numpy arrays.

Operations record themselves on the active Graph (see ``Graph.__enter__``); with no
active graph they compute values only. backward() walks the recorded nodes in exact
reverse insertion order and accumulates (+=) into the ``grad`` of leaf tensors.
"""

import contextvars
from dataclasses import dataclass
from typing import (Callable, Dict, Iterable, List, Optional, Sequence, Tuple,
                    Union)

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from trisr.exceptions import ShapeError
from trisr.schemas import GradCheckReport

Scalar = Union[int, float]
ArrayLike = Union[np.ndarray, Scalar, Sequence]

_active_graph: contextvars.ContextVar[Optional["Graph"]] = contextvars.ContextVar(
    "active_graph", default=None
)


class Tensor:
    """An N-D value node. 5-D tensors use the (N, C, D, H, W) layout."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_produced")

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        name: Optional[str] = None,
        dtype=None,
    ):
        if dtype is not None:
            arr = np.array(data, dtype=dtype, copy=True)
        else:
            arr = np.array(data, copy=True)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        if arr.ndim > 5:
            raise ShapeError(f"Tensor rank must be <= 5, got shape {arr.shape}")
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        # True when an op on a graph produced this tensor (i.e. it is not a leaf)
        self._produced = False

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.name = None
        t._produced = False
        return t

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._produced

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(
                f"item() needs a single element, tensor has shape {self.shape}"
            )
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, graph: Optional["Graph"] = None) -> None:
        backward(self, graph)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return (
            f"Tensor(shape={self.shape}, dtype={self.dtype}, "
            f"requires_grad={self.requires_grad}{label})"
        )

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)


BackwardFn = Callable[..., Tuple[Optional[np.ndarray], ...]]


@dataclass
class Node:
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn
    # backward also takes a per-input "wanted" mask and skips unwanted gradients
    selective: bool = False


class Graph:
    """Append-only tape of operation records; insertion order is topological order."""

    def __init__(self):
        self.nodes: List[Node] = []
        self._token: Optional[contextvars.Token] = None

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Graph":
        self._token = _active_graph.set(self)
        return self

    def __exit__(self, *exc) -> None:
        if self._token is not None:
            _active_graph.reset(self._token)
            self._token = None


def active_graph() -> Optional[Graph]:
    return _active_graph.get()


def as_tensor(value: Union[Tensor, ArrayLike], like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor._wrap(np.asarray(value, dtype=dtype))


def _record(
    op: str,
    inputs: Tuple[Tensor, ...],
    out: np.ndarray,
    fn: BackwardFn,
    selective: bool = False,
) -> Tensor:
    result = Tensor._wrap(out)
    graph = _active_graph.get()
    if graph is not None and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        result._produced = True
        graph.record(Node(op, inputs, result, fn, selective))
    return result


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _binary_shape(a: Tensor, b: Tensor, op: str) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise ShapeError(
            f"{op}: shapes {a.shape} and {b.shape} do not broadcast"
        ) from e


def _pair(a, b) -> Tuple[Tensor, Tensor]:
    """Wrap raw operands, giving scalars the dtype of the tensor operand."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, as_tensor(b, like=a)
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return as_tensor(a, like=b), b
    return as_tensor(a), as_tensor(b)


# ---------------------------------------------------------------- elementwise
def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _binary_shape(a, b, "add")
    return _record(
        "add",
        (a, b),
        a.data + b.data,
        lambda g: (
            _unbroadcast(g, a.shape),
            _unbroadcast(g, b.shape),
        ),
    )


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _binary_shape(a, b, "sub")
    return _record(
        "sub",
        (a, b),
        a.data - b.data,
        lambda g: (
            _unbroadcast(g, a.shape),
            _unbroadcast(-g, b.shape),
        ),
    )


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _binary_shape(a, b, "mul")
    return _record(
        "mul",
        (a, b),
        a.data * b.data,
        lambda g: (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        ),
    )


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _binary_shape(a, b, "div")
    out = a.data / b.data
    return _record(
        "div",
        (a, b),
        out,
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        ),
    )


def abs(x: Tensor) -> Tensor:
    # sign(0) == 0: the subgradient at a tie is 0
    return _record("abs", (x,), np.abs(x.data), lambda g: (g * np.sign(x.data),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _record("exp", (x,), out, lambda g: (g * out,))


def log(x: Tensor, eps: Optional[float] = None) -> Tensor:
    """Natural log; with ``eps`` the argument is clamped from below at eps."""
    if eps is None:
        return _record("log", (x,), np.log(x.data), lambda g: (g / x.data,))
    clamped = np.maximum(x.data, eps)
    live = x.data > eps
    return _record(
        "log",
        (x,),
        np.log(clamped),
        lambda g: (np.where(live, g / clamped, 0.0).astype(g.dtype, copy=False),),
    )


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype, copy=False)
    return _record("sigmoid", (x,), out, lambda g: (g * out * (1.0 - out),))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    positive = x.data > 0
    out = np.where(positive, x.data, slope * x.data).astype(x.dtype, copy=False)
    return _record(
        "leaky_relu",
        (x,),
        out,
        lambda g: (np.where(positive, g, slope * g).astype(g.dtype, copy=False),),
    )


# ---------------------------------------------------------------- reductions
def _normalize_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, x.ndim)
    out = np.sum(x.data, axis=axes, keepdims=keepdims)

    def fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record("sum", (x,), np.asarray(out), fn)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = np.mean(x.data, axis=axes, keepdims=keepdims)

    def fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return ((np.broadcast_to(g, x.shape) / count).astype(x.dtype, copy=False),)

    return _record("mean", (x,), np.asarray(out, dtype=x.dtype), fn)


def l1(x: Tensor, y: Tensor) -> Tensor:
    """Mean absolute difference over all elements."""
    x, y = as_tensor(x), as_tensor(y)
    if x.shape != y.shape:
        raise ShapeError(f"l1: shapes {x.shape} and {y.shape} differ")
    return mean(abs(sub(x, y)))


# ---------------------------------------------------------------- shape ops
def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    original = x.shape
    return _record(
        "reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(original),)
    )


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)
        ):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _record(
        "concat", tensors, out, lambda g: tuple(np.split(g, bounds, axis=axis))
    )


def pixel_shuffle3d(x: Tensor, r: int) -> Tensor:
    """(N, C*r^3, D, H, W) -> (N, C, D*r, H*r, W*r).

    out[n, c, d*r+i, h*r+j, w*r+k] = in[n, c*r^3 + i*r^2 + j*r + k, d, h, w]
    """
    if x.ndim != 5:
        raise ShapeError(f"pixel_shuffle3d expects a 5-D tensor, got {x.shape}")
    n, cr, d, h, w = x.shape
    if cr % (r**3):
        raise ShapeError(
            f"pixel_shuffle3d: {cr} channels not divisible by r^3={r**3}"
        )
    out = _shuffle(x.data, r)
    return _record("pixel_shuffle3d", (x,), out, lambda g: (_unshuffle(g, r),))


def pixel_unshuffle3d(x: Tensor, r: int) -> Tensor:
    """Inverse of pixel_shuffle3d."""
    if x.ndim != 5:
        raise ShapeError(f"pixel_unshuffle3d expects a 5-D tensor, got {x.shape}")
    if any(s % r for s in x.shape[2:]):
        raise ShapeError(
            f"pixel_unshuffle3d: spatial dims {x.shape[2:]} not divisible by {r}"
        )
    out = _unshuffle(x.data, r)
    return _record("pixel_unshuffle3d", (x,), out, lambda g: (_shuffle(g, r),))


def _shuffle(a: np.ndarray, r: int) -> np.ndarray:
    n, cr, d, h, w = a.shape
    c = cr // r**3
    a = a.reshape(n, c, r, r, r, d, h, w)
    a = a.transpose(0, 1, 5, 2, 6, 3, 7, 4)
    return np.ascontiguousarray(a.reshape(n, c, d * r, h * r, w * r))


def _unshuffle(a: np.ndarray, r: int) -> np.ndarray:
    n, c, dr, hr, wr = a.shape
    d, h, w = dr // r, hr // r, wr // r
    a = a.reshape(n, c, d, r, h, r, w, r)
    a = a.transpose(0, 1, 3, 5, 7, 2, 4, 6)
    return np.ascontiguousarray(a.reshape(n, c * r**3, d, h, w))


# ---------------------------------------------------------------- convolution & norm
def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _im2col(
    xp: np.ndarray, k: int, stride: int
) -> Tuple[np.ndarray, Tuple[int, int, int]]:
    """Contiguous (N*od*oh*ow, C*k^3) column matrix of every k^3 window of ``xp``."""
    win = sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))
    win = win[:, :, ::stride, ::stride, ::stride]
    n, c, od, oh, ow = win.shape[:5]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 4, 1, 5, 6, 7))
    return cols.reshape(n * od * oh * ow, c * k**3), (od, oh, ow)


def _conv_transpose_grad(
    g: np.ndarray, weight: np.ndarray, padded_shape: Tuple[int, ...], stride: int
) -> np.ndarray:
    """Gradient w.r.t. the padded conv input as a single full correlation of the
    stride-dilated output gradient with the flipped, channel-swapped kernel."""
    n, cout, od, oh, ow = g.shape
    cin, k = weight.shape[1], weight.shape[-1]
    if stride > 1:
        spread = (od - 1) * stride + 1, (oh - 1) * stride + 1, (ow - 1) * stride + 1
        dilated = np.zeros((n, cout, *spread), dtype=g.dtype)
        dilated[:, :, ::stride, ::stride, ::stride] = g
    else:
        dilated = g
    # input voxels past the last window get a zero gradient
    tails = [padded_shape[2 + a] - (dilated.shape[2 + a] + k - 1) for a in range(3)]
    gp = np.pad(dilated, ((0, 0), (0, 0)) + tuple((k - 1, k - 1 + t) for t in tails))
    flipped = np.flip(weight, axis=(2, 3, 4)).transpose(1, 0, 2, 3, 4).reshape(cin, -1)
    cols, (pd, ph, pw) = _im2col(gp, k, 1)
    gxp = cols @ flipped.T
    return gxp.reshape(n, pd, ph, pw, cin).transpose(0, 4, 1, 2, 3)


def conv3d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """3-D cross-correlation. x: (N, Cin, D, H, W), weight: (Cout, Cin, k, k, k).

    The forward pass builds the im2col matrix once; the backward pass reuses it for
    the weight gradient and computes the input gradient as a transposed convolution.
    Gradients nobody asked for are not computed.
    """
    if x.ndim != 5 or weight.ndim != 5:
        raise ShapeError(
            f"conv3d expects 5-D input and weight, got {x.shape} and {weight.shape}"
        )
    n, cin, d, h, w = x.shape
    cout, wcin, k, k1, k2 = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv3d: input has {cin} channels, weight expects {wcin}")
    if not k == k1 == k2:
        raise ShapeError(f"conv3d: kernel must be cubic, got {weight.shape[2:]}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(
            f"conv3d: bias shape {bias.shape} does not match {cout} output channels"
        )
    if min(d, h, w) + 2 * padding < k:
        raise ShapeError(
            f"conv3d: input {x.shape[2:]} with padding {padding} "
            f"smaller than kernel {k}"
        )

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0)) + ((padding, padding),) * 3)
    cols, (od, oh, ow) = _im2col(xp, k, stride)
    wmat = weight.data.reshape(cout, -1)

    out = (cols @ wmat.T).reshape(n, od, oh, ow, cout).transpose(0, 4, 1, 2, 3)
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1, 1)
    out = np.ascontiguousarray(out, dtype=x.dtype)

    def fn(
        g: np.ndarray, wanted: Sequence[bool] = (True, True, True)
    ) -> Tuple[Optional[np.ndarray], ...]:
        gx: Optional[np.ndarray] = None
        gw: Optional[np.ndarray] = None
        gb: Optional[np.ndarray] = None
        if wanted[0]:
            gxp = _conv_transpose_grad(g, weight.data, xp.shape, stride)
            crop = (slice(None), slice(None)) + tuple(
                slice(padding, padding + n_) for n_ in (d, h, w)
            )
            gx = gxp[crop].astype(x.dtype, copy=False)
        if wanted[1]:
            g2 = g.transpose(0, 2, 3, 4, 1).reshape(-1, cout)
            gw = (g2.T @ cols).reshape(weight.shape).astype(weight.dtype, copy=False)
        if bias is not None and wanted[2]:
            gb = g.sum(axis=(0, 2, 3, 4))
        return (gx, gw, gb)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _record("conv3d", inputs, out, fn, selective=True)


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-(n, c) standardization over the spatial axes, no affine parameters."""
    if x.ndim != 5:
        raise ShapeError(f"instance_norm expects a 5-D tensor, got {x.shape}")
    if int(np.prod(x.shape[2:])) < 2:
        raise ShapeError(
            f"instance_norm needs at least 2 spatial elements, got {x.shape[2:]}"
        )
    axes = (2, 3, 4)
    mu = x.data.mean(axis=axes, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (centered * inv_std).astype(x.dtype, copy=False)

    def fn(g):
        g_mean = g.mean(axis=axes, keepdims=True)
        gx_mean = (g * xhat).mean(axis=axes, keepdims=True)
        return ((inv_std * (g - g_mean - xhat * gx_mean)).astype(g.dtype, copy=False),)

    return _record("instance_norm", (x,), xhat, fn)


# ---------------------------------------------------------------- backward
def backward(
    loss: Tensor,
    graph: Optional[Graph] = None,
    inputs: Optional[Iterable[Tensor]] = None,
) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every requires_grad leaf
    reachable from ``loss``, or only for ``inputs`` when given."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = graph if graph is not None else _active_graph.get()
    if graph is None:
        raise ValueError("backward called without a graph")

    targets: Optional[set] = None
    depends: Optional[set] = None
    if inputs is not None:
        targets = {id(t) for t in inputs}
        # outputs that (transitively) depend on a target; everything else is skipped
        depends = set(targets)
        for node in graph.nodes:
            if any(id(t) in depends for t in node.inputs):
                depends.add(id(node.output))

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: Dict[int, Tuple[Tensor, np.ndarray]] = {}
    if loss.is_leaf and loss.requires_grad:
        leaves[id(loss)] = (loss, grads[id(loss)])

    for node in reversed(graph.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        if depends is not None and id(node.output) not in depends:
            continue
        if node.selective:
            wanted = tuple(
                inp.requires_grad and (depends is None or id(inp) in depends)
                for inp in node.inputs
            )
            input_grads = node.backward(g, wanted)
        else:
            input_grads = node.backward(g)
        for inp, ig in zip(node.inputs, input_grads):
            if ig is None or not inp.requires_grad:
                continue
            if depends is not None and id(inp) not in depends:
                continue
            key = id(inp)
            if inp.is_leaf:
                prev = leaves.get(key)
                leaves[key] = (inp, ig if prev is None else prev[1] + ig)
            else:
                prev_g = grads.get(key)
                grads[key] = ig if prev_g is None else prev_g + ig

    for key, (leaf, g) in leaves.items():
        if targets is not None and key not in targets:
            continue
        g = np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


# ---------------------------------------------------------------- gradient check
def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-6,
    tol: float = 1e-4,
    floor: float = 1e-3,
) -> GradCheckReport:
    """Compare autodiff gradients of scalar ``f`` at ``x`` with central differences.

    The per-element error is |fd - ad| / max(|fd|, |ad|, floor). The floor turns the
    relative error into an absolute one for gradients smaller than it: central
    differences at step ``h`` carry roughly eps/h of round-off, so near-zero
    gradients would otherwise fail on noise alone. Pass a smaller floor (for example
    1e-8) with float64 inputs and a larger ``h`` when tiny gradients must be checked
    relatively.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    saved_grad = x.grad
    saved_flag = x.requires_grad
    x.grad = None
    x.requires_grad = True
    try:
        with Graph() as graph:
            out = f(x)
        backward(out, graph, inputs=[x])
        analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    finally:
        x.grad = saved_grad
        x.requires_grad = saved_flag

    flat = x.data.reshape(-1)
    numeric = np.empty(flat.size, dtype=np.float64)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        plus = f(x).item()
        flat[i] = original - h
        minus = f(x).item()
        flat[i] = original
        numeric[i] = (plus - minus) / (2 * h)

    ad = analytic.reshape(-1).astype(np.float64)
    denom = np.maximum(np.maximum(np.abs(numeric), np.abs(ad)), floor)
    err = float(np.max(np.abs(numeric - ad) / denom)) if flat.size else 0.0
    return GradCheckReport(
        max_rel_error=err, tol=tol, h=h, n_elements=int(flat.size), passed=err < tol
    )
