"""Small reverse-mode autodiff over float64 numpy arrays.

Every op builds a node holding its inputs and a closure that pushes the
output gradient back into them.  ``backward`` walks the nodes reachable from
a scalar loss in reverse topological order, summing over fan-out.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, ContractError, DimensionError, InputError, NonFiniteError

__all__ = [
    "Tensor",
    "Graph",
    "SGD",
    "as_tensor",
    "conv2d",
    "relu",
    "channel_affine",
    "avg_pool_global",
    "concat",
    "concat_channels",
    "linear",
    "softmax_cross_entropy",
    "square_sum",
    "backward",
    "grad_check",
    "sgd_step",
]


class Tensor:
    """Dense float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, *, op: str = "leaf",
                 parents: tuple["Tensor", ...] = (), backward_fn: Callable | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values produced by op '{op}'")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents = parents
        self._backward = backward_fn

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # arithmetic used by losses and tests
    def __add__(self, other) -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __sub__(self, other) -> "Tensor":
        return add(self, mul(as_tensor(other), -1.0))

    def __getitem__(self, index) -> "Tensor":
        return getitem(self, index)

    def sum(self) -> "Tensor":
        return tsum(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, op: str, parents: Sequence[Tensor], backward_fn) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, op=op, parents=tuple(parents),
                  backward_fn=backward_fn if needs else None)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


# ---------------------------------------------------------------------------
# elementwise helpers


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and b.size != 1 and a.size != 1:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")

    def bw(out: Tensor) -> None:
        for t in (a, b):
            g = out.grad
            if t.shape != out.shape:
                g = np.full(t.shape, g.sum())
            _accumulate(t, g)

    return _node(a.data + b.data, "add", (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and b.size != 1 and a.size != 1:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")

    def bw(out: Tensor) -> None:
        ga = out.grad * b.data
        gb = out.grad * a.data
        _accumulate(a, ga if a.shape == out.shape else np.full(a.shape, ga.sum()))
        _accumulate(b, gb if b.shape == out.shape else np.full(b.shape, gb.sum()))

    return _node(a.data * b.data, "mul", (a, b), bw)


def tsum(a: Tensor) -> Tensor:
    def bw(out: Tensor) -> None:
        _accumulate(a, np.full(a.shape, float(out.grad)))

    return _node(a.data.sum(), "sum", (a,), bw)


def square_sum(a: Tensor) -> Tensor:
    """Squared L2 norm, ``sum(a**2)``."""

    def bw(out: Tensor) -> None:
        _accumulate(a, 2.0 * float(out.grad) * a.data)

    return _node(np.square(a.data).sum(), "square_sum", (a,), bw)


def getitem(a: Tensor, index) -> Tensor:
    def bw(out: Tensor) -> None:
        g = np.zeros(a.shape)
        np.add.at(g, index, out.grad)
        _accumulate(a, g)

    return _node(a.data[index], "getitem", (a,), bw)


def channel_affine(x: Tensor, scale: np.ndarray, shift: np.ndarray) -> Tensor:
    """``x[:, c] * scale[c] + shift[c]`` with constant per-channel coefficients."""
    scale = np.asarray(scale, dtype=np.float64)
    shift = np.asarray(shift, dtype=np.float64)
    if x.data.ndim < 2 or scale.shape != (x.shape[1],) or shift.shape != (x.shape[1],):
        raise DimensionError(f"channel_affine: coefficients {scale.shape} do not match input {x.shape}")
    bshape = (1, -1) + (1,) * (x.data.ndim - 2)
    s, b = scale.reshape(bshape), shift.reshape(bshape)

    def bw(out: Tensor) -> None:
        _accumulate(x, out.grad * s)

    return _node(x.data * s + b, "channel_affine", (x,), bw)


def relu(x: Tensor) -> Tensor:
    """Elementwise ``max(0, x)``; the subgradient at 0 is 0."""
    mask = x.data > 0

    def bw(out: Tensor) -> None:
        _accumulate(x, out.grad * mask)

    return _node(np.where(mask, x.data, 0.0), "relu", (x,), bw)


# ---------------------------------------------------------------------------
# convolution


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    """Output extent of a strided window.

    A trailing remainder is tolerated only when it lies entirely in the
    zero padding; dropping real input pixels is a configuration error.
    """
    span = size + 2 * padding - k
    if span < 0:
        raise ConfigurationError(f"kernel {k} larger than padded input {size + 2 * padding}")
    if span % stride > padding:
        raise ConfigurationError(
            f"output size ({size}+2*{padding}-{k})/{stride}+1 is not an integer "
            f"and the remainder would drop input pixels")
    return span // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int, ho: int, wo: int) -> np.ndarray:
    """Rows are output positions (n, y, x); columns are (c, ky, kx)."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    n, c = x.shape[:2]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x[N,Cin,H,W]`` with ``kernels[Cout,Cin,kh,kw]``, zero padded."""
    if x.data.ndim != 4:
        raise DimensionError(f"conv2d input must be 4-D [N,C,H,W], got shape {x.shape}")
    if kernels.data.ndim != 4:
        raise DimensionError(f"conv2d kernels must be 4-D [Cout,Cin,kh,kw], got shape {kernels.shape}")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = kernels.shape
    if kcin != cin:
        raise DimensionError(f"conv2d: input has {cin} channels but kernels expect {kcin}")
    if bias.shape != (cout,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    if stride < 1 or padding < 0:
        raise ConfigurationError(f"conv2d: stride={stride}, padding={padding}")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)

    cols = _im2col(x.data, kh, kw, stride, padding, ho, wo)
    wmat = kernels.data.reshape(cout, -1)
    out = (cols @ wmat.T + bias.data).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)

    def bw(node: Tensor) -> None:
        g2 = node.grad.transpose(0, 2, 3, 1).reshape(-1, cout)
        if kernels.requires_grad:
            _accumulate(kernels, (g2.T @ cols).reshape(kernels.shape))
        if bias.requires_grad:
            _accumulate(bias, g2.sum(axis=0))
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, cin, kh, kw)
            dx = np.zeros((n, cin, h + 2 * padding, w + 2 * padding))
            for i in range(kh):
                for j in range(kw):
                    dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            if padding:
                dx = dx[:, :, padding:-padding, padding:-padding]
            _accumulate(x, dx)

    return _node(np.ascontiguousarray(out), "conv2d", (x, kernels, bias), bw)


def avg_pool_global(x: Tensor) -> Tensor:
    """Per-channel spatial mean, ``[N,C,H,W] -> [N,C]``."""
    if x.data.ndim != 4:
        raise DimensionError(f"avg_pool_global expects [N,C,H,W], got {x.shape}")
    hw = x.shape[2] * x.shape[3]

    def bw(out: Tensor) -> None:
        _accumulate(x, np.broadcast_to(out.grad[:, :, None, None] / hw, x.shape))

    return _node(x.data.mean(axis=(2, 3)), "avg_pool_global", (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along ``axis``; every other dimension must agree."""
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
                a != b for d, (a, b) in enumerate(zip(t.shape, ref)) if d != axis):
            raise DimensionError(f"concat along axis {axis}: shapes {ref} and {t.shape} disagree")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(out: Tensor) -> None:
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * out.grad.ndim
                idx[axis] = slice(lo, hi)
                _accumulate(t, out.grad[tuple(idx)])

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return _node(data, "concat", tensors, bw)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """``[N,Ca,H,W] ++ [N,Cb,H,W] -> [N,Ca+Cb,H,W]``, channels of ``a`` first."""
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise DimensionError(f"concat_channels needs 4-D operands, got {a.shape} and {b.shape}")
    return concat([a, b], axis=1)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight.T + bias`` for ``x[N,D]``, ``weight[K,D]``, ``bias[K]``."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise DimensionError(f"linear expects x[N,D] and weight[K,D], got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: input dim {x.shape[1]} != weight dim {weight.shape[1]}")
    if bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")

    def bw(out: Tensor) -> None:
        g = out.grad
        if x.requires_grad:
            _accumulate(x, g @ weight.data)
        if weight.requires_grad:
            _accumulate(weight, g.T @ x.data)
        if bias.requires_grad:
            _accumulate(bias, g.sum(axis=0))

    return _node(x.data @ weight.data.T + bias.data, "linear", (x, weight, bias), bw)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, targets, reduction: str = "mean") -> Tensor:
    """Cross entropy of ``logits[N,C]`` against integer ``targets[N]``.

    ``reduction="none"`` returns the per-sample losses as a length-N tensor.
    """
    if logits.data.ndim != 2:
        raise DimensionError(f"logits must be [N,C], got {logits.shape}")
    n, c = logits.shape
    t = np.asarray(targets)
    if t.shape != (n,):
        raise DimensionError(f"targets shape {t.shape} != ({n},)")
    if not np.issubdtype(t.dtype, np.integer):
        if not np.all(t == np.round(t)):
            raise InputError("targets must be integer class ids")
        t = t.astype(np.int64)
    if n and (t.min() < 0 or t.max() >= c):
        raise InputError(f"target ids must lie in [0, {c}), got range [{t.min()}, {t.max()}]")
    logp = log_softmax(logits.data)
    rows = np.arange(n)
    per_sample = -logp[rows, t]
    probs = np.exp(logp)

    if reduction == "none":
        def bw(out: Tensor) -> None:
            g = probs.copy()
            g[rows, t] -= 1.0
            _accumulate(logits, g * out.grad[:, None])

        return _node(per_sample, "softmax_cross_entropy", (logits,), bw)
    if reduction != "mean":
        raise ConfigurationError(f"unknown reduction {reduction!r}")

    def bw(out: Tensor) -> None:
        g = probs.copy()
        g[rows, t] -= 1.0
        _accumulate(logits, g * (float(out.grad) / n))

    return _node(per_sample.mean(), "softmax_cross_entropy", (logits,), bw)


# ---------------------------------------------------------------------------
# graph traversal


class Graph:
    """Nodes reachable from ``root`` in topological order (inputs before consumers)."""

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes: list[Tensor] = _topo_order(root)

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)

    def index(self, t: Tensor) -> int:
        for i, n in enumerate(self.nodes):
            if n is t:
                return i
        raise KeyError("tensor not in graph")


def _topo_order(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor, graph: Graph | None = None) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor feeding ``loss``
    that requires grad (leaves and intermediates alike)."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor requiring grad")
    nodes = graph.nodes if graph is not None else _topo_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(nodes):
        if node._backward is not None and node.grad is not None:
            node._backward(node)


# ---------------------------------------------------------------------------
# testing oracle and optimizer


def grad_check(f: Callable[[Tensor], Tensor], point, h: float = 1e-4,
               coords: Iterable[int] | None = None) -> float:
    """Max relative error between backprop and central differences.

    Relative error per coordinate is ``|a - n| / max(1, |a|, |n|)``.
    ``coords`` restricts the check to some flat indices.
    """
    if h <= 0:
        raise ConfigurationError("finite-difference step must be positive")
    x0 = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(x0.copy(), requires_grad=True)
    backward(f(x))
    analytic = x.grad.ravel() if x.grad is not None else np.zeros(x0.size)
    idx = range(x0.size) if coords is None else coords
    worst = 0.0
    flat = x0.ravel()
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = f(Tensor(x0)).item()
        flat[i] = orig - h
        fm = f(Tensor(x0)).item()
        flat[i] = orig
        numeric = (fp - fm) / (2 * h)
        a = analytic[i]
        worst = max(worst, abs(a - numeric) / max(1.0, abs(a), abs(numeric)))
    return worst


def sgd_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], velocities: list[np.ndarray],
             lr: float, momentum: float = 0.0) -> None:
    """In-place momentum update ``v <- m*v + g; p <- p - lr*v``."""
    if lr <= 0:
        raise ConfigurationError("lr must be positive")
    if not 0 <= momentum < 1:
        raise ConfigurationError("momentum must lie in [0, 1)")
    if not len(params) == len(grads) == len(velocities):
        raise DimensionError("params, grads and velocities differ in length")
    for p, g, v in zip(params, grads, velocities):
        if g is None:
            continue
        if p.shape != np.shape(g) or p.shape != v.shape:
            raise DimensionError(f"sgd_step: param {p.shape} vs grad {np.shape(g)}")
        v *= momentum
        v += g
        p.data -= lr * v


def clip_grad_norm(grads: Sequence[np.ndarray | None], max_norm: float) -> tuple[list, float]:
    """Scale gradients so their joint L2 norm is at most ``max_norm``."""
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads if g is not None)))
    if norm <= max_norm:
        return list(grads), norm
    f = max_norm / norm
    return [None if g is None else g * f for g in grads], norm


class SGD:
    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.0,
                 clip_norm: float | None = None):
        if lr <= 0 or not 0 <= momentum < 1:
            raise ConfigurationError(f"invalid SGD settings lr={lr}, momentum={momentum}")
        if clip_norm is not None and clip_norm <= 0:
            raise ConfigurationError("clip_norm must be positive")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.velocities = [np.zeros(p.shape) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = [p.grad for p in self.params]
        if self.clip_norm is not None:
            grads, _ = clip_grad_norm(grads, self.clip_norm)
        sgd_step(self.params, grads, self.velocities, self.lr, self.momentum)
