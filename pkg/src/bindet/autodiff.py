"""Reverse-mode automatic differentiation over dense float64 arrays.

A ``Tensor`` wraps a numpy array together with the closure needed to push
gradients back to its parents.  Graphs are built eagerly by calling the op
functions below; calling :func:`backward` on a scalar output walks the tape
in reverse topological order and accumulates ``.grad`` on every node.

The op set is deliberately small: elementwise arithmetic, relu / sigmoid,
row concatenation, column slicing, reductions, and a fused 1-d convolution
over (time, channels) arrays.  Loss functions elsewhere attach their own
fused nodes through the public ``Tensor(data, parents, vjp)`` constructor.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when an op receives arrays whose shapes cannot be combined."""


class Tensor:
    """Node in the autodiff graph.

    Args:
        data: array-like, converted to a float64 ndarray.
        parents: tuple of parent Tensors this node was computed from.
        vjp: callable mapping the upstream gradient (an ndarray shaped like
            ``data``) to a tuple of gradients, one per parent.  ``None`` for
            leaves.
    """

    __slots__ = ("data", "grad", "_parents", "_vjp")

    def __init__(self, data, parents=(), vjp=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = tuple(parents)
        self._vjp = vjp

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data)

    def __repr__(self):
        tag = "leaf" if self._vjp is None else "node"
        return f"Tensor(shape={self.data.shape}, {tag})"

    # Convenience arithmetic; constants are promoted to leaves.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __getstate__(self):
        # Only leaves round-trip; graph closures are not picklable.
        return self.data

    def __setstate__(self, state):
        self.data = state
        self.grad = None
        self._parents = ()
        self._vjp = None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor(out, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor(out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor(out, (a, b), vjp)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.maximum(x.data, 0.0)
    mask = x.data > 0.0

    def vjp(g):
        return (g * mask,)

    return Tensor(out, (x,), vjp)


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    # tanh formulation stays finite for large |x|.
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def vjp(g):
        return (g * out * (1.0 - out),)

    return Tensor(out, (x,), vjp)


def sum_all(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum()

    def vjp(g):
        return (np.broadcast_to(g, x.shape).copy() if np.ndim(g) == 0 else np.full(x.shape, float(g)),)

    return Tensor(out, (x,), vjp)


def concat_rows(parts: list) -> Tensor:
    """Concatenate tensors along axis 0; all must share trailing dims."""
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat_rows of empty list")
    trailing = parts[0].shape[1:]
    for i, p in enumerate(parts):
        if p.shape[1:] != trailing:
            raise ShapeError(
                f"concat_rows: part {i} has trailing shape {p.shape[1:]}, expected {trailing}"
            )
    out = np.concatenate([p.data for p in parts], axis=0)
    sizes = [p.shape[0] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=0))

    return Tensor(out, tuple(parts), vjp)


def slice_cols(x: Tensor, lo: int, hi: int) -> Tensor:
    """Select columns [lo, hi) of a 2-d tensor."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"slice_cols expects 2-d input, got shape {x.shape}")
    if not (0 <= lo < hi <= x.shape[1]):
        raise ShapeError(f"slice_cols bounds [{lo}, {hi}) invalid for width {x.shape[1]}")
    out = x.data[:, lo:hi]

    def vjp(g):
        full = np.zeros(x.shape)
        full[:, lo:hi] = g
        return (full,)

    return Tensor(out, (x,), vjp)


def conv1d(x: Tensor, kernel: Tensor, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Temporal convolution of a (T, C_in) tensor with a (k, C_in, C_out) kernel.

    Zero padding is applied symmetrically on the time axis.  Output length is
    ``(T + 2*padding - k) // stride + 1``.  The forward pass is a single
    matmul over strided window views; the backward pass is two matmuls plus a
    scatter-add over the k taps.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 2:
        raise ShapeError(f"conv1d input must be 2-d (time, channels), got shape {x.shape}")
    if kernel.ndim != 3:
        raise ShapeError(f"conv1d kernel must be 3-d (taps, in, out), got shape {kernel.shape}")
    k, c_in_k, c_out = kernel.shape
    t_in, c_in = x.shape
    if k % 2 != 1:
        raise ShapeError(f"conv1d kernel width must be odd, got {k}")
    if c_in != c_in_k:
        raise ShapeError(
            f"conv1d channel mismatch: input has {c_in} channels, kernel expects {c_in_k}"
        )
    if stride < 1:
        raise ShapeError(f"conv1d stride must be >= 1, got {stride}")
    if t_in + 2 * padding < k:
        raise ShapeError(
            f"conv1d input length {t_in} with padding {padding} shorter than kernel width {k}"
        )
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c_out,):
            raise ShapeError(
                f"conv1d bias shape {bias.shape} does not match output channels ({c_out},)"
            )

    xp = np.pad(x.data, ((padding, padding), (0, 0))) if padding else x.data
    t_out = (t_in + 2 * padding - k) // stride + 1
    span = stride * (t_out - 1) + 1
    # windows[t, j, c] = xp[stride*t + j, c]
    windows = np.stack([xp[j : j + span : stride] for j in range(k)], axis=1)
    flat = windows.reshape(t_out, k * c_in)
    wmat = kernel.data.reshape(k * c_in, c_out)
    out = flat @ wmat
    if bias is not None:
        out = out + bias.data

    def vjp(g):
        d_kernel = (flat.T @ g).reshape(k, c_in, c_out)
        d_windows = (g @ wmat.T).reshape(t_out, k, c_in)
        d_xp = np.zeros_like(xp)
        for j in range(k):
            d_xp[j : j + span : stride] += d_windows[:, j]
        d_x = d_xp[padding : padding + t_in] if padding else d_xp
        grads = [d_x, d_kernel]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return Tensor(out, parents, vjp)


def _topo_order(root: Tensor) -> list:
    """Iterative post-order over the graph reachable from `root`."""
    order, seen = [], set()
    stack = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(node) into ``.grad`` for every reachable node."""
    if root.data.size != 1:
        raise ShapeError(f"backward requires a scalar root, got shape {root.shape}")
    order = _topo_order(root)
    for node in order:
        node.grad = None
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node._vjp is None or node.grad is None:
            continue
        grads = node._vjp(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None:
                continue
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.data)
            parent.grad += g


class ParamSet:
    """Ordered collection of named leaf tensors.

    Names are unique and shapes are frozen at registration; optimizer updates
    replace ``.data`` in place but may never change a shape.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name!r}")
        t = Tensor(np.array(value, dtype=np.float64))
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def assign(self, name: str, value: np.ndarray) -> None:
        t = self._params[name]
        value = np.asarray(value, dtype=np.float64)
        if value.shape != t.data.shape:
            raise ShapeError(
                f"parameter {name!r} has shape {t.data.shape}, cannot assign {value.shape}"
            )
        t.data = value

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for name, t in self._params.items():
            out.add(name, t.data.copy())
        return out


def evaluate_with_gradients(fn, params: ParamSet):
    """Run `fn(params)` to a scalar tensor and return (loss, grads by name).

    Parameters not touched by `fn` get zero gradients.  Raises ShapeError if
    the graph output is not scalar.
    """
    out = fn(params)
    if not isinstance(out, Tensor):
        raise TypeError("graph function must return a Tensor")
    if out.data.size != 1:
        raise ShapeError(f"graph output must be scalar, got shape {out.shape}")
    backward(out)
    grads = {}
    for name, t in params.items():
        grads[name] = np.zeros_like(t.data) if t.grad is None else t.grad
        t.grad = None
    return out.item(), grads


class MomentumSGD:
    """SGD with classical momentum: v <- m*v + g; p <- p - lr*v."""

    def __init__(self, params: ParamSet, lr: float, momentum: float = 0.9):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self._velocity = {name: np.zeros_like(t.data) for name, t in params.items()}

    def step(self, grads: dict) -> None:
        for name, t in self.params.items():
            g = grads[name]
            if g.shape != t.data.shape:
                raise ShapeError(
                    f"gradient for {name!r} has shape {g.shape}, parameter is {t.data.shape}"
                )
            v = self._velocity[name]
            v *= self.momentum
            v += g
            t.data = t.data - self.lr * v


class Adam:
    """Adam with bias correction; lr may be changed between steps.

    Per-parameter scaling keeps heads with very different gradient
    magnitudes training at comparable rates, which plain SGD does not.
    """

    def __init__(self, params: ParamSet, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._step = 0
        self._m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self._v = {name: np.zeros_like(t.data) for name, t in params.items()}

    def step(self, grads: dict) -> None:
        self._step += 1
        b1c = 1.0 - self.beta1**self._step
        b2c = 1.0 - self.beta2**self._step
        for name, t in self.params.items():
            g = grads[name]
            if g.shape != t.data.shape:
                raise ShapeError(
                    f"gradient for {name!r} has shape {g.shape}, parameter is {t.data.shape}"
                )
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            t.data = t.data - self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


def uniform_fan_in_init(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    """Uniform init on [-sqrt(1/fan_in), +sqrt(1/fan_in)]."""
    bound = float(np.sqrt(1.0 / fan_in))
    return rng.uniform(-bound, bound, size=shape)
