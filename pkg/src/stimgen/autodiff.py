"""Small reverse-mode autodiff core over float64 numpy arrays.

Only what a 4-layer 1D conv encoder/decoder/discriminator stack needs:
elementwise arithmetic with numpy broadcasting, dense layers, strided 1D
(transposed) convolution, ReLU/sigmoid/tanh/leaky ReLU, reductions, and the
Adam / RMSProp / SGD update rules.

Graphs are built implicitly: every op returns a :class:`Tensor` that remembers
its parents and a closure mapping the output gradient to parent gradients.
:class:`Tape` linearises the graph reachable from a loss into topological
order and runs the reverse sweep.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient component in parameter {name!r}")
        self.name = name


class Tensor:
    __slots__ = ("data", "parents", "backward_fn", "name", "op")

    def __init__(self, data, parents: tuple = (), backward_fn: Callable | None = None,
                 name: str | None = None, op: str = "leaf"):
        self.data = np.asarray(data, dtype=DTYPE)
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label})"

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
        return mul(self, 1.0 / other) if not isinstance(other, Tensor) else div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, op="const")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# --- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor(a.data + b.data, (a, b), bw, op="add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor(a.data - b.data, (a, b), bw, op="sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor(a.data * b.data, (a, b), bw, op="mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / b.data ** 2, b.shape))

    return Tensor(a.data / b.data, (a, b), bw, op="div")


def square(x: Tensor) -> Tensor:
    return Tensor(x.data ** 2, (x,), lambda g: (2.0 * x.data * g,), op="square")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor(out, (x,), lambda g: (g * out,), op="exp")


def log(x: Tensor) -> Tensor:
    return Tensor(np.log(x.data), (x,), lambda g: (g / x.data,), op="log")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; the gradient is passed only where the input is inside [lo, hi]."""
    inside = (x.data >= lo) & (x.data <= hi)
    return Tensor(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), op="clip")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor(x.data * mask, (x,), lambda g: (g * mask,), op="relu")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    scale = np.where(x.data > 0, 1.0, slope)
    return Tensor(x.data * scale, (x,), lambda g: (g * scale,), op="leaky_relu")


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # split branches so exp never overflows
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return Tensor(out, (x,), lambda g: (g * out * (1.0 - out),), op="sigmoid")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return Tensor(out, (x,), lambda g: (g * (1.0 - out ** 2),), op="tanh")


def identity(x: Tensor) -> Tensor:
    return x


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "relu": relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "leaky_relu": leaky_relu,
    "identity": identity,
}


# --- reductions and reshaping -----------------------------------------------

def sum_all(x: Tensor) -> Tensor:
    return Tensor(x.data.sum(), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),), op="sum")


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    return Tensor(x.data.mean(), (x,), lambda g: (np.full(x.shape, g / n),), op="mean")


def sum_axis(x: Tensor, axis: int) -> Tensor:
    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return Tensor(x.data.sum(axis=axis), (x,), bw, op="sum_axis")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return Tensor(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), op="reshape")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor(a.data @ b.data, (a, b), bw, op="matmul")


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Fully connected layer, ``x @ weight + bias`` with weight of shape (in, out)."""
    if x.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"dense: input {x.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data
    parents: tuple = (x, weight)
    if bias is not None:
        out = out + bias.data
        parents = (x, weight, bias)

    def bw(g, needs=(True, True, True)):
        gx = g @ weight.data.T if needs[0] else None
        gw = x.data.T @ g if needs[1] else None
        return (gx, gw) if bias is None else (gx, gw, g.sum(axis=0))

    return Tensor(out, parents, bw, op="dense")


# --- 1D convolution --------------------------------------------------------

def conv1d_output_length(length: int, kernel: int, stride: int, padding: int) -> int:
    return (length + 2 * padding - kernel) // stride + 1


def conv1d_transpose_output_length(length: int, kernel: int, stride: int, padding: int,
                                   output_padding: int = 0) -> int:
    return (length - 1) * stride - 2 * padding + kernel + output_padding


def _im2col(x: np.ndarray, kernel: int, stride: int, padding: int) -> np.ndarray:
    """(B, C, L) -> (B, L_out, C*K) patch matrix."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(x, kernel, axis=2)[:, :, ::stride, :]
    b, c, l_out, k = win.shape
    return win.transpose(0, 2, 1, 3).reshape(b, l_out, c * k)


def _col2im(cols: np.ndarray, channels: int, length: int, kernel: int, stride: int,
            padding: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add (B, L_out, C*K) patches into (B, C, L)."""
    b, l_out, _ = cols.shape
    cols = cols.reshape(b, l_out, channels, kernel).transpose(0, 2, 1, 3)
    padded = np.zeros((b, channels, length + 2 * padding), dtype=DTYPE)
    span = stride * (l_out - 1) + 1
    for k in range(kernel):
        padded[:, :, k:k + span:stride] += cols[:, :, :, k]
    return padded[:, :, padding:padding + length] if padding else padded[:, :, :length]


def _check_conv_args(x_shape, w_shape, stride, padding, name, channel_axis_w):
    if len(x_shape) != 3 or len(w_shape) != 3:
        raise ShapeError(f"{name}: expected 3-d input and kernel, got {x_shape} and {w_shape}")
    if x_shape[1] != w_shape[channel_axis_w]:
        raise ShapeError(
            f"{name}: input channels {x_shape[1]} (input shape {x_shape}) do not match "
            f"kernel shape {w_shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"{name}: stride must be >= 1 and padding >= 0")


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """Strided, zero-padded cross-correlation.

    x: (B, Cin, L); weight: (Cout, Cin, K); bias: (Cout,).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    _check_conv_args(x.shape, weight.shape, stride, padding, "conv1d", 1)
    c_out, c_in, k = weight.shape
    length = x.shape[2]
    if k > length + 2 * padding:
        raise ShapeError(f"conv1d: kernel {k} longer than padded input {length + 2 * padding}")
    cols = _im2col(x.data, k, stride, padding)
    b, l_out, _ = cols.shape
    cols2 = cols.reshape(b * l_out, c_in * k)
    wmat = weight.data.reshape(c_out, c_in * k)
    out = cols2 @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(b, l_out, c_out).transpose(0, 2, 1)
    parents: tuple = (x, weight) if bias is None else (x, weight, bias)

    def bw(g, needs=(True, True, True)):
        g2 = g.transpose(0, 2, 1).reshape(b * l_out, c_out)
        gx = gw = None
        if needs[0]:
            gx = _col2im((g2 @ wmat).reshape(b, l_out, c_in * k), c_in, length, k, stride,
                         padding)
        if needs[1]:
            gw = (g2.T @ cols2).reshape(weight.shape)
        return (gx, gw) if bias is None else (gx, gw, g2.sum(axis=0))

    return Tensor(np.ascontiguousarray(out), parents, bw, op="conv1d")


def conv1d_transpose(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
                     padding: int = 0, output_padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv1d` with respect to its input.

    x: (B, Cout, L); weight: (Cout, Cin, K), the same layout conv1d uses, so
    ``conv1d_transpose(y, w)`` maps back into conv1d's input space.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    _check_conv_args(x.shape, weight.shape, stride, padding, "conv1d_transpose", 0)
    if not 0 <= output_padding < stride:
        raise ShapeError("conv1d_transpose: output_padding must be in [0, stride)")
    c_out, c_in, k = weight.shape
    l_in = x.shape[2]
    length = conv1d_transpose_output_length(l_in, k, stride, padding, output_padding)
    if length < 1 or conv1d_output_length(length, k, stride, padding) != l_in:
        raise ShapeError(
            f"conv1d_transpose: input length {l_in} has no conv1d preimage for kernel {k}, "
            f"stride {stride}, padding {padding}")
    b = x.shape[0]
    wmat = weight.data.reshape(c_out, c_in * k)
    x2 = x.data.transpose(0, 2, 1).reshape(b * l_in, c_out)
    out = _col2im((x2 @ wmat).reshape(b, l_in, c_in * k), c_in, length, k, stride, padding)
    if bias is not None:
        out += bias.data[None, :, None]
    parents: tuple = (x, weight) if bias is None else (x, weight, bias)

    def bw(g, needs=(True, True, True)):
        cols2 = _im2col(g, k, stride, padding).reshape(b * l_in, c_in * k)
        gx = gw = None
        if needs[0]:
            gx = np.ascontiguousarray(
                (cols2 @ wmat.T).reshape(b, l_in, c_out).transpose(0, 2, 1))
        if needs[1]:
            gw = (x2.T @ cols2).reshape(weight.shape)
        return (gx, gw) if bias is None else (gx, gw, g.sum(axis=(0, 2)))

    return Tensor(out, parents, bw, op="conv1d_transpose")


# --- reverse sweep ---------------------------------------------------------

@dataclass
class Gradients:
    """Result of a reverse sweep: one gradient array per requested tensor.

    ``detached`` lists indices of requested tensors the loss does not depend
    on; their gradients are zero.
    """

    grads: list[np.ndarray]
    detached: list[int] = field(default_factory=list)

    def __iter__(self):
        return iter(self.grads)

    def __getitem__(self, i):
        return self.grads[i]

    def __len__(self):
        return len(self.grads)


_NEEDS_AWARE = frozenset({"conv1d", "conv1d_transpose", "dense"})


class Tape:
    """Topologically ordered record of the graph feeding ``loss``."""

    def __init__(self, loss: Tensor):
        self.loss = loss
        self.nodes: list[Tensor] = self._topo(loss)
        self.index = {id(n): i for i, n in enumerate(self.nodes)}

    @staticmethod
    def _topo(root: Tensor) -> list[Tensor]:
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
            for p in node.parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return order

    def backward(self, wrt: Sequence[Tensor]) -> Gradients:
        if self.loss.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {self.loss.shape}")
        targets = {id(t) for t in wrt}
        # only sweep through nodes that lead to a requested tensor
        live: set[int] = set()
        for node in self.nodes:
            if id(node) in targets or any(id(p) in live for p in node.parents):
                live.add(id(node))
        acc: dict[int, np.ndarray] = {id(self.loss): np.ones_like(self.loss.data)}
        for node in reversed(self.nodes):
            g = acc.pop(id(node), None) if id(node) not in targets else acc.get(id(node))
            if g is None or node.backward_fn is None:
                continue
            needs = tuple(id(p) in live for p in node.parents)
            if not any(needs):
                continue
            parent_grads = (node.backward_fn(g, needs) if node.op in _NEEDS_AWARE
                            else node.backward_fn(g))
            for p, gp, need in zip(node.parents, parent_grads, needs):
                if not need:
                    continue
                if id(p) in acc:
                    acc[id(p)] = acc[id(p)] + gp
                else:
                    acc[id(p)] = gp
        grads, detached = [], []
        for i, t in enumerate(wrt):
            g = acc.get(id(t))
            if g is None:
                detached.append(i)
                g = np.zeros_like(t.data)
            grads.append(np.asarray(g, dtype=DTYPE).reshape(t.shape))
        return Gradients(grads, detached)


def backward(loss: Tensor, wrt: Sequence[Tensor]) -> Gradients:
    """Gradients of scalar ``loss`` with respect to each tensor in ``wrt``."""
    return Tape(loss).backward(wrt)


# --- optimizers -------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")


def _check_finite(grads: Sequence[np.ndarray], names: Sequence[str]) -> None:
    for g, name in zip(grads, names):
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)


def _names(params: Sequence[Tensor]) -> list[str]:
    return [p.name or f"param[{i}]" for i, p in enumerate(params)]


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState) -> None:
    """Bias-corrected Adam update.

    Parameter tensors are rebound to fresh arrays rather than written in
    place, so graphs recorded before the step keep seeing the old values.
    """
    if len(params) != len(grads):
        raise ShapeError(f"adam_step: {len(params)} params but {len(grads)} gradients")
    _check_finite(grads, _names(params))
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if m.shape != p.shape or g.shape != p.shape:
            raise ShapeError(f"adam_step: shape mismatch for {p.name!r}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass
class RMSPropState:
    lr: float = 2e-4
    rho: float = 0.9
    eps: float = 1e-8
    t: int = 0
    v: list[np.ndarray] = field(default_factory=list)


def rmsprop_step(params: Sequence[Tensor], grads: Sequence[np.ndarray],
                 state: RMSPropState) -> None:
    _check_finite(grads, _names(params))
    if not state.v:
        state.v = [np.zeros_like(p.data) for p in params]
    state.t += 1
    for p, g, v in zip(params, grads, state.v):
        v *= state.rho
        v += (1.0 - state.rho) * g * g
        p.data = p.data - state.lr * g / (np.sqrt(v) + state.eps)


@dataclass
class SGDState:
    lr: float = 0.1
    t: int = 0


def sgd_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: SGDState) -> None:
    _check_finite(grads, _names(params))
    state.t += 1
    for p, g in zip(params, grads):
        p.data = p.data - state.lr * g


def make_optimizer(name: str, lr: float, beta1: float = 0.5):
    """Return ``(state, step_fn)`` for an optimizer name."""
    if name == "adam":
        return AdamState(lr=lr, beta1=beta1), adam_step
    if name == "rmsprop":
        return RMSPropState(lr=lr), rmsprop_step
    if name == "sgd":
        return SGDState(lr=lr), sgd_step
    raise ValueError(f"unknown optimizer {name!r}; expected adam, rmsprop or sgd")


def parameter(data, name: str) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), name=name, op="param")


def count(params: Iterable[Tensor]) -> int:
    return int(sum(p.size for p in params))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(np.take(g, range(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return Tensor(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw,
                  op="concat")


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Rows ``start:stop`` along the leading (batch) axis."""

    def bw(g):
        full = np.zeros_like(x.data)
        full[start:stop] = g
        return (full,)

    return Tensor(x.data[start:stop], (x,), bw, op="slice")
