"""Dense-tensor substrate with recorded-graph reverse-mode differentiation.

Tensors wrap row-major numpy arrays (f32 or f64). Every operation that
involves a gradient-requiring input appends a node to the active graph;
``backward`` replays the nodes in exact reverse insertion order. The op set
is deliberately small: it covers exactly what the encoder needs.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when tensor extents are incompatible with an operation."""


class ConfigError(ValueError):
    """Raised when a configuration violates a documented precondition."""


class NumericError(ArithmeticError):
    """Raised when a computation produces or receives non-finite values."""


class OracleError(RuntimeError):
    """Raised when a test oracle itself fails (e.g. non-finite numeric grad)."""


F32 = np.float32
F64 = np.float64
_DTYPES = (np.dtype(F32), np.dtype(F64))


# ---------------------------------------------------------------------------
# allocation accounting

class AllocationTracker:
    """Counts elements of every Tensor allocated while active.

    ``total`` is the element count of all allocations; because the substrate
    never frees mid-expression, total allocated inside a single op call is the
    peak-temporary proxy used by the memory-scaling tests.
    """

    def __init__(self):
        self.total = 0

    def __enter__(self):
        _TRACKERS.append(self)
        return self

    def __exit__(self, *exc):
        _TRACKERS.remove(self)
        return False


_TRACKERS: list[AllocationTracker] = []


def _count_alloc(n: int) -> None:
    for t in _TRACKERS:
        t.total += n


# ---------------------------------------------------------------------------
# graph

class Node:
    __slots__ = ("op", "inputs", "out", "bwd")

    def __init__(self, op: str, inputs: tuple["Tensor", ...], out: "Tensor",
                 bwd: Callable[[np.ndarray], tuple]):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.bwd = bwd


class Graph:
    """Append-only tape; topological order equals insertion order."""

    def __init__(self):
        self.nodes: list[Node] = []

    def append(self, node: Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def clear(self) -> None:
        self.nodes.clear()


GRAPH = Graph()

_grad_enabled = True


class no_grad:
    """Context manager disabling graph recording (evaluation mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


# ---------------------------------------------------------------------------
# tensor

class Tensor:
    __slots__ = ("data", "grad", "node_id", "requires_grad", "name")

    def __init__(self, data, dtype=None, requires_grad: bool = False,
                 name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _DTYPES:
            arr = arr.astype(F64 if arr.dtype == np.dtype(np.int64) else F32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.node_id: int | None = None
        self.requires_grad = requires_grad
        self.name = name
        _count_alloc(arr.size)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def param(data, dtype=F32, name: str | None = None) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True, name=name)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _record(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray,
            bwd: Callable[[np.ndarray], tuple]) -> Tensor:
    out = Tensor(out_data)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node_id = GRAPH.append(Node(op, inputs, out, bwd))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# arithmetic

def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    out = a.data + b.data
    return _record("add", (a, b), out,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    out = a.data - b.data
    return _record("sub", (a, b), out,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    out = a.data * b.data
    return _record("mul", (a, b), out,
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)))


def div(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    out = a.data / b.data
    return _record("div", (a, b), out,
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _record("scale", (a,), a.data * s, lambda g: (g * s,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 1 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if a.data.ndim == 1:
            gb = np.multiply.outer(a.data, g) if g.ndim == 1 else \
                np.matmul(a.data[:, None], g[..., None, :])
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record("matmul", (a, b), out, bwd)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    return _record("reshape", (a,), a.data.reshape(shape),
                   lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record("transpose", (a,), a.data.transpose(axes),
                   lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record("concat", tensors, out, bwd)


def index(a: Tensor, key) -> Tensor:
    """Basic slicing with scatter-add gradient."""
    out = a.data[key]

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, key, g)
        return (ga,)

    return _record("index", (a,), out, bwd)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record("sum", (a,), out, bwd)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        n = a.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def astype(a: Tensor, dtype) -> Tensor:
    dtype = np.dtype(dtype)
    return _record("astype", (a,), a.data.astype(dtype),
                   lambda g: (g.astype(a.dtype),))


# ---------------------------------------------------------------------------
# elementwise nonlinearities

def relu(a: Tensor) -> Tensor:
    return _record("relu", (a,), np.maximum(a.data, 0),
                   lambda g: (g * (a.data > 0),))


def elu_plus_one(a: Tensor) -> Tensor:
    """1 + ELU(a): a+1 for a >= 0, exp(a) otherwise. Strictly positive."""
    x = a.data
    out = np.where(x >= 0, x + 1.0, np.exp(np.minimum(x, 0.0)))

    def bwd(g):
        return (g * np.where(x >= 0, 1.0, np.exp(np.minimum(x, 0.0))),)

    return _record("elu_plus_one", (a,), out.astype(a.dtype), bwd)


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(a)) in the overflow-safe form max(a,0) + log1p(exp(-|a|))."""
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))

    def bwd(g):
        return (g / (1.0 + np.exp(-x)),)

    return _record("softplus", (a,), out.astype(a.dtype), bwd)


def texp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record("exp", (a,), out, lambda g: (g * out,))


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax along the last axis with max-subtraction for stability."""
    x = a.data
    if np.isnan(x).any():
        raise NumericError("softmax_rows: NaN in input")
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _record("softmax_rows", (a,), out.astype(a.dtype), bwd)


def log_softmax(a: Tensor) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)

    def bwd(g):
        return (g - sm * g.sum(axis=-1, keepdims=True),)

    return _record("log_softmax", (a,), out.astype(a.dtype), bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to mean 0 / var 1, then apply the affine map."""
    if eps <= 0:
        raise ConfigError("layer_norm: eps must be positive")
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data

    def bwd(g):
        dgamma = _unbroadcast(g * xhat, gamma.shape)
        dbeta = _unbroadcast(g, beta.shape)
        dxhat = g * gamma.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        # exact var backward needs the 1/d vs 1/(d-1) convention: np.var uses 1/d
        return dx.astype(x.dtype), dgamma, dbeta

    del d
    return _record("layer_norm", (x, gamma, beta), out.astype(x.dtype), bwd)


# ---------------------------------------------------------------------------
# convolutions (cross-correlation convention, zero padding)

def _pad1d(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    width = [(0, 0)] * x.ndim
    width[-2] = (pad, pad)
    return np.pad(x, width)


def conv1d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """1D convolution over tokens.

    x: (N, C_in) or (B, N, C_in); w: (k, C_in, C_out). Output length is
    floor((N + 2*pad - k)/stride) + 1.
    """
    k, c_in, c_out = w.shape
    n = x.shape[-2]
    if x.shape[-1] != c_in:
        raise ShapeError(f"conv1d: input channels {x.shape} vs kernel {w.shape}")
    if n + 2 * pad < k:
        raise ShapeError(f"conv1d: empty output for N={n}, pad={pad}, k={k}")
    n_out = (n + 2 * pad - k) // stride + 1
    xp = _pad1d(x.data, pad)
    span = (n_out - 1) * stride + 1
    out = np.zeros(x.shape[:-2] + (n_out, c_out), dtype=x.dtype)
    for t in range(k):
        out += np.matmul(xp[..., t:t + span:stride, :], w.data[t])

    def bwd(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        for t in range(k):
            sl = xp[..., t:t + span:stride, :]
            gw[t] = np.tensordot(sl, g, axes=(tuple(range(sl.ndim - 1)),
                                              tuple(range(g.ndim - 1))))
            gxp[..., t:t + span:stride, :] += np.matmul(g, w.data[t].T)
        gx = gxp[..., pad:pad + n, :] if pad else gxp
        return gx, gw

    return _record("conv1d", (x, w), out, bwd)


def _pad2d(x: np.ndarray, pad: tuple[int, int]) -> np.ndarray:
    ph, pw = pad
    if ph == 0 and pw == 0:
        return x
    width = [(0, 0)] * x.ndim
    width[-3] = (ph, ph)
    width[-2] = (pw, pw)
    return np.pad(x, width)


def conv2d(x: Tensor, w: Tensor, stride: tuple[int, int] = (1, 1),
           pad: tuple[int, int] = (0, 0)) -> Tensor:
    """2D convolution; x: (H, W, C_in) or (B, H, W, C_in); w: (kh, kw, C_in, C_out)."""
    kh, kw, c_in, c_out = w.shape
    h, wd = x.shape[-3], x.shape[-2]
    if x.shape[-1] != c_in:
        raise ShapeError(f"conv2d: input channels {x.shape} vs kernel {w.shape}")
    sh, sw = stride
    ph, pw = pad
    if h + 2 * ph < kh or wd + 2 * pw < kw:
        raise ShapeError(f"conv2d: empty output for input {x.shape}, kernel {w.shape}")
    h_out = (h + 2 * ph - kh) // sh + 1
    w_out = (wd + 2 * pw - kw) // sw + 1
    xp = _pad2d(x.data, pad)
    span_h = (h_out - 1) * sh + 1
    span_w = (w_out - 1) * sw + 1
    out = np.zeros(x.shape[:-3] + (h_out, w_out, c_out), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            sl = xp[..., i:i + span_h:sh, j:j + span_w:sw, :]
            out += np.matmul(sl, w.data[i, j])

    def bwd(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        for i in range(kh):
            for j in range(kw):
                sl = xp[..., i:i + span_h:sh, j:j + span_w:sw, :]
                gw[i, j] = np.tensordot(sl, g, axes=(tuple(range(sl.ndim - 1)),
                                                     tuple(range(g.ndim - 1))))
                gxp[..., i:i + span_h:sh, j:j + span_w:sw, :] += np.matmul(g, w.data[i, j].T)
        gx = gxp[..., ph:ph + h, pw:pw + wd, :] if (ph or pw) else gxp
        return gx, gw

    return _record("conv2d", (x, w), out, bwd)


def avg_pool1d(x: Tensor, k: int, stride: int, pad: int = 0) -> Tensor:
    """Mean over sliding windows; divisor is k (padding zeros count)."""
    n = x.shape[-2]
    if n + 2 * pad < k:
        raise ShapeError(f"avg_pool1d: empty output for N={n}, pad={pad}, k={k}")
    n_out = (n + 2 * pad - k) // stride + 1
    xp = _pad1d(x.data, pad)
    span = (n_out - 1) * stride + 1
    out = np.zeros(x.shape[:-2] + (n_out, x.shape[-1]), dtype=x.dtype)
    for t in range(k):
        out += xp[..., t:t + span:stride, :]
    out /= k

    def bwd(g):
        gxp = np.zeros_like(xp)
        for t in range(k):
            gxp[..., t:t + span:stride, :] += g / k
        return (gxp[..., pad:pad + n, :] if pad else gxp,)

    return _record("avg_pool1d", (x,), out, bwd)


def avg_pool2d(x: Tensor, k: tuple[int, int], stride: tuple[int, int],
               pad: tuple[int, int] = (0, 0)) -> Tensor:
    kh, kw = k
    sh, sw = stride
    ph, pw = pad
    h, wd = x.shape[-3], x.shape[-2]
    h_out = (h + 2 * ph - kh) // sh + 1
    w_out = (wd + 2 * pw - kw) // sw + 1
    xp = _pad2d(x.data, pad)
    span_h = (h_out - 1) * sh + 1
    span_w = (w_out - 1) * sw + 1
    out = np.zeros(x.shape[:-3] + (h_out, w_out, x.shape[-1]), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            out += xp[..., i:i + span_h:sh, j:j + span_w:sw, :]
    out /= kh * kw

    def bwd(g):
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[..., i:i + span_h:sh, j:j + span_w:sw, :] += g / (kh * kw)
        return (gxp[..., ph:ph + h, pw:pw + wd, :] if (ph or pw) else gxp,)

    return _record("avg_pool2d", (x,), out, bwd)


# ---------------------------------------------------------------------------
# backward

def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss; accumulates .grad on leaves."""
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    if loss.node_id is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data)
        return
    for node in reversed(GRAPH.nodes[:loss.node_id + 1]):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        in_grads = node.bwd(g)
        for t, ig in zip(node.inputs, in_grads):
            if ig is None or not t.requires_grad:
                continue
            if t.node_id is None:
                t.grad = ig.copy() if t.grad is None else t.grad + ig
            else:
                if id(t) in grads:
                    grads[id(t)] = grads[id(t)] + ig
                else:
                    grads[id(t)] = ig


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# binary tensor file format

_MAGIC = b"MAEL"
_VERSION = 1
_DTYPE_CODES = {np.dtype(F32): 0, np.dtype(F64): 1}
_CODE_DTYPES = {0: np.dtype(F32), 1: np.dtype(F64)}


def save_tensor(path, t: Tensor) -> None:
    """Write magic "MAEL", version u16, dtype u8, rank u8, u64 extents, raw LE data."""
    arr = np.ascontiguousarray(t.data)
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<HBB", _VERSION, _DTYPE_CODES[arr.dtype], arr.ndim))
        for e in arr.shape:
            f.write(struct.pack("<Q", e))
        f.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes())


def load_tensor(path) -> Tensor:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _MAGIC:
            raise ConfigError(f"{path}: bad magic {magic!r}")
        version, code, rank = struct.unpack("<HBB", f.read(4))
        if version != _VERSION:
            raise ConfigError(f"{path}: unsupported version {version}")
        shape = tuple(struct.unpack("<Q", f.read(8))[0] for _ in range(rank))
        dtype = _CODE_DTYPES[code]
        data = np.frombuffer(f.read(), dtype=dtype.newbyteorder("<"))
        expected = int(np.prod(shape, dtype=np.int64)) if rank else 1
        if data.size != expected:
            raise ConfigError(f"{path}: payload size does not match extents {shape}")
        return Tensor(data.astype(dtype).reshape(shape))
