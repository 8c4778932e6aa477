"""
Dense tensors with reverse-mode automatic differentiation.

Every differentiable op builds an output Tensor that remembers its parents and
a closure mapping the output gradient to one gradient per parent. backward()
walks the graph in reverse topological order and accumulates into the .grad of
leaf tensors. Graph recording is skipped inside no_grad() and for ops whose
inputs do not require gradients.
"""
from src.utils.errors import AxisError, DimensionError, InputTooSmallError, RankError, VocabError
from typing import Callable, List, Optional, Sequence, Tuple, Union
from src.utils.constants import LOG_EPS, PAD_ID
from contextlib import contextmanager
import numpy as np
import threading

ArrayLike = Union['Tensor', np.ndarray, float, int]

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, 'grad_enabled', True)


@contextmanager
def no_grad():
    """
    Disables graph recording in the current thread.
    """
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Tensor:
    """
    A dense N-dimensional array with optional gradient tracking.

    Data is treated as immutable once a tensor takes part in a graph; only
    .grad is written by backward().
    """

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: Tuple['Tensor', ...] = ()
        self._grad_fn: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None

    # --- convenience ---
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._grad_fn is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> 'Tensor':
        return Tensor(self.data)

    def __repr__(self) -> str:
        req = ", requires_grad=True" if self.requires_grad else ""
        nm = f", name={self.name}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{req}{nm})"

    def __len__(self) -> int:
        return len(self.data)

    # --- autograd core ---
    def backward(self) -> None:
        backward(self)

    # --- operators ---
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __pow__(self, exponent: float): return power(self, exponent)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, index): return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False): return tsum(self, axis, keepdims)
    def mean(self, axis=None, keepdims: bool = False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)
    def transpose(self, *axes): return transpose(self, axes[0] if len(axes) == 1 and isinstance(axes[0], (tuple, list)) else (axes or None))
    def exp(self): return exp(self)
    def log(self): return log(self)
    def tanh(self): return tanh(self)
    def sigmoid(self): return sigmoid(self)
    def relu(self): return relu(self)


def as_tensor(value: ArrayLike, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype) if dtype is not None else value)


def _make(data: np.ndarray, parents: Tuple[Tensor, ...], grad_fn) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._grad_fn = grad_fn
    return out


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise AxisError(f"Axis {axis} out of range for tensor of rank {ndim}")
    return axis % ndim


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """
    Accumulates d(loss)/d(leaf) into .grad of every leaf that requires grad.
    Repeated calls accumulate until grads are zeroed.

    :raises RankError: If loss is not a scalar.
    """
    if loss.data.size != 1:
        raise RankError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._grad_fn is None:
            node.grad = np.array(g, dtype=node.dtype) if node.grad is None else node.grad + g
            continue
        for parent, parent_grad in zip(node._parents, node._grad_fn(g)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + parent_grad if key in grads else parent_grad


# --- elementwise arithmetic ---

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape) if a.requires_grad else None,
                            _unbroadcast(g, b.shape) if b.requires_grad else None))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape) if a.requires_grad else None,
                            _unbroadcast(-g, b.shape) if b.requires_grad else None))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None))


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    return _make(a.data / b.data, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                            _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    return _make(a.data ** exponent, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),))


def _pair(a: ArrayLike, b: ArrayLike) -> Tuple[Tensor, Tensor]:
    like = a if isinstance(a, Tensor) else (b if isinstance(b, Tensor) else None)
    return as_tensor(a, like), as_tensor(b, like)


# --- linear algebra ---

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product over the last two axes with broadcasting over leading axes.

    :raises DimensionError: If the inner extents disagree.
    """
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul batch shapes do not broadcast: {a.shape} and {b.shape}")

    def grad_fn(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), grad_fn)


# --- reductions ---

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = None if axis is None else tuple(_check_axis(ax, a.ndim) for ax in np.atleast_1d(axis))
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def grad_fn(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _make(np.asarray(out), (a,), grad_fn)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = range(a.ndim) if axis is None else np.atleast_1d(axis)
    count = int(np.prod([a.shape[_check_axis(ax, a.ndim)] for ax in axes]))
    return tsum(a, axis, keepdims) * (1.0 / count)


# --- nonlinearities ---

def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def clamp_min(a: Tensor, low: float) -> Tensor:
    keep = a.data >= low
    return _make(np.where(keep, a.data, low).astype(a.dtype), (a,), lambda g: (g * keep,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    # strictly inside (0, 1) at the tensor's precision
    info = np.finfo(a.dtype)
    out = np.clip(np.exp(-np.logaddexp(0.0, -a.data)), info.tiny, 1.0 - info.epsneg).astype(a.dtype)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0
    return _make(a.data * keep, (a,), lambda g: (g * keep,))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """
    Normalized exponentials along axis; rows sum to 1.

    :raises AxisError: If axis is out of range.
    """
    axis = _check_axis(axis, a.ndim)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), grad_fn)


def layer_norm(x: Tensor, gamma: Optional[Tensor] = None, beta: Optional[Tensor] = None, eps: float = 1e-5) -> Tensor:
    """
    Normalizes over the last axis, then applies the optional affine terms.
    """
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv

    def grad_fn(g):
        return (inv * (g - g.mean(axis=-1, keepdims=True) - xhat * (g * xhat).mean(axis=-1, keepdims=True)),)

    out = _make(xhat.astype(x.dtype), (x,), grad_fn)
    if gamma is not None:
        out = out * gamma
    if beta is not None:
        out = out + beta
    return out


# --- shape manipulation ---

def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(_check_axis(ax, a.ndim) for ax in axes)
    inverse = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def getitem(a: Tensor, index) -> Tensor:
    def grad_fn(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, index, g)
        return (ga,)

    return _make(a.data[index], (a,), grad_fn)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """
    Joins tensors along an existing axis.

    :raises AxisError: If axis is out of range.
    :raises DimensionError: If the other extents disagree.
    """
    tensors = [as_tensor(t) for t in tensors]
    axis = _check_axis(axis, tensors[0].ndim)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(f"concat shape mismatch: {[t.shape for t in tensors]}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def grad_fn(g):
        return tuple(np.take(g, range(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors)))

    return _make(out, tuple(tensors), grad_fn)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(f"stack shape mismatch: {[t.shape for t in tensors]}")
    axis = _check_axis(axis, out.ndim)

    def grad_fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(out, tuple(tensors), grad_fn)


def take_along_axis(a: Tensor, indices: np.ndarray, axis: int) -> Tensor:
    """
    Differentiable numpy.take_along_axis; indices broadcast against a.
    """
    axis = _check_axis(axis, a.ndim)
    out = np.take_along_axis(a.data, indices, axis=axis)
    full_indices = np.broadcast_to(indices, out.shape)

    def grad_fn(g):
        ga = np.zeros_like(a.data)
        grid = list(np.indices(out.shape, sparse=True))
        grid[axis] = full_indices
        np.add.at(ga, tuple(grid), g)
        return (ga,)

    return _make(out, (a,), grad_fn)


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """
    Gathers rows of table for integer ids of any shape.

    :raises VocabError: If an id falls outside the table.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise VocabError(f"Embedding ids must lie in [0, {table.shape[0]}), got range [{ids.min()}, {ids.max()}]")

    def grad_fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _make(table.data[ids], (table,), grad_fn)


def stop_gradient(a: Tensor) -> Tensor:
    """
    Value-identical tensor with no path back to a.
    """
    return Tensor(a.data)


# --- convolution ---

def conv2d_stride2(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """
    3x3 convolution, padding 1, stride 2.

    :param x: C_in x H x W, or B x C_in x H x W.
    :param w: C_out x C_in x 3 x 3.
    :param b: C_out.
    :return: C_out x ceil(H/2) x ceil(W/2) (with leading B when given).
    :raises InputTooSmallError: If H or W is below 2.
    """
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4:
        raise DimensionError(f"conv2d input must be CxHxW or BxCxHxW, got {x.shape}")
    batch, c_in, height, width = xd.shape
    if height < 2 or width < 2:
        raise InputTooSmallError(f"conv2d input {height}x{width} is smaller than 2x2")
    if w.shape[1:] != (c_in, 3, 3) or b.shape != (w.shape[0],):
        raise DimensionError(f"conv2d weight {w.shape} / bias {b.shape} do not match input {x.shape}")
    c_out = w.shape[0]
    h_out, w_out = (height + 1) // 2, (width + 1) // 2

    padded = np.pad(xd, ((0, 0), (0, 0), (1, 1), (1, 1)))
    windows = [(ki, kj) for ki in range(3) for kj in range(3)]
    cols = np.stack([padded[:, :, ki:ki + 2 * h_out:2, kj:kj + 2 * w_out:2] for ki, kj in windows], axis=2)
    cols = cols.reshape(batch, c_in * 9, h_out * w_out)
    w_mat = w.data.reshape(c_out, c_in * 9)
    out = (np.matmul(w_mat, cols) + b.data[None, :, None]).reshape(batch, c_out, h_out, w_out)
    if squeeze:
        out = out[0]

    def grad_fn(g):
        g_mat = (g[None] if squeeze else g).reshape(batch, c_out, h_out * w_out)
        gb = g_mat.sum(axis=(0, 2))
        gw = np.einsum('bop,bkp->ok', g_mat, cols).reshape(w.shape)
        if not x.requires_grad:
            return None, gw, gb
        g_cols = np.matmul(w_mat.T, g_mat).reshape(batch, c_in, 9, h_out, w_out)
        g_padded = np.zeros_like(padded)
        for k, (ki, kj) in enumerate(windows):
            g_padded[:, :, ki:ki + 2 * h_out:2, kj:kj + 2 * w_out:2] += g_cols[:, :, k]
        gx = g_padded[:, :, 1:-1, 1:-1]
        return (gx[0] if squeeze else gx), gw, gb

    return _make(out, (x, w, b), grad_fn)


# --- losses ---

def _position_mask(targets: np.ndarray, mask: Optional[np.ndarray]) -> np.ndarray:
    if mask is None:
        mask = targets != PAD_ID
    return np.asarray(mask, dtype=bool)


def cross_entropy(pred_dist: Tensor, target_ids: np.ndarray, mask: Optional[np.ndarray] = None) -> Tensor:
    """
    Mean over unmasked positions of -log pred[target].

    :param pred_dist: (..., V) probability rows.
    :param target_ids: (...) integer ids; PAD positions are masked by default.
    :raises VocabError: If a target id is >= V.
    """
    target_ids = np.asarray(target_ids, dtype=np.int64)
    if pred_dist.shape[:-1] != target_ids.shape:
        raise DimensionError(f"cross_entropy shape mismatch: {pred_dist.shape} and {target_ids.shape}")
    mask = _position_mask(target_ids, mask)
    vocab = pred_dist.shape[-1]
    live = target_ids[mask]
    if live.size and (live.max() >= vocab or live.min() < 0):
        raise VocabError(f"Target id {int(live.max())} out of vocabulary range [0, {vocab})")
    safe = np.where(mask, target_ids, 0)
    picked = reshape(take_along_axis(pred_dist, safe[..., None], axis=-1), target_ids.shape)
    nll = -log(clamp_min(picked, LOG_EPS))
    weights = mask.astype(pred_dist.dtype)
    return tsum(nll * weights) * (1.0 / max(int(mask.sum()), 1))


def kl_div(p: Tensor, q: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """
    KL(p || q) summed over the last axis and averaged over unmasked positions.
    q is clamped below by LOG_EPS; 0 * log 0 counts as 0.
    """
    if p.shape != q.shape:
        raise DimensionError(f"kl_div shape mismatch: {p.shape} and {q.shape}")
    if mask is None:
        mask = np.ones(p.shape[:-1], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    per_position = tsum(p * (log(clamp_min(p, LOG_EPS)) - log(clamp_min(q, LOG_EPS))), axis=-1)
    weights = mask.astype(p.dtype)
    return tsum(per_position * weights) * (1.0 / max(int(mask.sum()), 1))


def has_nan(t: Tensor) -> bool:
    return not np.all(np.isfinite(t.data))
