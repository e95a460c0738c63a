import logging
import threading
from contextlib import contextmanager
from typing import Any, Callable, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from dva.src.models.exceptions import ContractError, DegenerateInputError, DimensionError

# Initialize logger
logger = logging.getLogger(__name__)

DTYPE = np.float32

# tanh-approximated GELU: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
GELU_SQRT_2_OVER_PI = 0.7978845608028654
GELU_CUBIC = 0.044715

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Run forward passes without recording a tape (per thread)"""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


ArrayLike = Union[np.ndarray, float, int, Sequence]


class Tensor:
    """Dense float array that records the operations producing it.

    Leaves created with ``requires_grad=True`` receive accumulated gradients
    when ``backward()`` is called on a scalar that depends on them. float32 is
    the default storage; float64 inputs are preserved so gradient checks can
    run in double precision.
    """

    __array_priority__ = 100

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None,
                 dtype: Optional[np.dtype] = None):
        array = np.array(data, copy=True)
        if dtype is None:
            dtype = array.dtype if array.dtype in (np.float32, np.float64) else DTYPE
        self.data: np.ndarray = np.ascontiguousarray(array, dtype=dtype)
        if any(dim <= 0 for dim in self.data.shape):
            raise DimensionError(f"tensor dims must be positive, got shape {self.data.shape}")
        self.requires_grad: bool = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._op: str = ""

    # --- convenience ---
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out.name = self.name
        out._parents = ()
        out._backward = None
        out._op = "detach"
        return out

    def astype(self, dtype: np.dtype) -> "Tensor":
        """Leaf copy with a different dtype (keeps requires_grad)"""
        return Tensor(self.data, requires_grad=self.requires_grad, name=self.name, dtype=dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        backward(self, grad)

    def __repr__(self) -> str:
        req = ", requires_grad=True" if self.requires_grad else ""
        nm = f", name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{req}{nm})"

    # --- operators ---
    def __add__(self, other: Any) -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other: Any) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: Any) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: Any) -> "Tensor":
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other: Any) -> "Tensor":
        if not isinstance(other, (int, float)):
            raise ContractError("only division by a python scalar is supported")
        return scale(self, 1.0 / other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, key: Any) -> "Tensor":
        return getitem(self, key)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def as_tensor(value: Any, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(value, dtype=dtype)


def parameter(data: ArrayLike, name: Optional[str] = None) -> Tensor:
    """Trainable leaf"""
    return Tensor(data, requires_grad=True, name=name)


def _result(data: np.ndarray, parents: Sequence[Tensor], op: str,
            backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _accumulate(node: Tensor, grad: np.ndarray) -> None:
    if not node.requires_grad:
        return
    grad = _unbroadcast(grad, node.shape).astype(node.dtype, copy=False)
    if node.grad is None:
        node.grad = np.array(grad, copy=True)
    else:
        node.grad += grad


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting"""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, dim in enumerate(shape) if dim == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

class Tape:
    """Topologically ordered record of the operations that produced ``root``.

    Every node appears after all of its parents; ``backward`` walks the record
    in reverse and visits each node exactly once.
    """

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes: List[Tensor] = self._toposort(root)

    @staticmethod
    def _toposort(root: Tensor) -> List[Tensor]:
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(root, False)]
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
                if id(parent) not in visited:
                    stack.append((parent, False))
        return order

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        root = self.root
        # intermediate buffers are per pass; only leaves accumulate across passes
        for node in self.nodes:
            if not node.is_leaf:
                node.grad = None
        seed = np.ones_like(root.data) if grad is None else np.asarray(grad, dtype=root.dtype)
        if root.is_leaf:
            _accumulate(root, seed)
            return
        root.grad = np.array(seed, copy=True)
        for node in reversed(self.nodes):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        for node in self.nodes:
            if not node.is_leaf:
                node.grad = None


def backward(loss: Tensor, grad: Optional[np.ndarray] = None) -> None:
    """Populate ``.grad`` of every requires_grad leaf reachable from ``loss``.

    Args:
        loss: Scalar tensor connected to a tape
        grad: Optional seed gradient (defaults to 1)

    Raises:
        ContractError: ``loss`` is not a scalar or does not require gradients
    """
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not connected to any trainable tensor")
    Tape(loss).backward(grad)


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------

def add(a: Any, b: Any) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)

    def _backward(g: np.ndarray) -> None:
        _accumulate(a, g)
        _accumulate(b, g)

    return _result(a.data + b.data, (a, b), "add", _backward)


def sub(a: Any, b: Any) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)

    def _backward(g: np.ndarray) -> None:
        _accumulate(a, g)
        _accumulate(b, -g)

    return _result(a.data - b.data, (a, b), "sub", _backward)


def mul(a: Any, b: Any) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)

    def _backward(g: np.ndarray) -> None:
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _result(a.data * b.data, (a, b), "mul", _backward)


def scale(a: Tensor, factor: float) -> Tensor:
    """Multiply by a python scalar"""
    def _backward(g: np.ndarray) -> None:
        _accumulate(a, g * factor)

    return _result(a.data * a.dtype.type(factor), (a,), "scale", _backward)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def _backward(g: np.ndarray) -> None:
        _accumulate(a, g * out_data)

    return _result(out_data, (a,), "exp", _backward)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DegenerateInputError("log() of a non-positive value")

    def _backward(g: np.ndarray) -> None:
        _accumulate(a, g / a.data)

    return _result(np.log(a.data), (a,), "log", _backward)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation"""
    x = a.data
    inner = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x ** 3)
    t = np.tanh(inner)
    out_data = 0.5 * x * (1.0 + t)

    def _backward(g: np.ndarray) -> None:
        d_inner = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x ** 2)
        local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * d_inner
        _accumulate(a, g * local)

    return _result(out_data.astype(a.dtype, copy=False), (a,), "gelu", _backward)


# ---------------------------------------------------------------------------
# Linear algebra and shape
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, batch axes broadcast.

    Raises:
        DimensionError: inner dimensions differ (message names both shapes)
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def _backward(g: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad:
            _accumulate(b, np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _result(np.matmul(a.data, b.data), (a, b), "matmul", _backward)


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def _backward(g: np.ndarray) -> None:
        _accumulate(a, np.transpose(g, inverse))

    return _result(np.ascontiguousarray(np.transpose(a.data, axes)), (a,), "transpose", _backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out_data = a.data.reshape(tuple(shape))
    except ValueError as e:
        raise DimensionError(f"cannot reshape {a.shape} to {tuple(shape)}") from e

    def _backward(g: np.ndarray) -> None:
        _accumulate(a, g.reshape(a.shape))

    return _result(out_data, (a,), "reshape", _backward)


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out_data = np.ascontiguousarray(np.broadcast_to(a.data, tuple(shape)))
    except ValueError as e:
        raise DimensionError(f"cannot broadcast {a.shape} to {tuple(shape)}") from e

    def _backward(g: np.ndarray) -> None:
        _accumulate(a, g)

    return _result(out_data, (a,), "broadcast_to", _backward)


def getitem(a: Tensor, key: Any) -> Tensor:
    out_data = np.array(a.data[key], copy=True)

    def _backward(g: np.ndarray) -> None:
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        _accumulate(a, full)

    return _result(out_data, (a,), "getitem", _backward)


def take_rows(table: Tensor, indices: Sequence[int]) -> Tensor:
    """Embedding lookup: rows of a 2-D table"""
    if table.ndim != 2:
        raise DimensionError(f"take_rows needs a 2-D table, got {table.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ContractError(f"row index out of range for table with {table.shape[0]} rows")
    return getitem(table, idx)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    try:
        out_data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise DimensionError(f"cannot concatenate shapes {[t.shape for t in tensors]} on axis {axis}") from e
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _backward(g: np.ndarray) -> None:
        for t, piece in zip(tensors, np.split(g, bounds, axis=axis)):
            _accumulate(t, piece)

    return _result(out_data, tensors, "concat", _backward)


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------

def _normalize_axes(axis: Optional[Union[int, Sequence[int]]], ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a: Tensor, axis: Optional[Union[int, Sequence[int]]] = None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)
    out_data = np.asarray(a.data.sum(axis=axes, keepdims=keepdims), dtype=a.dtype)

    def _backward(g: np.ndarray) -> None:
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _result(out_data, (a,), "sum", _backward)


def mean(a: Tensor, axis: Optional[Union[int, Sequence[int]]] = None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return scale(sum(a, axis=axes, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# Normalizations
# ---------------------------------------------------------------------------

def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis (max-subtracted)"""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def _backward(g: np.ndarray) -> None:
        _accumulate(x, out_data * (g - (g * out_data).sum(axis=-1, keepdims=True)))

    return _result(out_data, (x,), "softmax", _backward)


def log_softmax(x: Tensor) -> Tensor:
    """Log-softmax over the last axis"""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out_data = shifted - log_norm

    def _backward(g: np.ndarray) -> None:
        probs = np.exp(out_data)
        _accumulate(x, g - probs * g.sum(axis=-1, keepdims=True))

    return _result(out_data, (x,), "log_softmax", _backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then apply ``gain`` and ``bias``.

    Raises:
        DimensionError: gain/bias width differs from the last axis of ``x``
    """
    dim = x.shape[-1]
    if gain.shape != (dim,) or bias.shape != (dim,):
        raise DimensionError(
            f"layer_norm width mismatch: input {x.shape}, gain {gain.shape}, bias {bias.shape}"
        )
    if eps <= 0:
        raise ContractError(f"layer_norm eps must be positive, got {eps}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = centered * inv_std
    out_data = (x_hat * gain.data + bias.data).astype(x.dtype, copy=False)

    def _backward(g: np.ndarray) -> None:
        lead = tuple(range(g.ndim - 1))
        if gain.requires_grad:
            _accumulate(gain, (g * x_hat).sum(axis=lead))
        if bias.requires_grad:
            _accumulate(bias, g.sum(axis=lead))
        if x.requires_grad:
            d_hat = g * gain.data
            dx = inv_std * (
                d_hat
                - d_hat.mean(axis=-1, keepdims=True)
                - x_hat * (d_hat * x_hat).mean(axis=-1, keepdims=True)
            )
            _accumulate(x, dx)

    return _result(out_data, (x, gain, bias), "layer_norm", _backward)


def l2_normalize(x: Tensor) -> Tensor:
    """Scale every row (last axis) to unit Euclidean norm.

    Raises:
        DegenerateInputError: a row has zero norm
    """
    norms = np.sqrt((x.data ** 2).sum(axis=-1, keepdims=True))
    if np.any(norms == 0):
        raise DegenerateInputError("l2_normalize() of a zero-norm row")
    out_data = x.data / norms

    def _backward(g: np.ndarray) -> None:
        _accumulate(x, (g - out_data * (g * out_data).sum(axis=-1, keepdims=True)) / norms)

    return _result(out_data, (x,), "l2_normalize", _backward)


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------

def numerical_gradient(fn: Callable[..., Tensor], inputs: Sequence[Tensor], index: int,
                       h: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of scalar ``fn(*inputs)`` w.r.t. ``inputs[index]``"""
    target = inputs[index]
    grad = np.zeros_like(target.data, dtype=np.float64)
    flat = target.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            plus = fn(*inputs).item()
            flat[i] = original - h
            minus = fn(*inputs).item()
            flat[i] = original
            grad.reshape(-1)[i] = (plus - minus) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error, 0 when both gradients vanish"""
    diff = float(np.linalg.norm(np.asarray(analytic, dtype=np.float64) - numeric))
    scale_ = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)))
    if scale_ < 1e-12:
        return diff
    return diff / scale_


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-3) -> List[float]:
    """Compare tape gradients with central differences.

    Args:
        fn: Callable returning a scalar tensor from ``inputs``
        inputs: Tensors to check; those with requires_grad are compared
        h: Finite-difference step

    Returns:
        Relative error per input (0.0 for inputs that do not require grad)
    """
    for t in inputs:
        t.zero_grad()
    backward(fn(*inputs))
    errors = []
    for i, t in enumerate(inputs):
        if not t.requires_grad:
            errors.append(0.0)
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        errors.append(relative_error(analytic, numerical_gradient(fn, inputs, i, h)))
    logger.debug(f"gradcheck errors: {errors}")
    return errors


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.zero_grad()
