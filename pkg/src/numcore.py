"""
Dense numeric core for WeakGround
=================================

float64 tensors backed by numpy, with exact reverse-mode gradients for every
operation the grounding model and its losses use.

A graph is recorded while a forward pass runs: each result keeps its parents
and a closure mapping the output gradient to one gradient per parent.
`backward` walks that graph once and writes leaf gradients either into the
owning ParamStore (parameters) or onto the leaf itself. Nothing survives
between steps; the next forward pass records a fresh graph.

Max-style reductions (max, top-k) route gradient to the selected entries
only, ties going to the lowest index.
"""

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.exceptions import ContractError, DimensionError

logger = logging.getLogger(__name__)

COSINE_EPS = 1e-12
ACTIVATIONS = ("relu", "tanh", "none")

BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand shape"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _normalize_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ContractError(f"axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


class Tensor:
    """
    Immutable float64 array node

    Tensors are values: operations never modify their inputs. Leaves created by
    ParamStore.leaf carry a parameter id so backward can deposit gradients in
    the store.
    """

    __slots__ = ("data", "grad", "param_id", "_parents", "_backward", "_store")
    __array_priority__ = 100

    def __init__(self, data, parents: Tuple["Tensor", ...] = (), backward: Optional[BackwardFn] = None,
                 param_id: Optional[str] = None, store: Optional["ParamStore"] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.param_id = param_id
        self._parents = parents
        self._backward = backward
        self._store = store

    # -- inspection ---------------------------------------------------------

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
    def values(self) -> Tuple[float, ...]:
        """Row-major flat values"""
        return tuple(float(v) for v in self.data.ravel())

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __float__(self) -> float:
        return self.item()

    def __len__(self) -> int:
        return self.shape[0]

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, data={np.array2string(self.data, precision=4, threshold=8)})"

    # -- operators ----------------------------------------------------------

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
    def __getitem__(self, index): return take(self, index)

    def sum(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis, keepdims)

    def max(self, axis: int = -1, keepdims: bool = False) -> "Tensor":
        return tmax(self, axis, keepdims)

    def reshape(self, shape: Sequence[int]) -> "Tensor":
        return reshape(self, shape)

    def transpose(self, axes: Optional[Sequence[int]] = None) -> "Tensor":
        return transpose(self, axes)

    def swap_last(self) -> "Tensor":
        axes = list(range(self.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
        return transpose(self, axes)

    def exp(self) -> "Tensor": return exp(self)
    def log(self) -> "Tensor": return log(self)
    def sqrt(self) -> "Tensor": return sqrt(self)
    def relu(self) -> "Tensor": return relu(self)
    def tanh(self) -> "Tensor": return tanh(self)


def lift(value) -> Tensor:
    """Wrap constants as graph leaves"""
    return value if isinstance(value, Tensor) else Tensor(value)


def constant(value) -> Tensor:
    return Tensor(value)


# ---------------------------------------------------------------------------
# Elementwise operations
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = lift(a), lift(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = lift(a), lift(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = lift(a), lift(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = lift(a), lift(b)
    out = a.data / b.data

    def backward(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return Tensor(out, (a, b), backward)


def neg(a) -> Tensor:
    a = lift(a)
    return Tensor(-a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = lift(a)

    def backward(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return Tensor(a.data ** exponent, (a,), backward)


def exp(a) -> Tensor:
    a = lift(a)
    out = np.exp(a.data)
    return Tensor(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = lift(a)
    return Tensor(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = lift(a)
    out = np.sqrt(a.data)
    return Tensor(out, (a,), lambda g: (g * 0.5 / out,))


def relu(a) -> Tensor:
    a = lift(a)
    mask = a.data > 0.0
    return Tensor(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def tanh(a) -> Tensor:
    a = lift(a)
    out = np.tanh(a.data)
    return Tensor(out, (a,), lambda g: (g * (1.0 - out * out),))


def clip(a, low: float, high: float) -> Tensor:
    a = lift(a)
    mask = (a.data >= low) & (a.data <= high)
    return Tensor(np.clip(a.data, low, high), (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# Shape operations
# ---------------------------------------------------------------------------


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = lift(a)
    return Tensor(a.data.reshape(tuple(shape)), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes: Optional[Sequence[int]] = None) -> Tensor:
    a = lift(a)
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(int(i) for i in np.argsort(axes))
    return Tensor(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def take(a, index) -> Tensor:
    """Basic or integer-array indexing; repeated indices accumulate gradient"""
    a = lift(a)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return Tensor(a.data[index], (a,), backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    parts = [lift(t) for t in tensors]
    if not parts:
        raise ContractError("concat needs at least one tensor")
    axis = _normalize_axis(axis, parts[0].ndim)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), backward)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    parts = [lift(t) for t in tensors]
    if not parts:
        raise ContractError("stack needs at least one tensor")
    out = np.stack([p.data for p in parts], axis=axis)
    axis = _normalize_axis(axis, out.ndim)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(parts)))

    return Tensor(out, tuple(parts), backward)


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------


def tsum(a, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    a = lift(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return Tensor(out, (a,), backward)


def tmean(a, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    a = lift(a)
    count = a.size if axis is None else a.shape[axis]
    return tsum(a, axis, keepdims) * (1.0 / count)


def tmax(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Max along an axis; gradient goes to the first maximal entry"""
    a = lift(a)
    axis = _normalize_axis(axis, a.ndim)
    idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx, g, axis=axis)
        return (full,)

    return Tensor(out if keepdims else np.squeeze(out, axis=axis), (a,), backward)


def topk_sum(a, k: int, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """
    Sum of the k largest entries along an axis

    With a boolean mask, only valid entries compete and each slice sums its
    top min(k, valid count) entries.
    """
    a = lift(a)
    axis = _normalize_axis(axis, a.ndim)
    if k < 1 or k > a.shape[axis]:
        raise ContractError(f"top-k needs 1 <= k <= {a.shape[axis]}, got {k}")
    ranked_source = a.data if mask is None else np.where(mask, a.data, -np.inf)
    order = np.argsort(-ranked_source, axis=axis, kind="stable")
    idx = np.take(order, np.arange(k), axis=axis)
    weight = np.ones(idx.shape)
    if mask is not None:
        weight = np.take_along_axis(np.broadcast_to(mask, a.shape), idx, axis=axis).astype(np.float64)
    picked = np.take_along_axis(a.data, idx, axis=axis)
    out = (picked * weight).sum(axis=axis)

    def backward(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx, np.expand_dims(g, axis) * weight, axis=axis)
        return (full,)

    return Tensor(out, (a,), backward)


def l2_norm(a, axis: int = -1, eps: float = COSINE_EPS) -> Tensor:
    """max(||a||, eps) along an axis, keeping the reduced dimension"""
    a = lift(a)
    raw = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    out = np.maximum(raw, eps)
    active = raw > eps

    def backward(g):
        safe = np.where(active, raw, 1.0)
        return (np.where(active, g / safe, 0.0) * a.data,)

    return Tensor(out, (a,), backward)


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = lift(a), lift(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")

    def backward(g):
        grad_a = np.matmul(g, np.swapaxes(b.data, -1, -2))
        grad_b = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)

    return Tensor(np.matmul(a.data, b.data), (a, b), backward)


def linear_forward(x, w, bias) -> Tensor:
    """
    Affine map out = x @ w + bias over the last axis of x

    Leading axes are folded into one row axis (a vector becomes one row) so
    forward and backward are single 2-d products.

    Args:
        x: Input [a] or [..., a]
        w: Weights [a, b]
        bias: Bias [b]

    Returns:
        Tensor [..., b]

    Raises:
        DimensionError: If the inner dimensions or the bias length disagree
    """
    x, w, bias = lift(x), lift(w), lift(bias)
    if w.ndim != 2 or x.shape[-1] != w.shape[0] or bias.shape != (w.shape[1],):
        raise DimensionError(
            f"linear layer shape mismatch: x {x.shape}, w {w.shape}, bias {bias.shape}"
        )
    if x.ndim == 2:
        return matmul(x, w) + bias
    lead = x.shape[:-1]
    rows = reshape(x, (int(np.prod(lead)), x.shape[-1]))
    return reshape(matmul(rows, w) + bias, lead + (w.shape[1],))


def activate(x: Tensor, activation: str) -> Tensor:
    if activation == "relu":
        return relu(x)
    if activation == "tanh":
        return tanh(x)
    if activation == "none":
        return x
    raise ContractError(f"unknown activation '{activation}', expected one of {ACTIVATIONS}")


def mlp_forward(x, layers: Sequence[Tuple[Tensor, Tensor]],
                activation: Union[str, Sequence[str]] = "relu") -> Tensor:
    """
    Stack of linear layers each followed by its activation

    Args:
        x: Input [..., a]
        layers: (weight, bias) pairs whose shapes chain
        activation: One activation for every layer or one per layer

    Returns:
        Output of the last layer

    Raises:
        ContractError: If no layers are given or activations do not match the layers
    """
    if not layers:
        raise ContractError("mlp_forward needs at least one layer")
    activations = [activation] * len(layers) if isinstance(activation, str) else list(activation)
    if len(activations) != len(layers):
        raise ContractError(f"{len(layers)} layers but {len(activations)} activations")
    out = lift(x)
    for (w, bias), act in zip(layers, activations):
        out = activate(linear_forward(out, w, bias), act)
    return out


# ---------------------------------------------------------------------------
# Similarities, distributions and losses
# ---------------------------------------------------------------------------


def cosine_matrix(a, b, eps: float = COSINE_EPS) -> Tensor:
    """Pairwise cosine similarity of rows: [..., n, D] x [..., m, D] -> [..., n, m]"""
    a, b = lift(a), lift(b)
    if a.shape[-1] != b.shape[-1]:
        raise DimensionError(f"cosine similarity needs equal feature sizes, got {a.shape} and {b.shape}")
    a_unit = a / l2_norm(a, axis=-1, eps=eps)
    b_unit = b / l2_norm(b, axis=-1, eps=eps)
    return clip(matmul(a_unit, b_unit.swap_last()), -1.0, 1.0)


def cosine_sim(a, b, eps: float = COSINE_EPS) -> Tensor:
    """
    Cosine similarity of two vectors, clamped to [-1, 1]

    Zero vectors are guarded by eps, giving a similarity of 0.
    """
    a, b = lift(a), lift(b)
    if a.ndim != 1 or a.shape[0] < 1 or a.shape != b.shape:
        raise DimensionError(f"cosine_sim needs two equal-length vectors, got {a.shape} and {b.shape}")
    return reshape(cosine_matrix(reshape(a, (1, -1)), reshape(b, (1, -1)), eps), ())


def _check_temperature(temperature: float) -> None:
    if not temperature > 0.0:
        raise ContractError(f"temperature must be > 0, got {temperature}")


def softmax(x, temperature: float = 1.0, axis: int = -1) -> Tensor:
    """Temperature-scaled softmax with max subtraction"""
    _check_temperature(temperature)
    x = lift(x)
    if x.size == 0:
        raise ContractError("softmax of an empty sequence")
    z = x.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)) / temperature,)

    return Tensor(out, (x,), backward)


def log_softmax(x, temperature: float = 1.0, axis: int = -1) -> Tensor:
    _check_temperature(temperature)
    x = lift(x)
    z = x.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def backward(g):
        return ((g - np.exp(out) * g.sum(axis=axis, keepdims=True)) / temperature,)

    return Tensor(out, (x,), backward)


def _as_vector(values) -> Tensor:
    if isinstance(values, Tensor):
        return reshape(values, (-1,))
    values = list(values)
    if values and any(isinstance(v, Tensor) for v in values):
        return stack([reshape(lift(v), ()) for v in values])
    return Tensor(np.asarray(values, dtype=np.float64).reshape(-1))


def info_nce_rows(logits, temperature: float) -> Tensor:
    """
    Row-wise InfoNCE: column 0 holds the positive score, the rest the negatives

    Returns:
        Tensor [rows] of -log(exp(pos/t) / sum_j exp(s_j/t))
    """
    logits = lift(logits)
    if logits.ndim != 2:
        raise DimensionError(f"info_nce_rows expects [rows, 1 + negatives], got {logits.shape}")
    return neg(log_softmax(logits, temperature, axis=1)[:, 0])


def info_nce(pos_score, neg_scores, temperature: float) -> Tensor:
    """
    Contrastive loss of one positive score against negative scores

    Args:
        pos_score: Positive score (scalar)
        neg_scores: Negative scores, possibly empty
        temperature: Temperature > 0

    Returns:
        Scalar tensor; exactly 0 when there are no negatives
    """
    _check_temperature(temperature)
    negatives = _as_vector(neg_scores)
    if negatives.size == 0:
        return Tensor(0.0)
    row = concat([reshape(lift(pos_score), (1,)), negatives]).reshape((1, -1))
    return reshape(info_nce_rows(row, temperature), ())


def cross_entropy(logits, target_index: int) -> Tensor:
    """-log softmax(logits)[target_index]"""
    logits = _as_vector(logits)
    if not 0 <= target_index < logits.size:
        raise ContractError(f"target index {target_index} outside [0, {logits.size})")
    return neg(log_softmax(logits)[target_index])


# ---------------------------------------------------------------------------
# Parameters and reverse mode
# ---------------------------------------------------------------------------


class ParamStore:
    """Named parameter arrays with matching gradient accumulators"""

    def __init__(self):
        self.params: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.params:
            raise ContractError(f"parameter '{name}' already registered")
        array = np.array(value, dtype=np.float64)
        self.params[name] = array
        self.grads[name] = np.zeros_like(array)

    def leaf(self, name: str) -> Tensor:
        """Graph leaf bound to a parameter for the current forward pass"""
        return Tensor(self.params[name], param_id=name, store=self)

    def accumulate(self, name: str, grad: np.ndarray) -> None:
        self.grads[name] = self.grads[name] + grad.reshape(self.params[name].shape)

    def zero_grad(self) -> None:
        for name, grad in self.grads.items():
            self.grads[name] = np.zeros_like(grad)

    def names(self) -> List[str]:
        return list(self.params)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float((g * g).sum()) for g in self.grads.values())))

    def scale_grads(self, factor: float) -> None:
        for name in self.grads:
            self.grads[name] = self.grads[name] * factor

    def copy(self) -> "ParamStore":
        clone = ParamStore()
        for name, value in self.params.items():
            clone.add(name, value)
        return clone

    def checksum(self) -> str:
        """sha256 over names, shapes and little-endian parameter bytes"""
        digest = hashlib.sha256()
        for name in sorted(self.params):
            value = self.params[name]
            digest.update(name.encode("utf-8"))
            digest.update(repr(value.shape).encode("utf-8"))
            digest.update(value.astype("<f8").tobytes())
        return digest.hexdigest()


def _topological_order(root: Tensor) -> List[Tensor]:
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


def backward(loss: Tensor) -> None:
    """
    Reverse-mode pass from a scalar root

    Parameter leaves add their gradient to the owning ParamStore; other leaves
    add it to their own `grad`. Repeated calls accumulate.

    Raises:
        ContractError: If the root is not a scalar
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {loss.shape}")
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        grad = grads.pop(id(node), None)
        if grad is None:
            continue
        if not node._parents:
            if node._store is not None and node.param_id is not None:
                node._store.accumulate(node.param_id, grad)
            else:
                node.grad = grad.copy() if node.grad is None else node.grad + grad
            continue
        for parent, parent_grad in zip(node._parents, node._backward(grad)):
            if parent_grad is None:
                continue
            key = id(parent)
            grads[key] = parent_grad if key not in grads else grads[key] + parent_grad


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    passed: bool
    max_relative_error: float
    worst_parameter: Optional[str]
    worst_index: Optional[Tuple[int, ...]]
    checked_entries: int
    errors: Dict[str, float] = field(default_factory=dict)

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} max_rel_error={self.max_relative_error:.3e} "
                f"worst={self.worst_parameter}{list(self.worst_index or ())} "
                f"entries={self.checked_entries}")


def grad_check(f: Callable[[ParamStore], Tensor], store: ParamStore, step: float = 1e-5,
               tol: float = 1e-4, names: Optional[Iterable[str]] = None,
               max_entries: Optional[int] = None, seed: int = 0,
               analytic: Optional[Dict[str, np.ndarray]] = None,
               abs_floor: float = 1e-6) -> GradCheckReport:
    """
    Compare reverse-mode gradients with central differences

    The relative error of an entry is |a - n| / max(|a|, |n|, abs_floor).

    Args:
        f: Deterministic scalar function of the store
        store: Parameters to perturb (restored afterwards)
        step: Finite-difference step
        tol: Largest accepted relative error
        names: Parameters to check (all by default)
        max_entries: Sample at most this many entries per parameter
        seed: Seed of the entry sampler
        analytic: Gradients to verify instead of running backward

    Returns:
        GradCheckReport naming the worst parameter
    """
    names = list(names) if names is not None else store.names()
    if analytic is None:
        store.zero_grad()
        backward(f(store))
        analytic = {name: store.grads[name].copy() for name in names}
        store.zero_grad()

    rng = np.random.default_rng(seed)
    worst = (0.0, None, None)
    errors: Dict[str, float] = {}
    checked = 0
    for name in names:
        param = store.params[name]
        flat_count = param.size
        entries = np.arange(flat_count)
        if max_entries is not None and flat_count > max_entries:
            entries = np.sort(rng.choice(flat_count, size=max_entries, replace=False))
        param_worst = 0.0
        for flat in entries:
            index = np.unravel_index(int(flat), param.shape)
            original = param[index]
            param[index] = original + step
            plus = f(store).item()
            param[index] = original - step
            minus = f(store).item()
            param[index] = original
            numeric = (plus - minus) / (2.0 * step)
            exact = float(analytic[name][index])
            rel = abs(exact - numeric) / max(abs(exact), abs(numeric), abs_floor)
            param_worst = max(param_worst, rel)
            if rel > worst[0]:
                worst = (rel, name, tuple(int(i) for i in index))
            checked += 1
        errors[name] = param_worst

    report = GradCheckReport(worst[0] <= tol, worst[0], worst[1], worst[2], checked, errors)
    logger.debug(f"Gradient check: {report.summary()}")
    return report
