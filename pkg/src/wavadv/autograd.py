"""Reverse-mode automatic differentiation over dense float64 arrays.

Computations are recorded define-by-run: every op returns a :class:`Tensor`
that remembers its parents and a closure mapping the output gradient to
input gradients.  :class:`Graph` wraps a function of named tensors, runs it
(:meth:`Graph.forward`) and back-propagates from its scalar output
(:meth:`Graph.backward`), exposing gradients for inputs as well as for
parameters.
"""

from __future__ import annotations

from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64

# im2col scratch is chunked over the batch axis to stay under this many bytes.
_CONV_CHUNK_BYTES = 64 * 2**20


class ShapeError(ValueError):
    """Operand shapes are inconsistent with an op's signature."""

    def __init__(self, op: str, message: str):
        super().__init__(f"{op}: {message}")
        self.op = op


class NonFiniteError(ArithmeticError):
    """A forward pass produced a NaN or infinity."""


class GraphStateError(RuntimeError):
    """Graph methods called out of order."""


class Tensor:
    """Array value plus gradient slot inside a recorded computation."""

    __slots__ = ("values", "_grad", "requires_grad", "op", "parents", "_backward", "name", "branch")

    def __init__(
        self,
        values,
        requires_grad: bool = False,
        name: Optional[str] = None,
        op: str = "leaf",
        parents: Sequence["Tensor"] = (),
        backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None,
    ):
        self.values = np.asarray(values, dtype=DTYPE)
        self._grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.op = op
        self.parents = tuple(parents)
        self._backward = backward
        self.name = name
        # branch taken by a piecewise op (relu mask, maxpool argmax), else None
        self.branch: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.values)
        return self._grad

    def zero_grad(self) -> None:
        self._grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(op={self.op}{label}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def backward(self) -> None:
        """Back-propagate from this scalar tensor into every ancestor."""
        if self.values.size != 1:
            raise ShapeError("backward", f"loss must be a scalar, got shape {self.shape}")
        nodes = topological_order(self)
        for node in nodes:
            node._grad = None
        self._grad = np.ones_like(self.values)
        for node in reversed(nodes):
            if node._backward is None or node._grad is None:
                continue
            grads = node._backward(node._grad)
            for parent, g in zip(node.parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent._grad is None:
                    parent._grad = np.array(g, dtype=DTYPE, copy=True)
                else:
                    parent._grad += g


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def topological_order(root: Tensor) -> List[Tensor]:
    """Ancestors of ``root`` (inclusive), each after all of its parents."""
    order: List[Tensor] = []
    seen = set()
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
        for p in reversed(node.parents):
            if id(p) not in seen:
                stack.append((p, False))
    return order


class Graph:
    """A scalar-valued computation over named input tensors.

    ``fn`` receives one :class:`Tensor` per binding (as keyword arguments) and
    returns the scalar loss tensor.  Tensors it creates along the way form
    the recorded graph; ``nodes`` lists them in topological order after
    :meth:`forward`.
    """

    def __init__(self, fn: Callable[..., Tensor], grad_inputs: Optional[Iterable[str]] = None):
        self.fn = fn
        self.grad_inputs = None if grad_inputs is None else set(grad_inputs)
        self.inputs: Dict[str, Tensor] = {}
        self.loss: Optional[Tensor] = None
        self.nodes: List[Tensor] = []
        self._backward_done = False

    def forward(self, bindings: Mapping[str, np.ndarray]) -> Tensor:
        self.inputs = {}
        for name, value in bindings.items():
            wants = self.grad_inputs is None or name in self.grad_inputs
            self.inputs[name] = Tensor(value, requires_grad=wants, name=name)
        loss = self.fn(**self.inputs)
        if loss.values.size != 1:
            raise ShapeError("loss", f"graph output must have one element, got shape {loss.shape}")
        self.nodes = topological_order(loss)
        for node in self.nodes:
            if not np.all(np.isfinite(node.values)):
                raise NonFiniteError(f"non-finite values produced by op {node.op!r}")
        self.loss = loss
        self._backward_done = False
        return loss

    @property
    def loss_node(self) -> int:
        if self.loss is None:
            raise GraphStateError("forward has not been run")
        return len(self.nodes) - 1

    def backward(self) -> Dict[str, np.ndarray]:
        if self.loss is None:
            raise GraphStateError("backward called before forward")
        self.loss.backward()
        self._backward_done = True
        return {name: t.grad for name, t in self.inputs.items() if t.requires_grad}


def finite_diff_grad(
    fn: Callable[[np.ndarray], float],
    x: np.ndarray,
    h: float = 1e-5,
    indices: Optional[Iterable[int]] = None,
) -> np.ndarray:
    """Central-difference gradient of a scalar function.

    Only the flat ``indices`` are evaluated when given; the other entries of
    the result are left at zero.
    """
    if not h > 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=DTYPE)
    flat = x.reshape(-1)
    grad = np.zeros_like(flat)
    idx = range(flat.size) if indices is None else indices
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(fn(x))
        flat[i] = orig - h
        fm = float(fn(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"function is not finite near coordinate {i}")
        grad[i] = (fp - fm) / (2 * h)
    return grad.reshape(x.shape)


def relative_error(analytic, numeric, floor: float = 1e-8) -> np.ndarray:
    """Element-wise ``|a - n| / max(|a|, |n|, floor)``.

    ``floor`` keeps coordinates whose true gradient is essentially zero from
    dividing finite-difference noise by nothing.
    """
    a = np.asarray(analytic, dtype=DTYPE)
    n = np.asarray(numeric, dtype=DTYPE)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def branch_signature(graph: "Graph") -> List[np.ndarray]:
    """Branches taken by every piecewise op in the last forward pass."""
    return [node.branch for node in graph.nodes if node.branch is not None]


def _same_branches(a: List[np.ndarray], b: List[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(u, v) for u, v in zip(a, b))


def check_gradient(graph: "Graph", bindings: Mapping[str, np.ndarray], name: str, n_coords: int = 100,
                   h: float = 1e-5, seed: int = 0, floor_scale: float = 1e-5,
                   skip_kinks: bool = False, stats: Optional[dict] = None) -> float:
    """Max relative error between backward() and central differences.

    Compares the gradient w.r.t. binding ``name`` on ``n_coords`` randomly
    chosen coordinates (all of them if the tensor is smaller).  The
    denominator is floored at ``floor_scale * max|gradient|`` of the whole
    tensor: central differences carry ~1e-10 absolute noise, which swamps
    coordinates a million times smaller than the largest one.

    With ``skip_kinks`` a coordinate whose +-h probes flip a relu mask or a
    maxpool argmax is replaced by the next random one: the loss is not
    differentiable inside that step, so central differences are no oracle
    there.  ``stats`` (if given) receives the checked and skipped counts.
    """
    graph.forward(bindings)
    reference = branch_signature(graph)
    analytic = graph.backward()[name].reshape(-1)
    base = dict(bindings)
    x = np.array(bindings[name], dtype=DTYPE)
    flat = x.reshape(-1)
    rng = np.random.default_rng(seed)
    order = rng.permutation(flat.size)
    if not skip_kinks:
        order = order[:n_coords]

    checked, skipped, errors = 0, 0, []
    floor = max(floor_scale * float(np.max(np.abs(analytic))), 1e-300)
    base[name] = x
    for i in order:
        if checked == n_coords:
            break
        orig = flat[i]
        values = []
        smooth = True
        for step in (h, -h):
            flat[i] = orig + step
            values.append(float(graph.forward(base).values.item()))
            smooth = smooth and _same_branches(reference, branch_signature(graph))
        flat[i] = orig
        if not all(np.isfinite(values)):
            raise NonFiniteError(f"function is not finite near coordinate {i}")
        if skip_kinks and not smooth:
            skipped += 1
            continue
        numeric = (values[0] - values[1]) / (2 * h)
        errors.append(float(relative_error(analytic[i], numeric, floor)))
        checked += 1
    graph.forward(bindings)
    if stats is not None:
        stats.update(checked=checked, skipped=skipped)
    return max(errors) if errors else 0.0


# ---------------------------------------------------------------------------
# elementwise and linear-algebra ops


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, f"cannot broadcast {a.shape} with {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast("add", a, b)
    return Tensor(
        a.values + b.values,
        op="add",
        parents=(a, b),
        backward=lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast("sub", a, b)
    return Tensor(
        a.values - b.values,
        op="sub",
        parents=(a, b),
        backward=lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast("mul", a, b)
    return Tensor(
        a.values * b.values,
        op="mul",
        parents=(a, b),
        backward=lambda g: (
            _unbroadcast(g * b.values, a.shape),
            _unbroadcast(g * a.values, b.shape),
        ),
    )


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.values**exponent
    return Tensor(
        out,
        op="power",
        parents=(a,),
        backward=lambda g: (g * exponent * a.values ** (exponent - 1),),
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", f"cannot multiply {a.shape} by {b.shape}")
    return Tensor(
        a.values @ b.values,
        op="matmul",
        parents=(a, b),
        backward=lambda g: (g @ b.values.T, a.values.T @ g),
    )


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.values)
    # 1 - tanh^2 from the cached forward value
    return Tensor(out, op="tanh", parents=(a,), backward=lambda g: (g * (1.0 - out * out),))


def relu(a: Tensor) -> Tensor:
    mask = a.values > 0
    out = Tensor(a.values * mask, op="relu", parents=(a,), backward=lambda g: (g * mask,))
    out.branch = mask
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.values))
    return Tensor(out, op="sigmoid", parents=(a,), backward=lambda g: (g * out * (1.0 - out),))


def tensor_sum(a: Tensor) -> Tensor:
    return Tensor(
        np.sum(a.values).reshape(1),
        op="sum",
        parents=(a,),
        backward=lambda g: (np.broadcast_to(g.reshape(()), a.shape),),
    )


def dot(a: Tensor, w) -> Tensor:
    """Scalar inner product of two same-shaped tensors."""
    a, w = _lift(a), _lift(w)
    if a.shape != w.shape:
        raise ShapeError("dot", f"shape mismatch {a.shape} vs {w.shape}")
    return tensor_sum(mul(a, w))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.values.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"cannot reshape {a.shape} into {tuple(shape)}") from None
    return Tensor(out, op="reshape", parents=(a,), backward=lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.values.ndim)):
        raise ShapeError("transpose", f"bad permutation {axes} for shape {a.shape}")
    inverse = tuple(np.argsort(axes))
    return Tensor(
        np.ascontiguousarray(a.values.transpose(axes)),
        op="transpose",
        parents=(a,),
        backward=lambda g: (g.transpose(inverse),),
    )


def take(a: Tensor, index: int, axis: int) -> Tensor:
    """Select one position along ``axis`` (dropping that axis)."""
    if not -a.shape[axis] <= index < a.shape[axis]:
        raise ShapeError("take", f"index {index} out of range for axis {axis} of {a.shape}")
    sl = [slice(None)] * a.values.ndim
    sl[axis] = index
    sl = tuple(sl)

    def backward(g):
        full = np.zeros_like(a.values)
        full[sl] = g
        return (full,)

    return Tensor(a.values[sl], op="take", parents=(a,), backward=backward)


def split_last(a: Tensor, parts: int) -> List[Tensor]:
    """Split the last axis into ``parts`` equal chunks."""
    n = a.shape[-1]
    if n % parts:
        raise ShapeError("split", f"last axis {n} not divisible into {parts}")
    width = n // parts
    out = []
    for k in range(parts):
        lo, hi = k * width, (k + 1) * width

        def backward(g, lo=lo, hi=hi):
            full = np.zeros_like(a.values)
            full[..., lo:hi] = g
            return (full,)

        out.append(Tensor(a.values[..., lo:hi], op="split", parents=(a,), backward=backward))
    return out


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    arrays = [t.values for t in tensors]
    try:
        out = np.concatenate(arrays, axis=axis)
    except ValueError as exc:
        raise ShapeError("concat", str(exc)) from None
    edges = np.cumsum([0] + [x.shape[axis] for x in arrays])

    def backward(g):
        return tuple(
            np.take(g, np.arange(edges[i], edges[i + 1]), axis=axis) for i in range(len(arrays))
        )

    return Tensor(out, op="concat", parents=tuple(tensors), backward=backward)


# ---------------------------------------------------------------------------
# network layers


def _conv_chunks(n: int, per_item_bytes: int):
    step = max(1, _CONV_CHUNK_BYTES // max(per_item_bytes, 1))
    for lo in range(0, n, step):
        yield slice(lo, min(n, lo + step))


def _correlate_same(x: np.ndarray, w: np.ndarray, pad_left: int) -> np.ndarray:
    """out[n, o, l] = sum_{c,k} w[o, c, k] * xpad[n, c, l + k]."""
    n, c, length = x.shape
    o, _, k = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad_left, k - 1 - pad_left)))
    out = np.empty((n, o, length), dtype=DTYPE)
    for sl in _conv_chunks(n, c * length * k * 8):
        win = sliding_window_view(xp[sl], k, axis=2)  # (n, c, L, k)
        out[sl] = np.tensordot(win, w, axes=([1, 3], [1, 2])).transpose(0, 2, 1)
    return out


def conv1d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Stride-1 'same' cross-correlation: (N, C, L) * (O, C, K) -> (N, O, L).

    Zero padding of ``(K-1)//2`` samples on the left, the rest on the right.
    """
    if x.values.ndim != 3 or w.values.ndim != 3 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv1d", f"input {x.shape} incompatible with kernel {w.shape}")
    if b.shape != (w.shape[0],):
        raise ShapeError("conv1d", f"bias shape {b.shape} != ({w.shape[0]},)")
    k = w.shape[2]
    pad_left = (k - 1) // 2
    out = _correlate_same(x.values, w.values, pad_left)
    out += b.values[None, :, None]

    def backward(g):
        n, c, length = x.shape
        xp = np.pad(x.values, ((0, 0), (0, 0), (pad_left, k - 1 - pad_left)))
        gw = np.zeros_like(w.values)
        for sl in _conv_chunks(n, c * length * k * 8):
            win = sliding_window_view(xp[sl], k, axis=2)
            gw += np.tensordot(g[sl], win, axes=([0, 2], [0, 2]))
        gx = _correlate_same(g, w.values[:, :, ::-1].transpose(1, 0, 2), k - 1 - pad_left)
        gb = g.sum(axis=(0, 2))
        return gx, gw, gb

    return Tensor(out, op="conv1d", parents=(x, w, b), backward=backward)


def maxpool1d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling on the last axis; a ragged tail is dropped.

    Ties route the gradient to the first maximal element.
    """
    n, c, length = x.shape
    out_len = length // size
    if out_len < 1:
        raise ShapeError("maxpool1d", f"length {length} shorter than pool size {size}")
    blocks = x.values[:, :, : out_len * size].reshape(n, c, out_len, size)
    arg = np.argmax(blocks, axis=3)
    out = np.take_along_axis(blocks, arg[..., None], axis=3)[..., 0]

    def backward(g):
        gb = np.zeros((n, c, out_len, size), dtype=DTYPE)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=3)
        gx = np.zeros_like(x.values)
        gx[:, :, : out_len * size] = gb.reshape(n, c, out_len * size)
        return (gx,)

    result = Tensor(out, op="maxpool1d", parents=(x,), backward=backward)
    result.branch = arg
    return result


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    if b.shape != (w.shape[1],):
        raise ShapeError("dense", f"bias shape {b.shape} != ({w.shape[1]},)")
    return add(matmul(x, w), b)


def log_softmax_values(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Cross-entropy of integer ``labels`` under softmax(``logits``).

    ``reduction`` is ``"mean"``, ``"sum"`` or ``"none"`` (per-row losses).
    """
    labels = np.asarray(labels, dtype=np.intp).reshape(-1)
    if logits.values.ndim != 2 or logits.shape[0] != labels.size:
        raise ShapeError("softmax_cross_entropy", f"logits {logits.shape} vs {labels.size} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ShapeError("softmax_cross_entropy", "label index out of range")
    logp = log_softmax_values(logits.values)
    rows = np.arange(labels.size)
    per_row = -logp[rows, labels]
    probs = np.exp(logp)

    if reduction == "none":
        value, scale = per_row, None
    elif reduction == "sum":
        value, scale = np.sum(per_row).reshape(1), 1.0
    elif reduction == "mean":
        value, scale = np.mean(per_row).reshape(1), 1.0 / labels.size
    else:
        raise ValueError(f"unknown reduction {reduction!r}")

    def backward(g):
        d = probs.copy()
        d[rows, labels] -= 1.0
        if scale is None:
            return (d * g[:, None],)
        return (d * (g.reshape(()) * scale),)

    return Tensor(value, op="softmax_cross_entropy", parents=(logits,), backward=backward)
